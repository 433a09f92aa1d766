#pragma once

#include <Eigen/Core>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are not supported");

namespace saev {

namespace fs = std::filesystem;

// Row-major float matrix; one activation vector per row.
using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowMatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VectorT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or corrupted on-disk artifact.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Caller supplied inconsistent shapes or out-of-range values.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

// Little-endian binary writer over an ofstream with error checking.
class BinaryWriter {
 public:
  explicit BinaryWriter(const fs::path& path);

  template <typename T>
  void put(const T& value) {
    static_assert(std::is_trivially_copyable_v<T>);
    write(&value, sizeof(T));
  }

  void put_floats(std::span<const float> values) { write(values.data(), values.size_bytes()); }
  void put_bytes(std::string_view bytes) { write(bytes.data(), bytes.size()); }

  void seek(std::uint64_t offset);
  void close();

 private:
  void write(const void* data, std::size_t size);

  fs::path path_;
  std::ofstream out_;
};

// Reads a whole file into memory.
std::vector<char> read_file(const fs::path& path);

// Cursor over an in-memory byte buffer; throws FormatError on overrun.
class ByteReader {
 public:
  ByteReader(std::span<const char> bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  void get_floats(std::span<float> out) { std::memcpy(out.data(), take(out.size_bytes()), out.size_bytes()); }
  std::string get_string(std::size_t n) { return {take(n), n}; }
  std::string_view rest() const { return {bytes_.data() + pos_, bytes_.size() - pos_}; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  const char* take(std::size_t n);

  std::span<const char> bytes_;
  std::size_t pos_ = 0;
  std::string context_;
};

}  // namespace detail

// Lower-case hex SHA-256 of a byte buffer / file.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

// Deterministic 64-bit mixer used to derive independent per-item seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace saev
