#pragma once

// Sharded on-disk storage of per-patch activation vectors.
//
// Shard binary layout (all integers little-endian):
//   [0, 8)    magic "SAEVACT1"
//   [8, 12)   version u32 = 1
//   [12, 16)  d u32
//   [16, 20)  patches_per_image u32
//   [20, 28)  n_rows u64
//   [28, ...) n_rows * d float32, row-major
//
// Each shard `foo.bin` has a JSON sidecar `foo.json` with keys
// model, layer, dataset, shard_index, row_offset.

#include "saev/common.hpp"

#include <atomic>
#include <future>
#include <memory>
#include <optional>

namespace saev {

inline constexpr char kShardMagic[8] = {'S', 'A', 'E', 'V', 'A', 'C', 'T', '1'};
inline constexpr std::uint32_t kShardVersion = 1;

struct ShardHeader {
  static constexpr std::size_t kSize = 28;

  std::uint32_t version = kShardVersion;
  std::uint32_t d = 0;
  std::uint32_t patches_per_image = 0;
  std::uint64_t n_rows = 0;

  std::uint64_t payload_bytes() const { return n_rows * d * sizeof(float); }
  std::uint64_t file_bytes() const { return kSize + payload_bytes(); }
};

struct ShardMeta {
  std::string model = "unknown";
  int layer = -1;
  std::string dataset = "unknown";
  std::uint32_t shard_index = 0;
  std::uint64_t row_offset = 0;
};

struct PatchRef {
  std::uint64_t image_id = 0;
  std::uint32_t patch_idx = 0;

  friend bool operator==(const PatchRef&, const PatchRef&) = default;
  friend auto operator<=>(const PatchRef&, const PatchRef&) = default;
};

// Decodes and validates the fixed 28-byte header.
ShardHeader parse_shard_header(std::span<const char> bytes, const std::string& context);

// Sidecar path for a shard file.
fs::path sidecar_path(const fs::path& shard);

// Streams rows into a shard; the header is patched with the final row count
// on finish(). Rows must be finite.
class ShardWriter {
 public:
  ShardWriter(const fs::path& path, std::uint32_t d, std::uint32_t patches_per_image, ShardMeta meta);
  ~ShardWriter();
  ShardWriter(const ShardWriter&) = delete;
  ShardWriter& operator=(const ShardWriter&) = delete;

  void append(std::span<const float> row);
  void append_rows(const RowMatrix& rows);
  std::uint64_t rows_written() const { return n_rows_; }
  void finish();

 private:
  fs::path path_;
  std::uint32_t d_;
  std::uint32_t ppi_;
  ShardMeta meta_;
  std::optional<detail::BinaryWriter> out_;
  std::uint64_t n_rows_ = 0;
};

// Writes a complete shard plus sidecar. Throws ArgumentError on ragged or
// non-finite rows.
void write_shard(const fs::path& path, const std::vector<std::vector<float>>& rows, std::uint32_t d,
                 std::uint32_t patches_per_image, const ShardMeta& meta);
void write_shard(const fs::path& path, const RowMatrix& rows, std::uint32_t patches_per_image,
                 const ShardMeta& meta);

// Total payload bytes for a cache of the given size.
constexpr std::uint64_t activation_cache_bytes(std::uint64_t images, std::uint64_t patches_per_image,
                                               std::uint64_t d) {
  return images * patches_per_image * d * sizeof(float);
}

// Read-only view over a directory of shards. Shards are memory-mapped; the
// handle is safe for concurrent readers.
class ActivationStore {
 public:
  static ActivationStore open(const fs::path& dir);

  ActivationStore(ActivationStore&&) noexcept;
  ActivationStore& operator=(ActivationStore&&) noexcept;
  ~ActivationStore();

  std::uint64_t n_rows() const { return n_rows_; }
  std::uint32_t d() const { return d_; }
  std::uint32_t patches_per_image() const { return ppi_; }
  std::size_t n_shards() const;
  const fs::path& dir() const { return dir_; }

  PatchRef ref(std::uint64_t global) const;
  std::uint64_t global_index(const PatchRef& ref) const;

  void read_row(std::uint64_t global, std::span<float> out) const;
  // Copies the given rows into out (indices.size() x d).
  void gather(std::span<const std::uint64_t> indices, RowMatrix& out) const;
  RowMatrix read_range(std::uint64_t first, std::uint64_t count) const;

  // Payload bytes copied out of the shards since open or the last reset.
  std::uint64_t bytes_read() const { return bytes_read_->load(std::memory_order_relaxed); }
  void reset_bytes_read() const { bytes_read_->store(0); }

  // SHA-256 over shard headers, sizes and sidecars (payload not hashed).
  std::string fingerprint() const;

 private:
  struct Shard;
  ActivationStore() = default;
  const float* row_ptr(std::uint64_t global) const;

  fs::path dir_;
  std::vector<std::unique_ptr<Shard>> shards_;
  std::vector<std::uint64_t> offsets_;  // first global row of each shard
  std::uint64_t n_rows_ = 0;
  std::uint32_t d_ = 0;
  std::uint32_t ppi_ = 0;
  std::unique_ptr<std::atomic<std::uint64_t>> bytes_read_ = std::make_unique<std::atomic<std::uint64_t>>(0);
};

struct Batch {
  RowMatrix rows;
  std::vector<std::uint64_t> indices;
  std::vector<PatchRef> refs;
};

// One epoch over a seeded permutation of all rows, in batches of batch_size
// (last batch may be partial). The next batch is gathered on a background
// task while the caller works on the current one.
class ShuffledBatches {
 public:
  ShuffledBatches(const ActivationStore& store, std::size_t batch_size, std::uint64_t seed,
                  bool prefetch = true);
  ~ShuffledBatches();

  std::optional<Batch> next();
  std::size_t batches_total() const;
  const std::vector<std::uint64_t>& permutation() const { return order_; }

 private:
  Batch load(std::size_t batch_idx) const;

  const ActivationStore* store_;
  std::size_t batch_size_;
  bool prefetch_;
  std::vector<std::uint64_t> order_;
  std::size_t cursor_ = 0;
  std::future<Batch> pending_;
};

struct Normalizer {
  static constexpr double kDefaultEps = 1e-8;
  static constexpr std::size_t kDefaultSampleCount = 524288;

  Eigen::VectorXf mu;
  double eps = kDefaultEps;
  std::uint64_t sample_count = kDefaultSampleCount;

  static Normalizer identity(int d) { return {Eigen::VectorXf::Zero(d), kDefaultEps, 0}; }
};

// Mean of sample_count rows drawn without replacement (clamped to n_rows),
// accumulated in double.
Normalizer fit_normalizer(const ActivationStore& store, std::uint64_t sample_count, std::uint64_t seed);

struct Normalized {
  Eigen::VectorXf x;
  float scale = 1.0f;
  bool degenerate = false;
};

Normalized normalize(const Normalizer& norm, std::span<const float> x);
Eigen::VectorXf denormalize(const Normalizer& norm, std::span<const float> x_n, float scale);

// In-place batch normalization; scales receives s per row. Returns the
// number of degenerate rows.
std::size_t normalize_rows(const Normalizer& norm, RowMatrix& rows, Eigen::VectorXf& scales);

}  // namespace saev
