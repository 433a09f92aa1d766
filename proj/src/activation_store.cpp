#include "saev/activation_store.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <ranges>

namespace saev {

using json = nlohmann::json;

ShardHeader parse_shard_header(std::span<const char> bytes, const std::string& context) {
  if (bytes.size() < ShardHeader::kSize) throw FormatError(context + ": truncated header");
  if (std::memcmp(bytes.data(), kShardMagic, sizeof(kShardMagic)) != 0) throw FormatError(context + ": bad magic");
  detail::ByteReader in(bytes.subspan(8, ShardHeader::kSize - 8), context);
  ShardHeader h;
  h.version = in.get<std::uint32_t>();
  h.d = in.get<std::uint32_t>();
  h.patches_per_image = in.get<std::uint32_t>();
  h.n_rows = in.get<std::uint64_t>();
  if (h.version != kShardVersion) throw FormatError(context + ": unsupported version " + std::to_string(h.version));
  if (h.d == 0) throw FormatError(context + ": d must be positive");
  if (h.patches_per_image == 0) throw FormatError(context + ": patches_per_image must be positive");
  return h;
}

fs::path sidecar_path(const fs::path& shard) {
  fs::path p = shard;
  p.replace_extension(".json");
  return p;
}

// ---------------------------------------------------------------------------
// Writing

ShardWriter::ShardWriter(const fs::path& path, std::uint32_t d, std::uint32_t patches_per_image, ShardMeta meta)
    : path_(path), d_(d), ppi_(patches_per_image), meta_(std::move(meta)) {
  if (d_ == 0) throw ArgumentError("shard dimension must be positive");
  if (ppi_ == 0) throw ArgumentError("patches_per_image must be positive");
  out_.emplace(path_);
  out_->put_bytes({kShardMagic, sizeof(kShardMagic)});
  out_->put(kShardVersion);
  out_->put(d_);
  out_->put(ppi_);
  out_->put(std::uint64_t{0});
}

ShardWriter::~ShardWriter() {
  if (out_) {
    try {
      finish();
    } catch (...) {
    }
  }
}

void ShardWriter::append(std::span<const float> row) {
  if (!out_) throw Error("shard writer already finished");
  if (row.size() != d_)
    throw ArgumentError("dimension mismatch: row has " + std::to_string(row.size()) + " values, shard d=" +
                        std::to_string(d_));
  for (float v : row)
    if (!std::isfinite(v)) throw ArgumentError("non-finite value in row " + std::to_string(n_rows_));
  out_->put_floats(row);
  ++n_rows_;
}

void ShardWriter::append_rows(const RowMatrix& rows) {
  for (Eigen::Index i = 0; i < rows.rows(); ++i) append({rows.row(i).data(), static_cast<std::size_t>(rows.cols())});
}

void ShardWriter::finish() {
  if (!out_) return;
  out_->seek(20);
  out_->put(n_rows_);
  out_->close();
  out_.reset();

  json side = {{"model", meta_.model},
               {"layer", meta_.layer},
               {"dataset", meta_.dataset},
               {"shard_index", meta_.shard_index},
               {"row_offset", meta_.row_offset},
               {"d", d_},
               {"patches_per_image", ppi_},
               {"n_rows", n_rows_}};
  std::ofstream s(sidecar_path(path_));
  s << side.dump(2) << '\n';
  if (!s) throw IoError("cannot write sidecar for " + path_.string());
}

void write_shard(const fs::path& path, const std::vector<std::vector<float>>& rows, std::uint32_t d,
                 std::uint32_t patches_per_image, const ShardMeta& meta) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw ArgumentError("dimension mismatch at row " + std::to_string(i));
    for (float v : rows[i])
      if (!std::isfinite(v)) throw ArgumentError("non-finite value in row " + std::to_string(i));
  }
  ShardWriter w(path, d, patches_per_image, meta);
  for (const auto& r : rows) w.append(r);
  w.finish();
}

void write_shard(const fs::path& path, const RowMatrix& rows, std::uint32_t patches_per_image, const ShardMeta& meta) {
  if (!rows.allFinite()) throw ArgumentError("non-finite value in rows");
  ShardWriter w(path, static_cast<std::uint32_t>(rows.cols()), patches_per_image, meta);
  w.append_rows(rows);
  w.finish();
}

// ---------------------------------------------------------------------------
// Reading

struct ActivationStore::Shard {
  fs::path path;
  ShardHeader header;
  void* map = nullptr;
  std::size_t map_size = 0;

  ~Shard() {
    if (map != nullptr) munmap(map, map_size);
  }
  const float* rows() const { return reinterpret_cast<const float*>(static_cast<const char*>(map) + ShardHeader::kSize); }
};

ActivationStore::ActivationStore(ActivationStore&&) noexcept = default;
ActivationStore& ActivationStore::operator=(ActivationStore&&) noexcept = default;
ActivationStore::~ActivationStore() = default;

std::size_t ActivationStore::n_shards() const { return shards_.size(); }

ActivationStore ActivationStore::open(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".bin") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no shards in " + dir.string());

  ActivationStore store;
  store.dir_ = dir;
  for (const auto& file : files) {
    const std::string ctx = file.filename().string();
    auto shard = std::make_unique<Shard>();
    shard->path = file;

    int fd = ::open(file.c_str(), O_RDONLY);
    if (fd < 0) throw IoError("cannot open: " + file.string());
    struct stat st {};
    if (fstat(fd, &st) != 0) {
      ::close(fd);
      throw IoError("cannot stat: " + file.string());
    }
    const auto size = static_cast<std::size_t>(st.st_size);
    if (size < ShardHeader::kSize) {
      ::close(fd);
      throw FormatError(ctx + ": truncated header");
    }
    void* map = mmap(nullptr, size, PROT_READ, MAP_PRIVATE, fd, 0);
    ::close(fd);
    if (map == MAP_FAILED) throw IoError("mmap failed: " + file.string());
    shard->map = map;
    shard->map_size = size;
    shard->header = parse_shard_header({static_cast<const char*>(map), size}, ctx);
    if (shard->header.file_bytes() != size)
      throw FormatError(ctx + ": truncated file (header claims " + std::to_string(shard->header.file_bytes()) +
                        " bytes, found " + std::to_string(size) + ")");
    madvise(map, size, MADV_WILLNEED);

    if (store.shards_.empty()) {
      store.d_ = shard->header.d;
      store.ppi_ = shard->header.patches_per_image;
    } else if (shard->header.d != store.d_) {
      throw FormatError(ctx + ": inconsistent dimension (" + std::to_string(shard->header.d) + " vs " +
                        std::to_string(store.d_) + ")");
    } else if (shard->header.patches_per_image != store.ppi_) {
      throw FormatError(ctx + ": inconsistent patches_per_image");
    }

    const fs::path side = sidecar_path(file);
    if (fs::exists(side)) {
      std::ifstream in(side);
      json meta = json::parse(in, nullptr, false);
      if (meta.is_discarded()) throw FormatError(ctx + ": unreadable sidecar");
      if (meta.contains("row_offset") && meta["row_offset"].get<std::uint64_t>() != store.n_rows_)
        throw FormatError(ctx + ": sidecar row_offset does not match shard order");
    }

    store.offsets_.push_back(store.n_rows_);
    store.n_rows_ += shard->header.n_rows;
    store.shards_.push_back(std::move(shard));
  }
  return store;
}

const float* ActivationStore::row_ptr(std::uint64_t global) const {
  if (global >= n_rows_) throw ArgumentError("row index out of range: " + std::to_string(global));
  auto it = std::upper_bound(offsets_.begin(), offsets_.end(), global);
  const auto s = static_cast<std::size_t>(std::distance(offsets_.begin(), it) - 1);
  return shards_[s]->rows() + (global - offsets_[s]) * d_;
}

PatchRef ActivationStore::ref(std::uint64_t global) const {
  return {global / ppi_, static_cast<std::uint32_t>(global % ppi_)};
}

std::uint64_t ActivationStore::global_index(const PatchRef& r) const {
  if (r.patch_idx >= ppi_) throw ArgumentError("patch_idx out of range");
  return r.image_id * ppi_ + r.patch_idx;
}

void ActivationStore::read_row(std::uint64_t global, std::span<float> out) const {
  if (out.size() != d_) throw ArgumentError("output span has wrong dimension");
  std::memcpy(out.data(), row_ptr(global), d_ * sizeof(float));
  bytes_read_->fetch_add(d_ * sizeof(float), std::memory_order_relaxed);
}

void ActivationStore::gather(std::span<const std::uint64_t> indices, RowMatrix& out) const {
  out.resize(static_cast<Eigen::Index>(indices.size()), d_);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::memcpy(out.row(static_cast<Eigen::Index>(i)).data(), row_ptr(indices[i]), d_ * sizeof(float));
  bytes_read_->fetch_add(indices.size() * d_ * sizeof(float), std::memory_order_relaxed);
}

RowMatrix ActivationStore::read_range(std::uint64_t first, std::uint64_t count) const {
  if (first + count > n_rows_) throw ArgumentError("row range out of bounds");
  std::vector<std::uint64_t> idx(count);
  std::iota(idx.begin(), idx.end(), first);
  RowMatrix out;
  gather(idx, out);
  return out;
}

std::string ActivationStore::fingerprint() const {
  std::string blob;
  for (const auto& s : shards_) {
    blob += s->path.filename().string();
    blob.append(static_cast<const char*>(s->map), ShardHeader::kSize);
    const fs::path side = sidecar_path(s->path);
    if (fs::exists(side)) {
      const auto bytes = detail::read_file(side);
      blob.append(bytes.data(), bytes.size());
    }
  }
  return sha256_hex(blob);
}

// ---------------------------------------------------------------------------
// Shuffled streaming

ShuffledBatches::ShuffledBatches(const ActivationStore& store, std::size_t batch_size, std::uint64_t seed,
                                 bool prefetch)
    : store_(&store), batch_size_(batch_size), prefetch_(prefetch), order_(store.n_rows()) {
  if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::uint64_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order_.begin(), order_.end(), rng);
  if (prefetch_ && batches_total() > 0) pending_ = std::async(std::launch::async, [this] { return load(0); });
}

ShuffledBatches::~ShuffledBatches() {
  if (pending_.valid()) pending_.wait();
}

std::size_t ShuffledBatches::batches_total() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

Batch ShuffledBatches::load(std::size_t batch_idx) const {
  const std::size_t begin = batch_idx * batch_size_;
  const std::size_t end = std::min(order_.size(), begin + batch_size_);
  Batch b;
  b.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(end));
  store_->gather(b.indices, b.rows);
  b.refs.reserve(b.indices.size());
  for (auto i : b.indices) b.refs.push_back(store_->ref(i));
  return b;
}

std::optional<Batch> ShuffledBatches::next() {
  if (cursor_ >= batches_total()) return std::nullopt;
  Batch b = prefetch_ ? pending_.get() : load(cursor_);
  ++cursor_;
  if (prefetch_ && cursor_ < batches_total())
    pending_ = std::async(std::launch::async, [this, idx = cursor_] { return load(idx); });
  return b;
}

// ---------------------------------------------------------------------------
// Normalization

Normalizer fit_normalizer(const ActivationStore& store, std::uint64_t sample_count, std::uint64_t seed) {
  if (store.n_rows() == 0) throw ArgumentError("cannot fit normalizer on an empty store");
  const std::uint64_t k = std::min(sample_count, store.n_rows());
  std::vector<std::uint64_t> picked(k);
  std::mt19937_64 rng(seed);
  auto population = std::views::iota(std::uint64_t{0}, store.n_rows());
  std::sample(population.begin(), population.end(), picked.begin(), static_cast<std::ptrdiff_t>(k), rng);
  std::sort(picked.begin(), picked.end());

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(store.d());
  RowMatrix chunk;
  constexpr std::size_t kChunk = 8192;
  for (std::size_t i = 0; i < picked.size(); i += kChunk) {
    const std::size_t n = std::min(kChunk, picked.size() - i);
    store.gather({picked.data() + i, n}, chunk);
    sum += chunk.cast<double>().colwise().sum().transpose();
  }
  Normalizer norm;
  norm.mu = (sum / static_cast<double>(k)).cast<float>();
  norm.sample_count = k;
  return norm;
}

Normalized normalize(const Normalizer& norm, std::span<const float> x) {
  if (x.size() != static_cast<std::size_t>(norm.mu.size())) throw ArgumentError("normalize: dimension mismatch");
  Eigen::Map<const Eigen::VectorXf> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::VectorXd centered = xv.cast<double>() - norm.mu.cast<double>();
  const double len = centered.norm();
  Normalized out;
  out.degenerate = len < norm.eps;
  const double s = std::max(len, norm.eps);
  out.scale = static_cast<float>(s);
  out.x = (centered / s).cast<float>();
  return out;
}

Eigen::VectorXf denormalize(const Normalizer& norm, std::span<const float> x_n, float scale) {
  if (!(scale > 0.0f)) throw ArgumentError("denormalize: scale must be positive");
  if (x_n.size() != static_cast<std::size_t>(norm.mu.size())) throw ArgumentError("denormalize: dimension mismatch");
  Eigen::Map<const Eigen::VectorXf> xv(x_n.data(), static_cast<Eigen::Index>(x_n.size()));
  return (xv.cast<double>() * static_cast<double>(scale) + norm.mu.cast<double>()).cast<float>();
}

std::size_t normalize_rows(const Normalizer& norm, RowMatrix& rows, Eigen::VectorXf& scales) {
  if (rows.cols() != norm.mu.size()) throw ArgumentError("normalize_rows: dimension mismatch");
  scales.resize(rows.rows());
  std::size_t degenerate = 0;
  const Eigen::RowVectorXd mu = norm.mu.cast<double>().transpose();
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const Eigen::RowVectorXd c = rows.row(i).cast<double>() - mu;
    const double len = c.norm();
    if (len < norm.eps) ++degenerate;
    const double s = std::max(len, norm.eps);
    rows.row(i) = (c / s).cast<float>();
    scales[i] = static_cast<float>(s);
  }
  return degenerate;
}

}  // namespace saev
