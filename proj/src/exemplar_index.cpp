#include "saev/exemplar_index.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <thread>

namespace saev {

using json = nlohmann::json;

namespace {

constexpr std::uint64_t kPadImage = std::numeric_limits<std::uint64_t>::max();
constexpr std::uint32_t kPadPatch = std::numeric_limits<std::uint32_t>::max();
constexpr std::size_t kRecordBytes = 16;

// Bounded heaps whose front is the worst retained exemplar.
struct TopK {
  std::uint32_t k;
  std::vector<std::vector<Exemplar>> heaps;
  std::vector<FeatureSummary> summary;

  TopK(std::uint32_t n, std::uint32_t k_) : k(k_), heaps(n), summary(n) {}

  void offer(std::uint32_t feature, const Exemplar& e) {
    auto& s = summary[feature];
    ++s.fire_count;
    s.max_activation = std::max(s.max_activation, e.activation);
    offer_no_count(feature, e);
  }

  void merge(TopK&& other) {
    for (std::size_t j = 0; j < heaps.size(); ++j) {
      summary[j].fire_count += other.summary[j].fire_count;
      summary[j].max_activation = std::max(summary[j].max_activation, other.summary[j].max_activation);
      for (const auto& e : other.heaps[j]) offer_no_count(static_cast<std::uint32_t>(j), e);
    }
  }

  void offer_no_count(std::uint32_t feature, const Exemplar& e) {
    if (k == 0) return;
    auto& h = heaps[feature];
    if (h.size() < k) {
      h.push_back(e);
      std::push_heap(h.begin(), h.end(), ranks_before);
    } else if (ranks_before(e, h.front())) {
      std::pop_heap(h.begin(), h.end(), ranks_before);
      h.back() = e;
      std::push_heap(h.begin(), h.end(), ranks_before);
    }
  }
};

}  // namespace

double ExemplarIndex::fire_fraction(std::uint32_t feature) const {
  if (total_patches == 0) return 0.0;
  return static_cast<double>(summary.at(feature).fire_count) / static_cast<double>(total_patches);
}

ExemplarIndex build_index(const ActivationStore& store, const SaeParams& params, const Normalizer& normalizer,
                          const IndexOptions& options) {
  if (store.d() != static_cast<std::uint32_t>(params.d())) throw ArgumentError("build_index: store dimension mismatch");
  if (normalizer.mu.size() != params.d()) throw ArgumentError("build_index: normalizer dimension mismatch");
  const auto n = static_cast<std::uint32_t>(params.n());
  const std::uint64_t rows = store.n_rows();
  const std::uint64_t chunk = std::max<std::uint64_t>(1, options.rows_per_task);
  const std::uint64_t tasks = (rows + chunk - 1) / chunk;
  unsigned threads = options.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : options.threads;
  threads = static_cast<unsigned>(std::max<std::uint64_t>(1, std::min<std::uint64_t>(threads, tasks)));

  std::vector<TopK> partial;
  partial.reserve(threads);
  for (unsigned w = 0; w < threads; ++w) partial.emplace_back(n, options.k);

  std::atomic<std::uint64_t> next_task{0};
  std::vector<std::exception_ptr> errors(threads);
  auto worker = [&](unsigned w) {
    try {
      TopK& top = partial[w];
      Eigen::VectorXf scales;
      for (std::uint64_t t = next_task++; t < tasks; t = next_task++) {
        const std::uint64_t first = t * chunk;
        const std::uint64_t count = std::min(chunk, rows - first);
        RowMatrix x = store.read_range(first, count);
        normalize_rows(normalizer, x, scales);
        const RowMatrix codes = encode_rows<float>(params, x);
        for (Eigen::Index i = 0; i < codes.rows(); ++i) {
          const PatchRef ref = store.ref(first + static_cast<std::uint64_t>(i));
          const float* row = codes.row(i).data();
          for (std::uint32_t j = 0; j < n; ++j)
            if (row[j] > 0.0f) top.offer(j, {ref, row[j]});
        }
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  // Top-k under a strict total order is unique, so merge order is irrelevant.
  TopK merged = std::move(partial.front());
  for (std::size_t w = 1; w < partial.size(); ++w) merged.merge(std::move(partial[w]));

  ExemplarIndex index;
  index.k = options.k;
  index.total_patches = rows;
  index.provenance.store_digest = store.fingerprint();
  index.summary = std::move(merged.summary);
  index.exemplars = std::move(merged.heaps);
  for (auto& list : index.exemplars) std::sort(list.begin(), list.end(), ranks_before);
  return index;
}

void ExemplarIndex::save(const fs::path& path) const {
  std::string blob(kIndexMagic, sizeof(kIndexMagic));
  auto put = [&blob](const auto& v) { blob.append(reinterpret_cast<const char*>(&v), sizeof(v)); };
  put(n());
  put(k);
  for (const auto& list : exemplars) {
    if (list.size() > k) throw ArgumentError("index list longer than k");
    for (std::uint32_t i = 0; i < k; ++i) {
      if (i < list.size()) {
        put(list[i].ref.image_id);
        put(list[i].ref.patch_idx);
        put(list[i].activation);
      } else {
        put(kPadImage);
        put(kPadPatch);
        put(0.0f);
      }
    }
  }
  detail::BinaryWriter w(path);
  w.put_bytes(blob);
  w.close();

  std::vector<std::uint64_t> fire_counts;
  std::vector<float> max_act;
  for (const auto& s : summary) {
    fire_counts.push_back(s.fire_count);
    max_act.push_back(s.max_activation);
  }
  json manifest = {{"n", n()},
                   {"k", k},
                   {"total_patches", total_patches},
                   {"fire_counts", fire_counts},
                   {"max_activation", max_act},
                   {"store_digest", provenance.store_digest},
                   {"checkpoint_digest", provenance.checkpoint_digest},
                   {"model", provenance.model},
                   {"index_digest", sha256_hex(blob)}};
  fs::path mpath = path;
  mpath += ".json";
  std::ofstream m(mpath);
  m << manifest.dump(1) << '\n';
  if (!m) throw IoError("cannot write index manifest " + mpath.string());
}

ExemplarIndex ExemplarIndex::load(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  const std::string ctx = path.filename().string();
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kIndexMagic, 8) != 0) throw FormatError(ctx + ": bad magic");
  detail::ByteReader in(std::span<const char>(bytes).subspan(8), ctx);
  const auto n = in.get<std::uint32_t>();
  ExemplarIndex index;
  index.k = in.get<std::uint32_t>();
  const std::uint64_t expect = std::uint64_t{n} * index.k * kRecordBytes;
  if (in.remaining() != expect)
    throw FormatError(ctx + (in.remaining() < expect ? ": truncated file" : ": trailing bytes"));
  index.exemplars.resize(n);
  for (std::uint32_t j = 0; j < n; ++j) {
    for (std::uint32_t i = 0; i < index.k; ++i) {
      Exemplar e;
      e.ref.image_id = in.get<std::uint64_t>();
      e.ref.patch_idx = in.get<std::uint32_t>();
      e.activation = in.get<float>();
      if (e.ref.image_id == kPadImage && e.ref.patch_idx == kPadPatch) continue;
      index.exemplars[j].push_back(e);
    }
  }

  fs::path mpath = path;
  mpath += ".json";
  index.summary.resize(n);
  if (fs::exists(mpath)) {
    std::ifstream m(mpath);
    json manifest = json::parse(m, nullptr, false);
    if (manifest.is_discarded()) throw FormatError(ctx + ": unreadable manifest");
    if (manifest.value("n", n) != n || manifest.value("k", index.k) != index.k)
      throw FormatError(ctx + ": manifest does not match index table");
    const std::string digest = manifest.value("index_digest", "");
    if (!digest.empty() && digest != sha256_hex(std::string_view(bytes.data(), bytes.size())))
      throw FormatError(ctx + ": index digest mismatch");
    index.total_patches = manifest.value("total_patches", std::uint64_t{0});
    const auto fc = manifest.value("fire_counts", std::vector<std::uint64_t>{});
    const auto ma = manifest.value("max_activation", std::vector<float>{});
    for (std::uint32_t j = 0; j < n; ++j) {
      if (j < fc.size()) index.summary[j].fire_count = fc[j];
      if (j < ma.size()) index.summary[j].max_activation = ma[j];
    }
    index.provenance.store_digest = manifest.value("store_digest", "");
    index.provenance.checkpoint_digest = manifest.value("checkpoint_digest", "");
    index.provenance.model = manifest.value("model", "");
  } else {
    for (std::uint32_t j = 0; j < n; ++j) {
      index.summary[j].fire_count = index.exemplars[j].size();
      if (!index.exemplars[j].empty()) index.summary[j].max_activation = index.exemplars[j].front().activation;
    }
  }
  return index;
}

std::vector<RankedFeature> query_patch_features(const SaeParams& params, const Normalizer& normalizer,
                                                const RowMatrix& patches, std::size_t k_feats) {
  if (patches.rows() == 0) throw ArgumentError("query_patch_features: empty patch selection");
  if (patches.cols() != params.d()) throw ArgumentError("query_patch_features: dimension mismatch");
  RowMatrix x = patches;
  Eigen::VectorXf scales;
  normalize_rows(normalizer, x, scales);
  const RowMatrix codes = encode_rows<float>(params, x);
  const Eigen::VectorXd sums = codes.cast<double>().colwise().sum().transpose();

  std::vector<RankedFeature> ranked;
  for (Eigen::Index j = 0; j < sums.size(); ++j)
    if (sums[j] > 0.0) ranked.push_back({static_cast<std::uint32_t>(j), sums[j]});
  std::sort(ranked.begin(), ranked.end(), [](const RankedFeature& a, const RankedFeature& b) {
    if (a.activation != b.activation) return a.activation > b.activation;
    return a.feature < b.feature;
  });
  if (ranked.size() > k_feats) ranked.resize(k_feats);
  return ranked;
}

std::optional<FeatureSort> parse_feature_sort(std::string_view s) {
  if (s == "sparsity") return FeatureSort::Sparsity;
  if (s == "max_act") return FeatureSort::MaxActivation;
  return std::nullopt;
}

std::vector<std::uint32_t> feature_table(const ExemplarIndex& index, FeatureSort sort) {
  std::vector<std::uint32_t> ids(index.n());
  for (std::uint32_t j = 0; j < index.n(); ++j) ids[j] = j;
  if (sort == FeatureSort::Sparsity) {
    std::stable_sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) {
      return index.summary[a].fire_count < index.summary[b].fire_count;
    });
  } else {
    auto top = [&](std::uint32_t j) { return index.exemplars[j].empty() ? 0.0f : index.exemplars[j].front().activation; };
    std::stable_sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) { return top(a) > top(b); });
  }
  return ids;
}

}  // namespace saev
