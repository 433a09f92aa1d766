#pragma once

// Per-feature top-k maximally activating patches.
//
// Index file: magic "SAEVIDX1", n u32, k u32, then n*k records of
// (image_id u64, patch_idx u32, activation f32), little-endian. Lists shorter
// than k are padded with image_id = patch_idx = all-ones and activation 0.
// A JSON manifest (`<file>.json`) carries per-feature fire counts and
// provenance digests.

#include "saev/activation_store.hpp"
#include "saev/sae.hpp"

#include <optional>

namespace saev {

inline constexpr char kIndexMagic[8] = {'S', 'A', 'E', 'V', 'I', 'D', 'X', '1'};

struct Exemplar {
  PatchRef ref;
  float activation = 0.0f;
  friend bool operator==(const Exemplar&, const Exemplar&) = default;
};

// Strict ranking: activation descending, then image_id, then patch_idx ascending.
inline bool ranks_before(const Exemplar& a, const Exemplar& b) {
  if (a.activation != b.activation) return a.activation > b.activation;
  return a.ref < b.ref;
}

struct FeatureSummary {
  std::uint64_t fire_count = 0;
  float max_activation = 0.0f;
};

struct IndexProvenance {
  std::string store_digest;
  std::string checkpoint_digest;
  std::string model;
};

struct ExemplarIndex {
  std::uint32_t k = 0;
  std::uint64_t total_patches = 0;
  std::vector<std::vector<Exemplar>> exemplars;  // one list per feature
  std::vector<FeatureSummary> summary;
  IndexProvenance provenance;

  std::uint32_t n() const { return static_cast<std::uint32_t>(exemplars.size()); }
  double fire_fraction(std::uint32_t feature) const;

  void save(const fs::path& path) const;  // writes path and path.json
  static ExemplarIndex load(const fs::path& path);
};

struct IndexOptions {
  std::uint32_t k = 128;
  unsigned threads = 0;  // 0 = hardware concurrency
  std::uint64_t rows_per_task = 4096;
};

// Exact per-feature top-k over every row of the store.
ExemplarIndex build_index(const ActivationStore& store, const SaeParams& params, const Normalizer& normalizer,
                          const IndexOptions& options = {});

struct RankedFeature {
  std::uint32_t feature = 0;
  double activation = 0.0;
  friend bool operator==(const RankedFeature&, const RankedFeature&) = default;
};

// Encodes each raw patch, sums the codes and returns the top k_feats features
// with positive summed activation (descending, feature id ascending on ties).
std::vector<RankedFeature> query_patch_features(const SaeParams& params, const Normalizer& normalizer,
                                                const RowMatrix& patches, std::size_t k_feats);

enum class FeatureSort { Sparsity, MaxActivation };

std::optional<FeatureSort> parse_feature_sort(std::string_view s);

// Feature ids ordered by fire fraction ascending or by top exemplar activation
// descending; stable on equal keys.
std::vector<std::uint32_t> feature_table(const ExemplarIndex& index, FeatureSort sort);

}  // namespace saev
