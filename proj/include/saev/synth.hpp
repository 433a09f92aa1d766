#pragma once

// Planted sparse-dictionary world used as ground truth for recovery,
// exemplar and intervention tests.

#include "saev/sae.hpp"

#include <json.hpp>

namespace saev {

struct PlantedWorld {
  Eigen::MatrixXf dictionary;  // d x n_true, unit columns
  int k_true = 1;
  double noise_sigma = 0.0;
  std::uint32_t planted_feature = 0;  // class 1 iff this atom is active
  // Probability that the planted atom is forced into a sample; negative means
  // it is drawn like any other atom.
  double planted_rate = -1.0;
  std::uint64_t seed = 0;
  double coherence_bound = 0.5;

  int d() const { return static_cast<int>(dictionary.rows()); }
  int n_true() const { return static_cast<int>(dictionary.cols()); }
};

struct WorldOptions {
  double coherence_bound = 0.5;
  int max_retries = 10000;  // per atom
  std::uint32_t planted_feature = 0;
  double planted_rate = -1.0;
};

PlantedWorld gen_world(int d, int n_true, int k_true, double noise_sigma, std::uint64_t seed,
                       const WorldOptions& options = {});

// Largest |cos| between distinct columns.
double max_coherence(const Eigen::MatrixXf& dictionary);

struct SyntheticSamples {
  RowMatrix x;  // count x d
  std::vector<std::vector<FeatureValue>> codes;
  std::vector<std::int32_t> labels;
};

// Samples first_index .. first_index+count-1. Each sample draws its own RNG
// from (world seed, sample index), so any split of the range reproduces the
// same rows.
SyntheticSamples gen_samples(const PlantedWorld& world, std::uint64_t count, std::uint64_t first_index = 0);

struct SampleFileOptions {
  std::uint64_t rows_per_shard = 1 << 16;
  std::uint64_t max_codes_in_json = 10000;
  ShardMeta meta{"synthetic", 0, "planted-world", 0, 0};
};

// Writes samples as activation shards under dir plus dir/ground_truth.json
// (dictionary, labels, and codes when count is small).
void write_samples(const PlantedWorld& world, std::uint64_t count, const fs::path& dir,
                   const SampleFileOptions& options = {});

struct SegWorldOptions {
  int grid = 4;                       // p; images have p*p patches
  std::uint32_t region_feature = 1;   // atom planted in every region patch
  std::uint64_t seed_offset = 1'000'003;
};

struct SegSamples {
  int grid = 0;
  RowMatrix patches;                  // (images * p * p) x d, raster order per image
  std::vector<std::int32_t> labels;   // 1 inside the region, 0 outside
};

// Each image has a random axis-aligned rectangle of "region" patches carrying
// the region atom; every other patch draws k_true atoms that exclude it.
SegSamples gen_seg_samples(const PlantedWorld& world, std::uint64_t images, const SegWorldOptions& options = {},
                           std::uint64_t first_image = 0);

struct Recovery {
  double mean_cosine = 0.0;
  std::vector<int> match;  // true atom -> learned column
};

// Greedy maximum-cosine one-to-one matching of true atoms to learned columns.
Recovery dictionary_recovery(const Eigen::MatrixXf& w_dec, const Eigen::MatrixXf& dictionary);

nlohmann::json world_to_json(const PlantedWorld& world);
PlantedWorld world_from_json(const nlohmann::json& j);

}  // namespace saev
