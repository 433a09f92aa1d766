#include "saev/synth.hpp"

#include "saev/sae.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace saev {

using json = nlohmann::json;

PlantedWorld gen_world(int d, int n_true, int k_true, double noise_sigma, std::uint64_t seed,
                       const WorldOptions& options) {
  if (d < 2) throw ArgumentError("gen_world: d must be >= 2");
  if (n_true < 1 || k_true < 1 || k_true > n_true) throw ArgumentError("gen_world: need 1 <= k_true <= n_true");
  if (noise_sigma < 0) throw ArgumentError("gen_world: noise_sigma must be >= 0");
  if (options.planted_feature >= static_cast<std::uint32_t>(n_true)) throw ArgumentError("gen_world: planted feature out of range");
  if (options.planted_rate > 1.0) throw ArgumentError("gen_world: planted_rate must be <= 1");

  PlantedWorld w;
  w.k_true = k_true;
  w.noise_sigma = noise_sigma;
  w.seed = seed;
  w.coherence_bound = options.coherence_bound;
  w.planted_feature = options.planted_feature;
  w.planted_rate = options.planted_rate;
  w.dictionary.resize(d, n_true);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(d);
  for (int j = 0; j < n_true; ++j) {
    bool accepted = false;
    for (int attempt = 0; attempt < options.max_retries && !accepted; ++attempt) {
      for (int i = 0; i < d; ++i) v[i] = normal(rng);
      const double len = v.norm();
      if (len < 1e-12) continue;
      v /= len;
      accepted = true;
      for (int prev = 0; prev < j && accepted; ++prev)
        accepted = std::abs(v.dot(w.dictionary.col(prev).cast<double>())) <= options.coherence_bound;
    }
    if (!accepted)
      throw Error("gen_world: could not place atom " + std::to_string(j) + " under coherence bound " +
                  std::to_string(options.coherence_bound));
    w.dictionary.col(j) = v.cast<float>();
  }
  return w;
}

double max_coherence(const Eigen::MatrixXf& dictionary) {
  const Eigen::MatrixXd dn = dictionary.cast<double>().colwise().normalized();
  const Eigen::MatrixXd gram = dn.transpose() * dn;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < gram.rows(); ++i)
    for (Eigen::Index j = i + 1; j < gram.cols(); ++j) worst = std::max(worst, std::abs(gram(i, j)));
  return worst;
}

namespace {

std::mt19937_64 item_rng(std::uint64_t seed, std::uint64_t index) {
  return std::mt19937_64(splitmix64(seed ^ splitmix64(index + 0x51ED27ULL)));
}

// Picks k distinct atoms from candidates (order preserved).
std::vector<std::uint32_t> pick(const std::vector<std::uint32_t>& candidates, int k, std::mt19937_64& rng) {
  std::vector<std::uint32_t> out;
  out.reserve(static_cast<std::size_t>(k));
  std::sample(candidates.begin(), candidates.end(), std::back_inserter(out), k, rng);
  return out;
}

void synthesize(const PlantedWorld& w, const std::vector<std::uint32_t>& atoms, std::mt19937_64& rng,
                Eigen::Ref<Eigen::RowVectorXf> out, std::vector<FeatureValue>* code) {
  std::uniform_real_distribution<double> coef(0.5, 1.5);
  std::normal_distribution<double> noise(0.0, 1.0);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(w.d());
  for (auto a : atoms) {
    const double c = coef(rng);
    x += c * w.dictionary.col(a).cast<double>();
    if (code) code->push_back({a, static_cast<float>(c)});
  }
  if (w.noise_sigma > 0)
    for (int i = 0; i < w.d(); ++i) x[i] += w.noise_sigma * noise(rng);
  out = x.cast<float>().transpose();
}

std::vector<std::uint32_t> all_except(int n, std::uint32_t excluded) {
  std::vector<std::uint32_t> v;
  for (int j = 0; j < n; ++j)
    if (static_cast<std::uint32_t>(j) != excluded) v.push_back(static_cast<std::uint32_t>(j));
  return v;
}

}  // namespace

SyntheticSamples gen_samples(const PlantedWorld& world, std::uint64_t count, std::uint64_t first_index) {
  if (count == 0) throw ArgumentError("gen_samples: count must be >= 1");
  SyntheticSamples s;
  s.x.resize(static_cast<Eigen::Index>(count), world.d());
  s.codes.resize(count);
  s.labels.resize(count);
  const int n = world.n_true();
  std::vector<std::uint32_t> everyone(static_cast<std::size_t>(n));
  std::iota(everyone.begin(), everyone.end(), 0u);
  const auto others = all_except(n, world.planted_feature);

  for (std::uint64_t i = 0; i < count; ++i) {
    auto rng = item_rng(world.seed, first_index + i);
    std::vector<std::uint32_t> atoms;
    if (world.planted_rate >= 0) {
      std::bernoulli_distribution planted(world.planted_rate);
      const bool on = planted(rng);
      atoms = pick(others, on ? world.k_true - 1 : world.k_true, rng);
      if (on) atoms.insert(atoms.begin(), world.planted_feature);
    } else {
      atoms = pick(everyone, world.k_true, rng);
    }
    synthesize(world, atoms, rng, s.x.row(static_cast<Eigen::Index>(i)), &s.codes[i]);
    s.labels[i] = std::find(atoms.begin(), atoms.end(), world.planted_feature) != atoms.end() ? 1 : 0;
  }
  return s;
}

void write_samples(const PlantedWorld& world, std::uint64_t count, const fs::path& dir, const SampleFileOptions& options) {
  fs::create_directories(dir);
  const std::uint64_t per_shard = std::max<std::uint64_t>(1, options.rows_per_shard);
  std::vector<std::int32_t> labels;
  json codes = json::array();
  std::uint32_t shard = 0;
  for (std::uint64_t first = 0; first < count; first += per_shard, ++shard) {
    const std::uint64_t n = std::min(per_shard, count - first);
    SyntheticSamples s = gen_samples(world, n, first);
    ShardMeta meta = options.meta;
    meta.shard_index = shard;
    meta.row_offset = first;
    std::ostringstream name;
    name << "shard_" << std::setw(5) << std::setfill('0') << shard << ".bin";
    write_shard(dir / name.str(), s.x, 1, meta);
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
    if (count <= options.max_codes_in_json)
      for (const auto& c : s.codes) {
        json row = json::array();
        for (const auto& fv : c) row.push_back(json::array({fv.feature, fv.value}));
        codes.push_back(std::move(row));
      }
  }
  json truth = {{"world", world_to_json(world)}, {"count", count}, {"labels", labels}};
  if (count <= options.max_codes_in_json) truth["codes"] = std::move(codes);
  std::ofstream out(dir / "ground_truth.json");
  out << truth.dump() << '\n';
  if (!out) throw IoError("cannot write ground truth in " + dir.string());
}

SegSamples gen_seg_samples(const PlantedWorld& world, std::uint64_t images, const SegWorldOptions& options,
                           std::uint64_t first_image) {
  const int p = options.grid;
  if (p < 1) throw ArgumentError("gen_seg_samples: grid must be >= 1");
  if (options.region_feature >= static_cast<std::uint32_t>(world.n_true()))
    throw ArgumentError("gen_seg_samples: region feature out of range");
  const auto others = all_except(world.n_true(), options.region_feature);
  if (static_cast<int>(others.size()) < world.k_true) throw ArgumentError("gen_seg_samples: too few background atoms");

  SegSamples s;
  s.grid = p;
  const auto per_image = static_cast<std::uint64_t>(p) * p;
  s.patches.resize(static_cast<Eigen::Index>(images * per_image), world.d());
  s.labels.resize(images * per_image);
  for (std::uint64_t img = 0; img < images; ++img) {
    auto rng = item_rng(world.seed + options.seed_offset, first_image + img);
    std::uniform_int_distribution<int> size(1, p);
    const int h = size(rng), w = size(rng);
    const int top = std::uniform_int_distribution<int>(0, p - h)(rng);
    const int left = std::uniform_int_distribution<int>(0, p - w)(rng);
    for (int r = 0; r < p; ++r) {
      for (int c = 0; c < p; ++c) {
        const bool region = r >= top && r < top + h && c >= left && c < left + w;
        std::vector<std::uint32_t> atoms = pick(others, region ? world.k_true - 1 : world.k_true, rng);
        if (region) atoms.insert(atoms.begin(), options.region_feature);
        const auto row = img * per_image + static_cast<std::uint64_t>(r) * p + c;
        synthesize(world, atoms, rng, s.patches.row(static_cast<Eigen::Index>(row)), nullptr);
        s.labels[row] = region ? 1 : 0;
      }
    }
  }
  return s;
}

Recovery dictionary_recovery(const Eigen::MatrixXf& w_dec, const Eigen::MatrixXf& dictionary) {
  if (w_dec.rows() != dictionary.rows()) throw ArgumentError("dictionary_recovery: dimension mismatch");
  const Eigen::MatrixXd learned = w_dec.cast<double>().colwise().normalized();
  const Eigen::MatrixXd truth = dictionary.cast<double>().colwise().normalized();
  const Eigen::MatrixXd cos = truth.transpose() * learned;  // n_true x m

  struct Pair {
    double cos;
    int atom;
    int column;
  };
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<std::size_t>(cos.size()));
  for (int i = 0; i < cos.rows(); ++i)
    for (int j = 0; j < cos.cols(); ++j) pairs.push_back({cos(i, j), i, j});
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.cos != b.cos) return a.cos > b.cos;
    if (a.atom != b.atom) return a.atom < b.atom;
    return a.column < b.column;
  });

  Recovery r;
  r.match.assign(static_cast<std::size_t>(cos.rows()), -1);
  std::vector<bool> used(static_cast<std::size_t>(cos.cols()), false);
  double total = 0.0;
  for (const auto& p : pairs) {
    if (r.match[static_cast<std::size_t>(p.atom)] >= 0 || used[static_cast<std::size_t>(p.column)]) continue;
    r.match[static_cast<std::size_t>(p.atom)] = p.column;
    used[static_cast<std::size_t>(p.column)] = true;
    total += p.cos;
  }
  r.mean_cosine = cos.rows() == 0 ? 0.0 : total / static_cast<double>(cos.rows());
  return r;
}

json world_to_json(const PlantedWorld& w) {
  json cols = json::array();
  for (int j = 0; j < w.n_true(); ++j) {
    std::vector<float> col(w.dictionary.col(j).data(), w.dictionary.col(j).data() + w.d());
    cols.push_back(col);
  }
  return {{"d", w.d()},
          {"n_true", w.n_true()},
          {"k_true", w.k_true},
          {"noise_sigma", w.noise_sigma},
          {"planted_feature", w.planted_feature},
          {"planted_rate", w.planted_rate},
          {"seed", w.seed},
          {"coherence_bound", w.coherence_bound},
          {"dictionary_columns", cols}};
}

PlantedWorld world_from_json(const json& j) {
  PlantedWorld w;
  w.k_true = j.at("k_true").get<int>();
  w.noise_sigma = j.at("noise_sigma").get<double>();
  w.planted_feature = j.at("planted_feature").get<std::uint32_t>();
  w.planted_rate = j.at("planted_rate").get<double>();
  w.seed = j.at("seed").get<std::uint64_t>();
  w.coherence_bound = j.value("coherence_bound", 0.5);
  const auto cols = j.at("dictionary_columns").get<std::vector<std::vector<float>>>();
  const int d = j.at("d").get<int>();
  w.dictionary.resize(d, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (cols[c].size() != static_cast<std::size_t>(d)) throw FormatError("world json: ragged dictionary");
    for (int i = 0; i < d; ++i) w.dictionary(i, static_cast<Eigen::Index>(c)) = cols[c][static_cast<std::size_t>(i)];
  }
  return w;
}

}  // namespace saev
