#pragma once

#include "saev/activation_store.hpp"
#include "saev/optim.hpp"
#include "saev/sae.hpp"

#include <deque>
#include <functional>
#include <optional>

namespace saev {

struct TrainConfig {
  std::string name;
  int width = 24576;
  double lambda_max = 8e-4;
  double lr_max = 1e-3;
  std::int64_t lambda_warmup = 500;
  std::int64_t lr_warmup = 500;
  std::size_t batch_size = 16384;
  std::uint64_t total_activations = 100'000'000;
  std::uint64_t seed = 0;

  // ceil(total_activations / batch_size)
  std::int64_t total_steps() const;
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// max_value * min(step / warmup_steps, 1); warmup_steps == 0 means no warmup.
double warmup_value(std::int64_t step, std::int64_t warmup_steps, double max_value);

// Removes from each gradient column its component along the matching unit
// decoder column.
template <typename T>
void project_decoder_grad(MatrixT<T>& grad, const MatrixT<T>& w_dec) {
  if (grad.rows() != w_dec.rows() || grad.cols() != w_dec.cols())
    throw ArgumentError("project_decoder_grad: shape mismatch");
  for (Eigen::Index j = 0; j < grad.cols(); ++j) {
    const double dot = grad.col(j).template cast<double>().dot(w_dec.col(j).template cast<double>());
    grad.col(j) = (grad.col(j).template cast<double>() - dot * w_dec.col(j).template cast<double>()).template cast<T>();
  }
}

// Rescales every column to unit L2 norm; throws ArgumentError naming the first
// column with norm < 1e-12.
template <typename T>
void renormalize_decoder(MatrixT<T>& w_dec) {
  for (Eigen::Index j = 0; j < w_dec.cols(); ++j) {
    const double norm = w_dec.col(j).template cast<double>().norm();
    if (!(norm >= 1e-12))
      throw ArgumentError("renormalize_decoder: column " + std::to_string(j) + " has zero norm (training diverged?)");
    w_dec.col(j) = (w_dec.col(j).template cast<double>() / norm).template cast<T>();
  }
}

// Dead / dense thresholds are fractions of inputs in the trailing window.
inline constexpr double kDeadThreshold = 1e-9;
inline constexpr double kDenseThreshold = 1e-2;

struct NeuronHealth {
  std::size_t dead = 0;
  std::size_t dense = 0;
};

// Per-feature firing counts over a trailing window of rows, kept as whole
// batches; the oldest batches are evicted once the window would still be
// full without them.
class NeuronStats {
 public:
  NeuronStats(int n, std::uint64_t window_size);

  void observe(const RowMatrix& codes);
  void observe_counts(const std::vector<std::uint64_t>& counts, std::uint64_t rows);

  const std::vector<std::uint64_t>& fire_counts() const { return totals_; }
  std::uint64_t rows_in_window() const { return rows_; }
  std::uint64_t window_size() const { return window_; }
  NeuronHealth health() const;

 private:
  std::uint64_t window_;
  std::vector<std::uint64_t> totals_;
  std::deque<std::pair<std::uint64_t, std::vector<std::uint64_t>>> chunks_;
  std::uint64_t rows_ = 0;
};

NeuronHealth neuron_stats(std::span<const RowMatrix> code_batches, std::uint64_t window);

struct MetricsRecord {
  std::int64_t step = 0;
  double mse = 0;
  double l0 = 0;
  double l1 = 0;
  double lambda = 0;
  double lr = 0;
  std::size_t dead = 0;
  std::size_t dense = 0;

  nlohmann::json to_json() const;
};

using MetricsTrace = std::vector<MetricsRecord>;

std::string to_jsonl(const MetricsTrace& trace);

struct TrainResult {
  TrainConfig config;
  SaeCheckpoint checkpoint;
  MetricsTrace trace;
};

// Per-step observer: (config index, step, params after the step,
// projected W_dec gradient used for the step, raw W_dec gradient).
using StepObserver = std::function<void(std::size_t, std::int64_t, const SaeParams&, const Eigen::MatrixXf&,
                                        const Eigen::MatrixXf&)>;

struct TrainOptions {
  std::int64_t log_every = 100;
  // Rows used to estimate the normalizer mean.
  std::uint64_t normalizer_samples = Normalizer::kDefaultSampleCount;
  // Shuffle / normalizer seed; defaults to the first config's seed.
  std::optional<std::uint64_t> data_seed;
  // Trailing window for dead/dense counts; defaults to min(10M, n_rows).
  std::optional<std::uint64_t> stats_window;
  std::optional<Normalizer> normalizer;
  // When set, checkpoints and metrics are written here per config.
  std::optional<fs::path> output_dir;
  // Worker threads for per-config steps (0 = hardware concurrency).
  unsigned threads = 0;
  StepObserver on_step;
};

// Trains every config on one shared shuffled stream: each batch is read once
// and fed to all configs. All configs must share batch_size and
// total_activations.
std::vector<TrainResult> train(const ActivationStore& store, const std::vector<TrainConfig>& configs,
                               const TrainOptions& options = {});

// Mean loss breakdown of a trained SAE over the first max_rows rows of a store.
LossBreakdown evaluate(const SaeCheckpoint& ckpt, const ActivationStore& store, double lambda,
                       std::uint64_t max_rows = ~std::uint64_t{0});

}  // namespace saev
