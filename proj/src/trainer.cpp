#include "saev/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <thread>

namespace saev {

using json = nlohmann::json;

std::int64_t TrainConfig::total_steps() const {
  return static_cast<std::int64_t>((total_activations + batch_size - 1) / batch_size);
}

void TrainConfig::validate() const {
  if (width <= 0) throw ArgumentError("width must be positive");
  if (lambda_max < 0) throw ArgumentError("lambda must be >= 0");
  if (lr_max <= 0) throw ArgumentError("lr must be positive");
  if (batch_size == 0) throw ArgumentError("batch_size must be positive");
  if (total_activations == 0) throw ArgumentError("total_activations must be positive");
  if (lambda_warmup < 0 || lr_warmup < 0) throw ArgumentError("warmup steps must be >= 0");
  if (std::max(lambda_warmup, lr_warmup) > total_steps())
    throw ArgumentError("warmup (" + std::to_string(std::max(lambda_warmup, lr_warmup)) + " steps) exceeds the " +
                        std::to_string(total_steps()) + " training steps");
}

json TrainConfig::to_json() const {
  return {{"name", name},
          {"width", width},
          {"lambda", lambda_max},
          {"lr", lr_max},
          {"lambda_warmup", lambda_warmup},
          {"lr_warmup", lr_warmup},
          {"batch_size", batch_size},
          {"total_activations", total_activations},
          {"total_steps", total_steps()},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.name = j.value("name", c.name);
  c.width = j.value("width", c.width);
  c.lambda_max = j.value("lambda", c.lambda_max);
  c.lr_max = j.value("lr", c.lr_max);
  c.lambda_warmup = j.value("lambda_warmup", c.lambda_warmup);
  c.lr_warmup = j.value("lr_warmup", c.lr_warmup);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.total_activations = j.value("total_activations", c.total_activations);
  c.seed = j.value("seed", c.seed);
  return c;
}

double warmup_value(std::int64_t step, std::int64_t warmup_steps, double max_value) {
  if (step < 0) throw ArgumentError("warmup_value: step must be >= 0");
  if (warmup_steps <= 0) return max_value;
  return max_value * std::min(static_cast<double>(step) / static_cast<double>(warmup_steps), 1.0);
}

// ---------------------------------------------------------------------------

NeuronStats::NeuronStats(int n, std::uint64_t window_size) : window_(window_size), totals_(static_cast<std::size_t>(n), 0) {
  if (window_size == 0) throw ArgumentError("neuron stats window must be > 0");
}

void NeuronStats::observe(const RowMatrix& codes) {
  if (codes.cols() != static_cast<Eigen::Index>(totals_.size())) throw ArgumentError("neuron stats: width mismatch");
  std::vector<std::uint64_t> counts(totals_.size(), 0);
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    const float* row = codes.row(i).data();
    for (std::size_t j = 0; j < counts.size(); ++j) counts[j] += row[j] > 0.0f;
  }
  observe_counts(counts, static_cast<std::uint64_t>(codes.rows()));
}

void NeuronStats::observe_counts(const std::vector<std::uint64_t>& counts, std::uint64_t rows) {
  if (counts.size() != totals_.size()) throw ArgumentError("neuron stats: width mismatch");
  for (std::size_t j = 0; j < counts.size(); ++j) totals_[j] += counts[j];
  rows_ += rows;
  chunks_.emplace_back(rows, counts);
  while (chunks_.size() > 1 && rows_ - chunks_.front().first >= window_) {
    const auto& [r, c] = chunks_.front();
    for (std::size_t j = 0; j < c.size(); ++j) totals_[j] -= c[j];
    rows_ -= r;
    chunks_.pop_front();
  }
}

NeuronHealth NeuronStats::health() const {
  NeuronHealth h;
  if (rows_ == 0) return h;
  const double denom = static_cast<double>(rows_);
  for (auto c : totals_) {
    const double frac = static_cast<double>(c) / denom;
    h.dead += frac < kDeadThreshold;
    h.dense += frac > kDenseThreshold;
  }
  return h;
}

NeuronHealth neuron_stats(std::span<const RowMatrix> code_batches, std::uint64_t window) {
  if (code_batches.empty()) return {};
  NeuronStats stats(static_cast<int>(code_batches.front().cols()), window);
  for (const auto& b : code_batches) stats.observe(b);
  return stats.health();
}

json MetricsRecord::to_json() const {
  return {{"step", step}, {"mse", mse},       {"l0", l0},     {"l1", l1},
          {"lambda", lambda}, {"lr", lr}, {"dead", dead}, {"dense", dense}};
}

std::string to_jsonl(const MetricsTrace& trace) {
  std::string out;
  for (const auto& r : trace) out += r.to_json().dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct ConfigState {
  TrainConfig config;
  SaeParams params;
  Adam adam;
  NeuronStats stats;
  MetricsTrace trace;

  ConfigState(TrainConfig c, SaeParams p, std::uint64_t window)
      : config(std::move(c)),
        params(std::move(p)),
        adam(AdamOptions{}, {static_cast<std::size_t>(params.w_enc.size()), static_cast<std::size_t>(params.b_enc.size()),
                             static_cast<std::size_t>(params.w_dec.size()), static_cast<std::size_t>(params.b_dec.size())}),
        stats(params.n(), window) {}
};

void run_step(ConfigState& s, std::size_t idx, const RowMatrix& x, std::int64_t step, std::int64_t total_steps,
              std::int64_t log_every, const StepObserver& observer) {
  const double lambda = warmup_value(step, s.config.lambda_warmup, s.config.lambda_max);
  const double lr = warmup_value(step, s.config.lr_warmup, s.config.lr_max);

  LossBreakdown lb;
  RowMatrix codes;
  SaeGrads<float> g = loss_grad<float>(s.params, x, lambda, &lb, &codes);
  Eigen::MatrixXf raw_w_dec_grad;
  if (observer) raw_w_dec_grad = g.w_dec;

  project_decoder_grad<float>(g.w_dec, s.params.w_dec);
  const std::span<float> params[] = {flat(s.params.w_enc), flat(s.params.b_enc), flat(s.params.w_dec),
                                     flat(s.params.b_dec)};
  const std::span<const float> grads[] = {flat(g.w_enc), flat(g.b_enc), flat(g.w_dec), flat(g.b_dec)};
  try {
    s.adam.step(params, grads, lr);
  } catch (const Error& e) {
    throw Error("config '" + s.config.name + "' step " + std::to_string(step) + ": " + e.what() +
                " (mse=" + std::to_string(lb.mse) + ", l1=" + std::to_string(lb.l1) + ")");
  }
  renormalize_decoder<float>(s.params.w_dec);
  s.stats.observe(codes);

  if (step % log_every == 0 || step == total_steps - 1) {
    const NeuronHealth h = s.stats.health();
    s.trace.push_back({step, lb.mse, lb.l0, lb.l1, lambda, lr, h.dead, h.dense});
  }
  if (observer) observer(idx, step, s.params, g.w_dec, raw_w_dec_grad);
}

std::string config_label(const TrainConfig& c, std::size_t idx) {
  if (!c.name.empty()) return c.name;
  std::ostringstream os;
  os << "sae_" << idx << "_l1_" << c.lambda_max << "_lr_" << c.lr_max;
  return os.str();
}

}  // namespace

std::vector<TrainResult> train(const ActivationStore& store, const std::vector<TrainConfig>& configs,
                               const TrainOptions& options) {
  if (configs.empty()) throw ArgumentError("train: no configs");
  for (const auto& c : configs) {
    c.validate();
    if (c.batch_size != configs.front().batch_size || c.total_activations != configs.front().total_activations)
      throw ArgumentError("train: configs sharing a stream must agree on batch_size and total_activations");
  }
  if (store.n_rows() == 0) throw ArgumentError("train: empty store");
  if (options.log_every <= 0) throw ArgumentError("train: log_every must be positive");

  const std::uint64_t data_seed = options.data_seed.value_or(configs.front().seed);
  const Normalizer normalizer =
      options.normalizer ? *options.normalizer : fit_normalizer(store, options.normalizer_samples, data_seed);
  if (normalizer.mu.size() != store.d()) throw ArgumentError("train: normalizer dimension mismatch");
  const std::uint64_t window = options.stats_window.value_or(std::min<std::uint64_t>(10'000'000, store.n_rows()));

  std::vector<std::unique_ptr<ConfigState>> states;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    TrainConfig c = configs[i];
    c.name = config_label(c, i);
    auto p = init_params(static_cast<int>(store.d()), c.width, normalizer, c.seed);
    states.push_back(std::make_unique<ConfigState>(std::move(c), std::move(p), window));
  }

  unsigned threads = options.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : options.threads;
  threads = std::min<unsigned>(threads, static_cast<unsigned>(states.size()));

  const std::int64_t total_steps = configs.front().total_steps();
  const std::size_t batch_size = configs.front().batch_size;
  std::int64_t step = 0;
  std::uint64_t epoch = 0;
  Eigen::VectorXf scales;
  while (step < total_steps) {
    ShuffledBatches stream(store, batch_size, splitmix64(data_seed + epoch));
    while (step < total_steps) {
      auto batch = stream.next();
      if (!batch) break;
      normalize_rows(normalizer, batch->rows, scales);
      const RowMatrix& x = batch->rows;
      if (threads <= 1) {
        for (std::size_t i = 0; i < states.size(); ++i)
          run_step(*states[i], i, x, step, total_steps, options.log_every, options.on_step);
      } else {
        std::vector<std::exception_ptr> errors(states.size());
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < threads; ++w) {
          pool.emplace_back([&, w] {
            for (std::size_t i = w; i < states.size(); i += threads) {
              try {
                run_step(*states[i], i, x, step, total_steps, options.log_every, options.on_step);
              } catch (...) {
                errors[i] = std::current_exception();
              }
            }
          });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);
      }
      ++step;
    }
    ++epoch;
  }

  std::vector<TrainResult> results;
  for (auto& s : states) {
    TrainResult r;
    r.config = s->config;
    r.checkpoint.params = std::move(s->params);
    r.checkpoint.normalizer = normalizer;
    r.checkpoint.config = s->config.to_json();
    r.checkpoint.config["d"] = store.d();
    r.trace = std::move(s->trace);
    if (options.output_dir) {
      fs::create_directories(*options.output_dir);
      save_checkpoint(*options.output_dir / (r.config.name + ".sae"), r.checkpoint);
      std::ofstream m(*options.output_dir / (r.config.name + ".metrics.jsonl"));
      m << to_jsonl(r.trace);
      if (!m) throw IoError("cannot write metrics for " + r.config.name);
    }
    results.push_back(std::move(r));
  }
  return results;
}

LossBreakdown evaluate(const SaeCheckpoint& ckpt, const ActivationStore& store, double lambda, std::uint64_t max_rows) {
  const std::uint64_t rows = std::min(max_rows, store.n_rows());
  if (rows == 0) throw ArgumentError("evaluate: no rows");
  LossBreakdown acc;
  acc.lambda = lambda;
  constexpr std::uint64_t kChunk = 8192;
  Eigen::VectorXf scales;
  for (std::uint64_t first = 0; first < rows; first += kChunk) {
    const std::uint64_t n = std::min(kChunk, rows - first);
    RowMatrix x = store.read_range(first, n);
    normalize_rows(ckpt.normalizer, x, scales);
    const LossBreakdown lb = forward<float>(ckpt.params, x, lambda);
    const double w = static_cast<double>(n);
    acc.mse += lb.mse * w;
    acc.l1 += lb.l1 * w;
    acc.l0 += lb.l0 * w;
  }
  const double r = static_cast<double>(rows);
  acc.mse /= r;
  acc.l1 /= r;
  acc.l0 /= r;
  acc.total = acc.mse + lambda * acc.l1;
  return acc;
}

}  // namespace saev
