// One PASS/FAIL line per acceptance criterion. Exit status is 0 only when
// every criterion passes within its time budget, except those named with
// --expect-fail, which still print FAIL but do not change the exit status.
#include "saev/exemplar_index.hpp"
#include "saev/intervention.hpp"
#include "saev/synth.hpp"
#include "saev/task_heads.hpp"
#include "saev/trainer.hpp"

#include "fixtures.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

using namespace saev;
using testutil::TempDir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::vector<std::string> failed;

void criterion(const std::string& name, double budget_s, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs <= budget_s;
  const bool pass = o.pass && in_time;
  if (!pass) failed.push_back(name);
  std::printf("%s  %-28s %8.2f s (budget %g s)  %s%s\n", pass ? "PASS" : "FAIL", name.c_str(), secs, budget_s,
              o.detail.c_str(), in_time ? "" : "  [over time budget]");
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// Desk-scale training config shared by the recovery, frontier and flip runs.
TrainConfig desk(double lambda, double lr, int width, std::int64_t steps, std::size_t batch = 1024) {
  TrainConfig c;
  c.width = width;
  c.lambda_max = lambda;
  c.lr_max = lr;
  c.batch_size = batch;
  c.total_activations = static_cast<std::uint64_t>(steps) * batch;
  c.seed = 0;
  return c;
}

struct PlantedData {
  TempDir dir;
  PlantedWorld world;
  ActivationStore store;
  PlantedData(PlantedWorld w, std::uint64_t rows) : world(std::move(w)), store(make(world, rows, dir)) {}
  static ActivationStore make(const PlantedWorld& w, std::uint64_t rows, const TempDir& dir) {
    write_samples(w, rows, dir.path());
    return ActivationStore::open(dir.path());
  }
};

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  std::mt19937_64 rng(99);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + static_cast<int>(rng() % 8), n = 1 + static_cast<int>(rng() % 16);
    const double lambda = trial % 2 ? 8e-4 : 0.0;
    auto p = init_params(d, n, Normalizer::identity(d), rng()).cast<double>();
    std::normal_distribution<double> nd(0, 0.3);
    for (int i = 0; i < n; ++i) p.b_enc[i] = nd(rng);
    for (int j = 0; j < d; ++j) p.b_dec[j] = nd(rng);
    RowMatrixT<double> x(6, d);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 3 * nd(rng);

    const SaeGrads<double> g = loss_grad<double>(p, x, lambda);
    auto check = [&](auto& tensor, const auto& analytic) {
      const double h = 1e-6;
      Eigen::MatrixXd num(tensor.rows(), tensor.cols());
      for (Eigen::Index i = 0; i < tensor.rows(); ++i)
        for (Eigen::Index j = 0; j < tensor.cols(); ++j) {
          const double keep = tensor(i, j);
          tensor(i, j) = keep + h;
          const double up = fixtures::oracle_loss(p, x, lambda);
          tensor(i, j) = keep - h;
          const double down = fixtures::oracle_loss(p, x, lambda);
          tensor(i, j) = keep;
          num(i, j) = (up - down) / (2 * h);
        }
      const Eigen::MatrixXd a = analytic;
      const double scale = std::max({a.norm(), num.norm(), 1e-12});
      worst = std::max(worst, (a - num).norm() / scale);
    };
    check(p.w_enc, g.w_enc);
    check(p.b_enc, g.b_enc);
    check(p.w_dec, g.w_dec);
    check(p.b_dec, g.b_dec);
  }
  return {worst < 1e-5, fmt("worst relative error %.2e over 20 instances (tol 1e-5)", worst)};
}

Outcome constraint_invariants() {
  PlantedData data(gen_world(32, 32, 3, 0.01, 11), 50000);
  TrainOptions o;
  o.threads = 1;
  o.log_every = 100;
  o.normalizer = fit_normalizer(data.store, 50000, 0);
  TrainConfig c = desk(8e-4, 1e-3, 128, 500);
  Eigen::MatrixXf prev = init_params(32, 128, *o.normalizer, c.seed).w_dec;
  double worst_norm = 0, worst_orth = 0;
  std::int64_t steps = 0;
  o.on_step = [&](std::size_t, std::int64_t, const SaeParams& p, const Eigen::MatrixXf& projected,
                  const Eigen::MatrixXf&) {
    for (int j = 0; j < p.n(); ++j) {
      worst_norm = std::max(worst_norm, std::abs(p.w_dec.col(j).cast<double>().norm() - 1.0));
      const double g = projected.col(j).cast<double>().norm();
      const double dot = std::abs(projected.col(j).cast<double>().dot(prev.col(j).cast<double>()));
      if (g > 0) worst_orth = std::max(worst_orth, dot / g);
    }
    prev = p.w_dec;
    ++steps;
  };
  train(data.store, {c}, o);
  return {steps == 500 && worst_norm <= 1e-6 && worst_orth <= 1e-6,
          fmt("%g steps; max | ||w_j|| - 1 | = %.2e, max |<g_j, w_j>| / ||g_j|| = %.2e (tol 1e-6)", double(steps),
              worst_norm, worst_orth)};
}

Outcome warmup_exactness() {
  TempDir dir;
  write_shard(dir / "s.bin", testutil::random_rows(64, 4, 1), 1, {});
  const auto store = ActivationStore::open(dir.path());
  std::vector<TrainConfig> cfgs;
  for (double l : {4e-4, 8e-4, 1.6e-3})
    for (double lr : {3e-4, 1e-3, 3e-3}) {
      TrainConfig c = desk(l, lr, 8, 5001, 4);
      c.lambda_warmup = c.lr_warmup = 500;
      cfgs.push_back(c);
    }
  TrainOptions o;
  o.threads = 1;
  o.log_every = 1;
  o.normalizer = Normalizer::identity(4);
  const auto res = train(store, cfgs, o);
  int checked = 0, bad = 0;
  for (const auto& r : res) {
    for (std::int64_t s : {0, 1, 250, 499, 500, 5000}) {
      const auto& rec = r.trace.at(static_cast<std::size_t>(s));
      bad += rec.step != s || rec.lambda != warmup_value(s, 500, r.config.lambda_max) ||
             rec.lr != warmup_value(s, 500, r.config.lr_max);
      ++checked;
    }
  }
  return {bad == 0, fmt("%g of %g (config, step) pairs equal warmup_value exactly", double(checked - bad), double(checked))};
}

std::unique_ptr<PlantedData> recovery_world() {
  return std::make_unique<PlantedData>(gen_world(64, 64, 3, 0.01, 2024), 200000);
}

Outcome dictionary_recovery_run() {
  auto data = recovery_world();
  TrainOptions o;
  o.log_every = 500;
  const auto res = train(data->store, {desk(8e-4, 1e-3, 128, 2000)}, o);
  const Recovery r = dictionary_recovery(res[0].checkpoint.params.w_dec, data->world.dictionary);
  const Eigen::MatrixXd cos = data->world.dictionary.cast<double>().transpose() *
                              res[0].checkpoint.params.w_dec.cast<double>();
  int good = 0;
  for (int a = 0; a < 64; ++a) good += cos(a, r.match[static_cast<std::size_t>(a)]) >= 0.9;
  const auto& last = res[0].trace.back();
  return {r.mean_cosine >= 0.90,
          fmt("mean matched cosine %.4f (need >= 0.90); %g/64 atoms >= 0.9; final mse %.4f, l0 %.1f", r.mean_cosine,
              double(good), last.mse, last.l0)};
}

Outcome sparsity_frontier() {
  auto data = recovery_world();
  TrainOptions o;
  o.log_every = 500;
  std::vector<TrainConfig> cfgs;
  for (double l : {4e-4, 8e-4, 1.6e-3}) cfgs.push_back(desk(l, 1e-3, 128, 2000));
  const auto res = train(data->store, cfgs, o);
  std::vector<LossBreakdown> ev;
  for (const auto& r : res) ev.push_back(evaluate(r.checkpoint, data->store, r.config.lambda_max, 50000));
  const bool l0_ok = ev[0].l0 >= ev[1].l0 && ev[1].l0 >= ev[2].l0;
  const bool mse_ok = ev[0].mse <= ev[1].mse && ev[1].mse <= ev[2].mse;
  std::ostringstream os;
  os << "lambda 4e-4/8e-4/1.6e-3: L0 " << ev[0].l0 << " / " << ev[1].l0 << " / " << ev[2].l0 << ", MSE " << ev[0].mse
     << " / " << ev[1].mse << " / " << ev[2].mse;
  return {l0_ok && mse_ok, os.str()};
}

Outcome noop_identity() {
  Normalizer norm{Eigen::VectorXf::LinSpaced(48, -0.5f, 0.5f), Normalizer::kDefaultEps, 0};
  SaeParams p = init_params(48, 192, norm, 7);
  p.b_enc.setConstant(0.01f);
  const RowMatrix x = testutil::random_rows(1000, 48, 8, 4.0f);
  const InterventionOutput same = intervene(p, norm, x, {}, Scope::All);
  double worst = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    worst = std::max(worst, double((same.activations.row(i) - x.row(i)).norm() / x.row(i).norm()));

  std::vector<std::uint32_t> sel;
  for (std::uint32_t i = 0; i < 1000; i += 7) sel.push_back(i);
  const FeatureEdit edits[] = {{3, EditMode::Set, 2.0f}, {17, EditMode::Delta, -0.5f}};
  const InterventionOutput part = intervene(p, norm, x, edits, Scope::Selected, sel);
  std::size_t out_of_scope = 0, identical = 0;
  for (std::uint32_t i = 0; i < 1000; ++i) {
    if (std::binary_search(sel.begin(), sel.end(), i)) continue;
    ++out_of_scope;
    identical += std::memcmp(part.activations.row(i).data(), x.row(i).data(), 48 * sizeof(float)) == 0;
  }
  return {worst <= 1e-5 && identical == out_of_scope,
          fmt("empty edit max relative deviation %.2e (tol 1e-5); %g/%g out-of-scope rows bit-identical", worst,
              double(identical), double(out_of_scope))};
}

Outcome single_feature_footprint() {
  Normalizer norm{Eigen::VectorXf::LinSpaced(32, 0.2f, -0.2f), Normalizer::kDefaultEps, 0};
  SaeParams p = init_params(32, 96, norm, 5);
  const RowMatrix x = testutil::random_rows(200, 32, 6, 3.0f);
  Eigen::VectorXf scales;
  RowMatrix xn = x;
  normalize_rows(norm, xn, scales);
  const RowMatrix codes = encode_rows<float>(p, xn);
  double worst = 0;
  int cases = 0;
  for (std::uint32_t j : {0u, 11u, 50u, 95u}) {
    for (const FeatureEdit e : {FeatureEdit{j, EditMode::Set, 1.3f}, FeatureEdit{j, EditMode::Delta, -0.7f},
                                FeatureEdit{j, EditMode::Scale, 0.0f}}) {
      const FeatureEdit one[] = {e};
      const InterventionOutput out = intervene(p, norm, x, one, Scope::All);
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double f = codes(i, j);
        const double f2 = e.mode == EditMode::Set ? e.value : e.mode == EditMode::Delta ? f + e.value : f * e.value;
        const Eigen::VectorXd after_n =
            (out.activations.row(i).transpose().cast<double>() - norm.mu.cast<double>()) / double(scales[i]);
        const Eigen::VectorXd diff = after_n - xn.row(i).transpose().cast<double>();
        const Eigen::VectorXd want = (f2 - f) * p.w_dec.col(j).cast<double>();
        worst = std::max(worst, (diff - want).cwiseAbs().maxCoeff());
        ++cases;
      }
    }
  }
  return {worst <= 1e-6, fmt("max |x'_n - x_n - delta * W_dec[:, j]| = %.2e over %g edits (tol 1e-6)", worst, double(cases))};
}

Outcome causal_flip() {
  std::ostringstream os;
  bool pass = true;

  // classification: class 1 iff the planted atom is present
  {
    WorldOptions wo;
    wo.planted_feature = 5;
    wo.planted_rate = 0.5;
    PlantedData data(gen_world(64, 64, 3, 0.01, 77, wo), 60000);
    TrainOptions o;
    o.log_every = 1000;
    const auto sae = train(data.store, {desk(0.1, 1e-3, 128, 2000)}, o)[0].checkpoint;
    const Recovery rec = dictionary_recovery(sae.params.w_dec, data.world.dictionary);
    const auto jstar = static_cast<std::uint32_t>(rec.match[5]);
    const double jcos = data.world.dictionary.col(5).cast<double>().dot(sae.params.w_dec.col(jstar).cast<double>());

    const SyntheticSamples train_set = gen_samples(data.world, 60000);
    auto [head, report] = train_cls_head(train_set.x, train_set.labels, 2, HeadTrainConfig::classification());
    const ExemplarIndex idx = build_index(data.store, sae.params, sae.normalizer, {});
    const FeatureEdit edit[] = {suppress(jstar, idx.summary[jstar].max_activation)};

    const SyntheticSamples held = gen_samples(data.world, 5000, 1'000'000);
    RowMatrix xn = held.x;
    Eigen::VectorXf scales;
    normalize_rows(sae.normalizer, xn, scales);
    const RowMatrix codes = encode_rows<float>(sae.params, xn);
    const auto before = argmax_rows(head.logits(held.x));
    const auto after = argmax_rows(head.logits(intervene(sae.params, sae.normalizer, held.x, edit, Scope::All).activations));
    int eligible = 0, flipped = 0;
    for (std::size_t i = 0; i < held.labels.size(); ++i) {
      if (held.labels[i] != 1 || before[i] != 1 || codes(static_cast<Eigen::Index>(i), jstar) <= 0) continue;
      ++eligible;
      flipped += after[i] == 0;
    }
    const double rate = eligible ? double(flipped) / eligible : 0.0;
    pass &= eligible > 0 && rate >= 0.9;
    os << fmt("cls: feature %g (cos %.3f), head acc %.3f, flipped %.3f of ", jstar, jcos, report.train_accuracy, rate)
       << eligible << " eligible";
  }

  // segmentation: suppress the region atom's feature on every patch
  {
    PlantedWorld world = gen_world(64, 64, 3, 0.01, 91);
    SegWorldOptions so;
    so.grid = 8;
    so.region_feature = 9;
    const SegSamples tr = gen_seg_samples(world, 800, so);
    TempDir dir;
    write_shard(dir / "seg.bin", tr.patches, 64, {});
    const auto store = ActivationStore::open(dir.path());
    TrainOptions o;
    o.log_every = 1000;
    const auto sae = train(store, {desk(0.1, 1e-3, 128, 2000)}, o)[0].checkpoint;
    const auto jr = static_cast<std::uint32_t>(dictionary_recovery(sae.params.w_dec, world.dictionary).match[9]);

    HeadTrainConfig hc = HeadTrainConfig::segmentation();
    hc.epochs = 50;
    auto [head, report] = train_seg_head(tr.patches, tr.labels, 2, hc);
    const ExemplarIndex idx = build_index(store, sae.params, sae.normalizer, {});
    const FeatureEdit edit[] = {suppress(jr, idx.summary[jr].max_activation)};

    const SegSamples held = gen_seg_samples(world, 200, so, 100000);
    const auto before = argmax_rows(head.logits(held.patches));
    const auto after =
        argmax_rows(head.logits(intervene(sae.params, sae.normalizer, held.patches, edit, Scope::All).activations));
    int region = 0, region_changed = 0, other = 0, other_changed = 0;
    for (std::size_t i = 0; i < held.labels.size(); ++i) {
      if (held.labels[i] == 1) {
        if (before[i] != 1) continue;
        ++region;
        region_changed += after[i] != before[i];
      } else {
        ++other;
        other_changed += after[i] != before[i];
      }
    }
    const double r_rate = region ? double(region_changed) / region : 0.0;
    const double o_rate = other ? double(other_changed) / other : 1.0;
    pass &= region > 0 && r_rate >= 0.9 && o_rate <= 0.05;
    os << fmt("; seg: feature %g, head acc %.3f, region changed %.3f, other changed %.4f", jr, report.train_accuracy,
              r_rate, o_rate);
  }
  return {pass, os.str()};
}

Outcome exemplar_exactness() {
  TempDir dir;
  // 10^4 patches over 3 shards; every fifth image repeats an earlier one to force ties
  RowMatrix rows = testutil::random_rows(10000, 16, 12);
  for (int img = 0; img < 625; img += 5)
    if (img >= 5) rows.middleRows(img * 16, 16) = RowMatrix(rows.middleRows((img - 5) * 16, 16));
  write_shard(dir / "a.bin", RowMatrix(rows.topRows(3200)), 16, {"m", 0, "ds", 0, 0});
  write_shard(dir / "b.bin", RowMatrix(rows.middleRows(3200, 4800)), 16, {"m", 0, "ds", 1, 3200});
  write_shard(dir / "c.bin", RowMatrix(rows.bottomRows(2000)), 16, {"m", 0, "ds", 2, 8000});
  const auto store = ActivationStore::open(dir.path());
  Normalizer norm{Eigen::VectorXf::Constant(16, 0.1f), Normalizer::kDefaultEps, 0};
  SaeParams p = init_params(16, 64, norm, 3);
  p.b_enc.setConstant(-0.02f);

  RowMatrix x = store.read_range(0, store.n_rows());
  Eigen::VectorXf scales;
  normalize_rows(norm, x, scales);
  const RowMatrix codes = encode_rows<float>(p, x);
  int mismatched = 0;
  std::size_t ties = 0;
  for (std::uint32_t k : {1u, 10u, 128u}) {
    IndexOptions o;
    o.k = k;
    o.rows_per_task = 999;
    const ExemplarIndex idx = build_index(store, p, norm, o);
    for (int j = 0; j < 64; ++j) {
      std::vector<Exemplar> all;
      for (Eigen::Index r = 0; r < codes.rows(); ++r)
        if (codes(r, j) > 0) all.push_back({store.ref(static_cast<std::uint64_t>(r)), codes(r, j)});
      std::sort(all.begin(), all.end(), [](const Exemplar& a, const Exemplar& b) {
        if (a.activation != b.activation) return a.activation > b.activation;
        if (a.ref.image_id != b.ref.image_id) return a.ref.image_id < b.ref.image_id;
        return a.ref.patch_idx < b.ref.patch_idx;
      });
      if (all.size() > k) all.resize(k);
      for (std::size_t i = 1; i < all.size(); ++i) ties += all[i].activation == all[i - 1].activation;
      mismatched += idx.exemplars[static_cast<std::size_t>(j)] != all;
    }
  }
  return {mismatched == 0, fmt("%g of 192 (feature, k) lists differ from brute force; %g tied neighbours checked",
                               double(mismatched), double(ties))};
}

Outcome miou_oracle() {
  bool ok = true;
  const std::vector<std::int32_t> gt{0, 0, 1, 1}, zeros(4, 0);
  const double perfect = *miou(gt, gt, 2), half = *miou(zeros, gt, 2);
  ok &= perfect == 1.0 && half == 0.25;

  const float a = 1.0f, b = 3.0f, c = 5.0f, d = 11.0f;
  const std::vector<float> plane{a, b, c, d};
  const auto up4 = upsample_bilinear(plane, 2, 2, 4, 4);
  // half-pixel centers sample the 2x2 plane at -0.25, 0.25, 0.75, 1.25 (clamped)
  const double w[4][2] = {{1, 0}, {0.75, 0.25}, {0.25, 0.75}, {0, 1}};
  double worst = 0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double want = w[y][0] * (w[x][0] * a + w[x][1] * b) + w[y][1] * (w[x][0] * c + w[x][1] * d);
      worst = std::max(worst, std::abs(up4[static_cast<std::size_t>(y * 4 + x)] - want));
    }
  // an odd output size lands exactly on the midpoints between cells
  const auto up3 = upsample_bilinear(plane, 2, 2, 3, 3);
  worst = std::max(worst, std::abs(up3[1] - (a + b) / 2.0));
  worst = std::max(worst, std::abs(up3[3] - (a + c) / 2.0));
  worst = std::max(worst, std::abs(up3[4] - (a + b + c + d) / 4.0));
  ok &= worst <= 1e-6;
  return {ok, fmt("perfect %.4f, half/half vs all-zero %.4f, bilinear max error %.2e (tol 1e-6)", perfect, half, worst)};
}

template <typename F>
bool rejects(F&& f) {
  try {
    f();
  } catch (const FormatError&) {
    return true;
  } catch (const IoError&) {
    return true;
  }
  return false;
}

Outcome format_round_trips() {
  TempDir dir;
  int ok = 0, total = 0;
  auto tally = [&](bool b) {
    ok += b;
    ++total;
  };
  auto corrupt = [](const fs::path& src, const fs::path& dst, bool truncate) {
    std::string bytes = testutil::slurp(src);
    if (truncate) bytes.resize(bytes.size() - 3);
    else bytes[1] ^= 0x20;
    testutil::spit(dst, bytes);
  };

  // shard
  fs::create_directories(dir / "s1");
  fs::create_directories(dir / "s2");
  const RowMatrix rows = testutil::random_rows(300, 12, 4);
  write_shard(dir / "s1" / "a.bin", rows, 3, {"m", 11, "ds", 0, 0});
  const auto store = ActivationStore::open(dir / "s1");
  write_shard(dir / "s2" / "a.bin", store.read_range(0, 300), 3, {"m", 11, "ds", 0, 0});
  tally(testutil::slurp(dir / "s1" / "a.bin") == testutil::slurp(dir / "s2" / "a.bin"));
  for (bool t : {false, true}) {
    const fs::path bad = dir / (t ? "st" : "sm");
    fs::create_directories(bad);
    corrupt(dir / "s1" / "a.bin", bad / "a.bin", t);
    fs::copy_file(dir / "s1" / "a.json", bad / "a.json");
    tally(rejects([&] { ActivationStore::open(bad); }));
  }

  // SAE checkpoint
  SaeCheckpoint ck;
  ck.normalizer = Normalizer{Eigen::VectorXf::LinSpaced(12, -1, 1), Normalizer::kDefaultEps, 300};
  ck.params = init_params(12, 40, ck.normalizer, 1);
  ck.config = desk(8e-4, 1e-3, 40, 10).to_json();
  save_checkpoint(dir / "m.sae", ck);
  tally(serialize_checkpoint(load_checkpoint(dir / "m.sae")) == testutil::slurp(dir / "m.sae"));
  for (bool t : {false, true}) {
    corrupt(dir / "m.sae", dir / "bad.sae", t);
    tally(rejects([&] { load_checkpoint(dir / "bad.sae"); }));
  }

  // head checkpoint
  LinearHead head = LinearHead::zeros(HeadKind::Segmentation, 5, 12);
  head.w.setRandom();
  head.b.setRandom();
  save_head(dir / "h.head", head);
  tally(serialize_head(load_head(dir / "h.head")) == testutil::slurp(dir / "h.head"));
  for (bool t : {false, true}) {
    corrupt(dir / "h.head", dir / "bad.head", t);
    tally(rejects([&] { load_head(dir / "bad.head"); }));
  }

  // exemplar index
  IndexOptions io;
  io.k = 8;
  ExemplarIndex idx = build_index(store, ck.params, ck.normalizer, io);
  idx.save(dir / "i.idx");
  ExemplarIndex::load(dir / "i.idx").save(dir / "j.idx");
  tally(testutil::slurp(dir / "i.idx") == testutil::slurp(dir / "j.idx"));
  for (bool t : {false, true}) {
    corrupt(dir / "i.idx", dir / "bad.idx", t);
    fs::copy_file(dir / "i.idx.json", dir / "bad.idx.json", fs::copy_options::overwrite_existing);
    tally(rejects([&] { ExemplarIndex::load(dir / "bad.idx"); }));
  }
  return {ok == total, fmt("%g/%g round-trip and corruption checks (shard, sae, head, index)", double(ok), double(total))};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> expected;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--expect-fail" && i + 1 < argc) {
      expected.push_back(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: acceptance [--expect-fail NAME]...\n");
      return 2;
    }
  }
  criterion("gradient-correctness", 5, gradient_check);
  criterion("constraint-invariants", 30, constraint_invariants);
  criterion("warmup-exactness", 1, warmup_exactness);
  criterion("dictionary-recovery", 300, dictionary_recovery_run);
  criterion("sparsity-frontier", 900, sparsity_frontier);
  criterion("intervention-noop-identity", 5, noop_identity);
  criterion("single-feature-footprint", 1, single_feature_footprint);
  criterion("causal-flip", 600, causal_flip);
  criterion("exemplar-exactness", 30, exemplar_exactness);
  criterion("miou-oracle", 1, miou_oracle);
  criterion("format-round-trips", 5, format_round_trips);
  int unexpected = 0;
  for (const auto& name : failed) {
    const bool known = std::find(expected.begin(), expected.end(), name) != expected.end();
    unexpected += !known;
    if (known) std::printf("expected failure: %s\n", name.c_str());
  }
  for (const auto& name : expected)
    if (std::find(failed.begin(), failed.end(), name) == failed.end())
      std::printf("note: %s was expected to fail but passed\n", name.c_str());
  std::printf("%zu of 11 criteria failed (%d unexpected)\n", failed.size(), unexpected);
  return unexpected == 0 ? 0 : 1;
}
