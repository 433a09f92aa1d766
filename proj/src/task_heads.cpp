#include "saev/task_heads.hpp"

#include "saev/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace saev {

using json = nlohmann::json;

std::string_view to_string(HeadKind kind) {
  return kind == HeadKind::Classification ? "classification" : "segmentation";
}

LinearHead LinearHead::zeros(HeadKind kind, int classes, int dim) {
  if (classes < 1 || dim < 1) throw ArgumentError("head: classes and dim must be >= 1");
  return {kind, Eigen::MatrixXf::Zero(classes, dim), Eigen::VectorXf::Zero(classes), json::object()};
}

RowMatrix LinearHead::logits(const RowMatrix& x) const {
  if (x.cols() != dim())
    throw ArgumentError("head: input dimension " + std::to_string(x.cols()) + " != " + std::to_string(dim()));
  RowMatrix out = x * w.transpose();
  out.rowwise() += b.transpose();
  return out;
}

RowMatrix softmax_rows(const RowMatrix& logits) {
  RowMatrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Eigen::RowVectorXd z = logits.row(i).cast<double>();
    const Eigen::RowVectorXd e = (z.array() - z.maxCoeff()).exp();
    p.row(i) = (e / e.sum()).cast<float>();
  }
  return p;
}

std::vector<std::int32_t> argmax_rows(const RowMatrix& m) {
  std::vector<std::int32_t> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index j = 0;
    m.row(i).maxCoeff(&j);
    out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(j);
  }
  return out;
}

json HeadTrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"weight_decay", weight_decay}, {"seed", seed},
          {"optimizer", "adamw"}};
}

namespace {

std::pair<LinearHead, HeadTrainReport> train_softmax(HeadKind kind, const RowMatrix& x,
                                                     std::span<const std::int32_t> labels, int classes,
                                                     const HeadTrainConfig& cfg, bool allow_ignore) {
  if (x.rows() == 0) throw ArgumentError("head training: empty dataset");
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ArgumentError("head training: label count mismatch");
  if (classes < 1) throw ArgumentError("head training: classes must be >= 1");
  if (cfg.epochs < 0 || cfg.batch_size == 0) throw ArgumentError("head training: bad epochs/batch_size");
  std::size_t usable = 0;
  for (auto y : labels) {
    if (allow_ignore && y == kIgnoreLabel) continue;
    if (y < 0 || y >= classes) throw ArgumentError("head training: label " + std::to_string(y) + " out of range");
    ++usable;
  }
  if (usable == 0) throw ArgumentError("head training: every label is ignored");

  LinearHead head = LinearHead::zeros(kind, classes, static_cast<int>(x.cols()));
  head.config = cfg.to_json();
  Adam opt({0.9, 0.999, 1e-8, cfg.weight_decay},
           {static_cast<std::size_t>(head.w.size()), static_cast<std::size_t>(head.b.size())});

  HeadTrainReport report;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 rng(cfg.seed);
  RowMatrix xb;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Eigen::Index> rows;
      for (std::size_t i = start; i < end; ++i)
        if (labels[static_cast<std::size_t>(order[i])] != kIgnoreLabel) rows.push_back(order[i]);
      if (rows.empty()) continue;
      xb.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) xb.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);

      RowMatrix p = softmax_rows(head.logits(xb));
      const float inv_m = 1.0f / static_cast<float>(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto y = labels[static_cast<std::size_t>(rows[i])];
        loss_sum -= std::log(std::max(static_cast<double>(p(static_cast<Eigen::Index>(i), y)), 1e-30));
        p(static_cast<Eigen::Index>(i), y) -= 1.0f;
      }
      p *= inv_m;
      Eigen::MatrixXf gw = p.transpose() * xb;
      Eigen::VectorXf gb = p.colwise().sum().transpose();
      const std::span<float> params[] = {flat(head.w), flat(head.b)};
      const std::span<const float> grads[] = {flat(gw), flat(gb)};
      opt.step(params, grads, cfg.lr);
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(usable));
  }
  report.train_accuracy = accuracy(head, x, labels);
  return {std::move(head), std::move(report)};
}

}  // namespace

double accuracy(const LinearHead& head, const RowMatrix& x, std::span<const std::int32_t> labels) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ArgumentError("accuracy: label count mismatch");
  const auto pred = argmax_rows(head.logits(x));
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    ++total;
    hit += pred[i] == labels[i];
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

std::pair<LinearHead, HeadTrainReport> train_cls_head(const RowMatrix& features, std::span<const std::int32_t> labels,
                                                      int classes, const HeadTrainConfig& cfg,
                                                      std::optional<LabeledSet> validation) {
  auto result = train_softmax(HeadKind::Classification, features, labels, classes, cfg, false);
  if (validation && validation->x) result.second.val_accuracy = accuracy(result.first, *validation->x, validation->labels);
  return result;
}

std::pair<LinearHead, HeadTrainReport> train_seg_head(const RowMatrix& patch_features,
                                                      std::span<const std::int32_t> labels, int classes,
                                                      const HeadTrainConfig& cfg) {
  return train_softmax(HeadKind::Segmentation, patch_features, labels, classes, cfg, true);
}

SegPrediction predict_seg(const LinearHead& head, const RowMatrix& x, int grid) {
  if (grid < 1 || x.rows() != static_cast<Eigen::Index>(grid) * grid)
    throw ArgumentError("predict_seg: expected " + std::to_string(grid * grid) + " patch rows, got " +
                        std::to_string(x.rows()));
  SegPrediction out;
  out.grid = grid;
  out.logits = head.logits(x);
  out.labels = argmax_rows(out.logits);
  return out;
}

std::vector<std::int32_t> upsample_replicate(std::span<const std::int32_t> labels, int grid, int patch_px) {
  if (labels.size() != static_cast<std::size_t>(grid) * grid) throw ArgumentError("upsample_replicate: shape mismatch");
  if (patch_px < 1) throw ArgumentError("upsample_replicate: patch_px must be >= 1");
  const int side = grid * patch_px;
  std::vector<std::int32_t> out(static_cast<std::size_t>(side) * side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      out[static_cast<std::size_t>(y) * side + x] = labels[static_cast<std::size_t>(y / patch_px) * grid + x / patch_px];
  return out;
}

std::vector<float> upsample_bilinear(std::span<const float> plane, int in_h, int in_w, int out_h, int out_w) {
  if (in_h < 1 || in_w < 1 || out_h < 1 || out_w < 1) throw ArgumentError("upsample_bilinear: empty shape");
  if (plane.size() != static_cast<std::size_t>(in_h) * in_w) throw ArgumentError("upsample_bilinear: shape mismatch");
  auto source = [](int dst, int in, int out, int& i0, int& i1, double& frac) {
    double src = (dst + 0.5) * static_cast<double>(in) / out - 0.5;
    if (src < 0) src = 0;
    i0 = std::min(static_cast<int>(src), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    frac = src - i0;
  };
  std::vector<float> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    int y0, y1;
    double fy;
    source(y, in_h, out_h, y0, y1, fy);
    for (int x = 0; x < out_w; ++x) {
      int x0, x1;
      double fx;
      source(x, in_w, out_w, x0, x1, fx);
      auto at = [&](int r, int c) { return static_cast<double>(plane[static_cast<std::size_t>(r) * in_w + c]); };
      const double top = (1 - fx) * at(y0, x0) + fx * at(y0, x1);
      const double bot = (1 - fx) * at(y1, x0) + fx * at(y1, x1);
      out[static_cast<std::size_t>(y) * out_w + x] = static_cast<float>((1 - fy) * top + fy * bot);
    }
  }
  return out;
}

std::vector<std::int32_t> upsample_logits_argmax(const SegPrediction& pred, int out_h, int out_w) {
  const int classes = static_cast<int>(pred.logits.cols());
  const int p = pred.grid;
  std::vector<float> best(static_cast<std::size_t>(out_h) * out_w, -std::numeric_limits<float>::infinity());
  std::vector<std::int32_t> labels(best.size(), 0);
  std::vector<float> plane(static_cast<std::size_t>(p) * p);
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < p * p; ++i) plane[static_cast<std::size_t>(i)] = pred.logits(i, c);
    const auto up = upsample_bilinear(plane, p, p, out_h, out_w);
    for (std::size_t i = 0; i < up.size(); ++i)
      if (up[i] > best[i]) {
        best[i] = up[i];
        labels[i] = c;
      }
  }
  return labels;
}

std::optional<double> miou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int classes,
                           std::int32_t ignore) {
  if (pred.size() != gt.size()) throw ArgumentError("miou: shape mismatch");
  std::vector<std::uint64_t> inter(static_cast<std::size_t>(classes), 0), uni(static_cast<std::size_t>(classes), 0);
  std::uint64_t counted = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore) continue;
    if (gt[i] < 0 || gt[i] >= classes) throw ArgumentError("miou: ground-truth label out of range");
    if (pred[i] < 0 || pred[i] >= classes) throw ArgumentError("miou: predicted label out of range");
    ++counted;
    const auto g = static_cast<std::size_t>(gt[i]), p = static_cast<std::size_t>(pred[i]);
    if (g == p) {
      ++inter[g];
      ++uni[g];
    } else {
      ++uni[g];
      ++uni[p];
    }
  }
  if (counted == 0) return std::nullopt;
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    if (uni[static_cast<std::size_t>(c)] == 0) continue;
    sum += static_cast<double>(inter[static_cast<std::size_t>(c)]) / static_cast<double>(uni[static_cast<std::size_t>(c)]);
    ++present;
  }
  return sum / present;
}

// ---------------------------------------------------------------------------

std::string serialize_head(const LinearHead& head) {
  if (head.b.size() != head.w.rows()) throw ArgumentError("head: bias size mismatch");
  std::string out(kHeadMagic, sizeof(kHeadMagic));
  auto put = [&out](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  const auto kind = static_cast<std::uint8_t>(head.kind);
  const auto c = static_cast<std::uint32_t>(head.classes());
  const auto d = static_cast<std::uint32_t>(head.dim());
  put(&kind, 1);
  put(&c, 4);
  put(&d, 4);
  const RowMatrix w = head.w;
  put(w.data(), static_cast<std::size_t>(w.size()) * sizeof(float));
  put(head.b.data(), static_cast<std::size_t>(head.b.size()) * sizeof(float));
  json trailer = head.config;
  trailer["kind"] = to_string(head.kind);
  out += trailer.dump();
  return out;
}

LinearHead parse_head(std::span<const char> bytes, const std::string& context) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kHeadMagic, 8) != 0) throw FormatError(context + ": bad magic");
  detail::ByteReader in(bytes.subspan(8), context);
  const auto kind = in.get<std::uint8_t>();
  if (kind > 1) throw FormatError(context + ": unknown head kind " + std::to_string(kind));
  const auto c = static_cast<Eigen::Index>(in.get<std::uint32_t>());
  const auto d = static_cast<Eigen::Index>(in.get<std::uint32_t>());
  if (c == 0 || d == 0) throw FormatError(context + ": zero dimension");
  if (in.remaining() < static_cast<std::size_t>(c * d + c) * sizeof(float)) throw FormatError(context + ": truncated file");
  LinearHead head;
  head.kind = static_cast<HeadKind>(kind);
  RowMatrix w(c, d);
  in.get_floats({w.data(), static_cast<std::size_t>(w.size())});
  head.w = w;
  head.b.resize(c);
  in.get_floats({head.b.data(), static_cast<std::size_t>(c)});
  const auto rest = in.rest();
  head.config = json::parse(rest.begin(), rest.end(), nullptr, false);
  if (head.config.is_discarded() || !head.config.is_object())
    throw FormatError(context + ": corrupt or truncated JSON trailer");
  head.config.erase("kind");
  if (!head.w.allFinite() || !head.b.allFinite()) throw FormatError(context + ": non-finite parameters");
  return head;
}

void save_head(const fs::path& path, const LinearHead& head) {
  detail::BinaryWriter w(path);
  w.put_bytes(serialize_head(head));
  w.close();
}

LinearHead load_head(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  return parse_head(bytes, path.filename().string());
}

}  // namespace saev
