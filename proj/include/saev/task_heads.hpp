#pragma once

// Linear probes on frozen backbone activations.
//
// Head checkpoint: magic "SAEVHEAD", kind u8, C u32, d u32, W (C x d,
// row-major) then b as float32 LE, followed by a JSON trailer (training
// config) to end of file.

#include "saev/common.hpp"

#include <json.hpp>

#include <optional>

namespace saev {

inline constexpr char kHeadMagic[8] = {'S', 'A', 'E', 'V', 'H', 'E', 'A', 'D'};
inline constexpr std::int32_t kIgnoreLabel = -1;

enum class HeadKind : std::uint8_t { Classification = 0, Segmentation = 1 };

std::string_view to_string(HeadKind kind);

struct LinearHead {
  HeadKind kind = HeadKind::Classification;
  Eigen::MatrixXf w;  // C x d
  Eigen::VectorXf b;  // C
  nlohmann::json config = nlohmann::json::object();

  int classes() const { return static_cast<int>(w.rows()); }
  int dim() const { return static_cast<int>(w.cols()); }

  static LinearHead zeros(HeadKind kind, int classes, int dim);

  // rows x C logits for rows x d inputs.
  RowMatrix logits(const RowMatrix& x) const;
};

// Row-wise softmax (numerically stabilized); each row sums to 1.
RowMatrix softmax_rows(const RowMatrix& logits);
std::vector<std::int32_t> argmax_rows(const RowMatrix& m);

struct HeadTrainConfig {
  int epochs = 20;
  std::size_t batch_size = 512;
  double lr = 1e-3;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;

  // Classification probe defaults: AdamW, 20 epochs, batch 512, lr 1e-3, wd 0.1.
  static HeadTrainConfig classification() { return {}; }
  // Segmentation probe defaults: AdamW, 400 epochs, batch 1024, constant lr.
  // lr 1e-3 / wd 1e-3 is a guess; the winning sweep pair is not published.
  static HeadTrainConfig segmentation() { return {400, 1024, 1e-3, 1e-3, 0}; }

  nlohmann::json to_json() const;
};

struct HeadTrainReport {
  std::vector<double> epoch_loss;  // mean cross-entropy over non-ignored rows
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
};

struct LabeledSet {
  const RowMatrix* x = nullptr;
  std::span<const std::int32_t> labels;
};

// Cross-entropy on W, b only (AdamW, zero init). Labels in [0, C).
std::pair<LinearHead, HeadTrainReport> train_cls_head(const RowMatrix& features, std::span<const std::int32_t> labels,
                                                      int classes, const HeadTrainConfig& cfg,
                                                      std::optional<LabeledSet> validation = std::nullopt);

// Per-patch cross-entropy; rows are patches of flattened p x p label grids,
// kIgnoreLabel cells contribute neither loss nor gradient.
std::pair<LinearHead, HeadTrainReport> train_seg_head(const RowMatrix& patch_features,
                                                      std::span<const std::int32_t> labels, int classes,
                                                      const HeadTrainConfig& cfg);

double accuracy(const LinearHead& head, const RowMatrix& x, std::span<const std::int32_t> labels);

struct SegPrediction {
  int grid = 0;               // p
  RowMatrix logits;           // (p*p) x C, raster order
  std::vector<std::int32_t> labels;  // p*p
};

// x holds p*p patch rows in raster order.
SegPrediction predict_seg(const LinearHead& head, const RowMatrix& x, int grid);

// Visualization path: each patch label covers a patch_px x patch_px block.
std::vector<std::int32_t> upsample_replicate(std::span<const std::int32_t> labels, int grid, int patch_px);

// Bilinear resize of one in_h x in_w plane with half-pixel centers
// (align_corners = false), edge-clamped.
std::vector<float> upsample_bilinear(std::span<const float> plane, int in_h, int in_w, int out_h, int out_w);

// Evaluation path: bilinear upsample of every class plane, then argmax.
std::vector<std::int32_t> upsample_logits_argmax(const SegPrediction& pred, int out_h, int out_w);

// Mean IoU over classes present in gt or pred (non-ignored pixels only).
// Returns nullopt when every pixel is ignored.
std::optional<double> miou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int classes,
                           std::int32_t ignore = kIgnoreLabel);

std::string serialize_head(const LinearHead& head);
LinearHead parse_head(std::span<const char> bytes, const std::string& context = "head checkpoint");
void save_head(const fs::path& path, const LinearHead& head);
LinearHead load_head(const fs::path& path);

}  // namespace saev
