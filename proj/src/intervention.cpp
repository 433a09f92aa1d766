#include "saev/intervention.hpp"

#include <charconv>
#include <cmath>
#include <unordered_set>

namespace saev {

std::optional<EditMode> parse_edit_mode(std::string_view s) {
  if (s == "set") return EditMode::Set;
  if (s == "scale") return EditMode::Scale;
  if (s == "delta") return EditMode::Delta;
  return std::nullopt;
}

std::string_view to_string(EditMode mode) {
  switch (mode) {
    case EditMode::Set:
      return "set";
    case EditMode::Scale:
      return "scale";
    case EditMode::Delta:
      return "delta";
  }
  return "?";
}

std::optional<Scope> parse_scope(std::string_view s) {
  if (s == "all") return Scope::All;
  if (s == "selected") return Scope::Selected;
  return std::nullopt;
}

std::vector<FeatureEdit> parse_edits(std::string_view spec) {
  std::vector<FeatureEdit> edits;
  while (!spec.empty()) {
    const auto comma = spec.find(',');
    const std::string_view item = spec.substr(0, comma);
    spec = comma == std::string_view::npos ? std::string_view{} : spec.substr(comma + 1);
    if (item.empty()) continue;

    const auto c1 = item.find(':');
    const auto c2 = c1 == std::string_view::npos ? c1 : item.find(':', c1 + 1);
    if (c2 == std::string_view::npos) throw ArgumentError("bad edit '" + std::string(item) + "': expected id:mode:value");
    FeatureEdit e;
    const auto id = item.substr(0, c1);
    if (std::from_chars(id.data(), id.data() + id.size(), e.feature).ec != std::errc{} || id.empty())
      throw ArgumentError("bad edit feature id '" + std::string(id) + "'");
    const auto mode = parse_edit_mode(item.substr(c1 + 1, c2 - c1 - 1));
    if (!mode) throw ArgumentError("bad edit mode in '" + std::string(item) + "'");
    e.mode = *mode;
    const std::string value(item.substr(c2 + 1));
    try {
      std::size_t used = 0;
      e.value = std::stof(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw ArgumentError("bad edit value '" + value + "'");
    }
    edits.push_back(e);
  }
  return edits;
}

FeatureEdit suppress(std::uint32_t feature, float max_activation, float multiple) {
  return {feature, EditMode::Set, multiple * max_activation};
}

void validate_edits(std::span<const FeatureEdit> edits, int n) {
  std::unordered_set<std::uint32_t> seen;
  for (const auto& e : edits) {
    if (e.feature >= static_cast<std::uint32_t>(n))
      throw ArgumentError("edit feature id " + std::to_string(e.feature) + " out of range [0," + std::to_string(n) + ")");
    if (!seen.insert(e.feature).second) throw ArgumentError("duplicate edit for feature " + std::to_string(e.feature));
    if (!std::isfinite(e.value)) throw ArgumentError("edit value must be finite");
    if (e.mode == EditMode::Scale && e.value < 0.0f) throw ArgumentError("scale edits require value >= 0");
  }
}

SparseCode apply_edits(const SparseCode& code, std::span<const FeatureEdit> edits) {
  validate_edits(edits, static_cast<int>(code.size()));
  SparseCode out = code;
  for (const auto& e : edits) {
    float& f = out[e.feature];
    switch (e.mode) {
      case EditMode::Set:
        f = e.value;
        break;
      case EditMode::Scale:
        f = e.value * f;
        break;
      case EditMode::Delta:
        f = f + e.value;
        break;
    }
  }
  return out;
}

namespace {

// Returns W_dec (f' - f) for one normalized row, or nullopt when the edit
// leaves the code unchanged.
std::optional<Eigen::VectorXd> edit_direction(const SaeParams& params, const Eigen::Ref<const Eigen::VectorXf>& x_n,
                                              std::span<const FeatureEdit> edits, PatchEdit* info) {
  const SparseCode f = encode<float>(params, x_n);
  if (info) info->recon_error_norm = (x_n - decode<float>(params, f)).norm();
  const SparseCode f_edit = apply_edits(f, edits);
  Eigen::VectorXd dir = Eigen::VectorXd::Zero(params.d());
  bool any = false;
  for (Eigen::Index j = 0; j < f.size(); ++j) {
    const float delta = f_edit[j] - f[j];
    if (delta == 0.0f) continue;
    any = true;
    dir += static_cast<double>(delta) * params.w_dec.col(j).cast<double>();
    if (info) info->code_delta.push_back({static_cast<std::uint32_t>(j), delta});
  }
  if (!any) return std::nullopt;
  return dir;
}

}  // namespace

Eigen::VectorXf intervene_normalized(const SaeParams& params, const Eigen::Ref<const Eigen::VectorXf>& x_n,
                                     std::span<const FeatureEdit> edits, PatchEdit* info) {
  if (x_n.size() != params.d()) throw ArgumentError("intervene: dimension mismatch");
  const auto dir = edit_direction(params, x_n, edits, info);
  if (!dir) return x_n;
  return (x_n.cast<double>() + *dir).cast<float>();
}

InterventionOutput intervene(const SaeParams& params, const Normalizer& normalizer, const RowMatrix& x,
                             std::span<const FeatureEdit> edits, Scope scope, std::span<const std::uint32_t> selection,
                             const InterventionOptions& options) {
  if (x.cols() != params.d()) throw ArgumentError("intervene: dimension mismatch");
  if (!x.allFinite()) throw ArgumentError("intervene: non-finite activations");
  validate_edits(edits, params.n());

  std::vector<bool> in_scope(static_cast<std::size_t>(x.rows()), scope == Scope::All);
  if (scope == Scope::Selected) {
    if (selection.empty()) throw ArgumentError("intervene: selected scope requires a nonempty patch selection");
    for (auto p : selection) {
      if (p >= static_cast<std::uint32_t>(x.rows())) throw ArgumentError("intervene: patch index out of range");
      in_scope[p] = true;
    }
  }

  InterventionOutput out;
  out.activations = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (!in_scope[static_cast<std::size_t>(i)]) continue;
    PatchEdit info;
    info.patch = static_cast<std::uint32_t>(i);
    const Eigen::VectorXf raw = x.row(i).transpose();
    Eigen::VectorXf x_n;
    double scale = 1.0;
    if (options.normalize) {
      Normalized nr = normalize(normalizer, {raw.data(), static_cast<std::size_t>(raw.size())});
      x_n = std::move(nr.x);
      scale = nr.scale;
    } else {
      x_n = raw;
    }
    // denormalize(x_n + dir, s) == x_raw + s * dir
    if (const auto dir = edit_direction(params, x_n, edits, &info))
      out.activations.row(i) = (raw.cast<double>() + scale * *dir).cast<float>().transpose();
    out.patches.push_back(std::move(info));
  }
  return out;
}

HeadOutput run_head(const LinearHead& head, const RowMatrix& x) {
  HeadOutput out;
  out.logits = head.logits(x);
  out.probs = softmax_rows(out.logits);
  out.labels = argmax_rows(out.logits);
  return out;
}

InterventionResult compare(const LinearHead& head, const RowMatrix& x, const RowMatrix& x_edited) {
  if (x.rows() != x_edited.rows() || x.cols() != x_edited.cols()) throw ArgumentError("compare: shape mismatch");
  if (x.cols() != head.dim()) throw ArgumentError("compare: head expects d=" + std::to_string(head.dim()));
  if (head.kind == HeadKind::Classification && x.rows() != 1)
    throw ArgumentError("compare: classification heads take a single [CLS] row");
  if (head.kind == HeadKind::Segmentation) {
    const auto p = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(x.rows()))));
    if (p * p != x.rows()) throw ArgumentError("compare: segmentation input is not a square patch grid");
  }
  InterventionResult r;
  r.before = run_head(head, x);
  r.after = run_head(head, x_edited);
  for (std::size_t i = 0; i < r.before.labels.size(); ++i)
    if (r.before.labels[i] != r.after.labels[i]) r.changed.push_back(static_cast<std::uint32_t>(i));
  r.edited = x_edited;
  return r;
}

InterventionResult run_intervention(const SaeParams& params, const Normalizer& normalizer, const LinearHead& head,
                                    const RowMatrix& x, const InterventionRequest& request,
                                    const InterventionOptions& options) {
  const auto baseline = intervene(params, normalizer, x, {}, request.scope, request.patches, options);
  auto edited = intervene(params, normalizer, x, request.edits, request.scope, request.patches, options);
  InterventionResult r = compare(head, baseline.activations, edited.activations);
  r.patches = std::move(edited.patches);
  return r;
}

}  // namespace saev
