#pragma once

// Causal edits through the SAE with the reconstruction error carried along:
//
//   f = encode(x), e = x - decode(f), f' = edit(f), x' = decode(f') + e
//
// which is algebraically x' = x + W_dec (f' - f). All of this happens in
// normalized space; the per-row scale is restored afterward.

#include "saev/sae.hpp"
#include "saev/task_heads.hpp"

#include <optional>

namespace saev {

enum class EditMode { Set, Scale, Delta };

std::optional<EditMode> parse_edit_mode(std::string_view s);
std::string_view to_string(EditMode mode);

struct FeatureEdit {
  std::uint32_t feature = 0;
  EditMode mode = EditMode::Set;
  float value = 0.0f;
};

// Parses "id:mode:value" items separated by commas, e.g. "2:set:0,7:scale:0.5".
std::vector<FeatureEdit> parse_edits(std::string_view spec);

// Default suppression: set to multiple * the feature's observed max activation.
inline constexpr float kDefaultSuppressMultiple = -1.0f;
FeatureEdit suppress(std::uint32_t feature, float max_activation, float multiple = kDefaultSuppressMultiple);

// Throws ArgumentError on duplicate ids, ids >= n, or negative scale.
void validate_edits(std::span<const FeatureEdit> edits, int n);

SparseCode apply_edits(const SparseCode& code, std::span<const FeatureEdit> edits);

enum class Scope { Selected, All };

std::optional<Scope> parse_scope(std::string_view s);

struct InterventionRequest {
  std::vector<FeatureEdit> edits;
  Scope scope = Scope::All;
  std::vector<std::uint32_t> patches;  // used when scope == Selected
  std::string head;
};

struct PatchEdit {
  std::uint32_t patch = 0;
  std::vector<FeatureValue> code_delta;  // f' - f, nonzero entries only
  float recon_error_norm = 0.0f;         // ||e|| in normalized space
};

struct InterventionOutput {
  RowMatrix activations;  // p x d raw
  std::vector<PatchEdit> patches;
};

struct InterventionOptions {
  // When false, rows are edited as-is (mu = 0, scale = 1).
  bool normalize = true;
};

// Single normalized row: returns x_n + W_dec (f' - f).
Eigen::VectorXf intervene_normalized(const SaeParams& params, const Eigen::Ref<const Eigen::VectorXf>& x_n,
                                     std::span<const FeatureEdit> edits, PatchEdit* info = nullptr);

// Rows outside the scope are copied bit-exactly.
InterventionOutput intervene(const SaeParams& params, const Normalizer& normalizer, const RowMatrix& x,
                             std::span<const FeatureEdit> edits, Scope scope,
                             std::span<const std::uint32_t> selection = {}, const InterventionOptions& options = {});

struct HeadOutput {
  RowMatrix logits;                   // rows x C (1 row for classification)
  RowMatrix probs;
  std::vector<std::int32_t> labels;   // argmax per row
};

struct InterventionResult {
  HeadOutput before;
  HeadOutput after;
  std::vector<std::uint32_t> changed;  // rows whose argmax label changed
  std::vector<PatchEdit> patches;
  RowMatrix edited;                    // x' fed to the head
};

HeadOutput run_head(const LinearHead& head, const RowMatrix& x);

// Runs the frozen head on both tensors. Classification heads take exactly one
// row ([CLS]); segmentation heads take a square grid of patch rows.
InterventionResult compare(const LinearHead& head, const RowMatrix& x, const RowMatrix& x_edited);

// Full procedure: the "before" output goes through the same path with no
// edits, so any reconstruction artifact cancels.
InterventionResult run_intervention(const SaeParams& params, const Normalizer& normalizer, const LinearHead& head,
                                    const RowMatrix& x, const InterventionRequest& request,
                                    const InterventionOptions& options = {});

}  // namespace saev
