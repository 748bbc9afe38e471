// SPDX-License-Identifier: Apache-2.0
//
// Causal experiments: layer mean ablation, neuron zeroing, head knockout and
// class-contrast activation patching, scored on the samples the unmodified
// model already classifies correctly.

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cprobe/corpus.hpp"
#include "cprobe/model.hpp"

namespace cprobe {

/// Per-layer mean activations over a set of samples. Each sample is first
/// averaged over its non-BOS positions, then samples are averaged.
struct MeanBank {
  std::string provenance;  // sample counts plus a hash of the sample ids
  std::size_t n_vulnerable = 0;
  std::size_t n_safe = 0;
  std::vector<std::vector<double>> residual;  // per layer, residual_out
  std::vector<std::vector<double>> block;     // per layer, residual_out - residual_in
  std::vector<std::vector<double>> residual_vulnerable;  // empty without vulnerable samples
  std::vector<std::vector<double>> residual_safe;        // empty without safe samples

  bool has_class_means() const noexcept { return !residual_vulnerable.empty() && !residual_safe.empty(); }
};

/// Throws DomainError for an empty view or a sample that fails the forward pass.
MeanBank build_mean_bank(const TransformerWeights& weights, const Corpus& corpus, const CorpusView& view,
                         std::size_t workers = 1);

std::string mean_bank_to_json(const MeanBank& bank);

// ---------------------------------------------------------------------------
// Intervention specs

/// Which activation a layer mean ablation overwrites at non-BOS positions.
enum class MeanSite {
  block,     // the layer's own contribution: h_out := h_in + mean(h_out - h_in)
  residual,  // the whole residual stream: h_out := mean(h_out)
};

const char* to_string(MeanSite site) noexcept;

struct NoIntervention {};
struct LayerMeanAblation {
  std::vector<std::size_t> layers;  // ablated together in one pass
  MeanSite site = MeanSite::block;
};
struct NeuronAblation {
  std::vector<NeuronId> neurons;
};
struct HeadKnockout {
  std::vector<HeadId> heads;
};

enum class PatchDirection {
  safe_to_vuln,  // safe-class mean injected into vulnerable samples
  vuln_to_safe,
};

const char* to_string(PatchDirection direction) noexcept;
std::optional<PatchDirection> parse_patch_direction(std::string_view text) noexcept;

struct ActivationPatch {
  std::size_t layer = 0;
  PatchDirection direction = PatchDirection::safe_to_vuln;
  double coefficient = 1.0;
};

using InterventionSpec = std::variant<NoIntervention, LayerMeanAblation, NeuronAblation, HeadKnockout, ActivationPatch>;

/// Short label used in report rows, e.g. "layer_mean[6,7]" or "patch[L3,safe_to_vuln,x4]".
std::string describe(const InterventionSpec& spec);

/// Throws DomainError when a target is outside the model or a coefficient is
/// not finite.
void validate(const InterventionSpec& spec, const ModelSpec& model);

/// The hooks realizing an intervention. Patches with coefficient 0 produce
/// no hooks at all. Throws DomainError when the bank lacks what the intervention needs.
Hooks make_hooks(const InterventionSpec& spec, const ModelSpec& model, const MeanBank* bank);

// ---------------------------------------------------------------------------
// Evaluation

struct BaselineRecord {
  std::size_t index = 0;  // into the corpus
  Label label = Label::safe;
  Label predicted = Label::safe;
  double margin = 0.0;
};

/// The baseline-correct samples of a view, in corpus order.
struct EvaluationSet {
  std::vector<BaselineRecord> samples;
  std::size_t view_size = 0;
  std::size_t n_vulnerable = 0;
  std::size_t n_safe = 0;
};

EvaluationSet evaluation_set(const TransformerWeights& weights, const Corpus& corpus, const CorpusView& view,
                             std::size_t workers = 1);

struct SamplePrediction {
  std::string id;
  Label label = Label::safe;
  Label baseline = Label::safe;
  Label predicted = Label::safe;
  double baseline_margin = 0.0;
  double margin = 0.0;
  bool flipped = false;
};

struct InterventionOutcome {
  std::string component;
  std::size_t n_vulnerable = 0;  // evaluated samples per class
  std::size_t n_safe = 0;
  double overall = 0.0;
  double tp_accuracy = 0.0;  // NaN when no vulnerable sample was evaluated
  double tn_accuracy = 0.0;  // NaN when no safe sample was evaluated
  double delta_overall = 0.0;
  std::optional<double> flip_rate;  // patches only
  std::vector<SamplePrediction> samples;
};

/// (tp * n_vulnerable + tn * n_safe) / (n_vulnerable + n_safe), skipping
/// classes with no samples.
double class_weighted_accuracy(double tp_accuracy, std::size_t n_vulnerable, double tn_accuracy,
                               std::size_t n_safe) noexcept;

/// Every evaluation sample under the intervention. For patches only the
/// recipient class is evaluated; see run_patching.
InterventionOutcome run_intervention(const TransformerWeights& weights, const Corpus& corpus,
                                     const EvaluationSet& eval, const InterventionSpec& spec, const MeanBank* bank,
                                     std::size_t workers = 1);

InterventionOutcome run_ablation(const TransformerWeights& weights, const Corpus& corpus, const EvaluationSet& eval,
                                 const InterventionSpec& spec, const MeanBank& bank, std::size_t workers = 1);

/// Adds coefficient * (mean_source_class - mean_recipient_class) at every
/// non-BOS position of the layer output of each recipient sample.
/// safe_to_vuln takes the vector from safe samples and injects it into
/// vulnerable ones. flip_rate is the fraction of recipients whose prediction
/// changes.
InterventionOutcome run_patching(const TransformerWeights& weights, const Corpus& corpus, const EvaluationSet& eval,
                                 const ActivationPatch& patch, const MeanBank& bank, std::size_t workers = 1);

struct PatchPoint {
  std::size_t layer = 0;
  double coefficient = 0.0;
  PatchDirection direction = PatchDirection::safe_to_vuln;
  double flip_rate = 0.0;
  std::size_t recipients = 0;
};

std::vector<double> default_patch_coefficients();

std::vector<PatchPoint> patch_sweep(const TransformerWeights& weights, const Corpus& corpus, const EvaluationSet& eval,
                                    const MeanBank& bank, std::span<const std::size_t> layers,
                                    std::span<const double> coefficients,
                                    std::span<const PatchDirection> directions, std::size_t workers = 1);

void write_outcomes_csv(std::span<const InterventionOutcome> outcomes, const std::filesystem::path& path);
void write_predictions_csv(std::span<const InterventionOutcome> outcomes, const std::filesystem::path& path);
void write_patch_sweep_csv(std::span<const PatchPoint> points, const std::filesystem::path& path);

}  // namespace cprobe
