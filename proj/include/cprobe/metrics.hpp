// SPDX-License-Identifier: Apache-2.0
//
// Discovery metrics over captured traces: the attention-head importance score
// that ranks safety-detector heads, and MLP neuron vulnerability selectivity
// with its contrastive activation matrix.

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cprobe/model.hpp"

namespace cprobe {

inline constexpr double kDefaultLambda = 0.5;
inline constexpr std::size_t kDefaultTopK = 20;

/// Default neuron layers for the full-size target model.
std::vector<std::size_t> default_neuron_layers();

using TraceRefs = std::span<const ActivationTrace* const>;

struct HeadScore {
  std::size_t layer = 0;
  std::size_t head = 0;
  double mean_max_tp = 0.0;
  double mean_max_tn = 0.0;
  double entropy_tp = 0.0;  // nats
  double entropy_tn = 0.0;
  double importance = 0.0;

  friend bool operator==(const HeadScore&, const HeadScore&) = default;
};

/// (m_tp - m_tn) + lambda * (h_tn - h_tp). Every stored importance is this
/// expression applied to the stored components.
double importance_score(double mean_max_tp, double mean_max_tn, double entropy_tp, double entropy_tn,
                        double lambda) noexcept;

/// Max weight and entropy of one attention row after dropping key 0 and
/// renormalizing. A row with no mass off key 0 is treated as uniform.
struct RowStats {
  double max_weight = 0.0;
  double entropy = 0.0;
};
RowStats masked_row_stats(std::span<const float> row);

/// All heads of the model ranked ascending by importance, ties by
/// (layer, head). Per class, row statistics are averaged over query
/// positions 1..n-1 of each sample, then over samples. Samples with no query
/// position after BOS do not contribute.
std::vector<HeadScore> head_importance(TraceRefs tp, TraceRefs tn, double lambda = kDefaultLambda,
                                       std::size_t workers = 1);

/// How a neuron's per-sample activation a_n(x) is pooled over positions.
enum class Pooling { mean, max, last };

const char* to_string(Pooling pooling) noexcept;

/// Pooled over non-BOS positions; 0 when the sample is only BOS.
double pooled_activation(const MatrixF& mlp_hidden, std::size_t neuron, Pooling pooling = Pooling::mean);

struct NeuronScore {
  std::size_t layer = 0;
  std::size_t neuron = 0;
  double mean_act_vul = 0.0;
  double mean_act_safe = 0.0;
  double selectivity = 0.0;

  friend bool operator==(const NeuronScore&, const NeuronScore&) = default;
};

struct ContrastiveMatrix {
  std::vector<NeuronId> neurons;        // rows
  std::vector<std::string> sample_ids;  // columns: vulnerable first, then safe
  std::size_t n_vulnerable = 0;
  MatrixD values;                       // [neurons x samples]
};

struct SelectivityResult {
  std::vector<NeuronScore> ranked;  // every neuron in the chosen layers, S descending
  std::vector<NeuronScore> top;     // first k of ranked
  ContrastiveMatrix matrix;
};

struct SelectivityOptions {
  std::vector<std::size_t> layers = default_neuron_layers();
  std::size_t k = kDefaultTopK;
  Pooling pooling = Pooling::mean;
  std::size_t workers = 1;
};

SelectivityResult neuron_selectivity(TraceRefs vulnerable, TraceRefs safe, const SelectivityOptions& options = {});

struct RowSeparation {
  NeuronId neuron;
  double mean_difference = 0.0;
  double auc = 0.0;
};

struct BoundaryReport {
  std::vector<RowSeparation> rows;
  double mean_difference = 0.0;
  double mean_auc = 0.0;
};

/// Probability that a random vulnerable value exceeds a random safe one,
/// ties counted as one half.
double auc(std::span<const double> vulnerable, std::span<const double> safe);

BoundaryReport boundary_check(const ContrastiveMatrix& matrix);

void write_head_scores_csv(std::span<const HeadScore> scores, const std::filesystem::path& path);
void write_neuron_scores_csv(std::span<const NeuronScore> scores, const std::filesystem::path& path);
/// Header row: "neuron" then the sample ids; one row per neuron as "L<layer>.N<index>".
void write_contrastive_csv(const ContrastiveMatrix& matrix, const std::filesystem::path& path);
void write_boundary_csv(const BoundaryReport& report, const std::filesystem::path& path);

}  // namespace cprobe
