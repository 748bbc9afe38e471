// SPDX-License-Identifier: Apache-2.0
//
// Hand-constructed transformers with a known circuit, matching synthetic
// corpora, and brute-force reference computations for the analysis modules.
//
// The planted circuit uses seven reserved residual dimensions:
//   0 constant (1 in every token embedding)   1 safety marker
//   2 trigger marker                          3 safety-head output
//   4 mover-head output                       5 vulnerability-neuron output
//   6 decision signal read by the unembedding
// The safety head copies the safety marker into dim 3; a second head copies
// the trigger into dim 4; the vulnerability neuron fires on dim 4 and writes
// dim 5; a pair of decision neurons computes (dim5 - dim3 - bias) linearly
// into dim 6. Without either signal the decision leans safe.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cprobe/corpus.hpp"
#include "cprobe/metrics.hpp"
#include "cprobe/model.hpp"

namespace cprobe {

struct PlantedCircuitSpec {
  std::string name;
  ModelSpec model;
  HeadId safety_head;
  HeadId mover_head;
  NeuronId vuln_neuron;
  std::size_t decision_layer = 0;
  std::array<std::size_t, 2> decision_neurons{};  // (positive, negative) in decision_layer
  TokenId safety_token = '$';
  TokenId trigger_token = '#';
  double noise = 0.01;

  /// Layers hosting no planted component.
  std::vector<std::size_t> noise_layers() const;

  /// Throws ValidationError when the circuit cannot be built in this model.
  void validate() const;
};

inline constexpr std::string_view kDefaultPreset = "safety-head-v1";

/// Seeds the planted-recovery checks are documented against.
inline constexpr std::array<std::uint64_t, 10> kPresetSeeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

std::vector<std::string> preset_names();
/// Throws DomainError for an unknown name.
PlantedCircuitSpec planted_preset(std::string_view name);

/// Noise parameters are N(0, noise) (norm scales 1 + noise) drawn from
/// the seed; planted entries are then written over them.
TransformerWeights build_planted_model(const PlantedCircuitSpec& spec, std::uint64_t seed);

struct SyntheticSample {
  bool has_safety = false;
  bool has_trigger = false;
  std::size_t marker_position = 0;  // token index (BOS is 0)
};

struct SyntheticCorpus {
  Corpus samples;  // tokenized; vulnerable first, then safe
  std::vector<SyntheticSample> truth;
};

/// n_per_class samples of each label. Bodies are 16 to 40 filler bytes with
/// one marker placed in the first third; vulnerable samples carry the
/// trigger and cycle through three CWE tags, safe samples carry the safety
/// marker and no tag.
SyntheticCorpus generate_corpus(const PlantedCircuitSpec& spec, std::size_t n_per_class, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Reference computations. These are deliberately naive loops written
// without the trace, metrics or attribution code so they can check it.

namespace oracle {

/// Entries of mlp_out (or mlp_hidden) above the threshold, BOS row skipped.
std::vector<std::uint64_t> l0_counts(const ActivationTrace& trace, double threshold, bool use_hidden = false);

/// Head scores in (layer, head) order (unsorted).
std::vector<HeadScore> head_scores(std::span<const ActivationTrace* const> tp,
                                   std::span<const ActivationTrace* const> tn, double lambda);

/// Mean-pooled selectivity of every neuron in the given layers, in
/// (layer, neuron) order (unsorted).
std::vector<NeuronScore> selectivities(std::span<const ActivationTrace* const> vulnerable,
                                       std::span<const ActivationTrace* const> safe,
                                       std::span<const std::size_t> layers);

struct NodeContribution {
  Site site = Site::mlp_hidden;
  std::size_t layer = 0;
  std::size_t index = 0;
  double contribution = 0.0;  // margin minus margin with the node zeroed
};

/// One zero-ablation forward pass per head and neuron.
std::vector<NodeContribution> margin_contributions(const TransformerWeights& weights,
                                                   std::span<const TokenId> tokens);

struct Table {
  std::vector<HeadScore> heads;        // ascending importance, ties by (layer, head)
  std::vector<NeuronScore> neurons;    // descending selectivity over all layers
  std::vector<std::vector<std::uint64_t>> l0;  // per sample in corpus order
  std::vector<NodeContribution> contributions;  // for the first vulnerable sample
};

/// Brute-force ground truth over a synthetic corpus: head scores on correctly
/// classified samples, selectivity over every layer, L0 per sample.
Table oracle_scores(const PlantedCircuitSpec& spec, const SyntheticCorpus& corpus, const TransformerWeights& weights,
                    double lambda = kDefaultLambda, double l0_threshold = 1e-6);

}  // namespace oracle

}  // namespace cprobe
