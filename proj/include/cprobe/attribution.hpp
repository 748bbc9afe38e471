// SPDX-License-Identifier: Apache-2.0
//
// Input-times-gradient circuit tracing toward the classification margin.
// Nodes are attention heads and MLP hidden neurons; edges join active nodes
// in adjacent layers.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cprobe/model.hpp"

namespace cprobe {

inline constexpr double kDefaultAttributionThreshold = 0.01;
inline constexpr double kDefaultEdgeThreshold = 0.01;

struct AttributionNode {
  Site site = Site::mlp_hidden;
  std::size_t layer = 0;
  std::size_t index = 0;
  double raw = 0.0;    // sum over positions of activation x margin gradient
  double score = 0.0;  // raw / max |raw| over all nodes
  bool active = false;

  friend bool operator==(const AttributionNode&, const AttributionNode&) = default;
};

/// Node label such as "L3.H1" or "L2.N37".
std::string node_name(const AttributionNode& node);

struct AttributionEdge {
  std::size_t src = 0;  // indices into AttributionGraph::nodes
  std::size_t dst = 0;
  double weight = 0.0;

  friend bool operator==(const AttributionEdge&, const AttributionEdge&) = default;
};

struct AttributionGraph {
  std::string sample_id;
  double margin = 0.0;
  double threshold = kDefaultAttributionThreshold;
  std::vector<AttributionNode> nodes;  // per layer: heads, then neurons
  std::vector<AttributionEdge> edges;
  std::size_t probed = 0;
  std::size_t active = 0;
  double active_fraction = 0.0;
  std::vector<std::size_t> active_per_layer;
  bool degenerate = false;  // every raw score was zero

  friend bool operator==(const AttributionGraph&, const AttributionGraph&) = default;
};

/// Scores every head and neuron; edges are left empty.
AttributionGraph attribute(const TransformerWeights& weights, std::span<const TokenId> tokens,
                           double threshold = kDefaultAttributionThreshold);

/// Marks nodes active from their normalized scores and refreshes the totals.
/// Useful for graphs assembled by hand.
void apply_threshold(AttributionGraph& graph, double threshold);

/// For each active src at layer l and active dst at layer l+1 the weight is
/// the sum over positions of src activation times d(dst)/d(src). A neuron
/// dst is its activation summed over positions; a head dst is its output
/// dotted with the (fixed) margin gradient at that head. Edges with
/// |w| < prune * max |w| are dropped.
void edge_attribution(const TransformerWeights& weights, std::span<const TokenId> tokens, AttributionGraph& graph,
                      double prune = kDefaultEdgeThreshold, std::size_t workers = 1);

/// Keeps only edges with |w| >= prune * max |w|.
void prune_edges(AttributionGraph& graph, double prune);

struct CensusRow {
  std::size_t layer = 0;
  std::size_t probed = 0;
  std::size_t active = 0;
  double fraction = 0.0;
};

struct CensusBand {
  std::string name;  // early, middle or late
  std::size_t first_layer = 0;
  std::size_t last_layer = 0;  // inclusive
  std::size_t probed = 0;
  std::size_t active = 0;
  double fraction = 0.0;
};

struct LayerCensus {
  std::vector<CensusRow> rows;
  std::vector<CensusBand> bands;
  std::size_t probed = 0;
  std::size_t active = 0;
};

/// Band width is round(6/26 of the depth), at least one layer, for the early
/// and late bands; the middle takes the rest. Models under three layers get
/// fewer bands.
LayerCensus layer_census(const AttributionGraph& graph);

std::string graph_to_json(const AttributionGraph& graph);
std::string census_to_csv(const LayerCensus& census);

}  // namespace cprobe
