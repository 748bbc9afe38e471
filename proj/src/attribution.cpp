// SPDX-License-Identifier: Apache-2.0

#include "cprobe/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <json.hpp>

#include "cprobe/error.hpp"
#include "cprobe/parallel.hpp"
#include "cprobe/report.hpp"

namespace cprobe {

std::string node_name(const AttributionNode& node) {
  return "L" + std::to_string(node.layer) + (node.site == Site::head_out ? ".H" : ".N") + std::to_string(node.index);
}

namespace {

// Sum over positions of activation x gradient for one node.
double node_product(const MatrixD& act, const MatrixD& grad, Site site, std::size_t index, std::size_t d_head) {
  double total = 0.0;
  for (std::size_t p = 0; p < act.rows(); ++p) {
    if (site == Site::mlp_hidden) {
      total += act(p, index) * grad(p, index);
    } else {
      for (std::size_t j = index * d_head; j < (index + 1) * d_head; ++j) total += act(p, j) * grad(p, j);
    }
  }
  return total;
}

const MatrixD& site_activation(const Tape& tape, Site site, std::size_t layer) {
  return site == Site::mlp_hidden ? tape.mlp_hidden(layer) : tape.head_out(layer);
}

const MatrixD& site_gradient(const ActivationGradients& g, Site site, std::size_t layer) {
  return site == Site::mlp_hidden ? g.mlp_hidden[layer] : g.head_out[layer];
}

}  // namespace

void apply_threshold(AttributionGraph& graph, double threshold) {
  graph.threshold = threshold;
  std::size_t n_layers = 0;
  for (const auto& n : graph.nodes) n_layers = std::max(n_layers, n.layer + 1);
  graph.active_per_layer.assign(n_layers, 0);
  graph.active = 0;
  for (auto& n : graph.nodes) {
    n.active = !graph.degenerate && std::fabs(n.score) > threshold;
    if (n.active) {
      ++graph.active;
      ++graph.active_per_layer[n.layer];
    }
  }
  graph.probed = graph.nodes.size();
  graph.active_fraction =
      graph.probed ? static_cast<double>(graph.active) / static_cast<double>(graph.probed) : 0.0;
}

AttributionGraph attribute(const TransformerWeights& weights, std::span<const TokenId> tokens, double threshold) {
  const ModelSpec& spec = weights.spec;
  const Tape tape(weights, tokens);
  const auto readout = LogitReadout::margin(spec, tokens.size());
  const ActivationGradients grads = tape.backward(readout);

  AttributionGraph g;
  g.margin = readout.evaluate(tape.logits());
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    for (std::size_t h = 0; h < spec.n_heads; ++h) {
      g.nodes.push_back({Site::head_out, l, h,
                         node_product(tape.head_out(l), grads.head_out[l], Site::head_out, h, spec.d_head())});
    }
    for (std::size_t n = 0; n < spec.d_mlp; ++n) {
      g.nodes.push_back({Site::mlp_hidden, l, n,
                         node_product(tape.mlp_hidden(l), grads.mlp_hidden[l], Site::mlp_hidden, n, 0)});
    }
  }
  double max_abs = 0.0;
  for (const auto& n : g.nodes) max_abs = std::max(max_abs, std::fabs(n.raw));
  g.degenerate = max_abs == 0.0;
  for (auto& n : g.nodes) n.score = g.degenerate ? 0.0 : n.raw / max_abs;
  apply_threshold(g, threshold);
  return g;
}

void prune_edges(AttributionGraph& graph, double prune) {
  double max_abs = 0.0;
  for (const auto& e : graph.edges) max_abs = std::max(max_abs, std::fabs(e.weight));
  if (max_abs == 0.0) {
    graph.edges.clear();
    return;
  }
  std::erase_if(graph.edges, [&](const AttributionEdge& e) { return std::fabs(e.weight) < prune * max_abs; });
}

void edge_attribution(const TransformerWeights& weights, std::span<const TokenId> tokens, AttributionGraph& graph,
                      double prune, std::size_t workers) {
  graph.edges.clear();
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    if (graph.nodes[i].active) active.push_back(i);
  }
  if (active.empty()) return;

  const ModelSpec& spec = weights.spec;
  const std::size_t dh = spec.d_head();
  const Tape tape(weights, tokens);
  ActivationGradients margin_grads;
  bool have_margin_grads = false;
  for (std::size_t i : active) {
    const auto& n = graph.nodes[i];
    if (n.layer >= spec.n_layers || n.index >= (n.site == Site::head_out ? spec.n_heads : spec.d_mlp)) {
      throw DomainError("edge_attribution: node " + node_name(n) + " is not in the model");
    }
    if (n.site == Site::head_out && n.layer > 0 && !have_margin_grads) {
      margin_grads = tape.backward(LogitReadout::margin(spec, tokens.size()));
      have_margin_grads = true;
    }
  }

  // Destinations with at least one active source one layer below.
  std::vector<std::size_t> dsts;
  for (std::size_t i : active) {
    const auto& d = graph.nodes[i];
    if (d.layer == 0) continue;
    const bool has_src = std::any_of(active.begin(), active.end(),
                                     [&](std::size_t j) { return graph.nodes[j].layer + 1 == d.layer; });
    if (has_src) dsts.push_back(i);
  }

  std::vector<std::vector<AttributionEdge>> found(dsts.size());
  parallel_for(dsts.size(), workers, [&](std::size_t k) {
    const auto& d = graph.nodes[dsts[k]];
    SiteSeed seed{d.site, d.layer, MatrixD(tape.seq_len(), d.site == Site::mlp_hidden ? spec.d_mlp : spec.d_model)};
    for (std::size_t p = 0; p < tape.seq_len(); ++p) {
      if (d.site == Site::mlp_hidden) {
        seed.gradient(p, d.index) = 1.0;
      } else {
        for (std::size_t j = d.index * dh; j < (d.index + 1) * dh; ++j) {
          seed.gradient(p, j) = margin_grads.head_out[d.layer](p, j);
        }
      }
    }
    const ActivationGradients g = tape.backward(std::span<const SiteSeed>(&seed, 1));
    for (std::size_t j : active) {
      const auto& s = graph.nodes[j];
      if (s.layer + 1 != d.layer) continue;
      const double w = node_product(site_activation(tape, s.site, s.layer), site_gradient(g, s.site, s.layer),
                                    s.site, s.index, dh);
      found[k].push_back({j, dsts[k], w});
    }
  });
  for (auto& part : found) graph.edges.insert(graph.edges.end(), part.begin(), part.end());
  std::sort(graph.edges.begin(), graph.edges.end(),
            [](const AttributionEdge& a, const AttributionEdge& b) { return std::pair(a.src, a.dst) < std::pair(b.src, b.dst); });
  prune_edges(graph, prune);
}

LayerCensus layer_census(const AttributionGraph& graph) {
  std::size_t n_layers = graph.active_per_layer.size();
  for (const auto& n : graph.nodes) n_layers = std::max(n_layers, n.layer + 1);
  LayerCensus c;
  c.rows.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) c.rows[l].layer = l;
  for (const auto& n : graph.nodes) {
    ++c.rows[n.layer].probed;
    c.rows[n.layer].active += n.active ? 1 : 0;
  }
  for (auto& r : c.rows) {
    r.fraction = r.probed ? static_cast<double>(r.active) / static_cast<double>(r.probed) : 0.0;
    c.probed += r.probed;
    c.active += r.active;
  }
  if (n_layers == 0) return c;

  auto band = [&](std::string name, std::size_t first, std::size_t last) {
    CensusBand b{std::move(name), first, last};
    for (std::size_t l = first; l <= last; ++l) {
      b.probed += c.rows[l].probed;
      b.active += c.rows[l].active;
    }
    b.fraction = b.probed ? static_cast<double>(b.active) / static_cast<double>(b.probed) : 0.0;
    c.bands.push_back(std::move(b));
  };
  if (n_layers == 1) {
    band("early", 0, 0);
  } else if (n_layers == 2) {
    band("early", 0, 0);
    band("late", 1, 1);
  } else {
    const auto width = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(static_cast<double>(n_layers) * 6.0 / 26.0)));
    band("early", 0, width - 1);
    band("middle", width, n_layers - width - 1);
    band("late", n_layers - width, n_layers - 1);
  }
  return c;
}

std::string graph_to_json(const AttributionGraph& graph) {
  using nlohmann::ordered_json;
  ordered_json nodes = ordered_json::array();
  for (const auto& n : graph.nodes) {
    nodes.push_back({{"id", node_name(n)},
                     {"site", to_string(n.site)},
                     {"layer", n.layer},
                     {"index", n.index},
                     {"raw", n.raw},
                     {"score", n.score},
                     {"active", n.active}});
  }
  ordered_json edges = ordered_json::array();
  for (const auto& e : graph.edges) {
    edges.push_back({{"src", node_name(graph.nodes[e.src])}, {"dst", node_name(graph.nodes[e.dst])}, {"weight", e.weight}});
  }
  const LayerCensus census = layer_census(graph);
  ordered_json per_layer = ordered_json::array();
  for (const auto& r : census.rows) {
    per_layer.push_back({{"layer", r.layer}, {"probed", r.probed}, {"active", r.active}, {"fraction", r.fraction}});
  }
  ordered_json j = {{"sample_id", graph.sample_id},
                    {"margin", graph.margin},
                    {"threshold", graph.threshold},
                    {"degenerate", graph.degenerate},
                    {"nodes", std::move(nodes)},
                    {"edges", std::move(edges)},
                    {"totals", {{"probed", graph.probed}, {"active", graph.active}, {"fraction", graph.active_fraction}}},
                    {"per_layer", std::move(per_layer)}};
  return j.dump(2) + "\n";
}

std::string census_to_csv(const LayerCensus& census) {
  CsvWriter csv({"scope", "first_layer", "last_layer", "probed", "active", "fraction"});
  for (const auto& r : census.rows) {
    csv.cell("layer").cell(r.layer).cell(r.layer).cell(r.probed).cell(r.active).cell(r.fraction);
    csv.end_row();
  }
  for (const auto& b : census.bands) {
    csv.cell(b.name).cell(b.first_layer).cell(b.last_layer).cell(b.probed).cell(b.active).cell(b.fraction);
    csv.end_row();
  }
  csv.cell("total").cell(std::size_t{0}).cell(census.rows.empty() ? std::size_t{0} : census.rows.size() - 1);
  csv.cell(census.probed).cell(census.active);
  csv.cell(census.probed ? static_cast<double>(census.active) / static_cast<double>(census.probed) : 0.0);
  csv.end_row();
  return csv.text();
}

}  // namespace cprobe
