// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <json.hpp>

#include "cprobe/attribution.hpp"
#include "cprobe/synth.hpp"
#include "test_util.hpp"

namespace cprobe {
namespace {

using testing::tiny_spec;
using namespace testing::closed_form;

TEST(Attribute, SingleLayerMatchesClosedForm) {
  const ModelSpec spec{1, 1, 4, 2, 259, 8, 256, 257, 258};
  const auto w = silent_attention(spec, 17);
  const std::vector<TokenId> tokens{256, 'x', 'y', 'z'};
  const auto g = attribute(w, tokens);
  ASSERT_EQ(g.nodes.size(), 3u);
  EXPECT_EQ(g.nodes[0].site, Site::head_out);
  EXPECT_EQ(g.nodes[0].raw, 0.0);

  const std::size_t last = tokens.size() - 1;
  const auto step = mlp_step(w.layers[0], embed(w, tokens[last], last));
  Vec c(4);
  for (std::size_t j = 0; j < 4; ++j) c[j] = static_cast<double>(w.final_norm[j]) * (static_cast<double>(w.unembedding(j, 257)) - w.unembedding(j, 258));
  for (std::size_t n = 0; n < 2; ++n) {
    const double slope = directional(c, step.h_out, row_of(w.layers[0].w_out, n));
    const double expected = step.a[n] * slope;
    EXPECT_NEAR(g.nodes[1 + n].raw, expected, 1e-9 * std::max(1.0, std::fabs(expected))) << "neuron " << n;
  }
  double margin = 0.0;
  const Norm nf = norm_of(step.h_out);
  for (std::size_t j = 0; j < 4; ++j) margin += c[j] * nf.y[j];
  EXPECT_NEAR(g.margin, margin, 1e-9);
}

TEST(Attribute, ZeroModelIsDegenerate) {
  const auto w = TransformerWeights::zeros(tiny_spec());
  const auto g = attribute(w, std::vector<TokenId>{256, 1, 2});
  EXPECT_TRUE(g.degenerate);
  EXPECT_EQ(g.active, 0u);
  EXPECT_EQ(g.active_fraction, 0.0);
  for (const auto& n : g.nodes) EXPECT_EQ(n.score, 0.0);
}

TEST(Attribute, CensusBookkeeping) {
  const auto spec = tiny_spec(3, 2, 8, 16);
  const auto w = TransformerWeights::random(spec, 4, 0.6);
  const auto g = attribute(w, std::vector<TokenId>{256, 5, 6, 7, 8});
  EXPECT_EQ(g.probed, 3u * (16 + 2));
  std::size_t active = 0;
  double max_abs = 0.0;
  for (const auto& n : g.nodes) {
    EXPECT_EQ(n.active, std::fabs(n.score) > 0.01);
    active += n.active;
    max_abs = std::max(max_abs, std::fabs(n.score));
  }
  EXPECT_EQ(max_abs, 1.0);
  EXPECT_EQ(g.active, active);
  EXPECT_EQ(g.active_fraction, static_cast<double>(active) / static_cast<double>(g.probed));
  std::size_t sum = 0;
  for (auto c : g.active_per_layer) sum += c;
  EXPECT_EQ(sum, g.active);
}

TEST(Attribute, UnembeddingScaleScalesRawScores) {
  const auto w = TransformerWeights::random(tiny_spec(2, 2, 8, 16), 8, 0.6);
  auto scaled = w;
  for (std::size_t j = 0; j < 8; ++j) {
    scaled.unembedding(j, 257) *= 4.0f;
    scaled.unembedding(j, 258) *= 4.0f;
  }
  const std::vector<TokenId> tokens{256, 40, 50, 60};
  const auto a = attribute(w, tokens);
  const auto b = attribute(scaled, tokens);
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    EXPECT_NEAR(b.nodes[i].raw, 4.0 * a.nodes[i].raw, 1e-12 * std::max(1.0, std::fabs(b.nodes[i].raw)));
    EXPECT_EQ(b.nodes[i].active, a.nodes[i].active);
  }
}

TEST(Attribute, IsDeterministic) {
  const auto w = TransformerWeights::random(tiny_spec(2, 2, 8, 16), 9, 0.6);
  const std::vector<TokenId> tokens{256, 1, 2, 3, 4, 5};
  auto a = attribute(w, tokens);
  auto b = attribute(w, tokens);
  edge_attribution(w, tokens, a, 0.01, 1);
  edge_attribution(w, tokens, b, 0.01, 3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(graph_to_json(a), graph_to_json(b));
}

TEST(Edges, TwoLayerChainMatchesClosedForm) {
  const ModelSpec spec{2, 1, 4, 3, 259, 8, 256, 257, 258};
  const auto w = silent_attention(spec, 23);
  const std::vector<TokenId> tokens{256, 'q', 'r'};
  auto g = attribute(w, tokens);
  apply_threshold(g, 0.0);
  edge_attribution(w, tokens, g, 0.0);

  std::vector<MlpStep> s0, s1;
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    s0.push_back(mlp_step(w.layers[0], embed(w, tokens[p], p)));
    s1.push_back(mlp_step(w.layers[1], s0.back().h_out));
  }
  auto node_index = [&](std::size_t layer, std::size_t neuron) { return layer * 4 + 1 + neuron; };
  std::size_t checked = 0;
  for (const auto& e : g.edges) {
    const auto& src = g.nodes[e.src];
    const auto& dst = g.nodes[e.dst];
    EXPECT_EQ(src.layer + 1, dst.layer);
    EXPECT_TRUE(src.active && dst.active);
    if (src.site != Site::mlp_hidden || dst.site != Site::mlp_hidden) continue;
    ASSERT_EQ(e.src, node_index(0, src.index));
    Vec c(4);
    for (std::size_t j = 0; j < 4; ++j) c[j] = static_cast<double>(w.layers[1].mlp_norm[j]) * w.layers[1].w_in(j, dst.index);
    double expected = 0.0;
    for (std::size_t p = 0; p < tokens.size(); ++p) {
      const double dz = directional(c, s0[p].h_out, row_of(w.layers[0].w_out, src.index));
      expected += s0[p].a[src.index] * gelu_slope(s1[p].z[dst.index]) * dz;
    }
    EXPECT_NEAR(e.weight, expected, 1e-8 * std::max(1.0, std::fabs(expected)))
        << node_name(src) << " -> " << node_name(dst);
    ++checked;
  }
  EXPECT_EQ(checked, 9u);
}

TEST(Edges, PruningSemantics) {
  const auto w = TransformerWeights::random(tiny_spec(3, 2, 8, 16), 31, 0.6);
  const std::vector<TokenId> tokens{256, 11, 12, 13, 14};
  auto g = attribute(w, tokens);
  edge_attribution(w, tokens, g, 1.0);
  EXPECT_LE(g.edges.size(), 1u);
  auto none = attribute(w, tokens);
  apply_threshold(none, 2.0);
  edge_attribution(w, tokens, none);
  EXPECT_TRUE(none.edges.empty());

  auto full = attribute(w, tokens);
  edge_attribution(w, tokens, full, 0.0);
  auto pruned = full;
  prune_edges(pruned, 0.3);
  double max_abs = 0.0;
  for (const auto& e : full.edges) max_abs = std::max(max_abs, std::fabs(e.weight));
  std::size_t kept = 0;
  for (const auto& e : full.edges) kept += std::fabs(e.weight) >= 0.3 * max_abs;
  EXPECT_EQ(pruned.edges.size(), kept);
}

TEST(Census, RecountAndBands) {
  Rng rng(5);
  for (std::size_t n_layers : {1u, 2u, 3u, 6u, 26u}) {
    AttributionGraph g;
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t i = 0; i < 5; ++i) {
        g.nodes.push_back({i < 2 ? Site::head_out : Site::mlp_hidden, l, i, 0.0, rng.uniform() * 2 - 1, false});
      }
    }
    apply_threshold(g, 0.5);
    const auto c = layer_census(g);
    ASSERT_EQ(c.rows.size(), n_layers);
    std::size_t total = 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
      std::size_t recount = 0;
      for (const auto& n : g.nodes) recount += n.layer == l && std::fabs(n.score) > 0.5;
      EXPECT_EQ(c.rows[l].active, recount);
      EXPECT_EQ(c.rows[l].probed, 5u);
      total += recount;
    }
    EXPECT_EQ(c.active, total);
    EXPECT_EQ(c.active, g.active);
    std::size_t band_active = 0, band_layers = 0;
    for (const auto& b : c.bands) {
      band_active += b.active;
      band_layers += b.last_layer - b.first_layer + 1;
    }
    EXPECT_EQ(band_active, total);
    EXPECT_EQ(band_layers, n_layers);
  }
  AttributionGraph deep;
  for (std::size_t l = 0; l < 26; ++l) deep.nodes.push_back({Site::mlp_hidden, l, 0, 0.0, 0.0, false});
  apply_threshold(deep, 0.01);
  const auto c = layer_census(deep);
  ASSERT_EQ(c.bands.size(), 3u);
  EXPECT_EQ(c.bands[0].last_layer, 5u);
  EXPECT_EQ(c.bands[2].first_layer, 20u);
  EXPECT_EQ(c.active, 0u);
  for (const auto& r : c.rows) EXPECT_EQ(r.fraction, 0.0);
}

TEST(GraphJson, Layout) {
  const auto w = TransformerWeights::random(tiny_spec(2, 2, 8, 16), 3, 0.6);
  const std::vector<TokenId> tokens{256, 70, 71};
  auto g = attribute(w, tokens);
  g.sample_id = "s1";
  edge_attribution(w, tokens, g);
  const auto j = nlohmann::json::parse(graph_to_json(g));
  EXPECT_EQ(j["sample_id"], "s1");
  EXPECT_EQ(j["nodes"].size(), g.nodes.size());
  EXPECT_EQ(j["edges"].size(), g.edges.size());
  EXPECT_EQ(j["totals"]["probed"], g.probed);
  EXPECT_EQ(j["per_layer"].size(), 2u);
  EXPECT_EQ(j["nodes"][0]["id"], "L0.H0");
  EXPECT_EQ(j["nodes"][2]["id"], "L0.N0");
}

TEST(Attribute, PlantedNeuronIsActiveOnVulnerableSamples) {
  const auto spec = planted_preset(kDefaultPreset);
  const auto w = build_planted_model(spec, 3);
  const auto corpus = generate_corpus(spec, 6, 3);
  for (const auto& s : corpus.samples) {
    if (s.label != Label::vulnerable) continue;
    const auto g = attribute(w, s.tokens);
    bool found = false;
    for (const auto& n : g.nodes) {
      if (n.site == Site::mlp_hidden && n.layer == spec.vuln_neuron.layer && n.index == spec.vuln_neuron.index) {
        found = n.active;
      }
    }
    EXPECT_TRUE(found) << s.id;
    EXPECT_GE(g.active_per_layer[spec.vuln_neuron.layer], 1u);
    for (std::size_t l : spec.noise_layers()) {
      std::size_t mlp_active = 0;
      for (const auto& n : g.nodes) mlp_active += n.layer == l && n.site == Site::mlp_hidden && n.active;
      EXPECT_EQ(mlp_active, 0u) << s.id << " layer " << l;
    }
  }
}

}  // namespace
}  // namespace cprobe
