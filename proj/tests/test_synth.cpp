// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cprobe/error.hpp"
#include "cprobe/metrics.hpp"
#include "cprobe/synth.hpp"
#include "cprobe/trace.hpp"
#include "test_util.hpp"

namespace cprobe {
namespace {

std::size_t count_token(const std::vector<TokenId>& ts, TokenId t) {
  return static_cast<std::size_t>(std::count(ts.begin(), ts.end(), t));
}

TEST(Preset, RegistryAndValidation) {
  const auto names = preset_names();
  EXPECT_NE(std::find(names.begin(), names.end(), std::string(kDefaultPreset)), names.end());
  EXPECT_THROW(planted_preset("no-such-preset"), DomainError);
  const auto spec = planted_preset(kDefaultPreset);
  EXPECT_NO_THROW(spec.validate());
  EXPECT_EQ(spec.model.n_layers, 6u);
  EXPECT_EQ(spec.model.d_model, 32u);
  EXPECT_EQ(spec.model.d_mlp, 64u);

  auto bad = spec;
  bad.vuln_neuron.index = 64;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = spec;
  bad.trigger_token = bad.model.bos_token_id;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = spec;
  bad.safety_token = bad.trigger_token;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = spec;
  bad.model.d_model = 4;
  bad.model.n_heads = 2;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = spec;
  bad.decision_layer = bad.vuln_neuron.layer;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Corpus, GeneratorContract) {
  const auto spec = planted_preset(kDefaultPreset);
  const auto c = generate_corpus(spec, 5, 7);
  ASSERT_EQ(c.samples.size(), 10u);
  ASSERT_EQ(c.truth.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& s = c.samples[i];
    EXPECT_EQ(s.tokens, tokenize(s.code, spec.model));
    EXPECT_FALSE(s.truncated);
    if (i < 5) {
      EXPECT_EQ(s.label, Label::vulnerable);
      EXPECT_EQ(count_token(s.tokens, spec.trigger_token), 1u);
      EXPECT_EQ(count_token(s.tokens, spec.safety_token), 0u);
      EXPECT_TRUE(s.cwe.has_value());
      EXPECT_TRUE(c.truth[i].has_trigger);
    } else {
      EXPECT_EQ(s.label, Label::safe);
      EXPECT_EQ(count_token(s.tokens, spec.safety_token), 1u);
      EXPECT_EQ(count_token(s.tokens, spec.trigger_token), 0u);
      EXPECT_FALSE(s.cwe.has_value());
      EXPECT_TRUE(c.truth[i].has_safety);
    }
    EXPECT_EQ(s.tokens[c.truth[i].marker_position], i < 5 ? spec.trigger_token : spec.safety_token);
  }
  EXPECT_EQ(generate_corpus(spec, 5, 7).samples, c.samples);
  EXPECT_NE(generate_corpus(spec, 5, 8).samples, c.samples);
}

TEST(PlantedModel, NoiseFreeConstructionClassifiesWithMargin) {
  auto spec = planted_preset(kDefaultPreset);
  spec.noise = 0.0;
  const auto w = build_planted_model(spec, 1);
  const auto c = generate_corpus(spec, 20, 2);
  for (const auto& s : c.samples) {
    const auto r = classify(w, s.tokens);
    EXPECT_EQ(r.label, s.label) << s.id;
    EXPECT_GE(std::fabs(r.margin), 1.0) << s.id;
  }
}

TEST(PlantedModel, CircuitBehavesAsDesigned) {
  const auto spec = planted_preset(kDefaultPreset);
  const auto w = build_planted_model(spec, 4);
  const auto c = generate_corpus(spec, 10, 4);
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    const auto& s = c.samples[i];
    const auto t = *forward(w, s.tokens, CaptureFlags::all()).trace;
    const std::size_t last = s.tokens.size() - 1;
    const auto& att = t.layers[spec.safety_head.layer].attention[spec.safety_head.head];
    const auto& hidden = t.layers[spec.vuln_neuron.layer].mlp_hidden;
    if (c.truth[i].has_safety) {
      EXPECT_GE(att(last, c.truth[i].marker_position), 0.9f) << s.id;
    } else {
      float mx = 0.0f;
      for (std::size_t k = 0; k <= last; ++k) mx = std::max(mx, att(last, k));
      EXPECT_LT(mx, 3.0f / static_cast<float>(last + 1)) << s.id;  // near-uniform
    }
    if (c.truth[i].has_trigger) {
      EXPECT_GT(hidden(last, spec.vuln_neuron.index), 1.0f) << s.id;
      Hooks h;
      h.neurons.push_back({spec.vuln_neuron.layer, spec.vuln_neuron.index, {}, 0.0, 0.0});
      EXPECT_LT(classify(w, s.tokens, &h).margin, 0.0) << s.id;
    } else {
      EXPECT_LT(hidden(last, spec.vuln_neuron.index), 0.1f) << s.id;
    }
  }
}

TEST(PlantedModel, PerfectAccuracyAndRecoveryAcrossSeeds) {
  const auto spec = planted_preset(kDefaultPreset);
  for (std::uint64_t seed : kPresetSeeds) {
    const auto w = build_planted_model(spec, seed);
    const auto c = generate_corpus(spec, 20, seed);
    std::vector<ActivationTrace> vul, safe;
    for (const auto& s : c.samples) {
      auto r = forward(w, s.tokens, CaptureFlags::all());
      ASSERT_EQ(classify_logits(w.spec, r.logits).label, s.label) << "seed " << seed << " " << s.id;
      (s.label == Label::vulnerable ? vul : safe).push_back(std::move(*r.trace));
    }
    std::vector<const ActivationTrace*> pv, ps;
    for (const auto& t : vul) pv.push_back(&t);
    for (const auto& t : safe) ps.push_back(&t);
    const auto heads = head_importance(pv, ps);
    EXPECT_EQ(heads[0].layer, spec.safety_head.layer) << "seed " << seed;
    EXPECT_EQ(heads[0].head, spec.safety_head.head) << "seed " << seed;
    EXPECT_LT(heads[0].importance, 0.0);
    std::vector<std::size_t> all_layers(spec.model.n_layers);
    for (std::size_t l = 0; l < all_layers.size(); ++l) all_layers[l] = l;
    const auto neurons = neuron_selectivity(pv, ps, {all_layers, 20});
    EXPECT_EQ(neurons.top[0].layer, spec.vuln_neuron.layer) << "seed " << seed;
    EXPECT_EQ(neurons.top[0].neuron, spec.vuln_neuron.index) << "seed " << seed;
  }
}

TEST(Oracle, AgreesWithTheAnalysisModules) {
  const auto spec = planted_preset(kDefaultPreset);
  const auto w = build_planted_model(spec, 5);
  const auto c = generate_corpus(spec, 10, 5);
  const auto table = oracle::oracle_scores(spec, c, w);

  EXPECT_EQ(table.heads[0].layer, spec.safety_head.layer);
  EXPECT_EQ(table.heads[0].head, spec.safety_head.head);
  EXPECT_LT(table.heads[0].importance, 0.0);
  EXPECT_EQ(table.neurons[0].layer, spec.vuln_neuron.layer);
  EXPECT_EQ(table.neurons[0].neuron, spec.vuln_neuron.index);

  std::vector<ActivationTrace> vul, safe;
  for (const auto& s : c.samples) {
    auto t = *forward(w, s.tokens, CaptureFlags::all()).trace;
    (s.label == Label::vulnerable ? vul : safe).push_back(std::move(t));
  }
  std::vector<const ActivationTrace*> pv, ps;
  for (const auto& t : vul) pv.push_back(&t);
  for (const auto& t : safe) ps.push_back(&t);
  const auto heads = head_importance(pv, ps);
  ASSERT_EQ(heads.size(), table.heads.size());
  for (std::size_t i = 0; i < heads.size(); ++i) {
    EXPECT_EQ(heads[i].layer, table.heads[i].layer);
    EXPECT_EQ(heads[i].head, table.heads[i].head);
    EXPECT_NEAR(heads[i].importance, table.heads[i].importance, 1e-9);
  }

  // L0 agreement on every sample, twenty of them here.
  ASSERT_EQ(table.l0.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& t = i < 10 ? vul[i] : safe[i - 10];
    EXPECT_EQ(l0_profile(t), table.l0[i]);
    EXPECT_EQ(oracle::l0_counts(t, 0.0, true), l0_profile(t, 0.0, L0Source::mlp_hidden));
  }

  const std::vector<std::size_t> layers{0, 2, 5};
  const auto sel = neuron_selectivity(pv, ps, {layers, 3 * 64});
  const auto ref = oracle::selectivities(pv, ps, layers);
  ASSERT_EQ(sel.ranked.size(), ref.size());
  for (const auto& r : sel.ranked) {
    const auto it = std::find_if(ref.begin(), ref.end(),
                                 [&](const NeuronScore& o) { return o.layer == r.layer && o.neuron == r.neuron; });
    ASSERT_NE(it, ref.end());
    EXPECT_NEAR(it->selectivity, r.selectivity, 1e-9);
  }
}

TEST(Oracle, ZeroAblationOfThePlantedNeuronIsTheLargestMlpContribution) {
  const auto spec = planted_preset(kDefaultPreset);
  const auto w = build_planted_model(spec, 6);
  const auto c = generate_corpus(spec, 2, 6);
  const auto contributions = oracle::margin_contributions(w, c.samples[0].tokens);
  EXPECT_EQ(contributions.size(), spec.model.n_layers * (spec.model.n_heads + spec.model.d_mlp));
  const oracle::NodeContribution* best = nullptr;
  for (const auto& n : contributions) {
    if (n.site != Site::mlp_hidden || n.layer == spec.decision_layer) continue;
    if (!best || n.contribution > best->contribution) best = &n;
  }
  ASSERT_NE(best, nullptr);
  EXPECT_EQ(best->layer, spec.vuln_neuron.layer);
  EXPECT_EQ(best->index, spec.vuln_neuron.index);
  EXPECT_GT(best->contribution, 1.0);
}

}  // namespace
}  // namespace cprobe
