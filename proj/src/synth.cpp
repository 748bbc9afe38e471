// SPDX-License-Identifier: Apache-2.0

#include "cprobe/synth.hpp"

#include <algorithm>
#include <cmath>
#include <string_view>

#include "cprobe/error.hpp"
#include "cprobe/rng.hpp"

namespace cprobe {

namespace {

// Reserved residual dimensions.
constexpr std::size_t kConst = 0;
constexpr std::size_t kSafetyDim = 1;
constexpr std::size_t kTriggerDim = 2;
constexpr std::size_t kSafetyOut = 3;
constexpr std::size_t kMoverOut = 4;
constexpr std::size_t kNeuronOut = 5;
constexpr std::size_t kDecision = 6;
constexpr std::size_t kReservedDims = 7;

constexpr double kQueryKey = 1.5;
constexpr double kHeadOut = 0.25;
constexpr double kNeuronIn = 2.0;
constexpr double kNeuronWrite = 0.25;
constexpr double kNeuronBias = 0.5;
constexpr double kDecisionGain = 0.5;
constexpr double kDecisionBias = 0.25;  // leans the empty-signal case to safe
constexpr double kReadout = 0.5;

constexpr std::string_view kFiller =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 (){};=+-*/<>,.[]&|!_";
constexpr std::size_t kMinBody = 16;
constexpr std::size_t kMaxBody = 40;
constexpr std::array<std::string_view, 3> kCweCycle{"CWE-787", "CWE-416", "CWE-476"};

}  // namespace

std::vector<std::size_t> PlantedCircuitSpec::noise_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < model.n_layers; ++l) {
    if (l != safety_head.layer && l != mover_head.layer && l != vuln_neuron.layer && l != decision_layer) {
      out.push_back(l);
    }
  }
  return out;
}

void PlantedCircuitSpec::validate() const {
  model.validate();
  auto fail = [&](const std::string& msg) { throw ValidationError("planted circuit " + name + ": " + msg); };
  if (model.d_model < kReservedDims) fail("d_model must be at least 7 to hold the reserved dimensions");
  if (safety_head.head >= model.n_heads || mover_head.head >= model.n_heads) fail("head index out of range");
  if (safety_head == mover_head) fail("safety and mover heads must differ");
  if (vuln_neuron.index >= model.d_mlp) fail("vulnerability neuron index out of range");
  if (decision_neurons[0] >= model.d_mlp || decision_neurons[1] >= model.d_mlp) fail("decision neuron out of range");
  if (decision_neurons[0] == decision_neurons[1]) fail("decision neurons must differ");
  if (!(safety_head.layer < vuln_neuron.layer && mover_head.layer < vuln_neuron.layer)) {
    fail("heads must sit below the vulnerability neuron");
  }
  if (!(vuln_neuron.layer < decision_layer)) fail("decision layer must sit above the vulnerability neuron");
  if (decision_layer >= model.n_layers) fail("decision layer out of range");
  if (safety_token > 255 || trigger_token > 255) fail("marker tokens must be byte ids");
  if (safety_token == trigger_token) fail("marker tokens must differ");
  for (TokenId t : {safety_token, trigger_token}) {
    if (t == model.bos_token_id || t == model.vuln_token_id || t == model.safe_token_id) {
      fail("marker tokens must differ from reserved ids");
    }
    if (kFiller.find(static_cast<char>(t)) != std::string_view::npos) fail("marker token collides with filler bytes");
  }
  if (model.max_seq < kMaxBody + 1) fail("max_seq must hold BOS plus a 40-byte body");
  if (model.vocab_size < 256) fail("vocab must cover every byte");
  if (!(noise >= 0.0) || !std::isfinite(noise)) fail("noise must be finite and nonnegative");
}

std::vector<std::string> preset_names() { return {std::string(kDefaultPreset)}; }

PlantedCircuitSpec planted_preset(std::string_view name) {
  if (name != kDefaultPreset) throw DomainError("unknown preset \"" + std::string(name) + "\"");
  PlantedCircuitSpec s;
  s.name = std::string(name);
  s.model = {.n_layers = 6,
             .n_heads = 4,
             .d_model = 32,
             .d_mlp = 64,
             .vocab_size = 259,
             .max_seq = 64,
             .bos_token_id = 256,
             .vuln_token_id = 257,
             .safe_token_id = 258};
  s.safety_head = {1, 2};
  s.mover_head = {1, 0};
  s.vuln_neuron = {2, 37};
  s.decision_layer = 4;
  s.decision_neurons = {10, 11};
  s.noise = 0.01;
  return s;
}

TransformerWeights build_planted_model(const PlantedCircuitSpec& spec, std::uint64_t seed) {
  spec.validate();
  TransformerWeights w = TransformerWeights::random(spec.model, mix_seed(seed, 0), spec.noise);
  const std::size_t dh = spec.model.d_head();

  for (std::size_t t = 0; t < spec.model.vocab_size; ++t) w.token_embedding(t, kConst) = 1.0f;
  w.token_embedding(spec.safety_token, kSafetyDim) = 1.0f;
  w.token_embedding(spec.trigger_token, kTriggerDim) = 1.0f;

  auto plant_copy_head = [&](const HeadId& h, std::size_t source_dim, std::size_t out_dim) {
    auto& L = w.layers[h.layer];
    const std::size_t base = h.head * dh;
    L.w_q(kConst, base) = static_cast<float>(kQueryKey);
    L.w_k(source_dim, base) = static_cast<float>(kQueryKey);
    L.w_v(source_dim, base) = 1.0f;
    L.w_o(base, out_dim) = static_cast<float>(kHeadOut);
  };
  plant_copy_head(spec.safety_head, kSafetyDim, kSafetyOut);
  plant_copy_head(spec.mover_head, kTriggerDim, kMoverOut);

  auto& vn = w.layers[spec.vuln_neuron.layer];
  vn.w_in(kMoverOut, spec.vuln_neuron.index) = static_cast<float>(kNeuronIn);
  vn.w_in(kConst, spec.vuln_neuron.index) = static_cast<float>(-kNeuronBias);
  vn.w_out(spec.vuln_neuron.index, kNeuronOut) = static_cast<float>(kNeuronWrite);

  // gelu(z) - gelu(-z) = z, so the pair is linear in its input.
  auto& dl = w.layers[spec.decision_layer];
  for (int sign : {1, -1}) {
    const std::size_t n = spec.decision_neurons[sign > 0 ? 0 : 1];
    dl.w_in(kNeuronOut, n) = static_cast<float>(sign * kDecisionGain);
    dl.w_in(kSafetyOut, n) = static_cast<float>(-sign * kDecisionGain);
    dl.w_in(kConst, n) = static_cast<float>(-sign * kDecisionGain * kDecisionBias);
    dl.w_out(n, kDecision) = static_cast<float>(sign);
  }

  w.unembedding(kDecision, spec.model.vuln_token_id) = static_cast<float>(kReadout);
  w.unembedding(kDecision, spec.model.safe_token_id) = static_cast<float>(-kReadout);
  w.validate();
  return w;
}

SyntheticCorpus generate_corpus(const PlantedCircuitSpec& spec, std::size_t n_per_class, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed, 1);
  SyntheticCorpus out;
  for (Label label : {Label::vulnerable, Label::safe}) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const std::size_t len = kMinBody + rng.uniform_index(kMaxBody - kMinBody + 1);
      std::string body(len, ' ');
      for (char& c : body) c = kFiller[rng.uniform_index(kFiller.size())];
      const std::size_t at = rng.uniform_index(len / 3 + 1);
      const bool vul = label == Label::vulnerable;
      body[at] = static_cast<char>(vul ? spec.trigger_token : spec.safety_token);

      char id[32];
      std::snprintf(id, sizeof id, "synth-%s-%04zu", vul ? "vul" : "safe", i + 1);
      SampleRecord r;
      r.id = id;
      r.code = std::move(body);
      r.label = label;
      if (vul) r.cwe = std::string(kCweCycle[i % kCweCycle.size()]);
      auto t = tokenize_with_flag(r.code, spec.model);
      r.tokens = std::move(t.tokens);
      r.truncated = t.truncated;
      out.samples.push_back(std::move(r));
      out.truth.push_back({!vul, vul, at + 1});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace oracle {

std::vector<std::uint64_t> l0_counts(const ActivationTrace& trace, double threshold, bool use_hidden) {
  std::vector<std::uint64_t> counts;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const MatrixF& m = use_hidden ? trace.layers[l].mlp_hidden : trace.layers[l].mlp_out;
    std::uint64_t c = 0;
    for (std::size_t i = m.cols(); i < m.size(); ++i) {  // flat index; row 0 is BOS
      const double v = m.flat()[i];
      if (v > threshold || -v > threshold) ++c;
    }
    counts.push_back(c);
  }
  return counts;
}

namespace {

// Per-sample average of (max, entropy) over query rows 1..n-1 with key 0
// dropped. Returns false for BOS-only samples.
bool sample_head_stats(const MatrixF& a, double& max_avg, double& ent_avg) {
  const std::size_t n = a.rows();
  if (n < 2) return false;
  double max_sum = 0.0, ent_sum = 0.0;
  for (std::size_t q = 1; q < n; ++q) {
    double z = 0.0;
    for (std::size_t k = 1; k <= q; ++k) z += a(q, k);
    double mx = 0.0, h = 0.0;
    for (std::size_t k = 1; k <= q; ++k) {
      const double p = z > 0.0 ? a(q, k) / z : 1.0 / static_cast<double>(q);
      if (p > mx) mx = p;
      if (p > 0.0) h += -p * std::log(p);
    }
    max_sum += mx;
    ent_sum += h;
  }
  max_avg = max_sum / static_cast<double>(n - 1);
  ent_avg = ent_sum / static_cast<double>(n - 1);
  return true;
}

}  // namespace

std::vector<HeadScore> head_scores(std::span<const ActivationTrace* const> tp,
                                   std::span<const ActivationTrace* const> tn, double lambda) {
  std::vector<HeadScore> out;
  const std::size_t L = tp.front()->layers.size();
  const std::size_t H = tp.front()->layers.front().attention.size();
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      double m[2] = {0, 0}, e[2] = {0, 0};
      std::span<const ActivationTrace* const> sets[2] = {tp, tn};
      for (int c = 0; c < 2; ++c) {
        std::size_t used = 0;
        for (const auto* t : sets[c]) {
          double mx = 0.0, en = 0.0;
          if (!sample_head_stats(t->layers[l].attention[h], mx, en)) continue;
          m[c] += mx;
          e[c] += en;
          ++used;
        }
        m[c] /= static_cast<double>(used);
        e[c] /= static_cast<double>(used);
      }
      HeadScore s;
      s.layer = l;
      s.head = h;
      s.mean_max_tp = m[0];
      s.mean_max_tn = m[1];
      s.entropy_tp = e[0];
      s.entropy_tn = e[1];
      s.importance = (m[0] - m[1]) + lambda * (e[1] - e[0]);
      out.push_back(s);
    }
  }
  return out;
}

std::vector<NeuronScore> selectivities(std::span<const ActivationTrace* const> vulnerable,
                                       std::span<const ActivationTrace* const> safe,
                                       std::span<const std::size_t> layers) {
  auto class_mean = [](std::span<const ActivationTrace* const> set, std::size_t l, std::size_t n) {
    double total = 0.0;
    for (const auto* t : set) {
      const MatrixF& m = t->layers[l].mlp_hidden;
      double s = 0.0;
      for (std::size_t p = 1; p < m.rows(); ++p) s += m(p, n);
      total += m.rows() > 1 ? s / static_cast<double>(m.rows() - 1) : 0.0;
    }
    return total / static_cast<double>(set.size());
  };
  std::vector<NeuronScore> out;
  for (std::size_t l : layers) {
    const std::size_t M = vulnerable.front()->layers[l].mlp_hidden.cols();
    for (std::size_t n = 0; n < M; ++n) {
      NeuronScore s;
      s.layer = l;
      s.neuron = n;
      s.mean_act_vul = class_mean(vulnerable, l, n);
      s.mean_act_safe = class_mean(safe, l, n);
      s.selectivity = s.mean_act_vul - s.mean_act_safe;
      out.push_back(s);
    }
  }
  return out;
}

std::vector<NodeContribution> margin_contributions(const TransformerWeights& weights,
                                                   std::span<const TokenId> tokens) {
  const ModelSpec& spec = weights.spec;
  const double base = classify(weights, tokens).margin;
  std::vector<NodeContribution> out;
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    for (std::size_t h = 0; h < spec.n_heads; ++h) {
      Hooks hooks;
      hooks.heads.push_back({l, h, {}, {}, 0.0, 0.0});
      out.push_back({Site::head_out, l, h, base - classify(weights, tokens, &hooks).margin});
    }
    for (std::size_t n = 0; n < spec.d_mlp; ++n) {
      Hooks hooks;
      hooks.neurons.push_back({l, n, {}, 0.0, 0.0});
      out.push_back({Site::mlp_hidden, l, n, base - classify(weights, tokens, &hooks).margin});
    }
  }
  return out;
}

Table oracle_scores(const PlantedCircuitSpec& spec, const SyntheticCorpus& corpus, const TransformerWeights& weights,
                    double lambda, double l0_threshold) {
  std::vector<ActivationTrace> traces;
  std::vector<Label> predicted;
  for (const auto& s : corpus.samples) {
    auto r = forward(weights, s.tokens, CaptureFlags::all());
    const std::size_t last = r.logits.rows() - 1;
    const double margin = r.logits(last, spec.model.vuln_token_id) - r.logits(last, spec.model.safe_token_id);
    predicted.push_back(margin > 0.0 ? Label::vulnerable : Label::safe);
    traces.push_back(std::move(*r.trace));
  }
  std::vector<const ActivationTrace*> tp, tn, vul, safe;
  Table table;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const Label truth = corpus.samples[i].label;
    (truth == Label::vulnerable ? vul : safe).push_back(&traces[i]);
    if (predicted[i] == truth) (truth == Label::vulnerable ? tp : tn).push_back(&traces[i]);
    table.l0.push_back(l0_counts(traces[i], l0_threshold));
  }
  if (!tp.empty() && !tn.empty()) {
    table.heads = head_scores(tp, tn, lambda);
    std::stable_sort(table.heads.begin(), table.heads.end(), [](const HeadScore& a, const HeadScore& b) {
      return a.importance < b.importance || (a.importance == b.importance && (a.layer < b.layer || (a.layer == b.layer && a.head < b.head)));
    });
  }
  if (!vul.empty() && !safe.empty()) {
    std::vector<std::size_t> layers;
    for (std::size_t l = 0; l < spec.model.n_layers; ++l) layers.push_back(l);
    table.neurons = selectivities(vul, safe, layers);
    std::stable_sort(table.neurons.begin(), table.neurons.end(), [](const NeuronScore& a, const NeuronScore& b) {
      return a.selectivity > b.selectivity;  // input is already in (layer, neuron) order
    });
  }
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    if (corpus.samples[i].label == Label::vulnerable) {
      table.contributions = margin_contributions(weights, corpus.samples[i].tokens);
      break;
    }
  }
  return table;
}

}  // namespace oracle

}  // namespace cprobe
