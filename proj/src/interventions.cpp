// SPDX-License-Identifier: Apache-2.0

#include "cprobe/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "cprobe/error.hpp"
#include "cprobe/parallel.hpp"
#include "cprobe/report.hpp"

namespace cprobe {

namespace {

using Vec = std::vector<double>;

// Position mean of rows 1..n-1.
Vec position_mean(const MatrixF& m) {
  Vec out(m.cols(), 0.0);
  for (std::size_t p = 1; p < m.rows(); ++p) {
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += m(p, j);
  }
  for (double& v : out) v /= static_cast<double>(m.rows() - 1);
  return out;
}

Vec block_mean(const MatrixF& out, const MatrixF& in) {
  Vec r(out.cols(), 0.0);
  for (std::size_t p = 1; p < out.rows(); ++p) {
    for (std::size_t j = 0; j < out.cols(); ++j) r[j] += static_cast<double>(out(p, j)) - in(p, j);
  }
  for (double& v : r) v /= static_cast<double>(out.rows() - 1);
  return r;
}

struct SampleMeans {
  bool usable = false;
  std::vector<Vec> residual;
  std::vector<Vec> block;
};

std::vector<Vec> average(const std::vector<const std::vector<Vec>*>& parts, std::size_t n_layers, std::size_t d) {
  if (parts.empty()) return {};
  std::vector<Vec> out(n_layers, Vec(d, 0.0));
  for (const auto* part : parts) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t j = 0; j < d; ++j) out[l][j] += (*part)[l][j];
    }
  }
  for (auto& v : out) {
    for (double& x : v) x /= static_cast<double>(parts.size());
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

MeanBank build_mean_bank(const TransformerWeights& weights, const Corpus& corpus, const CorpusView& view,
                         std::size_t workers) {
  std::vector<std::size_t> order = view.ordered();
  std::sort(order.begin(), order.end());
  if (order.empty()) throw DomainError("build_mean_bank: empty view");
  const ModelSpec& spec = weights.spec;

  std::vector<SampleMeans> per_sample(order.size());
  parallel_for(order.size(), workers, [&](std::size_t k) {
    const auto tokens = sample_tokens(corpus[order[k]], spec);
    if (tokens.size() < 2) return;
    const auto result = forward(weights, tokens, CaptureFlags{.residual = true});
    const ActivationTrace& t = *result.trace;
    SampleMeans& m = per_sample[k];
    m.usable = true;
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
      const MatrixF& in = l == 0 ? t.embedding : t.layers[l - 1].residual_out;
      m.residual.push_back(position_mean(t.layers[l].residual_out));
      m.block.push_back(block_mean(t.layers[l].residual_out, in));
    }
  });

  MeanBank bank;
  std::vector<const std::vector<Vec>*> all_r, all_b, vul, safe;
  std::uint64_t hash = 0xcbf29ce484222325ULL;  // FNV-1a over the ids used
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!per_sample[k].usable) continue;
    const SampleRecord& s = corpus[order[k]];
    for (unsigned char c : s.id + "\n") {
      hash ^= c;
      hash *= 0x100000001b3ULL;
    }
    all_r.push_back(&per_sample[k].residual);
    all_b.push_back(&per_sample[k].block);
    (s.label == Label::vulnerable ? vul : safe).push_back(&per_sample[k].residual);
  }
  if (all_r.empty()) throw DomainError("build_mean_bank: every sample is BOS-only");
  bank.n_vulnerable = vul.size();
  bank.n_safe = safe.size();
  bank.residual = average(all_r, spec.n_layers, spec.d_model);
  bank.block = average(all_b, spec.n_layers, spec.d_model);
  bank.residual_vulnerable = average(vul, spec.n_layers, spec.d_model);
  bank.residual_safe = average(safe, spec.n_layers, spec.d_model);
  bank.provenance = std::to_string(vul.size()) + " vulnerable + " + std::to_string(safe.size()) +
                    " safe samples, ids fnv1a " + hex64(hash);
  return bank;
}

std::string mean_bank_to_json(const MeanBank& bank) {
  nlohmann::json j = {{"provenance", bank.provenance},
                      {"n_vulnerable", bank.n_vulnerable},
                      {"n_safe", bank.n_safe},
                      {"residual", bank.residual},
                      {"block", bank.block},
                      {"residual_vulnerable", bank.residual_vulnerable},
                      {"residual_safe", bank.residual_safe}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

const char* to_string(MeanSite site) noexcept { return site == MeanSite::block ? "block" : "residual"; }

const char* to_string(PatchDirection direction) noexcept {
  return direction == PatchDirection::safe_to_vuln ? "safe_to_vuln" : "vuln_to_safe";
}

std::optional<PatchDirection> parse_patch_direction(std::string_view text) noexcept {
  if (text == "safe_to_vuln") return PatchDirection::safe_to_vuln;
  if (text == "vuln_to_safe") return PatchDirection::vuln_to_safe;
  return std::nullopt;
}

namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

std::string join_layers(const std::vector<std::size_t>& layers) {
  std::string s;
  for (std::size_t i = 0; i < layers.size(); ++i) s += (i ? "," : "") + std::to_string(layers[i]);
  return s;
}

}  // namespace

std::string describe(const InterventionSpec& spec) {
  return std::visit(
      Overloaded{
          [](const NoIntervention&) -> std::string { return "baseline"; },
          [](const LayerMeanAblation& a) -> std::string {
            std::string s = "layer_mean[" + join_layers(a.layers) + "]";
            return a.site == MeanSite::block ? s : s + "(residual)";
          },
          [](const NeuronAblation& a) -> std::string {
            if (a.neurons.size() == 1) {
              return "neuron_zero[L" + std::to_string(a.neurons[0].layer) + ".N" +
                     std::to_string(a.neurons[0].index) + "]";
            }
            return "neuron_zero[" + std::to_string(a.neurons.size()) + " neurons]";
          },
          [](const HeadKnockout& a) -> std::string {
            std::string s = "head_knockout[";
            for (std::size_t i = 0; i < a.heads.size(); ++i) {
              s += (i ? "," : "") + std::string("L") + std::to_string(a.heads[i].layer) + "H" +
                   std::to_string(a.heads[i].head);
            }
            return s + "]";
          },
          [](const ActivationPatch& p) -> std::string {
            return "patch[L" + std::to_string(p.layer) + "," + to_string(p.direction) + ",x" +
                   format_double(p.coefficient) + "]";
          },
      },
      spec);
}

void validate(const InterventionSpec& spec, const ModelSpec& model) {
  auto layer_ok = [&](std::size_t l, const char* what) {
    if (l >= model.n_layers) {
      throw DomainError(std::string(what) + ": layer " + std::to_string(l) + " out of range (model has " +
                        std::to_string(model.n_layers) + ")");
    }
  };
  std::visit(Overloaded{
                 [](const NoIntervention&) {},
                 [&](const LayerMeanAblation& a) {
                   if (a.layers.empty()) throw DomainError("layer_mean: no layers given");
                   for (auto l : a.layers) layer_ok(l, "layer_mean");
                 },
                 [&](const NeuronAblation& a) {
                   for (const auto& n : a.neurons) {
                     layer_ok(n.layer, "neuron_zero");
                     if (n.index >= model.d_mlp) {
                       throw DomainError("neuron_zero: neuron " + std::to_string(n.index) + " out of range");
                     }
                   }
                 },
                 [&](const HeadKnockout& a) {
                   for (const auto& h : a.heads) {
                     layer_ok(h.layer, "head_knockout");
                     if (h.head >= model.n_heads) {
                       throw DomainError("head_knockout: head " + std::to_string(h.head) + " out of range");
                     }
                   }
                 },
                 [&](const ActivationPatch& p) {
                   layer_ok(p.layer, "patch");
                   if (!std::isfinite(p.coefficient)) throw DomainError("patch: coefficient must be finite");
                 },
             },
             spec);
}

namespace {

const Vec& bank_layer(const std::vector<Vec>& table, std::size_t layer, const ModelSpec& model, const char* what) {
  if (layer >= table.size() || table[layer].size() != model.d_model) {
    throw DomainError(std::string("mean bank has no ") + what + " mean for layer " + std::to_string(layer));
  }
  return table[layer];
}

Vec steering_vector(const ActivationPatch& p, const ModelSpec& model, const MeanBank& bank) {
  if (!bank.has_class_means()) throw DomainError("patch: mean bank lacks class-conditional means");
  const Vec& safe = bank_layer(bank.residual_safe, p.layer, model, "safe-class");
  const Vec& vul = bank_layer(bank.residual_vulnerable, p.layer, model, "vulnerable-class");
  const bool to_vul = p.direction == PatchDirection::safe_to_vuln;
  const Vec& source = to_vul ? safe : vul;
  const Vec& recipient = to_vul ? vul : safe;
  Vec v(model.d_model);
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = p.coefficient * (source[j] - recipient[j]);
  return v;
}

}  // namespace

Hooks make_hooks(const InterventionSpec& spec, const ModelSpec& model, const MeanBank* bank) {
  validate(spec, model);
  Hooks hooks;
  auto need_bank = [&](const char* what) -> const MeanBank& {
    if (!bank) throw DomainError(std::string(what) + ": requires a mean bank");
    return *bank;
  };
  std::visit(Overloaded{
                 [](const NoIntervention&) {},
                 [&](const LayerMeanAblation& a) {
                   const MeanBank& b = need_bank("layer_mean");
                   for (auto l : a.layers) {
                     if (a.site == MeanSite::block) {
                       hooks.residual.push_back(
                           {l, ResidualEditKind::replace_block, bank_layer(b.block, l, model, "block")});
                     } else {
                       hooks.residual.push_back(
                           {l, ResidualEditKind::replace, bank_layer(b.residual, l, model, "residual")});
                     }
                   }
                 },
                 [&](const NeuronAblation& a) {
                   for (const auto& n : a.neurons) hooks.neurons.push_back({n.layer, n.index, {}, 0.0, 0.0});
                 },
                 [&](const HeadKnockout& a) {
                   for (const auto& h : a.heads) hooks.heads.push_back({h.layer, h.head, {}, {}, 0.0, 0.0});
                 },
                 [&](const ActivationPatch& p) {
                   if (p.coefficient == 0.0) return;
                   hooks.residual.push_back(
                       {p.layer, ResidualEditKind::add, steering_vector(p, model, need_bank("patch"))});
                 },
             },
             spec);
  return hooks;
}

// ---------------------------------------------------------------------------

EvaluationSet evaluation_set(const TransformerWeights& weights, const Corpus& corpus, const CorpusView& view,
                             std::size_t workers) {
  std::vector<std::size_t> order = view.ordered();
  std::sort(order.begin(), order.end());
  std::vector<BaselineRecord> all(order.size());
  parallel_for(order.size(), workers, [&](std::size_t k) {
    const SampleRecord& s = corpus[order[k]];
    const Classification c = classify(weights, sample_tokens(s, weights.spec));
    all[k] = {order[k], s.label, c.label, c.margin};
  });
  EvaluationSet eval;
  eval.view_size = order.size();
  for (const auto& r : all) {
    if (r.predicted != r.label) continue;
    (r.label == Label::vulnerable ? eval.n_vulnerable : eval.n_safe) += 1;
    eval.samples.push_back(r);
  }
  return eval;
}

double class_weighted_accuracy(double tp_accuracy, std::size_t n_vulnerable, double tn_accuracy,
                               std::size_t n_safe) noexcept {
  double sum = 0.0;
  if (n_vulnerable > 0) sum += tp_accuracy * static_cast<double>(n_vulnerable);
  if (n_safe > 0) sum += tn_accuracy * static_cast<double>(n_safe);
  const std::size_t n = n_vulnerable + n_safe;
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

namespace {

InterventionOutcome evaluate(const TransformerWeights& weights, const Corpus& corpus,
                             std::span<const BaselineRecord> samples, const Hooks& hooks, std::string component,
                             std::size_t workers) {
  if (samples.empty()) throw DomainError(component + ": empty evaluation set");
  InterventionOutcome out;
  out.component = std::move(component);
  out.samples.resize(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t k) {
    const BaselineRecord& b = samples[k];
    const SampleRecord& s = corpus[b.index];
    const Classification c = classify(weights, sample_tokens(s, weights.spec), hooks.empty() ? nullptr : &hooks);
    out.samples[k] = {s.id, s.label, b.predicted, c.label, b.margin, c.margin, c.label != b.predicted};
  });
  std::size_t correct_v = 0, correct_s = 0;
  for (const auto& p : out.samples) {
    const bool correct = p.predicted == p.label;
    if (p.label == Label::vulnerable) {
      ++out.n_vulnerable;
      correct_v += correct;
    } else {
      ++out.n_safe;
      correct_s += correct;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.tp_accuracy = out.n_vulnerable ? static_cast<double>(correct_v) / static_cast<double>(out.n_vulnerable) : nan;
  out.tn_accuracy = out.n_safe ? static_cast<double>(correct_s) / static_cast<double>(out.n_safe) : nan;
  out.overall = class_weighted_accuracy(out.tp_accuracy, out.n_vulnerable, out.tn_accuracy, out.n_safe);
  out.delta_overall = out.overall - 1.0;
  return out;
}

}  // namespace

InterventionOutcome run_intervention(const TransformerWeights& weights, const Corpus& corpus,
                                     const EvaluationSet& eval, const InterventionSpec& spec, const MeanBank* bank,
                                     std::size_t workers) {
  if (const auto* patch = std::get_if<ActivationPatch>(&spec)) {
    if (!bank) throw DomainError("patch: requires a mean bank");
    return run_patching(weights, corpus, eval, *patch, *bank, workers);
  }
  const Hooks hooks = make_hooks(spec, weights.spec, bank);
  return evaluate(weights, corpus, eval.samples, hooks, describe(spec), workers);
}

InterventionOutcome run_ablation(const TransformerWeights& weights, const Corpus& corpus, const EvaluationSet& eval,
                                 const InterventionSpec& spec, const MeanBank& bank, std::size_t workers) {
  return run_intervention(weights, corpus, eval, spec, &bank, workers);
}

InterventionOutcome run_patching(const TransformerWeights& weights, const Corpus& corpus, const EvaluationSet& eval,
                                 const ActivationPatch& patch, const MeanBank& bank, std::size_t workers) {
  const Hooks hooks = make_hooks(patch, weights.spec, &bank);
  if (!bank.has_class_means()) throw DomainError("patch: mean bank lacks class-conditional means");
  const Label recipient = patch.direction == PatchDirection::safe_to_vuln ? Label::vulnerable : Label::safe;
  std::vector<BaselineRecord> recipients;
  for (const auto& b : eval.samples) {
    if (b.label == recipient) recipients.push_back(b);
  }
  if (recipients.empty()) {
    throw DomainError(std::string("patch: no baseline-correct ") + to_string(recipient) + " samples to patch");
  }
  InterventionOutcome out = evaluate(weights, corpus, recipients, hooks, describe(patch), workers);
  std::size_t flips = 0;
  for (const auto& p : out.samples) flips += p.flipped;
  out.flip_rate = static_cast<double>(flips) / static_cast<double>(out.samples.size());
  return out;
}

std::vector<double> default_patch_coefficients() { return {1.0, 2.0, 4.0, 8.0}; }

std::vector<PatchPoint> patch_sweep(const TransformerWeights& weights, const Corpus& corpus, const EvaluationSet& eval,
                                    const MeanBank& bank, std::span<const std::size_t> layers,
                                    std::span<const double> coefficients,
                                    std::span<const PatchDirection> directions, std::size_t workers) {
  std::vector<PatchPoint> points;
  for (PatchDirection d : directions) {
    for (std::size_t l : layers) {
      for (double c : coefficients) {
        const auto out = run_patching(weights, corpus, eval, {l, d, c}, bank, workers);
        points.push_back({l, c, d, *out.flip_rate, out.samples.size()});
      }
    }
  }
  return points;
}

void write_outcomes_csv(std::span<const InterventionOutcome> outcomes, const std::filesystem::path& path) {
  CsvWriter csv({"component", "overall", "delta_overall", "tp_acc", "tn_acc", "n_vulnerable", "n_safe", "flip_rate"});
  for (const auto& o : outcomes) {
    csv.cell(o.component).cell(o.overall).cell(o.delta_overall).cell(o.tp_accuracy).cell(o.tn_accuracy);
    csv.cell(o.n_vulnerable).cell(o.n_safe).cell(o.flip_rate);
    csv.end_row();
  }
  csv.save(path);
}

void write_predictions_csv(std::span<const InterventionOutcome> outcomes, const std::filesystem::path& path) {
  CsvWriter csv({"component", "sample_id", "label", "baseline", "predicted", "baseline_margin", "margin", "flipped"});
  for (const auto& o : outcomes) {
    for (const auto& p : o.samples) {
      csv.cell(o.component).cell(p.id).cell(to_string(p.label)).cell(to_string(p.baseline));
      csv.cell(to_string(p.predicted)).cell(p.baseline_margin).cell(p.margin).cell(p.flipped ? "1" : "0");
      csv.end_row();
    }
  }
  csv.save(path);
}

void write_patch_sweep_csv(std::span<const PatchPoint> points, const std::filesystem::path& path) {
  CsvWriter csv({"layer", "coefficient", "direction", "flip_rate", "recipients"});
  for (const auto& p : points) {
    csv.cell(p.layer).cell(p.coefficient).cell(to_string(p.direction)).cell(p.flip_rate).cell(p.recipients);
    csv.end_row();
  }
  csv.save(path);
}

}  // namespace cprobe
