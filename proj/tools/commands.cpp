// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>

#include "cprobe/attribution.hpp"
#include "cprobe/corpus.hpp"
#include "cprobe/error.hpp"
#include "cprobe/interventions.hpp"
#include "cprobe/metrics.hpp"
#include "cprobe/model.hpp"
#include "cprobe/report.hpp"
#include "cprobe/stats.hpp"
#include "cprobe/synth.hpp"
#include "cprobe/trace.hpp"

namespace cprobe::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[md[i] >> 4];
    hex += kHex[md[i] & 0xF];
  }
  return hex;
}

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::size_t parse_index(const std::string& text, const char* what) {
  std::size_t v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError(std::string("invalid ") + what + " \"" + text + "\"");
  }
  return v;
}

// "all" or a list of indices; checked against the model depth.
std::vector<std::size_t> parse_layers(const std::vector<std::string>& items, std::size_t n_layers,
                                      const char* flag) {
  std::vector<std::size_t> out;
  if (items.size() == 1 && items[0] == "all") {
    for (std::size_t l = 0; l < n_layers; ++l) out.push_back(l);
    return out;
  }
  for (const auto& s : items) {
    const std::size_t l = parse_index(s, "layer");
    if (l >= n_layers) {
      throw ConfigError(std::string(flag) + ": layer " + s + " out of range for a " + std::to_string(n_layers) +
                        "-layer model (pass " + flag + " all or explicit indices)");
    }
    out.push_back(l);
  }
  return out;
}

// "<layer>.<index>" pairs.
std::pair<std::size_t, std::size_t> parse_pair(const std::string& s, const char* what) {
  const auto dot = s.find('.');
  if (dot == std::string::npos) throw ConfigError(std::string("expected <layer>.<index> for ") + what + ", got \"" + s + "\"");
  return {parse_index(s.substr(0, dot), what), parse_index(s.substr(dot + 1), what)};
}

ojson spec_json(const ModelSpec& s) {
  return {{"n_layers", s.n_layers}, {"n_heads", s.n_heads}, {"d_model", s.d_model}, {"d_mlp", s.d_mlp},
          {"vocab_size", s.vocab_size}, {"max_seq", s.max_seq}, {"bos_token_id", s.bos_token_id},
          {"vuln_token_id", s.vuln_token_id}, {"safe_token_id", s.safe_token_id}};
}

struct Loaded {
  TransformerWeights weights;
  Corpus corpus;
  CorpusView view;
};

Loaded load_inputs(const ViewOptions& o, RunRecord& rec) {
  if (o.model.empty()) throw ConfigError("--model is required");
  if (o.corpus.empty()) throw ConfigError("--corpus is required");
  Loaded l{load_weights(o.model), load_corpus(o.corpus), {}};
  tokenize_corpus(l.corpus, l.weights.spec);
  l.view = o.balanced ? balanced_view(l.corpus, o.seed) : full_view(l.corpus);
  rec.inputs.push_back(o.model);
  rec.inputs.push_back(o.corpus);
  rec.config["model"] = o.model.string();
  rec.config["corpus"] = o.corpus.string();
  rec.config["balanced"] = o.balanced;
  rec.config["view_seed"] = o.seed;
  rec.config["view_size"] = l.view.size();
  return l;
}

void add_store_inputs(const fs::path& store, const TraceSet& set, RunRecord& rec) {
  rec.inputs.push_back(store / "manifest.json");
  for (const auto& r : set.records) rec.inputs.push_back(store / r.file);
}

L0Source parse_l0_source(const std::string& s) {
  if (s == "mlp_out") return L0Source::mlp_out;
  if (s == "mlp_hidden") return L0Source::mlp_hidden;
  throw ConfigError("--l0-source must be mlp_out or mlp_hidden");
}

std::vector<NormProfile> profiles_of(const TraceSet& set, double threshold, L0Source source) {
  std::vector<NormProfile> out;
  for (std::size_t i = 0; i < set.traces.size(); ++i) {
    out.push_back(norm_profile(set.traces[i], set.records[i], threshold, source));
  }
  return out;
}

void check_positive(double v, const char* flag) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(flag) + " must be a positive finite number");
}

}  // namespace

// ---------------------------------------------------------------------------

RunRecord run_synth(const Common& c, const SynthOptions& o) {
  RunRecord rec;
  PlantedCircuitSpec spec;
  try {
    spec = planted_preset(o.preset);
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  if (o.noise) {
    if (!(*o.noise >= 0.0) || !std::isfinite(*o.noise)) throw ConfigError("--noise must be finite and nonnegative");
    spec.noise = *o.noise;
  }
  if (o.n_per_class < 1) throw ConfigError("--n-per-class must be at least 1");
  rec.config = {{"preset", spec.name}, {"seed", o.seed}, {"n_per_class", o.n_per_class}, {"noise", spec.noise}};

  ensure_dir(c.out);
  save_weights(build_planted_model(spec, o.seed), c.out / "model.cpb");
  const SyntheticCorpus corpus = generate_corpus(spec, o.n_per_class, o.seed);
  save_corpus(corpus.samples, c.out / "corpus.jsonl");

  ojson circuit = {{"preset", spec.name},
                   {"seed", o.seed},
                   {"noise", spec.noise},
                   {"model", spec_json(spec.model)},
                   {"safety_head", {{"layer", spec.safety_head.layer}, {"head", spec.safety_head.head}}},
                   {"mover_head", {{"layer", spec.mover_head.layer}, {"head", spec.mover_head.head}}},
                   {"vuln_neuron", {{"layer", spec.vuln_neuron.layer}, {"index", spec.vuln_neuron.index}}},
                   {"decision_layer", spec.decision_layer},
                   {"decision_neurons", spec.decision_neurons},
                   {"noise_layers", spec.noise_layers()},
                   {"safety_token", spec.safety_token},
                   {"trigger_token", spec.trigger_token}};
  write_text(c.out / "circuit.json", circuit.dump(2) + "\n");
  rec.outputs = {"circuit.json", "corpus.jsonl", "model.cpb"};
  return rec;
}

RunRecord run_trace(const Common& c, const TraceOptions& o) {
  RunRecord rec;
  CaptureFlags flags;
  for (const auto& s : o.capture) {
    if (s == "all") flags = CaptureFlags::all();
    else if (s == "residual") flags.residual = true;
    else if (s == "attention") flags.attention = true;
    else if (s == "mlp_hidden") flags.mlp_hidden = true;
    else if (s == "mlp_out") flags.mlp_out = true;
    else throw ConfigError("--capture: unknown site \"" + s + "\"");
  }
  if (!flags.any()) throw ConfigError("--capture selects no sites");
  const Loaded in = load_inputs(o.view, rec);
  rec.config["capture"] = {{"residual", flags.residual}, {"attention", flags.attention},
                           {"mlp_hidden", flags.mlp_hidden}, {"mlp_out", flags.mlp_out}};
  ensure_dir(c.out);
  const TraceManifest m = capture_traces(in.weights, in.corpus, in.view, c.out, {flags, c.workers});
  rec.outputs.push_back("manifest.json");
  std::size_t failed = 0;
  for (const auto& r : m.samples) {
    if (!r.file.empty()) rec.outputs.push_back(r.file);
    if (r.error) {
      ++failed;
      rec.warnings.push_back("sample " + r.id + ": " + *r.error);
    }
  }
  rec.config["captured"] = m.samples.size() - failed;
  return rec;
}

RunRecord run_profile(const Common& c, const ProfileOptions& o) {
  RunRecord rec;
  if (!(o.threshold >= 0.0)) throw ConfigError("--threshold must be nonnegative");
  const L0Source source = parse_l0_source(o.l0_source);
  const TraceSet set = load_trace_store(o.traces);
  add_store_inputs(o.traces, set, rec);
  rec.config = {{"traces", o.traces.string()}, {"threshold", o.threshold}, {"l0_source", o.l0_source}};
  const auto profiles = profiles_of(set, o.threshold, source);
  ensure_dir(c.out);
  write_profiles_csv(profiles, c.out / "profiles.csv");
  write_aggregate_csv(aggregate_profiles(profiles, GroupBy::label), c.out / "profiles_by_label.csv");
  write_aggregate_csv(aggregate_profiles(profiles, GroupBy::cwe), c.out / "profiles_by_cwe.csv");
  rec.outputs = {"profiles.csv", "profiles_by_cwe.csv", "profiles_by_label.csv"};
  return rec;
}

RunRecord run_heads(const Common& c, const HeadsOptions& o) {
  RunRecord rec;
  if (!std::isfinite(o.lambda)) throw ConfigError("--lambda must be finite");
  const TraceSet set = load_trace_store(o.traces);
  add_store_inputs(o.traces, set, rec);
  rec.config = {{"traces", o.traces.string()}, {"lambda", o.lambda}};
  const auto tp = set.select({Outcome::tp});
  const auto tn = set.select({Outcome::tn});
  rec.config["n_tp"] = tp.size();
  rec.config["n_tn"] = tn.size();
  const auto scores = head_importance(tp, tn, o.lambda, c.workers);
  ensure_dir(c.out);
  write_head_scores_csv(scores, c.out / "heads.csv");
  rec.outputs = {"heads.csv"};
  return rec;
}

RunRecord run_neurons(const Common& c, const NeuronsOptions& o) {
  RunRecord rec;
  const TraceSet set = load_trace_store(o.traces);
  add_store_inputs(o.traces, set, rec);
  SelectivityOptions so;
  so.layers = parse_layers(o.layers, set.manifest.model.n_layers, "--layers");
  so.k = o.k;
  so.workers = c.workers;
  if (o.pooling == "mean") so.pooling = Pooling::mean;
  else if (o.pooling == "max") so.pooling = Pooling::max;
  else if (o.pooling == "last") so.pooling = Pooling::last;
  else throw ConfigError("--pooling must be mean, max or last");
  const std::size_t total = so.layers.size() * set.manifest.model.d_mlp;
  if (so.k < 1 || so.k > total) throw ConfigError("--k must be in [1, " + std::to_string(total) + "]");
  rec.config = {{"traces", o.traces.string()}, {"layers", so.layers}, {"k", so.k}, {"pooling", o.pooling}};

  const auto result = neuron_selectivity(set.by_label(Label::vulnerable), set.by_label(Label::safe), so);
  ensure_dir(c.out);
  write_neuron_scores_csv(result.top, c.out / "neurons.csv");
  write_contrastive_csv(result.matrix, c.out / "contrastive.csv");
  write_boundary_csv(boundary_check(result.matrix), c.out / "boundary.csv");
  rec.outputs = {"boundary.csv", "contrastive.csv", "neurons.csv"};
  return rec;
}

RunRecord run_ablate(const Common& c, const AblateOptions& o) {
  RunRecord rec;
  MeanSite site;
  if (o.site == "block") site = MeanSite::block;
  else if (o.site == "residual") site = MeanSite::residual;
  else throw ConfigError("--site must be block or residual");
  const Loaded in = load_inputs(o.view, rec);
  const ModelSpec& spec = in.weights.spec;

  std::vector<InterventionSpec> specs{NoIntervention{}};
  std::vector<std::size_t> layers;
  if (!o.layers.empty()) layers = parse_layers(o.layers, spec.n_layers, "--layers");
  for (std::size_t l : layers) specs.push_back(LayerMeanAblation{{l}, site});

  NeuronAblation neurons;
  for (const auto& s : o.neurons) {
    const auto [l, n] = parse_pair(s, "--neurons");
    neurons.neurons.push_back({l, n});
  }
  if (!o.top_neurons.empty()) {
    const auto rows = read_csv(o.top_neurons);
    if (rows.empty() || rows[0].size() < 2 || rows[0][0] != "layer" || rows[0][1] != "neuron") {
      throw FormatError(o.top_neurons.string() + ": not a neurons.csv file");
    }
    for (std::size_t i = 1; i < rows.size() && i <= o.k; ++i) {
      neurons.neurons.push_back({parse_u64(rows[i][0]), parse_u64(rows[i][1])});
    }
    rec.inputs.push_back(o.top_neurons);
  }
  if (!neurons.neurons.empty()) specs.push_back(neurons);

  HeadKnockout heads;
  for (const auto& s : o.heads) {
    const auto [l, h] = parse_pair(s, "--heads");
    heads.heads.push_back({l, h});
  }
  if (!heads.heads.empty()) specs.push_back(heads);
  for (const auto& s : specs) {
    try {
      validate(s, spec);
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
  }

  ojson targets = ojson::array();
  for (const auto& s : specs) targets.push_back(describe(s));
  rec.config["site"] = o.site;
  rec.config["interventions"] = targets;

  const EvaluationSet eval = evaluation_set(in.weights, in.corpus, in.view, c.workers);
  rec.config["evaluated"] = eval.samples.size();
  const MeanBank bank = build_mean_bank(in.weights, in.corpus, in.view, c.workers);
  rec.config["mean_bank"] = bank.provenance;
  std::vector<InterventionOutcome> outcomes;
  for (const auto& s : specs) outcomes.push_back(run_ablation(in.weights, in.corpus, eval, s, bank, c.workers));
  ensure_dir(c.out);
  write_outcomes_csv(outcomes, c.out / "ablation.csv");
  write_predictions_csv(outcomes, c.out / "ablation_predictions.csv");
  rec.outputs = {"ablation.csv", "ablation_predictions.csv"};
  return rec;
}

RunRecord run_patch(const Common& c, const PatchOptions& o) {
  RunRecord rec;
  std::vector<PatchDirection> directions;
  if (o.directions == "both") {
    directions = {PatchDirection::safe_to_vuln, PatchDirection::vuln_to_safe};
  } else if (auto d = parse_patch_direction(o.directions)) {
    directions = {*d};
  } else {
    throw ConfigError("--directions must be both, safe_to_vuln or vuln_to_safe");
  }
  for (double k : o.coefficients) {
    if (!std::isfinite(k)) throw ConfigError("--coefficients must be finite");
  }
  const Loaded in = load_inputs(o.view, rec);
  const auto layers = parse_layers(o.layers, in.weights.spec.n_layers, "--layers");
  rec.config["layers"] = layers;
  rec.config["coefficients"] = o.coefficients;
  rec.config["directions"] = o.directions;

  const EvaluationSet eval = evaluation_set(in.weights, in.corpus, in.view, c.workers);
  const MeanBank bank = build_mean_bank(in.weights, in.corpus, in.view, c.workers);
  rec.config["mean_bank"] = bank.provenance;
  const auto points = patch_sweep(in.weights, in.corpus, eval, bank, layers, o.coefficients, directions, c.workers);
  ensure_dir(c.out);
  write_patch_sweep_csv(points, c.out / "patch_sweep.csv");
  rec.outputs = {"patch_sweep.csv"};
  return rec;
}

RunRecord run_attribute(const Common& c, const AttributeOptions& o) {
  RunRecord rec;
  check_positive(o.threshold, "--threshold");
  check_positive(o.edge_threshold, "--edge-threshold");
  const Loaded in = load_inputs(o.view, rec);
  std::vector<std::size_t> chosen;
  if (!o.samples.empty()) {
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < in.corpus.size(); ++i) by_id[in.corpus[i].id] = i;
    for (const auto& id : o.samples) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw ConfigError("--samples: unknown id \"" + id + "\"");
      chosen.push_back(it->second);
    }
  } else {
    chosen = in.view.ordered();
    std::sort(chosen.begin(), chosen.end());
  }
  if (o.limit > 0 && chosen.size() > o.limit) chosen.resize(o.limit);
  rec.config["samples"] = chosen.size();
  rec.config["threshold"] = o.threshold;
  rec.config["edge_threshold"] = o.edge_threshold;
  rec.config["edges"] = o.edges;

  ensure_dir(c.out / "graphs");
  CsvWriter census_csv({"sample_id", "scope", "first_layer", "last_layer", "probed", "active", "fraction"});
  for (std::size_t i : chosen) {
    const SampleRecord& s = in.corpus[i];
    AttributionGraph g = attribute(in.weights, s.tokens, o.threshold);
    g.sample_id = s.id;
    if (o.edges) edge_attribution(in.weights, s.tokens, g, o.edge_threshold, c.workers);
    const std::string name = "graphs/" + trace_file_name(s.id);
    const std::string file = name.substr(0, name.size() - 4) + ".json";
    write_text(c.out / file, graph_to_json(g));
    rec.outputs.push_back(file);
    const LayerCensus census = layer_census(g);
    for (const auto& r : census.rows) {
      census_csv.cell(s.id).cell("layer").cell(r.layer).cell(r.layer).cell(r.probed).cell(r.active).cell(r.fraction);
      census_csv.end_row();
    }
    for (const auto& b : census.bands) {
      census_csv.cell(s.id).cell(b.name).cell(b.first_layer).cell(b.last_layer).cell(b.probed).cell(b.active);
      census_csv.cell(b.fraction);
      census_csv.end_row();
    }
    if (g.degenerate) rec.warnings.push_back("sample " + s.id + ": every attribution score is zero");
  }
  census_csv.save(c.out / "census.csv");
  rec.outputs.push_back("census.csv");
  return rec;
}

RunRecord run_stats(const Common& c, const StatsOptions& o) {
  RunRecord rec;
  if (o.profiles.empty() == o.traces.empty()) throw ConfigError("give exactly one of --profiles or --traces");
  if (o.resamples < 1) throw ConfigError("--resamples must be at least 1");
  if (!(o.alpha > 0.0 && o.alpha < 1.0)) throw ConfigError("--alpha must be in (0, 1)");
  SweepOptions so;
  if (o.metric == "l0") so.metric = Metric::l0;
  else if (o.metric == "l2") so.metric = Metric::l2;
  else throw ConfigError("--metric must be l0 or l2");
  so.stratify = o.stratify || !o.cwes.empty();
  so.cwes = o.cwes;
  so.resamples = o.resamples;
  so.seed = o.seed;
  so.alpha = o.alpha;
  so.workers = c.workers;

  std::vector<NormProfile> profiles;
  if (!o.profiles.empty()) {
    profiles = read_profiles_csv(o.profiles);
    rec.inputs.push_back(o.profiles);
    rec.config["profiles"] = o.profiles.string();
  } else {
    const TraceSet set = load_trace_store(o.traces);
    add_store_inputs(o.traces, set, rec);
    profiles = profiles_of(set, o.threshold, parse_l0_source(o.l0_source));
    rec.config["traces"] = o.traces.string();
    rec.config["threshold"] = o.threshold;
    rec.config["l0_source"] = o.l0_source;
  }
  rec.config["metric"] = o.metric;
  rec.config["stratify"] = so.stratify;
  rec.config["cwes"] = o.cwes;
  rec.config["resamples"] = o.resamples;
  rec.config["seed"] = o.seed;
  rec.config["alpha"] = o.alpha;

  const SweepResult result = layer_sweep(profiles, so);
  rec.warnings = result.warnings;
  ensure_dir(c.out);
  write_layer_stats_csv(result.rows, c.out / "layer_stats.csv");
  rec.outputs = {"layer_stats.csv"};
  return rec;
}

}  // namespace cprobe::cli
