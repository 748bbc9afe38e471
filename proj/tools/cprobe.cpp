// SPDX-License-Identifier: Apache-2.0
//
// cprobe: command-line driver. Every subcommand writes its reports plus
// <out>/<command>.manifest.json recording the argv, effective config, input
// digests and output list; `cprobe replay <manifest>` re-runs it.
//
// Exit codes: 0 success, 2 configuration error, 3 input error (unreadable,
// malformed or inconsistent files), 4 runtime error.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "commands.hpp"
#include "cprobe/error.hpp"
#include "cprobe/synth.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using namespace cprobe;
using namespace cprobe::cli;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kConfig = 2, kInput = 3, kRuntime = 4 };

void report_error(const char* kind, int code, const std::string& message) {
  ojson j = {{"error", {{"kind", kind}, {"exit_code", code}, {"message", message}}}};
  std::cerr << j.dump() << "\n";
}

fs::path default_out() {
  const char* env = std::getenv("CPROBE_OUT");
  return env && *env ? fs::path(env) : fs::path("cprobe-out");
}

void write_manifest(const std::string& command, const std::vector<std::string>& argv, const Common& common,
                    const RunRecord& rec) {
  ojson inputs = ojson::array();
  for (const auto& p : rec.inputs) inputs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  std::vector<std::string> outputs = rec.outputs;
  std::sort(outputs.begin(), outputs.end());
  ojson m = {{"tool", "cprobe"},
             {"version", kVersion},
             {"command", command},
             {"argv", argv},
             {"cwd", fs::current_path().string()},
             {"out", common.out.string()},
             {"workers", common.workers},
             {"config", rec.config},
             {"inputs", inputs},
             {"outputs", outputs},
             {"warnings", rec.warnings}};
  const fs::path path = common.out / (command + ".manifest.json");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << m.dump(2) << "\n";
}

void add_common(CLI::App* sub, Common& common) {
  sub->add_option("--out,-o", common.out, "Output directory (default: $CPROBE_OUT, else ./cprobe-out)");
  sub->add_option("--workers,-j", common.workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
}

void add_view(CLI::App* sub, ViewOptions& v) {
  sub->add_option("--model,-m", v.model, "Weight file (.cpb)")->required();
  sub->add_option("--corpus,-c", v.corpus, "JSONL corpus")->required();
  sub->add_flag("--balanced", v.balanced, "Downsample the majority class to equal counts");
  sub->add_option("--seed", v.seed, "Seed for --balanced")->capture_default_str();
}

int dispatch(std::vector<std::string> args);

int replay(const fs::path& manifest_path, const std::optional<fs::path>& out_override) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  ojson m;
  try {
    m = ojson::parse(in);
  } catch (const ojson::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  if (m.value("tool", "") != "cprobe" || !m.contains("argv")) {
    throw FormatError(manifest_path.string() + ": not a cprobe run manifest");
  }
  std::vector<std::string> argv = m.at("argv").get<std::vector<std::string>>();
  const fs::path cwd = m.at("cwd").get<std::string>();
  std::optional<fs::path> out;
  if (out_override) out = fs::absolute(*out_override);

  fs::current_path(cwd);
  for (const auto& entry : m.at("inputs")) {
    const fs::path p = entry.at("path").get<std::string>();
    if (sha256_file(p) != entry.at("sha256").get<std::string>()) {
      throw CorruptFileError("replay: input " + p.string() + " changed since the recorded run");
    }
  }
  if (out) {
    std::vector<std::string> filtered;
    for (std::size_t i = 0; i < argv.size(); ++i) {
      if (argv[i] == "--out" || argv[i] == "-o") {
        ++i;
        continue;
      }
      if (argv[i].rfind("--out=", 0) == 0) continue;
      filtered.push_back(argv[i]);
    }
    filtered.push_back("--out");
    filtered.push_back(out->string());
    argv = std::move(filtered);
  }
  return dispatch(argv);
}

int dispatch(std::vector<std::string> args) {
  CLI::App app{"cprobe: probe hook-instrumented transformers for vulnerability-detection circuits"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Common common{default_out(), 1};

  SynthOptions synth;
  synth.preset = std::string(kDefaultPreset);
  auto* s_synth = app.add_subcommand("synth", "Build a planted-circuit model and its synthetic corpus");
  s_synth->add_option("--preset", synth.preset, "Preset name")->capture_default_str();
  s_synth->add_option("--seed", synth.seed, "Seed for weights noise and corpus")->capture_default_str();
  s_synth->add_option("--n-per-class", synth.n_per_class, "Samples per label")->capture_default_str();
  s_synth->add_option("--noise", synth.noise, "Noise scale (default: the preset's, 0.01)");
  add_common(s_synth, common);

  TraceOptions trace;
  auto* s_trace = app.add_subcommand("trace", "Capture activation traces for every sample");
  add_view(s_trace, trace.view);
  s_trace->add_option("--capture", trace.capture, "Sites: all or residual,attention,mlp_hidden,mlp_out")
      ->delimiter(',')
      ->capture_default_str();
  add_common(s_trace, common);

  ProfileOptions profile;
  auto* s_profile = app.add_subcommand("profile", "Per-layer L0 / L2 norm profiles from a trace store");
  s_profile->add_option("--traces,-t", profile.traces, "Trace store directory")->required();
  s_profile->add_option("--threshold", profile.threshold, "L0 magnitude threshold (reference value 1e-6)")
      ->capture_default_str();
  s_profile->add_option("--l0-source", profile.l0_source, "mlp_out or mlp_hidden")->capture_default_str();
  add_common(s_profile, common);

  HeadsOptions heads;
  auto* s_heads = app.add_subcommand("heads", "Rank attention heads by importance score");
  s_heads->add_option("--traces,-t", heads.traces, "Trace store directory")->required();
  s_heads->add_option("--lambda", heads.lambda, "Entropy weight (reference value 0.5)")->capture_default_str();
  add_common(s_heads, common);

  NeuronsOptions neurons;
  auto* s_neurons = app.add_subcommand("neurons", "Rank MLP neurons by vulnerability selectivity");
  s_neurons->add_option("--traces,-t", neurons.traces, "Trace store directory")->required();
  s_neurons->add_option("--layers", neurons.layers, "Layers to scan, or 'all' (reference set 6,7,10,11)")
      ->delimiter(',')
      ->capture_default_str();
  s_neurons->add_option("--k", neurons.k, "Top-k neurons reported (reference value 20)")->capture_default_str();
  s_neurons->add_option("--pooling", neurons.pooling, "Position pooling: mean, max or last")->capture_default_str();
  add_common(s_neurons, common);

  AblateOptions ablate;
  auto* s_ablate = app.add_subcommand("ablate", "Layer mean ablation, neuron zeroing and head knockout");
  add_view(s_ablate, ablate.view);
  s_ablate->add_option("--layers", ablate.layers, "Layers to mean-ablate, one row each, or 'all'")->delimiter(',');
  s_ablate->add_option("--site", ablate.site, "Mean-ablation site: block or residual")->capture_default_str();
  s_ablate->add_option("--neurons", ablate.neurons, "Neurons to zero together, as layer.index")->delimiter(',');
  s_ablate->add_option("--top-neurons", ablate.top_neurons, "Also zero the first --k rows of a neurons.csv");
  s_ablate->add_option("--k", ablate.k, "Rows taken from --top-neurons (reference value 20)")->capture_default_str();
  s_ablate->add_option("--heads", ablate.heads, "Heads to knock out together, as layer.head")->delimiter(',');
  add_common(s_ablate, common);

  PatchOptions patch;
  auto* s_patch = app.add_subcommand("patch", "Class-mean activation patching sweep");
  add_view(s_patch, patch.view);
  s_patch->add_option("--layers", patch.layers, "Layers, or 'all'")->delimiter(',')->capture_default_str();
  s_patch->add_option("--coefficients", patch.coefficients, "Steering coefficients (reference set 1,2,4,8)")
      ->delimiter(',')
      ->capture_default_str();
  s_patch->add_option("--directions", patch.directions, "both, safe_to_vuln or vuln_to_safe")->capture_default_str();
  add_common(s_patch, common);

  AttributeOptions attr;
  auto* s_attr = app.add_subcommand("attribute", "Input-x-gradient attribution graphs");
  add_view(s_attr, attr.view);
  s_attr->add_option("--samples", attr.samples, "Sample ids (default: the whole view)")->delimiter(',');
  s_attr->add_option("--limit", attr.limit, "Stop after this many samples (0 = no limit)")->capture_default_str();
  s_attr->add_option("--threshold", attr.threshold, "Active-node threshold on normalized scores (reference value 0.01)")
      ->capture_default_str();
  s_attr->add_option("--edge-threshold", attr.edge_threshold, "Relative edge pruning threshold")->capture_default_str();
  s_attr->add_flag("--edges,!--no-edges", attr.edges, "Compute edges between adjacent-layer active nodes");
  add_common(s_attr, common);

  StatsOptions stats;
  auto* s_stats = app.add_subcommand("stats", "Per-layer KS, Cohen's d, corrections and bootstrap CIs");
  s_stats->add_option("--profiles", stats.profiles, "profiles.csv from the profile command");
  s_stats->add_option("--traces,-t", stats.traces, "Trace store (profiles computed on the fly)");
  s_stats->add_option("--threshold", stats.threshold, "L0 threshold with --traces")->capture_default_str();
  s_stats->add_option("--l0-source", stats.l0_source, "mlp_out or mlp_hidden with --traces")->capture_default_str();
  s_stats->add_option("--metric", stats.metric, "l0 or l2")->capture_default_str();
  s_stats->add_flag("--stratify", stats.stratify, "One sweep per CWE tag against the safe pool");
  s_stats->add_option("--cwes", stats.cwes, "Restrict strata to these tags")->delimiter(',');
  s_stats->add_option("--resamples", stats.resamples, "Bootstrap resamples (reference value 1000)")
      ->capture_default_str();
  s_stats->add_option("--seed", stats.seed, "Bootstrap seed")->capture_default_str();
  s_stats->add_option("--alpha", stats.alpha, "Family-wise / FDR level")->capture_default_str();
  add_common(s_stats, common);

  std::string replay_manifest;
  std::optional<fs::path> replay_out;
  auto* s_replay = app.add_subcommand("replay", "Re-run a command from its run manifest");
  s_replay->add_option("manifest", replay_manifest, "<out>/<command>.manifest.json")->required();
  s_replay->add_option("--out,-o", replay_out, "Write to this directory instead of the recorded one");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("config", kConfig, e.what());
    return kConfig;
  }

  if (s_replay->parsed()) return replay(replay_manifest, replay_out);

  struct Entry {
    CLI::App* sub;
    std::function<RunRecord()> run;
  };
  const std::vector<Entry> entries{
      {s_synth, [&] { return run_synth(common, synth); }},
      {s_trace, [&] { return run_trace(common, trace); }},
      {s_profile, [&] { return run_profile(common, profile); }},
      {s_heads, [&] { return run_heads(common, heads); }},
      {s_neurons, [&] { return run_neurons(common, neurons); }},
      {s_ablate, [&] { return run_ablate(common, ablate); }},
      {s_patch, [&] { return run_patch(common, patch); }},
      {s_attr, [&] { return run_attribute(common, attr); }},
      {s_stats, [&] { return run_stats(common, stats); }},
  };
  for (const auto& e : entries) {
    if (!e.sub->parsed()) continue;
    const RunRecord rec = e.run();
    write_manifest(e.sub->get_name(), args, common, rec);
    for (const auto& w : rec.warnings) std::cerr << "warning: " << w << "\n";
    return kOk;
  }
  return kConfig;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return dispatch(args);
  } catch (const ConfigError& e) {
    report_error("config", kConfig, e.what());
    return kConfig;
  } catch (const cprobe::Error& e) {
    const bool input = e.kind() != ErrorKind::domain;
    report_error(to_string(e.kind()), input ? kInput : kRuntime, e.what());
    return input ? kInput : kRuntime;
  } catch (const std::exception& e) {
    report_error("runtime", kRuntime, e.what());
    return kRuntime;
  }
}
