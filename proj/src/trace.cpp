// SPDX-License-Identifier: Apache-2.0

#include "cprobe/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "cprobe/error.hpp"
#include "cprobe/parallel.hpp"
#include "cprobe/report.hpp"

namespace cprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* to_string(Outcome outcome) noexcept {
  switch (outcome) {
    case Outcome::tp: return "tp";
    case Outcome::tn: return "tn";
    case Outcome::fp: return "fp";
    case Outcome::fn: return "fn";
  }
  return "?";
}

Outcome outcome_of(Label truth, Label predicted) noexcept {
  if (truth == Label::vulnerable) return predicted == Label::vulnerable ? Outcome::tp : Outcome::fn;
  return predicted == Label::safe ? Outcome::tn : Outcome::fp;
}

namespace {

std::optional<Outcome> parse_outcome(std::string_view s) {
  for (Outcome o : {Outcome::tp, Outcome::tn, Outcome::fp, Outcome::fn}) {
    if (s == to_string(o)) return o;
  }
  return std::nullopt;
}

}  // namespace

std::string trace_file_name(std::string_view sample_id) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : sample_id) {
    const bool plain = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
                       c == '.' || c == '_' || c == '-';
    // A lone "." or ".." would name a directory entry.
    if (plain && !(c == '.' && out.empty())) {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += kHex[c >> 4];
      out += kHex[c & 0xF];
    }
  }
  return out + ".bin";
}

// ---------------------------------------------------------------------------
// Trace files

namespace {

constexpr std::uint32_t kTraceVersion = 1;

void put(binary::Writer& w, const MatrixF& m) { w.f32s(m.flat()); }

void get(binary::Reader& r, MatrixF& m, std::size_t rows, std::size_t cols) {
  m = MatrixF(rows, cols);
  r.f32s(m.flat());
}

}  // namespace

void save_trace(const ActivationTrace& trace, const ModelSpec& spec, const fs::path& path) {
  const std::size_t n = trace.seq_len();
  const auto& f = trace.flags;
  if (trace.layers.size() != spec.n_layers) {
    throw DomainError("save_trace: trace has " + std::to_string(trace.layers.size()) + " layers, model has " +
                      std::to_string(spec.n_layers));
  }
  binary::Writer w;
  w.magic("CPT1");
  w.u32(kTraceVersion);
  w.u32(f.bits());
  w.u32(static_cast<std::uint32_t>(spec.n_layers));
  w.u32(static_cast<std::uint32_t>(spec.n_heads));
  w.u32(static_cast<std::uint32_t>(spec.d_model));
  w.u32(static_cast<std::uint32_t>(spec.d_mlp));
  w.u32(static_cast<std::uint32_t>(n));
  w.u32(static_cast<std::uint32_t>(trace.sample_id.size()));
  std::vector<std::uint8_t> bytes = w.bytes();
  bytes.insert(bytes.end(), trace.sample_id.begin(), trace.sample_id.end());
  binary::Writer body;
  for (TokenId t : trace.tokens) body.u32(t);
  auto check = [&](const MatrixF& m, std::size_t rows, std::size_t cols, const char* what) {
    if (m.rows() != rows || m.cols() != cols) {
      throw DomainError(std::string("save_trace: ") + what + " has the wrong shape");
    }
    put(body, m);
  };
  if (f.residual) check(trace.embedding, n, spec.d_model, "embedding");
  for (const auto& layer : trace.layers) {
    if (f.residual) check(layer.residual_out, n, spec.d_model, "residual_out");
    if (f.attention) {
      if (layer.attention.size() != spec.n_heads) throw DomainError("save_trace: attention head count");
      for (const auto& a : layer.attention) check(a, n, n, "attention");
    }
    if (f.mlp_hidden) check(layer.mlp_hidden, n, spec.d_mlp, "mlp_hidden");
    if (f.mlp_out) check(layer.mlp_out, n, spec.d_model, "mlp_out");
  }
  bytes.insert(bytes.end(), body.bytes().begin(), body.bytes().end());
  binary::write_file(path.string(), bytes);
}

ActivationTrace load_trace(const fs::path& path) {
  const auto bytes = binary::read_file(path.string());
  binary::Reader r(bytes, path.string());
  if (!r.has_magic("CPT1")) throw FormatError(path.string() + ": not a trace file (bad magic)");
  r.skip(4);
  const std::uint32_t version = r.u32();
  if (version != kTraceVersion) {
    throw FormatError(path.string() + ": unsupported trace version " + std::to_string(version));
  }
  ActivationTrace t;
  t.flags = CaptureFlags::from_bits(r.u32());
  const std::size_t n_layers = r.u32();
  const std::size_t n_heads = r.u32();
  const std::size_t d_model = r.u32();
  const std::size_t d_mlp = r.u32();
  const std::size_t n = r.u32();
  const std::size_t id_len = r.u32();
  if (id_len > r.remaining()) throw CorruptFileError(path.string() + ": truncated sample id");
  const std::size_t id_offset = bytes.size() - r.remaining();
  t.sample_id.assign(reinterpret_cast<const char*>(bytes.data() + id_offset), id_len);
  r.skip(id_len);

  // Validate the declared size before allocating anything large.
  std::size_t floats = 0;
  if (t.flags.residual) floats += n * d_model * (n_layers + 1);
  if (t.flags.attention) floats += n_layers * n_heads * n * n;
  if (t.flags.mlp_hidden) floats += n_layers * n * d_mlp;
  if (t.flags.mlp_out) floats += n_layers * n * d_model;
  const std::size_t expected = 4 * (n + floats);
  if (r.remaining() != expected) {
    throw CorruptFileError(path.string() + ": payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                           std::to_string(expected));
  }
  t.tokens.resize(n);
  for (auto& tok : t.tokens) tok = r.u32();
  if (t.flags.residual) get(r, t.embedding, n, d_model);
  t.layers.resize(n_layers);
  for (auto& layer : t.layers) {
    if (t.flags.residual) get(r, layer.residual_out, n, d_model);
    if (t.flags.attention) {
      layer.attention.resize(n_heads);
      for (auto& a : layer.attention) get(r, a, n, n);
    }
    if (t.flags.mlp_hidden) get(r, layer.mlp_hidden, n, d_mlp);
    if (t.flags.mlp_out) get(r, layer.mlp_out, n, d_model);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

json spec_to_json(const ModelSpec& s) {
  return json{{"n_layers", s.n_layers},     {"n_heads", s.n_heads},
              {"d_model", s.d_model},       {"d_mlp", s.d_mlp},
              {"vocab_size", s.vocab_size}, {"max_seq", s.max_seq},
              {"bos_token_id", s.bos_token_id}, {"vuln_token_id", s.vuln_token_id},
              {"safe_token_id", s.safe_token_id}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.n_layers = j.at("n_layers").get<std::size_t>();
  s.n_heads = j.at("n_heads").get<std::size_t>();
  s.d_model = j.at("d_model").get<std::size_t>();
  s.d_mlp = j.at("d_mlp").get<std::size_t>();
  s.vocab_size = j.at("vocab_size").get<std::size_t>();
  s.max_seq = j.at("max_seq").get<std::size_t>();
  s.bos_token_id = j.at("bos_token_id").get<TokenId>();
  s.vuln_token_id = j.at("vuln_token_id").get<TokenId>();
  s.safe_token_id = j.at("safe_token_id").get<TokenId>();
  return s;
}

json flags_to_json(const CaptureFlags& f) {
  return json{{"residual", f.residual}, {"attention", f.attention}, {"mlp_hidden", f.mlp_hidden},
              {"mlp_out", f.mlp_out}};
}

}  // namespace

std::string manifest_to_json(const TraceManifest& manifest) {
  json samples = json::array();
  for (const auto& r : manifest.samples) {
    json s = {{"id", r.id},
              {"label", to_string(r.label)},
              {"cwe", r.cwe ? json(*r.cwe) : json(nullptr)},
              {"truncated", r.truncated},
              {"file", r.file.empty() ? json(nullptr) : json(r.file)}};
    if (r.error) {
      s["error"] = *r.error;
    } else {
      s["predicted"] = to_string(r.predicted);
      s["margin"] = r.margin;
      s["outcome"] = to_string(r.outcome);
    }
    samples.push_back(std::move(s));
  }
  json j = {{"format", "cprobe-trace-store"},
            {"version", 1},
            {"model", spec_to_json(manifest.model)},
            {"capture", flags_to_json(manifest.flags)},
            {"samples", std::move(samples)}};
  return j.dump(2) + "\n";
}

TraceManifest load_trace_manifest(const fs::path& store_dir) {
  const fs::path path = store_dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace manifest " + path.string());
  TraceManifest m;
  try {
    const json j = json::parse(in);
    if (j.value("format", "") != "cprobe-trace-store") throw FormatError(path.string() + ": not a trace manifest");
    m.model = spec_from_json(j.at("model"));
    const auto& c = j.at("capture");
    m.flags = {c.at("residual").get<bool>(), c.at("attention").get<bool>(), c.at("mlp_hidden").get<bool>(),
               c.at("mlp_out").get<bool>()};
    for (const auto& s : j.at("samples")) {
      TraceRecord r;
      r.id = s.at("id").get<std::string>();
      const auto label = parse_label(s.at("label").get<std::string>());
      if (!label) throw ParseError(path.string() + ": bad label for sample " + r.id);
      r.label = *label;
      if (!s.at("cwe").is_null()) r.cwe = s.at("cwe").get<std::string>();
      r.truncated = s.at("truncated").get<bool>();
      if (!s.at("file").is_null()) r.file = s.at("file").get<std::string>();
      if (s.contains("error")) {
        r.error = s.at("error").get<std::string>();
      } else {
        const auto predicted = parse_label(s.at("predicted").get<std::string>());
        const auto outcome = parse_outcome(s.at("outcome").get<std::string>());
        if (!predicted || !outcome) throw ParseError(path.string() + ": bad prediction for sample " + r.id);
        r.predicted = *predicted;
        r.outcome = *outcome;
        r.margin = s.at("margin").get<double>();
      }
      m.samples.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return m;
}

TraceManifest capture_traces(const TransformerWeights& weights, const Corpus& corpus, const CorpusView& view,
                             const fs::path& out_dir, const CaptureOptions& options) {
  std::vector<std::size_t> order = view.ordered();
  std::sort(order.begin(), order.end());

  std::error_code ec;
  fs::create_directories(out_dir / "traces", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "traces").string() + ": " + ec.message());

  TraceManifest manifest;
  manifest.model = weights.spec;
  manifest.flags = options.flags;
  manifest.samples.resize(order.size());

  parallel_for(order.size(), options.workers, [&](std::size_t k) {
    const SampleRecord& sample = corpus[order[k]];
    TraceRecord& rec = manifest.samples[k];
    rec.id = sample.id;
    rec.label = sample.label;
    rec.cwe = sample.cwe;
    std::vector<TokenId> tokens = sample.tokens;
    rec.truncated = sample.truncated;
    if (tokens.empty()) {
      auto t = tokenize_with_flag(sample.code, weights.spec);
      tokens = std::move(t.tokens);
      rec.truncated = t.truncated;
    }
    ForwardResult result;
    try {
      result = forward(weights, tokens, options.flags);
    } catch (const DomainError& e) {
      rec.error = e.what();
      return;
    }
    const Classification c = classify_logits(weights.spec, result.logits);
    rec.predicted = c.label;
    rec.margin = c.margin;
    rec.outcome = outcome_of(rec.label, c.label);
    if (options.flags.any()) {
      result.trace->sample_id = sample.id;
      rec.file = "traces/" + trace_file_name(sample.id);
      save_trace(*result.trace, weights.spec, out_dir / rec.file);
    }
  });

  std::ofstream out(out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
  out << manifest_to_json(manifest);
  if (!out) throw IoError("write failed for " + (out_dir / "manifest.json").string());
  return manifest;
}

std::vector<const ActivationTrace*> TraceSet::select(std::initializer_list<Outcome> outcomes) const {
  std::vector<const ActivationTrace*> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (std::find(outcomes.begin(), outcomes.end(), records[i].outcome) != outcomes.end()) {
      out.push_back(&traces[i]);
    }
  }
  return out;
}

std::vector<const ActivationTrace*> TraceSet::by_label(Label label) const {
  std::vector<const ActivationTrace*> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].label == label) out.push_back(&traces[i]);
  }
  return out;
}

TraceSet load_trace_store(const fs::path& store_dir) {
  TraceSet set;
  set.manifest = load_trace_manifest(store_dir);
  for (const auto& rec : set.manifest.samples) {
    if (rec.error || rec.file.empty()) continue;
    ActivationTrace t = load_trace(store_dir / rec.file);
    if (t.layers.size() != set.manifest.model.n_layers || t.flags != set.manifest.flags) {
      throw CorruptFileError((store_dir / rec.file).string() + ": does not match the store manifest");
    }
    set.records.push_back(rec);
    set.traces.push_back(std::move(t));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Norm profiles

std::vector<std::uint64_t> l0_profile(const ActivationTrace& trace, double threshold, L0Source source) {
  const bool present = source == L0Source::mlp_out ? trace.flags.mlp_out : trace.flags.mlp_hidden;
  if (!present) {
    throw DomainError(std::string("l0_profile: trace ") + trace.sample_id + " lacks " +
                      (source == L0Source::mlp_out ? "mlp_out" : "mlp_hidden") + " activations");
  }
  std::vector<std::uint64_t> out;
  out.reserve(trace.layers.size());
  for (const auto& layer : trace.layers) {
    const MatrixF& m = source == L0Source::mlp_out ? layer.mlp_out : layer.mlp_hidden;
    std::uint64_t count = 0;
    for (std::size_t p = 1; p < m.rows(); ++p) {
      for (float v : m.row(p)) count += std::fabs(static_cast<double>(v)) > threshold ? 1 : 0;
    }
    out.push_back(count);
  }
  return out;
}

std::vector<double> l2_profile(const ActivationTrace& trace) {
  if (!trace.flags.residual) {
    throw DomainError("l2_profile: trace " + trace.sample_id + " lacks residual activations");
  }
  std::vector<double> out;
  out.reserve(trace.layers.size());
  for (const auto& layer : trace.layers) {
    const MatrixF& m = layer.residual_out;
    double total = 0.0;
    for (std::size_t p = 1; p < m.rows(); ++p) {
      double sq = 0.0;
      for (float v : m.row(p)) sq += static_cast<double>(v) * v;
      total += std::sqrt(sq);
    }
    out.push_back(m.rows() > 1 ? total / static_cast<double>(m.rows() - 1) : 0.0);
  }
  return out;
}

NormProfile norm_profile(const ActivationTrace& trace, const TraceRecord& record, double threshold,
                         L0Source source) {
  return {record.id, record.label, record.cwe, l0_profile(trace, threshold, source), l2_profile(trace)};
}

namespace {

std::pair<double, double> mean_variance(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / n;
  if (values.size() < 2) return {mean, 0.0};
  std::vector<double> sq;
  sq.reserve(values.size());
  for (double v : values) sq.push_back((v - mean) * (v - mean));
  std::sort(sq.begin(), sq.end());
  double ss = 0.0;
  for (double v : sq) ss += v;
  return {mean, ss / (n - 1.0)};
}

}  // namespace

std::vector<GroupLayerSummary> aggregate_profiles(std::span<const NormProfile> profiles, GroupBy group_by) {
  std::map<std::string, std::vector<const NormProfile*>> groups;
  std::size_t n_layers = 0;
  for (const auto& p : profiles) {
    if (p.l0.size() != p.l2.size()) throw DomainError("aggregate_profiles: l0/l2 length mismatch for " + p.sample_id);
    if (!groups.empty() && p.l0.size() != n_layers) {
      throw DomainError("aggregate_profiles: profiles have different layer counts");
    }
    n_layers = p.l0.size();
    const std::string key =
        group_by == GroupBy::label ? std::string(to_string(p.label)) : (p.cwe ? *p.cwe : std::string(kNoCwe));
    groups[key].push_back(&p);
  }
  std::vector<GroupLayerSummary> out;
  for (const auto& [key, members] : groups) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      std::vector<double> l0, l2;
      for (const auto* p : members) {
        l0.push_back(static_cast<double>(p->l0[l]));
        l2.push_back(p->l2[l]);
      }
      const auto [m0, v0] = mean_variance(std::move(l0));
      const auto [m2, v2] = mean_variance(std::move(l2));
      out.push_back({key, l, members.size(), m0, v0, m2, v2});
    }
  }
  return out;
}

void write_profiles_csv(std::span<const NormProfile> profiles, const fs::path& path) {
  CsvWriter csv({"sample_id", "label", "cwe", "layer", "l0", "l2"});
  for (const auto& p : profiles) {
    for (std::size_t l = 0; l < p.l0.size(); ++l) {
      csv.cell(p.sample_id).cell(to_string(p.label)).cell(p.cwe ? *p.cwe : std::string(kNoCwe));
      csv.cell(l).cell(p.l0[l]).cell(p.l2[l]);
      csv.end_row();
    }
  }
  csv.save(path);
}

std::vector<NormProfile> read_profiles_csv(const fs::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty() || rows[0] != std::vector<std::string>{"sample_id", "label", "cwe", "layer", "l0", "l2"}) {
    throw FormatError(path.string() + ": not a norm profile CSV");
  }
  std::vector<NormProfile> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    if (row.size() != 6) throw ParseError(where + ": expected 6 fields");
    const auto label = parse_label(row[1]);
    if (!label) throw ParseError(where + ": bad label");
    const std::size_t layer = parse_u64(row[3]);
    if (out.empty() || out.back().sample_id != row[0]) {
      NormProfile p;
      p.sample_id = row[0];
      p.label = *label;
      if (row[2] != kNoCwe) p.cwe = row[2];
      out.push_back(std::move(p));
    }
    auto& p = out.back();
    if (layer != p.l0.size()) throw ParseError(where + ": layers out of order");
    p.l0.push_back(parse_u64(row[4]));
    p.l2.push_back(parse_double(row[5]));
  }
  return out;
}

void write_aggregate_csv(std::span<const GroupLayerSummary> rows, const fs::path& path) {
  CsvWriter csv({"group", "layer", "count", "l0_mean", "l0_variance", "l2_mean", "l2_variance"});
  for (const auto& r : rows) {
    csv.cell(r.group).cell(r.layer).cell(r.count).cell(r.l0_mean).cell(r.l0_variance).cell(r.l2_mean).cell(
        r.l2_variance);
    csv.end_row();
  }
  csv.save(path);
}

}  // namespace cprobe
