// SPDX-License-Identifier: Apache-2.0

#include "cprobe/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "cprobe/error.hpp"
#include "cprobe/rng.hpp"

namespace cprobe {

using json = nlohmann::json;

std::optional<Label> parse_label(std::string_view text) noexcept {
  if (text == "vulnerable") return Label::vulnerable;
  if (text == "safe") return Label::safe;
  return std::nullopt;
}

bool is_valid_cwe(std::string_view tag) noexcept {
  if (tag.size() < 5 || tag.substr(0, 4) != "CWE-") return false;
  for (char c : tag.substr(4)) {
    if (c < '0' || c > '9') return false;
  }
  return true;
}

namespace {

bool is_blank(const std::string& line) {
  return line.find_first_not_of(" \t\r\n") == std::string::npos;
}

SampleRecord parse_record(const std::string& line, const std::string& where) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(where + ": malformed JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw ParseError(where + ": expected a JSON object");

  auto require_string = [&](const char* key) -> std::string {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(where + ": missing field \"" + key + "\"");
    if (!it->is_string()) throw ParseError(where + ": field \"" + key + "\" must be a string");
    return it->get<std::string>();
  };

  SampleRecord r;
  r.id = require_string("id");
  if (r.id.empty()) throw ValidationError(where + ": empty id");
  r.code = require_string("code");
  const std::string label = require_string("label");
  const auto parsed = parse_label(label);
  if (!parsed) {
    throw ValidationError(where + ": unknown label \"" + label + "\" (expected \"vulnerable\" or \"safe\")");
  }
  r.label = *parsed;
  if (auto it = j.find("cwe"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw ParseError(where + ": field \"cwe\" must be a string");
    std::string tag = it->get<std::string>();
    if (!is_valid_cwe(tag)) throw ValidationError(where + ": malformed CWE tag \"" + tag + "\"");
    r.cwe = std::move(tag);
  }
  return r;
}

}  // namespace

Corpus parse_corpus(std::istream& in, const std::string& source) {
  Corpus corpus;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    SampleRecord r = parse_record(line, where);
    if (!seen.insert(r.id).second) throw ValidationError(where + ": duplicate id \"" + r.id + "\"");
    corpus.push_back(std::move(r));
  }
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  return parse_corpus(in, path.string());
}

std::string to_jsonl_line(const SampleRecord& record) {
  json j = json::object();
  j["id"] = record.id;
  j["code"] = record.code;
  j["label"] = to_string(record.label);
  if (record.cwe) j["cwe"] = *record.cwe;
  return j.dump();
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus " + path.string());
  for (const auto& r : corpus) out << to_jsonl_line(r) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

Tokenized tokenize_with_flag(std::string_view code, const ModelSpec& spec) {
  Tokenized t;
  const std::size_t limit = std::max<std::size_t>(spec.max_seq, 1);
  t.tokens.reserve(std::min(code.size() + 1, limit));
  t.tokens.push_back(spec.bos_token_id);
  for (unsigned char byte : code) {
    if (t.tokens.size() == limit) {
      t.truncated = true;
      break;
    }
    t.tokens.push_back(static_cast<TokenId>(byte));
  }
  return t;
}

std::vector<TokenId> tokenize(std::string_view code, const ModelSpec& spec) {
  return tokenize_with_flag(code, spec).tokens;
}

void tokenize_corpus(Corpus& corpus, const ModelSpec& spec) {
  for (auto& r : corpus) {
    auto t = tokenize_with_flag(r.code, spec);
    r.tokens = std::move(t.tokens);
    r.truncated = t.truncated;
  }
}

std::vector<TokenId> sample_tokens(const SampleRecord& record, const ModelSpec& spec) {
  return record.tokens.empty() ? tokenize(record.code, spec) : record.tokens;
}

std::vector<std::size_t> CorpusView::ordered() const {
  std::vector<std::size_t> out = vulnerable;
  out.insert(out.end(), safe.begin(), safe.end());
  return out;
}

namespace {

void index_strata(const Corpus& corpus, CorpusView& view) {
  view.strata.clear();
  for (std::size_t i : view.ordered()) {
    const auto& cwe = corpus[i].cwe;
    view.strata[cwe ? *cwe : std::string(kNoCwe)].push_back(i);
  }
  for (auto& [tag, idx] : view.strata) std::sort(idx.begin(), idx.end());
}

}  // namespace

CorpusView full_view(const Corpus& corpus) {
  CorpusView view;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    (corpus[i].label == Label::vulnerable ? view.vulnerable : view.safe).push_back(i);
  }
  index_strata(corpus, view);
  return view;
}

CorpusView balanced_view(const Corpus& corpus, std::uint64_t seed) {
  CorpusView view = full_view(corpus);
  if (view.vulnerable.empty() || view.safe.empty()) {
    throw DomainError("balanced_view: corpus needs at least one sample of each label");
  }
  const std::size_t n = std::min(view.vulnerable.size(), view.safe.size());
  Rng rng(seed);
  auto downsample = [&](std::vector<std::size_t>& members) {
    if (members.size() == n) return;
    std::vector<std::size_t> kept;
    kept.reserve(n);
    for (std::size_t pick : rng.sample_without_replacement(members.size(), n)) kept.push_back(members[pick]);
    members = std::move(kept);
  };
  downsample(view.vulnerable);
  downsample(view.safe);
  index_strata(corpus, view);
  return view;
}

}  // namespace cprobe
