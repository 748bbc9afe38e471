// SPDX-License-Identifier: Apache-2.0
//
// Labeled code samples, the byte-level tokenizer, and balanced views.
//
// JSONL schema, one object per line:
//   {"id": str, "code": str, "label": "vulnerable"|"safe", "cwe": "CWE-NNN"}
// "cwe" is optional (absent or null).

#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cprobe/model.hpp"

namespace cprobe {

struct SampleRecord {
  std::string id;
  std::string code;
  Label label = Label::safe;
  std::optional<std::string> cwe;
  std::vector<TokenId> tokens;  // empty until tokenized
  bool truncated = false;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

using Corpus = std::vector<SampleRecord>;

/// Group key used for untagged samples in CWE groupings.
inline constexpr std::string_view kNoCwe = "none";

std::optional<Label> parse_label(std::string_view text) noexcept;
bool is_valid_cwe(std::string_view tag) noexcept;

/// Errors name the 1-based line. Malformed JSON or a missing or mistyped
/// field is a ParseError; an unknown label, a bad CWE tag, an empty or a
/// duplicate id is a ValidationError.
Corpus parse_corpus(std::istream& in, const std::string& source = "<stream>");
Corpus load_corpus(const std::filesystem::path& path);

std::string to_jsonl_line(const SampleRecord& record);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

struct Tokenized {
  std::vector<TokenId> tokens;
  bool truncated = false;
};

/// [bos] followed by one id per UTF-8 byte (id = byte value), cut at max_seq.
Tokenized tokenize_with_flag(std::string_view code, const ModelSpec& spec);
std::vector<TokenId> tokenize(std::string_view code, const ModelSpec& spec);

void tokenize_corpus(Corpus& corpus, const ModelSpec& spec);

/// The record's stored tokens, or a fresh tokenization when it has none.
std::vector<TokenId> sample_tokens(const SampleRecord& record, const ModelSpec& spec);

/// Indices into a corpus, partitioned by label. Both partitions keep corpus
/// order. `strata` maps CWE tag (or "none") to the indices carrying it.
struct CorpusView {
  std::vector<std::size_t> vulnerable;
  std::vector<std::size_t> safe;
  std::map<std::string, std::vector<std::size_t>> strata;

  std::size_t size() const noexcept { return vulnerable.size() + safe.size(); }
  /// Vulnerable indices first, then safe.
  std::vector<std::size_t> ordered() const;

  friend bool operator==(const CorpusView&, const CorpusView&) = default;
};

/// Every sample of the corpus.
CorpusView full_view(const Corpus& corpus);

/// Equal class counts: the majority class is downsampled by a seeded uniform
/// draw without replacement. Throws DomainError when a class is empty.
CorpusView balanced_view(const Corpus& corpus, std::uint64_t seed);

}  // namespace cprobe
