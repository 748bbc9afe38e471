// SPDX-License-Identifier: Apache-2.0
//
// Trace capture over a corpus, the on-disk trace store, and layer-wise
// L0 / L2 norm profiles.
//
// Store layout:  <out>/manifest.json  +  <out>/traces/<escaped id>.bin
// Trace file:    "CPT1", u32 version, u32 capture bits, u32 n_layers,
//                u32 n_heads, u32 d_model, u32 d_mlp, u32 seq_len,
//                u32 id byte length, id bytes, seq_len x u32 tokens, then
//                f32 tensors (see docs/formats.md for the order).

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cprobe/corpus.hpp"
#include "cprobe/model.hpp"

namespace cprobe {

inline constexpr double kDefaultL0Threshold = 1e-6;

enum class Outcome { tp, tn, fp, fn };

const char* to_string(Outcome outcome) noexcept;
Outcome outcome_of(Label truth, Label predicted) noexcept;

struct TraceRecord {
  std::string id;
  Label label = Label::safe;
  std::optional<std::string> cwe;
  bool truncated = false;
  std::string file;  // relative to the store root; empty when capture failed
  Label predicted = Label::safe;
  double margin = 0.0;
  Outcome outcome = Outcome::tn;
  std::optional<std::string> error;
};

struct TraceManifest {
  ModelSpec model;
  CaptureFlags flags;
  std::vector<TraceRecord> samples;
};

struct CaptureOptions {
  CaptureFlags flags = CaptureFlags::all();
  std::size_t workers = 1;
};

/// Percent-encodes every byte outside [A-Za-z0-9._-] so distinct ids map to
/// distinct file names.
std::string trace_file_name(std::string_view sample_id);

void save_trace(const ActivationTrace& trace, const ModelSpec& spec, const std::filesystem::path& path);
ActivationTrace load_trace(const std::filesystem::path& path);

/// Runs one captured forward pass per view sample (corpus order) and writes
/// the store. Per-sample forward errors are recorded in the manifest; only
/// storage failures throw.
TraceManifest capture_traces(const TransformerWeights& weights, const Corpus& corpus,
                             const CorpusView& view, const std::filesystem::path& out_dir,
                             const CaptureOptions& options = {});

std::string manifest_to_json(const TraceManifest& manifest);
TraceManifest load_trace_manifest(const std::filesystem::path& store_dir);

/// A loaded store: the manifest plus every trace that was captured, in
/// manifest order (failed samples are skipped).
struct TraceSet {
  TraceManifest manifest;
  std::vector<TraceRecord> records;
  std::vector<ActivationTrace> traces;

  std::vector<const ActivationTrace*> select(std::initializer_list<Outcome> outcomes) const;
  std::vector<const ActivationTrace*> by_label(Label label) const;
};

TraceSet load_trace_store(const std::filesystem::path& store_dir);

// ---------------------------------------------------------------------------
// Norm profiles

enum class L0Source { mlp_out, mlp_hidden };

/// Per layer, entries with |value| > threshold summed over non-BOS positions.
std::vector<std::uint64_t> l0_profile(const ActivationTrace& trace, double threshold = kDefaultL0Threshold,
                                      L0Source source = L0Source::mlp_out);

/// Per layer, the residual-stream Euclidean norm averaged over non-BOS
/// positions (0 when the sequence holds only BOS).
std::vector<double> l2_profile(const ActivationTrace& trace);

struct NormProfile {
  std::string sample_id;
  Label label = Label::safe;
  std::optional<std::string> cwe;
  std::vector<std::uint64_t> l0;
  std::vector<double> l2;

  friend bool operator==(const NormProfile&, const NormProfile&) = default;
};

NormProfile norm_profile(const ActivationTrace& trace, const TraceRecord& record,
                         double threshold = kDefaultL0Threshold, L0Source source = L0Source::mlp_out);

enum class GroupBy { label, cwe };

struct GroupLayerSummary {
  std::string group;
  std::size_t layer = 0;
  std::size_t count = 0;
  double l0_mean = 0.0;
  double l0_variance = 0.0;  // n-1 denominator; 0 for single-member groups
  double l2_mean = 0.0;
  double l2_variance = 0.0;
};

/// Groups are emitted in lexicographic order, layers ascending. Results do
/// not depend on the order of `profiles`.
std::vector<GroupLayerSummary> aggregate_profiles(std::span<const NormProfile> profiles, GroupBy group_by);

void write_profiles_csv(std::span<const NormProfile> profiles, const std::filesystem::path& path);
std::vector<NormProfile> read_profiles_csv(const std::filesystem::path& path);
void write_aggregate_csv(std::span<const GroupLayerSummary> rows, const std::filesystem::path& path);

}  // namespace cprobe
