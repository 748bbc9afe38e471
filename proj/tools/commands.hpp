// SPDX-License-Identifier: Apache-2.0
//
// Subcommand implementations. Each returns a RunRecord describing what it
// read and wrote; the driver turns that into <out>/<command>.manifest.json.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace cprobe::cli {

/// Invalid flag values or combinations (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunRecord {
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::string> outputs;  // relative to the output directory
  std::vector<std::string> warnings;
};

struct Common {
  std::filesystem::path out;
  std::size_t workers = 1;
};

struct ViewOptions {
  std::filesystem::path model;
  std::filesystem::path corpus;
  bool balanced = false;
  std::uint64_t seed = 0;
};

struct SynthOptions {
  std::string preset;
  std::uint64_t seed = 1;
  std::size_t n_per_class = 20;
  std::optional<double> noise;
};

struct TraceOptions {
  ViewOptions view;
  std::vector<std::string> capture{"all"};
};

struct ProfileOptions {
  std::filesystem::path traces;
  double threshold = 1e-6;
  std::string l0_source = "mlp_out";
};

struct HeadsOptions {
  std::filesystem::path traces;
  double lambda = 0.5;
};

struct NeuronsOptions {
  std::filesystem::path traces;
  std::vector<std::string> layers{"6", "7", "10", "11"};
  std::size_t k = 20;
  std::string pooling = "mean";
};

struct AblateOptions {
  ViewOptions view;
  std::vector<std::string> layers;
  std::string site = "block";
  std::vector<std::string> neurons;
  std::filesystem::path top_neurons;
  std::size_t k = 20;
  std::vector<std::string> heads;
};

struct PatchOptions {
  ViewOptions view;
  std::vector<std::string> layers{"all"};
  std::vector<double> coefficients{1.0, 2.0, 4.0, 8.0};
  std::string directions = "both";
};

struct AttributeOptions {
  ViewOptions view;
  std::vector<std::string> samples;
  std::size_t limit = 0;
  double threshold = 0.01;
  double edge_threshold = 0.01;
  bool edges = true;
};

struct StatsOptions {
  std::filesystem::path profiles;
  std::filesystem::path traces;
  double threshold = 1e-6;
  std::string l0_source = "mlp_out";
  std::string metric = "l0";
  bool stratify = false;
  std::vector<std::string> cwes;
  std::size_t resamples = 1000;
  std::uint64_t seed = 0;
  double alpha = 0.05;
};

RunRecord run_synth(const Common& common, const SynthOptions& options);
RunRecord run_trace(const Common& common, const TraceOptions& options);
RunRecord run_profile(const Common& common, const ProfileOptions& options);
RunRecord run_heads(const Common& common, const HeadsOptions& options);
RunRecord run_neurons(const Common& common, const NeuronsOptions& options);
RunRecord run_ablate(const Common& common, const AblateOptions& options);
RunRecord run_patch(const Common& common, const PatchOptions& options);
RunRecord run_attribute(const Common& common, const AttributeOptions& options);
RunRecord run_stats(const Common& common, const StatsOptions& options);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace cprobe::cli
