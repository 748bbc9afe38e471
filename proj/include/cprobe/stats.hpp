// SPDX-License-Identifier: Apache-2.0
//
// Two-sample statistics for per-layer activation differences: KS test,
// Cohen's d, multiple-comparison corrections, bootstrap intervals, and the
// layer sweep that combines them.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cprobe/trace.hpp"

namespace cprobe {

inline constexpr std::size_t kDefaultResamples = 1000;
inline constexpr double kDefaultAlpha = 0.05;

/// Above this n_a * n_b the KS p-value switches from the exact lattice-path
/// count to the asymptotic Kolmogorov series.
inline constexpr std::size_t kKsExactLimit = 1'000'000;

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// Two-sided two-sample test. Throws DomainError on empty input.
KsResult ks_test(std::span<const double> a, std::span<const double> b);

/// Asymptotic p with the effective-n correction
/// lambda = (sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D, ne = na nb / (na + nb).
double ks_asymptotic_p(double statistic, std::size_t n_a, std::size_t n_b);

/// Exact P(D >= statistic) for continuous data, by counting monotone lattice
/// paths that touch the rejection boundary.
double ks_exact_p(double statistic, std::size_t n_a, std::size_t n_b);

/// Pooled-SD effect size. Empty when either side has fewer than two values or
/// the pooled variance is zero.
std::optional<double> cohens_d(std::span<const double> a, std::span<const double> b);

enum class Correction { bh, bonferroni };

struct Adjusted {
  std::vector<double> adjusted;
  std::vector<bool> rejected;
};

/// Throws DomainError for p outside [0, 1] or NaN.
Adjusted adjust_pvalues(std::span<const double> p, Correction method, double alpha = kDefaultAlpha);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Percentile interval of mean(a*) - mean(b*) over seeded resamples with
/// replacement. Endpoints are the order statistics at ranks
/// ceil(0.025 B) and ceil(0.975 B).
Interval bootstrap_ci(std::span<const double> a, std::span<const double> b, std::size_t resamples,
                      std::uint64_t seed);

enum class Metric { l0, l2 };

const char* to_string(Metric metric) noexcept;

struct LayerStats {
  std::size_t layer = 0;
  Metric metric = Metric::l0;
  std::string cwe;  // "all" for the unstratified sweep
  std::size_t n_vul = 0;
  std::size_t n_safe = 0;
  std::optional<double> cohens_d;
  double ks_statistic = 0.0;
  double p_value = 1.0;
  double p_bh = 1.0;
  double p_bonferroni = 1.0;
  bool reject_bh = false;
  bool reject_bonferroni = false;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct SweepOptions {
  Metric metric = Metric::l0;
  bool stratify = false;
  std::vector<std::string> cwes;  // stratify over these; empty = every stratum present
  std::size_t resamples = kDefaultResamples;
  std::uint64_t seed = 0;
  double alpha = kDefaultAlpha;
  std::size_t workers = 1;
};

struct SweepResult {
  std::vector<LayerStats> rows;
  std::vector<std::string> warnings;  // one per skipped stratum
};

/// Vulnerable vs safe per layer, corrections applied across the layers of
/// each stratum. Stratified sweeps compare each CWE group of vulnerable
/// samples ("none" for untagged ones) with the whole safe pool.
SweepResult layer_sweep(std::span<const NormProfile> profiles, const SweepOptions& options = {});

void write_layer_stats_csv(std::span<const LayerStats> rows, const std::filesystem::path& path);

}  // namespace cprobe
