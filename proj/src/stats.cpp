// SPDX-License-Identifier: Apache-2.0

#include "cprobe/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "cprobe/error.hpp"
#include "cprobe/parallel.hpp"
#include "cprobe/report.hpp"
#include "cprobe/rng.hpp"

namespace cprobe {

namespace {

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double ks_asymptotic_p(double statistic, std::size_t n_a, std::size_t n_b) {
  if (statistic <= 0.0) return 1.0;
  const double ne = static_cast<double>(n_a) * static_cast<double>(n_b) / static_cast<double>(n_a + n_b);
  const double sq = std::sqrt(ne);
  const double lambda = (sq + 0.12 + 0.11 / sq) * statistic;
  double sum = 0.0;
  for (int k = 1; k < 1000; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? 1.0 : -1.0) * term;
    if (term < 1e-10) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

namespace {

// Largest |i m - j n| reached while walking the merged order; equals
// D * n * m as an integer.
double exact_p_from_bound(std::uint64_t bound, std::size_t n, std::size_t m) {
  if (bound == 0) return 1.0;
  // hit[j] holds the probability that a uniform random path to (i, j) has
  // touched |i m - j n| >= bound.
  auto on_boundary = [&](std::size_t i, std::size_t j) {
    const auto x = static_cast<std::int64_t>(i * m) - static_cast<std::int64_t>(j * n);
    return static_cast<std::uint64_t>(x < 0 ? -x : x) >= bound;
  };
  std::vector<double> hit(m + 1, 0.0);
  for (std::size_t j = 1; j <= m; ++j) hit[j] = on_boundary(0, j) ? 1.0 : hit[j - 1];
  for (std::size_t i = 1; i <= n; ++i) {
    hit[0] = on_boundary(i, 0) ? 1.0 : hit[0];
    for (std::size_t j = 1; j <= m; ++j) {
      if (on_boundary(i, j)) {
        hit[j] = 1.0;
      } else {
        const double total = static_cast<double>(i + j);
        hit[j] = static_cast<double>(i) / total * hit[j] + static_cast<double>(j) / total * hit[j - 1];
      }
    }
  }
  return std::clamp(hit[m], 0.0, 1.0);
}

}  // namespace

double ks_exact_p(double statistic, std::size_t n_a, std::size_t n_b) {
  if (n_a == 0 || n_b == 0) throw DomainError("ks_exact_p: empty sample");
  const double scaled = statistic * static_cast<double>(n_a) * static_cast<double>(n_b);
  // The statistic is a multiple of 1/(n_a n_b); snap to it.
  const auto bound = static_cast<std::uint64_t>(std::llround(std::max(0.0, scaled)));
  return exact_p_from_bound(bound, n_a, n_b);
}

KsResult ks_test(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DomainError("ks_test: both samples must be nonempty");
  for (double x : a) {
    if (std::isnan(x)) throw DomainError("ks_test: NaN in sample");
  }
  for (double x : b) {
    if (std::isnan(x)) throw DomainError("ks_test: NaN in sample");
  }
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const std::size_t n = sa.size(), m = sb.size();
  const double dn = static_cast<double>(n), dm = static_cast<double>(m);

  std::size_t i = 0, j = 0;
  double d = 0.0;
  std::uint64_t bound = 0;
  while (i < n || j < m) {
    // Step past every copy of the next value on both sides.
    const double x = j == m || (i < n && sa[i] <= sb[j]) ? sa[i] : sb[j];
    while (i < n && sa[i] == x) ++i;
    while (j < m && sb[j] == x) ++j;
    d = std::max(d, std::fabs(static_cast<double>(i) / dn - static_cast<double>(j) / dm));
    const auto diff = static_cast<std::int64_t>(i * m) - static_cast<std::int64_t>(j * n);
    bound = std::max<std::uint64_t>(bound, static_cast<std::uint64_t>(diff < 0 ? -diff : diff));
  }
  KsResult r;
  r.statistic = d;
  r.p_value = n * m <= kKsExactLimit ? exact_p_from_bound(bound, n, m) : ks_asymptotic_p(d, n, m);
  return r;
}

std::optional<double> cohens_d(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) return std::nullopt;
  const double ma = mean(a), mb = mean(b);
  double ssa = 0.0, ssb = 0.0;
  for (double x : a) ssa += (x - ma) * (x - ma);
  for (double x : b) ssb += (x - mb) * (x - mb);
  const double pooled = (ssa + ssb) / static_cast<double>(a.size() + b.size() - 2);
  if (!(pooled > 0.0)) return std::nullopt;
  return (ma - mb) / std::sqrt(pooled);
}

Adjusted adjust_pvalues(std::span<const double> p, Correction method, double alpha) {
  for (double x : p) {
    if (!(x >= 0.0 && x <= 1.0)) throw DomainError("adjust_pvalues: p-value outside [0, 1]");
  }
  const std::size_t m = p.size();
  const double dm = static_cast<double>(m);
  Adjusted out;
  out.adjusted.resize(m);
  out.rejected.resize(m);
  if (method == Correction::bonferroni) {
    for (std::size_t i = 0; i < m; ++i) out.adjusted[i] = std::min(1.0, dm * p[i]);
  } else {
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return p[x] < p[y]; });
    double running = 1.0;
    for (std::size_t r = m; r-- > 0;) {
      const std::size_t i = order[r];
      running = std::min(running, dm / static_cast<double>(r + 1) * p[i]);
      out.adjusted[i] = std::min(1.0, running);
    }
  }
  for (std::size_t i = 0; i < m; ++i) out.rejected[i] = out.adjusted[i] <= alpha;
  return out;
}

Interval bootstrap_ci(std::span<const double> a, std::span<const double> b, std::size_t resamples,
                      std::uint64_t seed) {
  if (a.empty() || b.empty()) throw DomainError("bootstrap_ci: both samples must be nonempty");
  if (resamples < 1) throw DomainError("bootstrap_ci: resamples must be at least 1");
  Rng rng(seed);
  std::vector<double> diffs(resamples);
  for (auto& d : diffs) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sa += a[rng.uniform_index(a.size())];
    for (std::size_t i = 0; i < b.size(); ++i) sb += b[rng.uniform_index(b.size())];
    d = sa / static_cast<double>(a.size()) - sb / static_cast<double>(b.size());
  }
  std::sort(diffs.begin(), diffs.end());
  auto rank = [&](double q) {
    const auto r = static_cast<std::size_t>(std::ceil(q * static_cast<double>(resamples)));
    return diffs[std::clamp<std::size_t>(r, 1, resamples) - 1];
  };
  return {rank(0.025), rank(0.975)};
}

const char* to_string(Metric metric) noexcept { return metric == Metric::l0 ? "l0" : "l2"; }

namespace {

std::vector<double> column(std::span<const NormProfile* const> members, std::size_t layer, Metric metric) {
  std::vector<double> out;
  out.reserve(members.size());
  for (const auto* p : members) out.push_back(metric == Metric::l0 ? static_cast<double>(p->l0[layer]) : p->l2[layer]);
  return out;
}

std::vector<LayerStats> sweep_stratum(std::span<const NormProfile* const> vul, std::span<const NormProfile* const> safe,
                                      const std::string& cwe, std::size_t stratum, std::size_t n_layers,
                                      const SweepOptions& o) {
  std::vector<LayerStats> rows(n_layers);
  parallel_for(n_layers, o.workers, [&](std::size_t l) {
    const auto a = column(vul, l, o.metric);
    const auto b = column(safe, l, o.metric);
    LayerStats& s = rows[l];
    s.layer = l;
    s.metric = o.metric;
    s.cwe = cwe;
    s.n_vul = a.size();
    s.n_safe = b.size();
    s.cohens_d = cohens_d(a, b);
    const KsResult ks = ks_test(a, b);
    s.ks_statistic = ks.statistic;
    s.p_value = ks.p_value;
    const Interval ci = bootstrap_ci(a, b, o.resamples, mix_seed(o.seed, l + (static_cast<std::uint64_t>(stratum) << 20)));
    s.ci_low = ci.low;
    s.ci_high = ci.high;
  });
  std::vector<double> p;
  for (const auto& r : rows) p.push_back(r.p_value);
  const Adjusted bh = adjust_pvalues(p, Correction::bh, o.alpha);
  const Adjusted bonf = adjust_pvalues(p, Correction::bonferroni, o.alpha);
  for (std::size_t l = 0; l < n_layers; ++l) {
    rows[l].p_bh = bh.adjusted[l];
    rows[l].reject_bh = bh.rejected[l];
    rows[l].p_bonferroni = bonf.adjusted[l];
    rows[l].reject_bonferroni = bonf.rejected[l];
  }
  return rows;
}

}  // namespace

SweepResult layer_sweep(std::span<const NormProfile> profiles, const SweepOptions& options) {
  if (profiles.empty()) throw DomainError("layer_sweep: no profiles");
  const std::size_t n_layers = profiles.front().l0.size();
  std::vector<const NormProfile*> vul, safe;
  for (const auto& p : profiles) {
    if (p.l0.size() != n_layers || p.l2.size() != n_layers) {
      throw DomainError("layer_sweep: profiles have different layer counts");
    }
    (p.label == Label::vulnerable ? vul : safe).push_back(&p);
  }
  SweepResult result;
  if (!options.stratify) {
    if (vul.empty() || safe.empty()) throw DomainError("layer_sweep: both classes must be present");
    result.rows = sweep_stratum(vul, safe, "all", 0, n_layers, options);
    return result;
  }
  std::map<std::string, std::vector<const NormProfile*>> strata;
  for (const auto* p : vul) strata[p->cwe ? *p->cwe : std::string(kNoCwe)].push_back(p);
  std::vector<std::string> tags = options.cwes;
  if (tags.empty()) {
    for (const auto& [tag, members] : strata) tags.push_back(tag);
  }
  for (std::size_t k = 0; k < tags.size(); ++k) {
    const auto it = strata.find(tags[k]);
    if (it == strata.end() || it->second.empty()) {
      result.warnings.push_back("stratum " + tags[k] + ": no vulnerable samples, skipped");
      continue;
    }
    if (safe.empty()) {
      result.warnings.push_back("stratum " + tags[k] + ": no safe samples, skipped");
      continue;
    }
    auto rows = sweep_stratum(it->second, safe, tags[k], k, n_layers, options);
    result.rows.insert(result.rows.end(), rows.begin(), rows.end());
  }
  return result;
}

void write_layer_stats_csv(std::span<const LayerStats> rows, const std::filesystem::path& path) {
  CsvWriter csv({"layer", "metric", "cwe", "n_vul", "n_safe", "cohens_d", "ks_D", "p", "p_bh", "p_bonf", "ci_low",
                 "ci_high", "reject_bh", "reject_bonf"});
  for (const auto& r : rows) {
    csv.cell(r.layer).cell(to_string(r.metric)).cell(r.cwe).cell(r.n_vul).cell(r.n_safe).cell(r.cohens_d);
    csv.cell(r.ks_statistic).cell(r.p_value).cell(r.p_bh).cell(r.p_bonferroni).cell(r.ci_low).cell(r.ci_high);
    csv.cell(r.reject_bh ? "1" : "0").cell(r.reject_bonferroni ? "1" : "0");
    csv.end_row();
  }
  csv.save(path);
}

}  // namespace cprobe
