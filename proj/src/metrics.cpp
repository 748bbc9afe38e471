// SPDX-License-Identifier: Apache-2.0

#include "cprobe/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "cprobe/error.hpp"
#include "cprobe/parallel.hpp"
#include "cprobe/report.hpp"

namespace cprobe {

std::vector<std::size_t> default_neuron_layers() { return {6, 7, 10, 11}; }

double importance_score(double mean_max_tp, double mean_max_tn, double entropy_tp, double entropy_tn,
                        double lambda) noexcept {
  return (mean_max_tp - mean_max_tn) + lambda * (entropy_tn - entropy_tp);
}

RowStats masked_row_stats(std::span<const float> row) {
  if (row.size() < 2) return {1.0, 0.0};
  const auto keys = row.subspan(1);
  double total = 0.0;
  for (float w : keys) total += w;
  if (!(total > 0.0)) {
    const double n = static_cast<double>(keys.size());
    return {1.0 / n, std::log(n)};
  }
  RowStats s;
  for (float w : keys) {
    const double p = w / total;
    s.max_weight = std::max(s.max_weight, p);
    if (p > 0.0) s.entropy -= p * std::log(p);
  }
  return s;
}

namespace {

struct ClassStats {
  double mean_max = 0.0;
  double entropy = 0.0;
};

void require_attention(TraceRefs traces, const char* what) {
  if (traces.empty()) throw DomainError(std::string("head_importance: no ") + what + " samples");
  for (const auto* t : traces) {
    if (!t->flags.attention) throw DomainError("head_importance: trace " + t->sample_id + " lacks attention weights");
  }
}

ClassStats class_stats(TraceRefs traces, std::size_t layer, std::size_t head, const char* what) {
  double sum_max = 0.0, sum_entropy = 0.0;
  std::size_t used = 0;
  for (const auto* t : traces) {
    const MatrixF& a = t->layers[layer].attention[head];
    if (a.rows() < 2) continue;
    double m = 0.0, h = 0.0;
    for (std::size_t q = 1; q < a.rows(); ++q) {
      const RowStats s = masked_row_stats(a.row(q).first(q + 1));
      m += s.max_weight;
      h += s.entropy;
    }
    const double n = static_cast<double>(a.rows() - 1);
    sum_max += m / n;
    sum_entropy += h / n;
    ++used;
  }
  if (used == 0) throw DomainError(std::string("head_importance: every ") + what + " sample is BOS-only");
  return {sum_max / static_cast<double>(used), sum_entropy / static_cast<double>(used)};
}

}  // namespace

std::vector<HeadScore> head_importance(TraceRefs tp, TraceRefs tn, double lambda, std::size_t workers) {
  require_attention(tp, "TP");
  require_attention(tn, "TN");
  const std::size_t n_layers = tp.front()->layers.size();
  const std::size_t n_heads = n_layers ? tp.front()->layers.front().attention.size() : 0;
  for (TraceRefs set : {tp, tn}) {
    for (const auto* t : set) {
      if (t->layers.size() != n_layers || (n_layers && t->layers.front().attention.size() != n_heads)) {
        throw DomainError("head_importance: traces come from different model shapes");
      }
    }
  }
  std::vector<HeadScore> scores(n_layers * n_heads);
  parallel_for(scores.size(), workers, [&](std::size_t i) {
    HeadScore& s = scores[i];
    s.layer = i / n_heads;
    s.head = i % n_heads;
    const ClassStats p = class_stats(tp, s.layer, s.head, "TP");
    const ClassStats n = class_stats(tn, s.layer, s.head, "TN");
    s.mean_max_tp = p.mean_max;
    s.mean_max_tn = n.mean_max;
    s.entropy_tp = p.entropy;
    s.entropy_tn = n.entropy;
    s.importance = importance_score(s.mean_max_tp, s.mean_max_tn, s.entropy_tp, s.entropy_tn, lambda);
  });
  std::stable_sort(scores.begin(), scores.end(), [](const HeadScore& a, const HeadScore& b) {
    if (a.importance != b.importance) return a.importance < b.importance;
    return std::pair(a.layer, a.head) < std::pair(b.layer, b.head);
  });
  return scores;
}

const char* to_string(Pooling pooling) noexcept {
  switch (pooling) {
    case Pooling::mean: return "mean";
    case Pooling::max: return "max";
    case Pooling::last: return "last";
  }
  return "?";
}

double pooled_activation(const MatrixF& mlp_hidden, std::size_t neuron, Pooling pooling) {
  const std::size_t n = mlp_hidden.rows();
  if (n < 2) return 0.0;
  switch (pooling) {
    case Pooling::last: return mlp_hidden(n - 1, neuron);
    case Pooling::max: {
      double m = mlp_hidden(1, neuron);
      for (std::size_t p = 2; p < n; ++p) m = std::max<double>(m, mlp_hidden(p, neuron));
      return m;
    }
    case Pooling::mean: break;
  }
  double sum = 0.0;
  for (std::size_t p = 1; p < n; ++p) sum += mlp_hidden(p, neuron);
  return sum / static_cast<double>(n - 1);
}

SelectivityResult neuron_selectivity(TraceRefs vulnerable, TraceRefs safe, const SelectivityOptions& options) {
  if (vulnerable.empty()) throw DomainError("neuron_selectivity: no vulnerable samples");
  if (safe.empty()) throw DomainError("neuron_selectivity: no safe samples");
  if (options.layers.empty()) throw DomainError("neuron_selectivity: no layers selected");
  const std::size_t n_layers = vulnerable.front()->layers.size();
  for (TraceRefs set : {vulnerable, safe}) {
    for (const auto* t : set) {
      if (!t->flags.mlp_hidden) throw DomainError("neuron_selectivity: trace " + t->sample_id + " lacks mlp_hidden");
      if (t->layers.size() != n_layers) throw DomainError("neuron_selectivity: traces come from different models");
    }
  }
  std::vector<std::size_t> layers = options.layers;
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  const std::size_t d_mlp = vulnerable.front()->layers.front().mlp_hidden.cols();
  for (std::size_t l : layers) {
    if (l >= n_layers) {
      throw DomainError("neuron_selectivity: layer " + std::to_string(l) + " out of range (model has " +
                        std::to_string(n_layers) + " layers)");
    }
  }
  const std::size_t total = layers.size() * d_mlp;
  if (options.k == 0 || options.k > total) {
    throw DomainError("neuron_selectivity: k=" + std::to_string(options.k) + " must be in [1, " +
                      std::to_string(total) + "]");
  }

  // Per (neuron, sample) pooled activations, columns vulnerable then safe.
  std::vector<const ActivationTrace*> columns(vulnerable.begin(), vulnerable.end());
  columns.insert(columns.end(), safe.begin(), safe.end());
  MatrixD pooled(total, columns.size());
  parallel_for(total, options.workers, [&](std::size_t r) {
    const std::size_t layer = layers[r / d_mlp];
    const std::size_t neuron = r % d_mlp;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      pooled(r, c) = pooled_activation(columns[c]->layers[layer].mlp_hidden, neuron, options.pooling);
    }
  });

  SelectivityResult result;
  result.ranked.resize(total);
  const std::size_t nv = vulnerable.size();
  for (std::size_t r = 0; r < total; ++r) {
    NeuronScore& s = result.ranked[r];
    s.layer = layers[r / d_mlp];
    s.neuron = r % d_mlp;
    double sv = 0.0, ss = 0.0;
    for (std::size_t c = 0; c < nv; ++c) sv += pooled(r, c);
    for (std::size_t c = nv; c < columns.size(); ++c) ss += pooled(r, c);
    s.mean_act_vul = sv / static_cast<double>(nv);
    s.mean_act_safe = ss / static_cast<double>(safe.size());
    s.selectivity = s.mean_act_vul - s.mean_act_safe;
  }
  std::stable_sort(result.ranked.begin(), result.ranked.end(), [](const NeuronScore& a, const NeuronScore& b) {
    if (a.selectivity != b.selectivity) return a.selectivity > b.selectivity;
    return std::pair(a.layer, a.neuron) < std::pair(b.layer, b.neuron);
  });
  result.top.assign(result.ranked.begin(), result.ranked.begin() + static_cast<std::ptrdiff_t>(options.k));

  auto& m = result.matrix;
  m.n_vulnerable = nv;
  for (const auto* t : columns) m.sample_ids.push_back(t->sample_id);
  m.values = MatrixD(options.k, columns.size());
  for (std::size_t i = 0; i < options.k; ++i) {
    const auto& s = result.top[i];
    m.neurons.push_back({s.layer, s.neuron});
    const std::size_t layer_pos =
        static_cast<std::size_t>(std::lower_bound(layers.begin(), layers.end(), s.layer) - layers.begin());
    const std::size_t r = layer_pos * d_mlp + s.neuron;
    for (std::size_t c = 0; c < columns.size(); ++c) m.values(i, c) = pooled(r, c);
  }
  return result;
}

double auc(std::span<const double> vulnerable, std::span<const double> safe) {
  if (vulnerable.empty() || safe.empty()) throw DomainError("auc: both classes need at least one value");
  // Mann-Whitney U with midranks.
  std::vector<std::pair<double, bool>> all;
  all.reserve(vulnerable.size() + safe.size());
  for (double v : vulnerable) all.emplace_back(v, true);
  for (double v : safe) all.emplace_back(v, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (all[t].second) rank_sum += midrank;
    }
    i = j;
  }
  const double nv = static_cast<double>(vulnerable.size());
  const double ns = static_cast<double>(safe.size());
  return (rank_sum - nv * (nv + 1.0) / 2.0) / (nv * ns);
}

BoundaryReport boundary_check(const ContrastiveMatrix& matrix) {
  const std::size_t nv = matrix.n_vulnerable;
  const std::size_t n = matrix.values.cols();
  if (matrix.values.rows() == 0) throw DomainError("boundary_check: empty matrix");
  if (nv == 0 || nv >= n) throw DomainError("boundary_check: both classes need at least one column");
  BoundaryReport report;
  for (std::size_t r = 0; r < matrix.values.rows(); ++r) {
    const auto row = matrix.values.row(r);
    const auto v = row.first(nv);
    const auto s = row.subspan(nv);
    double sv = 0.0, ss = 0.0;
    for (double x : v) sv += x;
    for (double x : s) ss += x;
    RowSeparation sep;
    sep.neuron = r < matrix.neurons.size() ? matrix.neurons[r] : NeuronId{};
    sep.mean_difference = sv / static_cast<double>(v.size()) - ss / static_cast<double>(s.size());
    sep.auc = auc(v, s);
    report.mean_difference += sep.mean_difference;
    report.mean_auc += sep.auc;
    report.rows.push_back(sep);
  }
  report.mean_difference /= static_cast<double>(report.rows.size());
  report.mean_auc /= static_cast<double>(report.rows.size());
  return report;
}

void write_head_scores_csv(std::span<const HeadScore> scores, const std::filesystem::path& path) {
  CsvWriter csv({"layer", "head", "mean_max_tp", "mean_max_tn", "entropy_tp", "entropy_tn", "importance", "rank"});
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& s = scores[i];
    csv.cell(s.layer).cell(s.head).cell(s.mean_max_tp).cell(s.mean_max_tn).cell(s.entropy_tp).cell(s.entropy_tn);
    csv.cell(s.importance).cell(i + 1);
    csv.end_row();
  }
  csv.save(path);
}

void write_neuron_scores_csv(std::span<const NeuronScore> scores, const std::filesystem::path& path) {
  CsvWriter csv({"layer", "neuron", "mean_act_vul", "mean_act_safe", "selectivity", "rank"});
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& s = scores[i];
    csv.cell(s.layer).cell(s.neuron).cell(s.mean_act_vul).cell(s.mean_act_safe).cell(s.selectivity).cell(i + 1);
    csv.end_row();
  }
  csv.save(path);
}

namespace {

std::string neuron_name(const NeuronId& n) {
  return "L" + std::to_string(n.layer) + ".N" + std::to_string(n.index);
}

}  // namespace

void write_contrastive_csv(const ContrastiveMatrix& matrix, const std::filesystem::path& path) {
  std::vector<std::string> header{"neuron"};
  header.insert(header.end(), matrix.sample_ids.begin(), matrix.sample_ids.end());
  CsvWriter csv(std::move(header));
  for (std::size_t r = 0; r < matrix.values.rows(); ++r) {
    csv.cell(neuron_name(matrix.neurons[r]));
    for (double v : matrix.values.row(r)) csv.cell(v);
    csv.end_row();
  }
  csv.save(path);
}

void write_boundary_csv(const BoundaryReport& report, const std::filesystem::path& path) {
  CsvWriter csv({"neuron", "mean_difference", "auc"});
  for (const auto& r : report.rows) {
    csv.cell(neuron_name(r.neuron)).cell(r.mean_difference).cell(r.auc);
    csv.end_row();
  }
  csv.cell("mean").cell(report.mean_difference).cell(report.mean_auc);
  csv.end_row();
  csv.save(path);
}

}  // namespace cprobe
