// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <tuple>

#include "cprobe/error.hpp"
#include "cprobe/metrics.hpp"
#include "cprobe/report.hpp"
#include "test_util.hpp"

namespace cprobe {
namespace {

using testing::tiny_spec;

std::vector<const ActivationTrace*> refs(const std::vector<ActivationTrace>& ts) {
  std::vector<const ActivationTrace*> out;
  for (const auto& t : ts) out.push_back(&t);
  return out;
}

TEST(RowStats, MasksBosAndRenormalizes) {
  const float row[] = {0.5f, 0.25f, 0.25f};
  const auto s = masked_row_stats(row);
  EXPECT_DOUBLE_EQ(s.max_weight, 0.5);
  EXPECT_NEAR(s.entropy, std::log(2.0), 1e-12);
  const float bos_only[] = {1.0f, 0.0f, 0.0f, 0.0f};
  const auto u = masked_row_stats(bos_only);
  EXPECT_DOUBLE_EQ(u.max_weight, 1.0 / 3.0);
  EXPECT_NEAR(u.entropy, std::log(3.0), 1e-12);
  const float pair[] = {0.9f, 0.1f};
  EXPECT_EQ(masked_row_stats(pair).max_weight, 1.0);
  EXPECT_EQ(masked_row_stats(pair).entropy, 0.0);
}

TEST(HeadImportance, HandEvaluatedCase) {
  // TP rows split the non-BOS mass evenly over two keys, TN rows put it on one.
  EXPECT_NEAR(importance_score(0.5, 1.0, std::log(2.0), 0.0, 0.5), -0.8466, 5e-5);

  ActivationTrace tp, tn;
  tp.tokens = tn.tokens = {256, 1, 2, 3};
  tp.flags = tn.flags = {.attention = true};
  tp.layers.resize(1);
  tn.layers.resize(1);
  MatrixF a(4, 4), b(4, 4);
  a(0, 0) = b(0, 0) = 1.0f;
  a(1, 0) = b(1, 0) = 1.0f;  // no mass off BOS: uniform over the single key
  for (std::size_t q = 2; q < 4; ++q) {
    a(q, 0) = 0.2f, a(q, 1) = 0.4f, a(q, 2) = 0.4f;
    b(q, 0) = 0.5f, b(q, 1) = 0.5f;
  }
  tp.layers[0].attention.push_back(a);
  tn.layers[0].attention.push_back(b);
  // Query 1 contributes (1, 0) to both classes:
  // m_tp = 2/3, m_tn = 1, h_tp = 2 ln2 / 3, h_tn = 0.
  const std::vector<ActivationTrace> P{tp}, N{tn};
  const auto s = head_importance(refs(P), refs(N));
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0].importance, (2.0 / 3.0 - 1.0) + 0.5 * (0.0 - 2.0 * std::log(2.0) / 3.0), 1e-12);
}

TEST(HeadImportance, DocumentedValueFromTraces) {
  ActivationTrace tp, tn;
  tp.tokens = tn.tokens = {256, 1, 2};
  tp.flags = tn.flags = {.attention = true};
  tp.layers.resize(1);
  tn.layers.resize(1);
  MatrixF a(3, 3), b(3, 3);
  // Query 1 is excluded by leaving only query 2 as a row with two non-BOS
  // keys; query 1 always has a single key and contributes (1, 0) to both.
  a(0, 0) = b(0, 0) = 1.0f;
  a(1, 1) = b(1, 1) = 1.0f;
  a(2, 1) = a(2, 2) = 0.5f;
  b(2, 2) = 1.0f;
  tp.layers[0].attention.push_back(a);
  tn.layers[0].attention.push_back(b);
  const std::vector<ActivationTrace> P{tp}, N{tn};
  const auto s = head_importance(refs(P), refs(N))[0];
  EXPECT_DOUBLE_EQ(s.mean_max_tp, 0.75);
  EXPECT_DOUBLE_EQ(s.mean_max_tn, 1.0);
  EXPECT_NEAR(s.entropy_tp, std::log(2.0) / 2, 1e-12);
  EXPECT_EQ(s.entropy_tn, 0.0);
  // Half of the documented -0.8466 because query 1 dilutes both terms.
  EXPECT_NEAR(s.importance, -0.8466 / 2, 5e-5);
}

TEST(HeadImportance, IdenticalSetsScoreZero) {
  Rng rng(1);
  std::vector<ActivationTrace> ts;
  for (int i = 0; i < 5; ++i) ts.push_back(testing::random_trace(tiny_spec(3, 2, 8, 16), 3 + i, rng));
  for (const auto& s : head_importance(refs(ts), refs(ts))) EXPECT_EQ(s.importance, 0.0);
}

TEST(HeadImportance, SwappingClassesNegatesScores) {
  Rng rng(2);
  std::vector<ActivationTrace> a, b;
  for (int i = 0; i < 4; ++i) a.push_back(testing::random_trace(tiny_spec(), 5 + i, rng));
  for (int i = 0; i < 3; ++i) b.push_back(testing::random_trace(tiny_spec(), 4 + i, rng));
  auto fwd = head_importance(refs(a), refs(b));
  auto rev = head_importance(refs(b), refs(a));
  auto key = [](const HeadScore& s) { return std::make_pair(s.layer, s.head); };
  std::sort(fwd.begin(), fwd.end(), [&](auto& x, auto& y) { return key(x) < key(y); });
  std::sort(rev.begin(), rev.end(), [&](auto& x, auto& y) { return key(x) < key(y); });
  for (std::size_t i = 0; i < fwd.size(); ++i) EXPECT_NEAR(fwd[i].importance, -rev[i].importance, 1e-12);
}

TEST(HeadImportance, BosColumnDoesNotMatter) {
  Rng rng(3);
  std::vector<ActivationTrace> a, b;
  for (int i = 0; i < 3; ++i) a.push_back(testing::random_trace(tiny_spec(), 6, rng));
  for (int i = 0; i < 3; ++i) b.push_back(testing::random_trace(tiny_spec(), 6, rng));
  const auto base = head_importance(refs(a), refs(b));
  for (auto& t : a) {
    for (auto& l : t.layers) {
      for (auto& m : l.attention) {
        for (std::size_t q = 1; q < m.rows(); ++q) {
          // Move BOS mass around while keeping the non-BOS proportions.
          const float keep = 0.3f;
          const float bos = m(q, 0);
          for (std::size_t k = 1; k <= q; ++k) m(q, k) *= (1.0f - keep) / (1.0f - bos);
          m(q, 0) = keep;
        }
      }
    }
  }
  const auto moved = head_importance(refs(a), refs(b));
  for (std::size_t i = 0; i < base.size(); ++i) {
    EXPECT_EQ(base[i].layer, moved[i].layer);
    EXPECT_NEAR(base[i].importance, moved[i].importance, 1e-5);
  }
}

TEST(HeadImportance, ImportanceIsReconstructedFromComponents) {
  Rng rng(4);
  std::vector<ActivationTrace> a, b;
  for (int i = 0; i < 4; ++i) a.push_back(testing::random_trace(tiny_spec(3, 4, 8, 16), 7, rng));
  for (int i = 0; i < 4; ++i) b.push_back(testing::random_trace(tiny_spec(3, 4, 8, 16), 9, rng));
  for (double lambda : {0.0, 0.5, 2.0}) {
    const auto scores = head_importance(refs(a), refs(b), lambda, 2);
    ASSERT_EQ(scores.size(), 12u);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const auto& s = scores[i];
      EXPECT_EQ(s.importance, importance_score(s.mean_max_tp, s.mean_max_tn, s.entropy_tp, s.entropy_tn, lambda));
      if (i > 0) {
        EXPECT_LE(scores[i - 1].importance, s.importance);
        if (scores[i - 1].importance == s.importance) {
          EXPECT_LT(std::tie(scores[i - 1].layer, scores[i - 1].head), std::tie(s.layer, s.head));
        }
      }
    }
  }
}

TEST(HeadImportance, ErrorsOnEmptyOrMissingAttention) {
  Rng rng(5);
  std::vector<ActivationTrace> a{testing::random_trace(tiny_spec(), 4, rng)};
  EXPECT_THROW(head_importance(refs(a), {}), DomainError);
  EXPECT_THROW(head_importance({}, refs(a)), DomainError);
  auto b = a;
  b[0].flags.attention = false;
  EXPECT_THROW(head_importance(refs(a), refs(b)), DomainError);
}

ActivationTrace hidden_trace(const std::string& id, std::size_t n_layers, std::size_t d_mlp,
                             const std::vector<double>& per_layer_value) {
  ActivationTrace t;
  t.sample_id = id;
  t.tokens = {256, 1, 2};
  t.flags = {.mlp_hidden = true};
  t.layers.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    t.layers[l].mlp_hidden = MatrixF(3, d_mlp);
    for (std::size_t p = 1; p < 3; ++p) t.layers[l].mlp_hidden(p, 0) = static_cast<float>(per_layer_value[l]);
  }
  return t;
}

TEST(Selectivity, DefinitionalIndicatorNeuron) {
  std::vector<ActivationTrace> v, s;
  for (int i = 0; i < 3; ++i) v.push_back(hidden_trace("v" + std::to_string(i), 2, 4, {0.0, 1.0}));
  for (int i = 0; i < 2; ++i) s.push_back(hidden_trace("s" + std::to_string(i), 2, 4, {0.0, 0.0}));
  const auto r = neuron_selectivity(refs(v), refs(s), {{0, 1}, 3});
  ASSERT_EQ(r.top.size(), 3u);
  EXPECT_EQ(r.top[0].layer, 1u);
  EXPECT_EQ(r.top[0].neuron, 0u);
  EXPECT_EQ(r.top[0].selectivity, 1.0);
  EXPECT_EQ(r.ranked.size(), 8u);
  // Remaining ties resolve by (layer, neuron).
  EXPECT_EQ(r.top[1].layer, 0u);
  EXPECT_EQ(r.top[1].neuron, 0u);
  EXPECT_EQ(r.top[2].neuron, 1u);
  EXPECT_EQ(r.matrix.values.rows(), 3u);
  EXPECT_EQ(r.matrix.values.cols(), 5u);
  EXPECT_EQ(r.matrix.n_vulnerable, 3u);
  EXPECT_EQ(r.matrix.sample_ids, (std::vector<std::string>{"v0", "v1", "v2", "s0", "s1"}));
  EXPECT_EQ(r.matrix.values(0, 0), 1.0);
  EXPECT_EQ(r.matrix.values(0, 4), 0.0);
}

TEST(Selectivity, IdenticalClassesScoreZero) {
  Rng rng(6);
  std::vector<ActivationTrace> ts;
  for (int i = 0; i < 4; ++i) ts.push_back(testing::random_trace(tiny_spec(), 5, rng, "x" + std::to_string(i)));
  for (const auto& n : neuron_selectivity(refs(ts), refs(ts), {{0, 1}, 5}).ranked) EXPECT_EQ(n.selectivity, 0.0);
}

TEST(Selectivity, TopKMatchesExhaustiveRanking) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto spec = tiny_spec(3, 2, 8, 8);
    std::vector<ActivationTrace> v, s;
    for (int i = 0; i < 5; ++i) v.push_back(testing::random_trace(spec, 2 + rng.uniform_index(8), rng));
    for (int i = 0; i < 4; ++i) s.push_back(testing::random_trace(spec, 2 + rng.uniform_index(8), rng));
    const std::vector<std::size_t> layers{0, 2};
    const std::size_t k = 1 + rng.uniform_index(16);
    const auto r = neuron_selectivity(refs(v), refs(s), {layers, k, Pooling::mean, 1 + rng.uniform_index(3)});

    std::vector<std::tuple<double, std::size_t, std::size_t>> brute;
    auto class_mean = [](const std::vector<ActivationTrace>& ts, std::size_t l, std::size_t n) {
      double total = 0.0;
      for (const auto& t : ts) {
        double a = 0.0;
        for (std::size_t p = 1; p < t.seq_len(); ++p) a += t.layers[l].mlp_hidden(p, n);
        total += a / static_cast<double>(t.seq_len() - 1);
      }
      return total / static_cast<double>(ts.size());
    };
    for (std::size_t l : layers) {
      for (std::size_t n = 0; n < 8; ++n) brute.emplace_back(-(class_mean(v, l, n) - class_mean(s, l, n)), l, n);
    }
    std::sort(brute.begin(), brute.end());
    ASSERT_EQ(r.top.size(), k);
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_EQ(r.top[i].layer, std::get<1>(brute[i]));
      EXPECT_EQ(r.top[i].neuron, std::get<2>(brute[i]));
      EXPECT_NEAR(r.top[i].selectivity, -std::get<0>(brute[i]), 1e-12);
    }
  }
}

TEST(Selectivity, ErrorsOnBadArguments) {
  Rng rng(8);
  std::vector<ActivationTrace> ts{testing::random_trace(tiny_spec(), 4, rng)};
  EXPECT_THROW(neuron_selectivity(refs(ts), {}, {{0}, 1}), DomainError);
  EXPECT_THROW(neuron_selectivity({}, refs(ts), {{0}, 1}), DomainError);
  EXPECT_THROW(neuron_selectivity(refs(ts), refs(ts), {{2}, 1}), DomainError);
  EXPECT_THROW(neuron_selectivity(refs(ts), refs(ts)), DomainError);  // default layers exceed 2
  EXPECT_THROW(neuron_selectivity(refs(ts), refs(ts), {{0}, 17}), DomainError);
  EXPECT_THROW(neuron_selectivity(refs(ts), refs(ts), {{0}, 0}), DomainError);
}

TEST(Pooling, Variants) {
  MatrixF m(3, 1);
  m(0, 0) = 100.0f;
  m(1, 0) = 1.0f;
  m(2, 0) = 3.0f;
  EXPECT_EQ(pooled_activation(m, 0, Pooling::mean), 2.0);
  EXPECT_EQ(pooled_activation(m, 0, Pooling::max), 3.0);
  EXPECT_EQ(pooled_activation(m, 0, Pooling::last), 3.0);
  EXPECT_EQ(pooled_activation(MatrixF(1, 1), 0), 0.0);
}

TEST(Auc, ConventionsAndPairOracle) {
  const std::vector<double> ones(4, 1.0), zeros(3, 0.0);
  EXPECT_EQ(auc(ones, zeros), 1.0);
  EXPECT_EQ(auc(zeros, ones), 0.0);
  EXPECT_EQ(auc(ones, ones), 0.5);
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(1 + rng.uniform_index(10)), b(1 + rng.uniform_index(10));
    for (auto& x : a) x = static_cast<double>(rng.uniform_index(5));
    for (auto& x : b) x = static_cast<double>(rng.uniform_index(5));
    double wins = 0.0;
    for (double x : a) {
      for (double y : b) wins += x > y ? 1.0 : x == y ? 0.5 : 0.0;
    }
    EXPECT_NEAR(auc(a, b), wins / static_cast<double>(a.size() * b.size()), 1e-12);
  }
  EXPECT_THROW(auc({}, ones), DomainError);
}

TEST(Boundary, SeparatedRows) {
  ContrastiveMatrix m;
  m.neurons = {{0, 0}, {0, 1}};
  m.sample_ids = {"v", "s"};
  m.n_vulnerable = 1;
  m.values = MatrixD(2, 2);
  m.values(0, 0) = 2.0;
  m.values(1, 0) = m.values(1, 1) = 5.0;
  const auto r = boundary_check(m);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].mean_difference, 2.0);
  EXPECT_EQ(r.rows[0].auc, 1.0);
  EXPECT_EQ(r.rows[1].auc, 0.5);
  EXPECT_EQ(r.mean_auc, 0.75);
  EXPECT_EQ(r.mean_difference, 1.0);
}

TEST(MetricsCsv, HeadAndContrastiveLayouts) {
  testing::TempDir dir("metrics_csv");
  const std::vector<HeadScore> hs{{1, 2, 0.5, 0.9, 0.1, 0.2, -0.35}};
  write_head_scores_csv(hs, dir / "h.csv");
  const auto rows = read_csv(dir / "h.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].front(), "layer");
  EXPECT_EQ(rows[1][0], "1");
  EXPECT_EQ(rows[1][6], "-0.35");
  EXPECT_EQ(rows[1].back(), "1");

  ContrastiveMatrix m;
  m.neurons = {{3, 7}};
  m.sample_ids = {"a", "b,c"};
  m.n_vulnerable = 1;
  m.values = MatrixD(1, 2);
  m.values(0, 1) = 0.25;
  write_contrastive_csv(m, dir / "c.csv");
  const auto c = read_csv(dir / "c.csv");
  EXPECT_EQ(c[0], (std::vector<std::string>{"neuron", "a", "b,c"}));
  EXPECT_EQ(c[1], (std::vector<std::string>{"L3.N7", "0", "0.25"}));
}

}  // namespace
}  // namespace cprobe
