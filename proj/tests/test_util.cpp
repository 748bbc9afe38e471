// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>

#include <unistd.h>

namespace cprobe::testing {

ModelSpec tiny_spec(std::size_t n_layers, std::size_t n_heads, std::size_t d_model, std::size_t d_mlp,
                    std::size_t max_seq) {
  return {n_layers, n_heads, d_model, d_mlp, 259, max_seq, 256, 257, 258};
}

std::vector<TokenId> random_tokens(const ModelSpec& spec, std::size_t length, Rng& rng) {
  std::vector<TokenId> t{spec.bos_token_id};
  while (t.size() < length) t.push_back(static_cast<TokenId>(32 + rng.uniform_index(95)));
  return t;
}

ActivationTrace random_trace(const ModelSpec& spec, std::size_t n, Rng& rng, const std::string& id) {
  ActivationTrace t;
  t.sample_id = id;
  t.tokens = random_tokens(spec, n, rng);
  t.flags = CaptureFlags::all();
  auto fill = [&](MatrixF& m, std::size_t rows, std::size_t cols, double zero_prob) {
    m = MatrixF(rows, cols);
    for (float& v : m.flat()) v = rng.uniform() < zero_prob ? 0.0f : static_cast<float>(rng.normal());
  };
  fill(t.embedding, n, spec.d_model, 0.0);
  t.layers.resize(spec.n_layers);
  for (auto& layer : t.layers) {
    fill(layer.residual_out, n, spec.d_model, 0.0);
    fill(layer.mlp_hidden, n, spec.d_mlp, 0.3);
    fill(layer.mlp_out, n, spec.d_model, 0.2);
    layer.attention.resize(spec.n_heads);
    for (auto& a : layer.attention) {
      a = MatrixF(n, n);
      for (std::size_t q = 0; q < n; ++q) {
        double total = 0.0;
        std::vector<double> w(q + 1);
        for (auto& x : w) {
          x = std::exp(2.0 * rng.normal());
          total += x;
        }
        for (std::size_t k = 0; k <= q; ++k) a(q, k) = static_cast<float>(w[k] / total);
      }
    }
  }
  return t;
}

Corpus small_corpus(std::size_t n_vulnerable, std::size_t n_safe, std::uint64_t seed) {
  Rng rng(seed);
  static const char* kTags[] = {"CWE-787", "CWE-416", nullptr};
  Corpus c;
  auto body = [&] {
    std::string s;
    const std::size_t len = 5 + rng.uniform_index(20);
    for (std::size_t i = 0; i < len; ++i) s += static_cast<char>('a' + rng.uniform_index(26));
    return s;
  };
  for (std::size_t i = 0; i < n_vulnerable; ++i) {
    SampleRecord r{"v" + std::to_string(i), body(), Label::vulnerable, {}, {}, false};
    if (const char* tag = kTags[i % 3]) r.cwe = tag;
    c.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < n_safe; ++i) c.push_back({"s" + std::to_string(i), body(), Label::safe, {}, {}, false});
  return c;
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("cprobe-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

namespace closed_form {

double gelu_ref(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_slope(double x) {
  const double h = 1e-5;
  return (gelu_ref(x + h) - gelu_ref(x - h)) / (2 * h);
}

Norm norm_of(const Vec& h) {
  double ms = 0.0;
  for (double v : h) ms += v * v;
  ms /= static_cast<double>(h.size());
  Norm n{Vec(h.size()), 1.0 / std::sqrt(ms + 1e-6)};
  for (std::size_t i = 0; i < h.size(); ++i) n.y[i] = h[i] * n.inv;
  return n;
}

double directional(const Vec& c, const Vec& h, const Vec& w) {
  const Norm n = norm_of(h);
  const double d = static_cast<double>(h.size());
  double cw = 0.0, ch = 0.0, hw = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    cw += c[i] * w[i];
    ch += c[i] * h[i];
    hw += h[i] * w[i];
  }
  return n.inv * cw - n.inv * n.inv * n.inv / d * ch * hw;
}

Vec embed(const TransformerWeights& w, TokenId tok, std::size_t pos) {
  Vec h(w.spec.d_model);
  for (std::size_t j = 0; j < h.size(); ++j) h[j] = static_cast<double>(w.token_embedding(tok, j)) + w.position_embedding(pos, j);
  return h;
}

MlpStep mlp_step(const LayerWeights& lw, const Vec& h) {
  const Norm n = norm_of(h);
  MlpStep s;
  s.z.assign(lw.w_in.cols(), 0.0);
  for (std::size_t k = 0; k < s.z.size(); ++k) {
    for (std::size_t j = 0; j < h.size(); ++j) s.z[k] += n.y[j] * lw.mlp_norm[j] * lw.w_in(j, k);
  }
  for (double z : s.z) s.a.push_back(gelu_ref(z));
  s.h_out = h;
  for (std::size_t j = 0; j < h.size(); ++j) {
    for (std::size_t k = 0; k < s.a.size(); ++k) s.h_out[j] += s.a[k] * lw.w_out(k, j);
  }
  return s;
}

Vec row_of(const MatrixF& m, std::size_t r) { return Vec(m.row(r).begin(), m.row(r).end()); }

TransformerWeights silent_attention(ModelSpec spec, std::uint64_t seed) {
  auto w = TransformerWeights::random(spec, seed, 0.6);
  for (auto& l : w.layers) std::fill(l.w_o.flat().begin(), l.w_o.flat().end(), 0.0f);
  return w;
}

SingleLayerReference single_layer_reference(const TransformerWeights& w, std::span<const TokenId> tokens) {
  const std::size_t last = tokens.size() - 1;
  const auto step = mlp_step(w.layers[0], embed(w, tokens[last], last));
  const std::size_t d = w.spec.d_model;
  Vec c(d);
  for (std::size_t j = 0; j < d; ++j) {
    c[j] = static_cast<double>(w.final_norm[j]) *
           (static_cast<double>(w.unembedding(j, w.spec.vuln_token_id)) - w.unembedding(j, w.spec.safe_token_id));
  }
  SingleLayerReference ref;
  for (std::size_t n = 0; n < step.a.size(); ++n) {
    ref.neuron_raw.push_back(step.a[n] * directional(c, step.h_out, row_of(w.layers[0].w_out, n)));
  }
  const Norm nf = norm_of(step.h_out);
  for (std::size_t j = 0; j < d; ++j) ref.margin += c[j] * nf.y[j];
  return ref;
}

}  // namespace closed_form

}  // namespace cprobe::testing
