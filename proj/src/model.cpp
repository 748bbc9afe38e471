// SPDX-License-Identifier: Apache-2.0

#include "cprobe/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cprobe/error.hpp"

namespace cprobe {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

double gelu(double x) noexcept {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_derivative(double x) noexcept {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

const char* to_string(Site site) noexcept {
  return site == Site::mlp_hidden ? "mlp_neuron" : "attn_head";
}

std::uint32_t CaptureFlags::bits() const noexcept {
  return (residual ? 1u : 0u) | (attention ? 2u : 0u) | (mlp_hidden ? 4u : 0u) |
         (mlp_out ? 8u : 0u);
}

CaptureFlags CaptureFlags::from_bits(std::uint32_t bits) {
  if (bits & ~15u) throw FormatError("capture flags: unknown bits set");
  return {(bits & 1u) != 0, (bits & 2u) != 0, (bits & 4u) != 0, (bits & 8u) != 0};
}

void Hooks::validate(const ModelSpec& spec, std::size_t seq_len) const {
  auto fail = [](const std::string& msg) { throw DomainError("hook: " + msg); };
  for (const auto& e : residual) {
    if (e.layer >= spec.n_layers) fail("residual edit layer " + std::to_string(e.layer) + " out of range");
    if (e.vector.size() != spec.d_model) fail("residual edit vector length != d_model");
    for (double v : e.vector) {
      if (!std::isfinite(v)) fail("residual edit vector is not finite");
    }
  }
  for (const auto& e : neurons) {
    if (e.layer >= spec.n_layers) fail("neuron edit layer " + std::to_string(e.layer) + " out of range");
    if (e.neuron >= spec.d_mlp) fail("neuron " + std::to_string(e.neuron) + " out of range");
    if (e.position && *e.position >= seq_len) fail("neuron edit position out of range");
  }
  for (const auto& e : heads) {
    if (e.layer >= spec.n_layers) fail("head edit layer " + std::to_string(e.layer) + " out of range");
    if (e.head >= spec.n_heads) fail("head " + std::to_string(e.head) + " out of range");
    if (e.position && *e.position >= seq_len) fail("head edit position out of range");
    if (e.component && *e.component >= spec.d_head()) fail("head edit component out of range");
  }
}

namespace detail {

struct LayerCache {
  MatrixD h_in;
  MatrixD x1;
  std::vector<double> inv_r1;
  MatrixD q, k, v;
  std::vector<MatrixD> attn;  // per head, [seq x seq]
  MatrixD z;                  // head outputs, [seq x d_model]
  MatrixD h_mid;
  MatrixD x2;
  std::vector<double> inv_r2;
  MatrixD pre;
  MatrixD act;
  MatrixD mlp_out;
  MatrixD h_out;
};

struct ForwardCache {
  std::vector<TokenId> tokens;
  MatrixD embedding;
  std::vector<LayerCache> layers;
  MatrixD xf;
  std::vector<double> inv_rf;
  MatrixD logits;
};

}  // namespace detail

namespace {

using detail::ForwardCache;
using detail::LayerCache;

void check_tokens(const ModelSpec& spec, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw DomainError("forward: empty token sequence");
  if (tokens.size() > spec.max_seq) {
    throw DomainError("forward: sequence length " + std::to_string(tokens.size()) +
                      " exceeds max_seq " + std::to_string(spec.max_seq));
  }
  if (tokens[0] != spec.bos_token_id) throw DomainError("forward: sequence must start with BOS");
  for (TokenId t : tokens) {
    if (t >= spec.vocab_size) throw DomainError("forward: unknown token id " + std::to_string(t));
  }
}

// out = in * w, in [n x k] double, w [k x m] float.
void matmul(const MatrixD& in, const MatrixF& w, MatrixD& out) {
  const std::size_t n = in.rows(), k = in.cols(), m = w.cols();
  out = MatrixD(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = out.row(i);
    auto src = in.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double a = src[p];
      if (a == 0.0) continue;
      auto wr = w.row(p);
      for (std::size_t j = 0; j < m; ++j) dst[j] += a * static_cast<double>(wr[j]);
    }
  }
}

// out += dout * w^T, dout [n x m], w [k x m], out [n x k].
void matmul_transposed_acc(const MatrixD& dout, const MatrixF& w, MatrixD& out) {
  const std::size_t n = dout.rows(), k = w.rows(), m = w.cols();
  for (std::size_t i = 0; i < n; ++i) {
    auto g = dout.row(i);
    auto dst = out.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      auto wr = w.row(p);
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += g[j] * static_cast<double>(wr[j]);
      dst[p] += acc;
    }
  }
}

void rmsnorm(const MatrixD& h, std::span<const float> scale, MatrixD& x, std::vector<double>& inv_r) {
  const std::size_t n = h.rows(), d = h.cols();
  x = MatrixD(n, d);
  inv_r.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = h.row(i);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsNormEps);
    inv_r[i] = inv;
    auto out = x.row(i);
    for (std::size_t j = 0; j < d; ++j) out[j] = row[j] * inv * static_cast<double>(scale[j]);
  }
}

// dh += d(rmsnorm)/dh applied to dx.
void rmsnorm_backward(const MatrixD& h, std::span<const float> scale, const std::vector<double>& inv_r,
                      const MatrixD& dx, MatrixD& dh) {
  const std::size_t n = h.rows(), d = h.cols();
  for (std::size_t i = 0; i < n; ++i) {
    auto hr = h.row(i);
    auto gr = dx.row(i);
    const double inv = inv_r[i];
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += gr[j] * static_cast<double>(scale[j]) * hr[j];
    const double coeff = inv * inv * inv * dot / static_cast<double>(d);
    auto out = dh.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      out[j] += static_cast<double>(scale[j]) * inv * gr[j] - coeff * hr[j];
    }
  }
}

void apply_head_edits(const Hooks& hooks, std::size_t layer, std::size_t d_head, MatrixD& z) {
  for (const auto& e : hooks.heads) {
    if (e.layer != layer) continue;
    const std::size_t p0 = e.position ? *e.position : 0;
    const std::size_t p1 = e.position ? *e.position + 1 : z.rows();
    const std::size_t c0 = e.head * d_head + (e.component ? *e.component : 0);
    const std::size_t c1 = e.component ? c0 + 1 : e.head * d_head + d_head;
    for (std::size_t p = p0; p < p1; ++p) {
      for (std::size_t c = c0; c < c1; ++c) z(p, c) = z(p, c) * e.scale + e.offset;
    }
  }
}

void apply_neuron_edits(const Hooks& hooks, std::size_t layer, MatrixD& act) {
  for (const auto& e : hooks.neurons) {
    if (e.layer != layer) continue;
    const std::size_t p0 = e.position ? *e.position : 0;
    const std::size_t p1 = e.position ? *e.position + 1 : act.rows();
    for (std::size_t p = p0; p < p1; ++p) act(p, e.neuron) = act(p, e.neuron) * e.scale + e.offset;
  }
}

void apply_residual_edits(const Hooks& hooks, std::size_t layer, const MatrixD& h_in, MatrixD& h_out) {
  for (const auto& e : hooks.residual) {
    if (e.layer != layer) continue;
    for (std::size_t p = 1; p < h_out.rows(); ++p) {
      auto row = h_out.row(p);
      for (std::size_t j = 0; j < row.size(); ++j) {
        switch (e.kind) {
          case ResidualEditKind::replace: row[j] = e.vector[j]; break;
          case ResidualEditKind::add: row[j] += e.vector[j]; break;
          case ResidualEditKind::replace_block: row[j] = h_in(p, j) + e.vector[j]; break;
        }
      }
    }
  }
}

void run_forward(const TransformerWeights& w, std::span<const TokenId> tokens, const Hooks* hooks,
                 ForwardCache& cache) {
  const ModelSpec& spec = w.spec;
  check_tokens(spec, tokens);
  if (w.layers.size() != spec.n_layers) throw ValidationError("forward: weights/spec layer mismatch");
  if (hooks && hooks->empty()) hooks = nullptr;
  if (hooks) hooks->validate(spec, tokens.size());

  const std::size_t n = tokens.size();
  const std::size_t d = spec.d_model;
  const std::size_t dh = spec.d_head();
  const std::size_t n_heads = spec.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.embedding = MatrixD(n, d);
  for (std::size_t p = 0; p < n; ++p) {
    auto te = w.token_embedding.row(tokens[p]);
    auto pe = w.position_embedding.row(p);
    auto out = cache.embedding.row(p);
    for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<double>(te[j]) + static_cast<double>(pe[j]);
  }

  cache.layers.resize(spec.n_layers);
  const MatrixD* h = &cache.embedding;
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    LayerCache& c = cache.layers[l];
    c.h_in = *h;

    rmsnorm(c.h_in, lw.attn_norm, c.x1, c.inv_r1);
    matmul(c.x1, lw.w_q, c.q);
    matmul(c.x1, lw.w_k, c.k);
    matmul(c.x1, lw.w_v, c.v);

    c.attn.assign(n_heads, MatrixD(n, n));
    c.z = MatrixD(n, d);
    std::vector<double> scores(n);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      const std::size_t c0 = hd * dh;
      MatrixD& a = c.attn[hd];
      for (std::size_t qi = 0; qi < n; ++qi) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t ki = 0; ki <= qi; ++ki) {
          double s = 0.0;
          for (std::size_t j = 0; j < dh; ++j) s += c.q(qi, c0 + j) * c.k(ki, c0 + j);
          scores[ki] = s * inv_sqrt_dh;
          mx = std::max(mx, scores[ki]);
        }
        double total = 0.0;
        for (std::size_t ki = 0; ki <= qi; ++ki) {
          scores[ki] = std::exp(scores[ki] - mx);
          total += scores[ki];
        }
        for (std::size_t ki = 0; ki <= qi; ++ki) a(qi, ki) = scores[ki] / total;
        for (std::size_t ki = 0; ki <= qi; ++ki) {
          const double p = a(qi, ki);
          for (std::size_t j = 0; j < dh; ++j) c.z(qi, c0 + j) += p * c.v(ki, c0 + j);
        }
      }
    }
    if (hooks) apply_head_edits(*hooks, l, dh, c.z);

    MatrixD attn_out;
    matmul(c.z, lw.w_o, attn_out);
    c.h_mid = c.h_in;
    for (std::size_t i = 0; i < c.h_mid.size(); ++i) c.h_mid.flat()[i] += attn_out.flat()[i];

    rmsnorm(c.h_mid, lw.mlp_norm, c.x2, c.inv_r2);
    matmul(c.x2, lw.w_in, c.pre);
    c.act = MatrixD(n, spec.d_mlp);
    for (std::size_t i = 0; i < c.pre.size(); ++i) c.act.flat()[i] = gelu(c.pre.flat()[i]);
    if (hooks) apply_neuron_edits(*hooks, l, c.act);

    matmul(c.act, lw.w_out, c.mlp_out);
    c.h_out = c.h_mid;
    for (std::size_t i = 0; i < c.h_out.size(); ++i) c.h_out.flat()[i] += c.mlp_out.flat()[i];
    if (hooks) apply_residual_edits(*hooks, l, c.h_in, c.h_out);

    h = &c.h_out;
  }

  rmsnorm(*h, w.final_norm, cache.xf, cache.inv_rf);
  matmul(cache.xf, w.unembedding, cache.logits);
}

MatrixF to_float(const MatrixD& m) { return matrix_cast<float>(m); }

ActivationTrace build_trace(const ForwardCache& cache, CaptureFlags flags) {
  ActivationTrace t;
  t.tokens = cache.tokens;
  t.flags = flags;
  if (flags.residual) t.embedding = to_float(cache.embedding);
  t.layers.resize(cache.layers.size());
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    const LayerCache& c = cache.layers[l];
    LayerTrace& lt = t.layers[l];
    if (flags.residual) lt.residual_out = to_float(c.h_out);
    if (flags.attention) {
      lt.attention.reserve(c.attn.size());
      for (const auto& a : c.attn) lt.attention.push_back(to_float(a));
    }
    if (flags.mlp_hidden) lt.mlp_hidden = to_float(c.act);
    if (flags.mlp_out) lt.mlp_out = to_float(c.mlp_out);
  }
  return t;
}

ActivationGradients run_backward(const TransformerWeights& w, const ForwardCache& cache,
                                 const LogitReadout* readout, std::span<const SiteSeed> seeds,
                                 std::size_t lowest_layer) {
  const ModelSpec& spec = w.spec;
  const std::size_t n = cache.tokens.size();
  const std::size_t d = spec.d_model;
  const std::size_t dh = spec.d_head();
  const std::size_t L = spec.n_layers;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  ActivationGradients grads;
  grads.mlp_hidden.assign(L, MatrixD(n, spec.d_mlp));
  grads.head_out.assign(L, MatrixD(n, d));

  for (const auto& s : seeds) {
    if (s.layer >= L) throw DomainError("backward: seed layer out of range");
    const std::size_t cols = s.site == Site::mlp_hidden ? spec.d_mlp : d;
    if (s.gradient.rows() != n || s.gradient.cols() != cols) {
      throw DomainError("backward: seed gradient shape does not match its site");
    }
  }

  std::size_t top = 0;  // one past the highest layer with nonzero upstream gradient
  MatrixD dh_out(n, d);
  if (readout) {
    MatrixD dlogits(n, spec.vocab_size);
    for (const auto& t : readout->terms) {
      if (t.position >= n || t.token >= spec.vocab_size) throw DomainError("backward: readout term out of range");
      dlogits(t.position, t.token) += t.coefficient;
    }
    MatrixD dxf(n, d);
    matmul_transposed_acc(dlogits, w.unembedding, dxf);
    rmsnorm_backward(cache.layers.empty() ? cache.embedding : cache.layers.back().h_out, w.final_norm,
                     cache.inv_rf, dxf, dh_out);
    top = L;
  }
  for (const auto& s : seeds) top = std::max(top, s.layer + 1);

  for (std::size_t l = top; l-- > lowest_layer;) {
    const LayerWeights& lw = w.layers[l];
    const LayerCache& c = cache.layers[l];

    // MLP block: h_out = h_mid + gelu(rmsnorm(h_mid) W_in) W_out
    MatrixD& dact = grads.mlp_hidden[l];
    matmul_transposed_acc(dh_out, lw.w_out, dact);
    for (const auto& s : seeds) {
      if (s.site == Site::mlp_hidden && s.layer == l) {
        for (std::size_t i = 0; i < dact.size(); ++i) dact.flat()[i] += s.gradient.flat()[i];
      }
    }
    MatrixD dpre(n, spec.d_mlp);
    for (std::size_t i = 0; i < dpre.size(); ++i) {
      dpre.flat()[i] = dact.flat()[i] * gelu_derivative(c.pre.flat()[i]);
    }
    MatrixD dx2(n, d);
    matmul_transposed_acc(dpre, lw.w_in, dx2);
    MatrixD dh_mid = dh_out;
    rmsnorm_backward(c.h_mid, lw.mlp_norm, c.inv_r2, dx2, dh_mid);

    // Attention block: h_mid = h_in + z W_O
    MatrixD& dz = grads.head_out[l];
    matmul_transposed_acc(dh_mid, lw.w_o, dz);
    for (const auto& s : seeds) {
      if (s.site == Site::head_out && s.layer == l) {
        for (std::size_t i = 0; i < dz.size(); ++i) dz.flat()[i] += s.gradient.flat()[i];
      }
    }

    MatrixD dq(n, d), dk(n, d), dv(n, d);
    std::vector<double> da(n);
    for (std::size_t hd = 0; hd < spec.n_heads; ++hd) {
      const std::size_t c0 = hd * dh;
      const MatrixD& a = c.attn[hd];
      for (std::size_t qi = 0; qi < n; ++qi) {
        double weighted = 0.0;
        for (std::size_t ki = 0; ki <= qi; ++ki) {
          double s = 0.0;
          for (std::size_t j = 0; j < dh; ++j) s += dz(qi, c0 + j) * c.v(ki, c0 + j);
          da[ki] = s;
          weighted += a(qi, ki) * s;
          for (std::size_t j = 0; j < dh; ++j) dv(ki, c0 + j) += a(qi, ki) * dz(qi, c0 + j);
        }
        for (std::size_t ki = 0; ki <= qi; ++ki) {
          const double ds = a(qi, ki) * (da[ki] - weighted) * inv_sqrt_dh;
          if (ds == 0.0) continue;
          for (std::size_t j = 0; j < dh; ++j) {
            dq(qi, c0 + j) += ds * c.k(ki, c0 + j);
            dk(ki, c0 + j) += ds * c.q(qi, c0 + j);
          }
        }
      }
    }
    MatrixD dx1(n, d);
    matmul_transposed_acc(dq, lw.w_q, dx1);
    matmul_transposed_acc(dk, lw.w_k, dx1);
    matmul_transposed_acc(dv, lw.w_v, dx1);
    MatrixD dh_in = dh_mid;
    rmsnorm_backward(c.h_in, lw.attn_norm, c.inv_r1, dx1, dh_in);
    dh_out = std::move(dh_in);
  }
  return grads;
}

}  // namespace

ForwardResult forward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                      CaptureFlags capture, const Hooks* hooks) {
  ForwardCache cache;
  run_forward(weights, tokens, hooks, cache);
  ForwardResult result;
  if (capture.any()) result.trace = build_trace(cache, capture);
  result.logits = std::move(cache.logits);
  return result;
}

Classification classify_logits(const ModelSpec& spec, const MatrixD& logits) {
  if (logits.rows() == 0 || logits.cols() != spec.vocab_size) {
    throw DomainError("classify: logits shape does not match model");
  }
  const std::size_t last = logits.rows() - 1;
  Classification c;
  c.margin = logits(last, spec.vuln_token_id) - logits(last, spec.safe_token_id);
  c.label = c.margin > 0.0 ? Label::vulnerable : Label::safe;
  return c;
}

Classification classify(const TransformerWeights& weights, std::span<const TokenId> tokens,
                        const Hooks* hooks) {
  return classify_logits(weights.spec, forward(weights, tokens, {}, hooks).logits);
}

double LogitReadout::evaluate(const MatrixD& logits) const {
  double total = 0.0;
  for (const auto& t : terms) total += t.coefficient * logits(t.position, t.token);
  return total;
}

LogitReadout LogitReadout::margin(const ModelSpec& spec, std::size_t seq_len) {
  if (seq_len == 0) throw DomainError("readout: empty sequence");
  return {{{seq_len - 1, spec.vuln_token_id, 1.0}, {seq_len - 1, spec.safe_token_id, -1.0}}};
}

LogitReadout LogitReadout::row_sum(const ModelSpec& spec, std::size_t position) {
  LogitReadout r;
  for (std::size_t v = 0; v < spec.vocab_size; ++v) r.terms.push_back({position, static_cast<TokenId>(v), 1.0});
  return r;
}

Tape::Tape(const TransformerWeights& weights, std::span<const TokenId> tokens)
    : weights_(&weights), cache_(std::make_unique<detail::ForwardCache>()) {
  run_forward(weights, tokens, nullptr, *cache_);
}

Tape::~Tape() = default;
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;

const MatrixD& Tape::logits() const { return cache_->logits; }
const MatrixD& Tape::mlp_hidden(std::size_t layer) const { return cache_->layers.at(layer).act; }
const MatrixD& Tape::head_out(std::size_t layer) const { return cache_->layers.at(layer).z; }
std::size_t Tape::seq_len() const noexcept { return cache_->tokens.size(); }
const ModelSpec& Tape::spec() const noexcept { return weights_->spec; }

ActivationGradients Tape::backward(const LogitReadout& readout) const {
  return run_backward(*weights_, *cache_, &readout, {}, 0);
}

ActivationGradients Tape::backward(std::span<const SiteSeed> seeds) const {
  return run_backward(*weights_, *cache_, nullptr, seeds, 0);
}

BackwardResult backward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                        const LogitReadout& readout) {
  Tape tape(weights, tokens);
  BackwardResult r;
  r.value = readout.evaluate(tape.logits());
  r.gradients = tape.backward(readout);
  return r;
}

}  // namespace cprobe
