// SPDX-License-Identifier: Apache-2.0
//
// Hook-instrumented decoder-only transformer.
//
// Architecture: token + learned absolute position embeddings, then per layer
//   x  = rmsnorm(h) * attn_norm
//   h += concat_h(softmax(causal(Q_h K_h^T / sqrt(d_head))) V_h) W_O
//   x  = rmsnorm(h) * mlp_norm
//   h += gelu_tanh(x W_in) W_out
// and finally logits = (rmsnorm(h) * final_norm) W_U. No biases.
//
// Weights are stored as 32-bit floats; every activation is computed and
// accumulated in double. Traces hold float copies of the activations.

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cprobe/tensor.hpp"

namespace cprobe {

using TokenId = std::uint32_t;

inline constexpr double kRmsNormEps = 1e-6;

enum class Label { safe, vulnerable };

const char* to_string(Label label) noexcept;

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;
  friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

struct NeuronId {
  std::size_t layer = 0;
  std::size_t index = 0;
  friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

struct ModelSpec {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_model = 0;
  std::size_t d_mlp = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq = 0;
  TokenId bos_token_id = 0;
  TokenId vuln_token_id = 0;
  TokenId safe_token_id = 0;

  std::size_t d_head() const noexcept { return n_heads == 0 ? 0 : d_model / n_heads; }

  /// Throws ValidationError when any documented invariant fails.
  void validate() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct LayerWeights {
  std::vector<float> attn_norm;  // [d_model]
  MatrixF w_q;                   // [d_model x d_model], head h owns columns [h*d_head, (h+1)*d_head)
  MatrixF w_k;
  MatrixF w_v;
  MatrixF w_o;                   // rows partitioned by head the same way
  std::vector<float> mlp_norm;   // [d_model]
  MatrixF w_in;                  // [d_model x d_mlp]
  MatrixF w_out;                 // [d_mlp x d_model]

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct TransformerWeights {
  ModelSpec spec;
  MatrixF token_embedding;     // [vocab_size x d_model]
  MatrixF position_embedding;  // [max_seq x d_model]
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;  // [d_model]
  MatrixF unembedding;            // [d_model x vocab_size]

  /// Every tensor zero-filled, norm scales included.
  static TransformerWeights zeros(const ModelSpec& spec);

  /// Gaussian entries with standard deviation `scale`; norm scales 1 + noise.
  static TransformerWeights random(const ModelSpec& spec, std::uint64_t seed, double scale);

  /// Shapes consistent with spec and every entry finite.
  void validate() const;

  friend bool operator==(const TransformerWeights&, const TransformerWeights&) = default;
};

TransformerWeights load_weights(const std::filesystem::path& path);
void save_weights(const TransformerWeights& weights, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Capture

struct CaptureFlags {
  bool residual = false;    // embedding output and residual_out per layer
  bool attention = false;   // attention probabilities per head
  bool mlp_hidden = false;  // GELU post-activations
  bool mlp_out = false;     // MLP output projection

  static CaptureFlags all() { return {true, true, true, true}; }
  bool any() const noexcept { return residual || attention || mlp_hidden || mlp_out; }
  std::uint32_t bits() const noexcept;
  static CaptureFlags from_bits(std::uint32_t bits);

  friend bool operator==(const CaptureFlags&, const CaptureFlags&) = default;
};

struct LayerTrace {
  MatrixF residual_out;            // [seq x d_model]
  std::vector<MatrixF> attention;  // n_heads x [seq x seq], row = query
  MatrixF mlp_hidden;              // [seq x d_mlp]
  MatrixF mlp_out;                 // [seq x d_model]

  friend bool operator==(const LayerTrace&, const LayerTrace&) = default;
};

struct ActivationTrace {
  std::string sample_id;
  std::vector<TokenId> tokens;
  CaptureFlags flags;
  MatrixF embedding;  // [seq x d_model], present with flags.residual
  std::vector<LayerTrace> layers;

  std::size_t seq_len() const noexcept { return tokens.size(); }

  friend bool operator==(const ActivationTrace&, const ActivationTrace&) = default;
};

// ---------------------------------------------------------------------------
// Hooks. The editable sites are the residual stream at a layer's output, the
// MLP hidden post-activation, and each head's attention output before W_O.

enum class ResidualEditKind {
  replace,        // h_out := vector
  add,            // h_out += vector
  replace_block,  // h_out := h_in + vector (swaps the layer's whole contribution)
};

/// Applied at every non-BOS position of the layer output.
struct ResidualEdit {
  std::size_t layer = 0;
  ResidualEditKind kind = ResidualEditKind::add;
  std::vector<double> vector;  // [d_model]
};

/// value := value * scale + offset, at one position or all of them.
struct NeuronEdit {
  std::size_t layer = 0;
  std::size_t neuron = 0;
  std::optional<std::size_t> position;
  double scale = 0.0;
  double offset = 0.0;
};

/// Same rule on a head's output vector (or one component of it).
struct HeadEdit {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::optional<std::size_t> position;
  std::optional<std::size_t> component;
  double scale = 0.0;
  double offset = 0.0;
};

struct Hooks {
  std::vector<ResidualEdit> residual;
  std::vector<NeuronEdit> neurons;
  std::vector<HeadEdit> heads;

  bool empty() const noexcept { return residual.empty() && neurons.empty() && heads.empty(); }
  /// Throws DomainError for edits naming a site the model does not have.
  void validate(const ModelSpec& spec, std::size_t seq_len) const;
};

// ---------------------------------------------------------------------------
// Forward / classify

struct ForwardResult {
  MatrixD logits;  // [seq x vocab_size]
  std::optional<ActivationTrace> trace;
};

/// Throws DomainError on an empty or over-long sequence, a first token other
/// than BOS, an out-of-vocabulary id, or an invalid hook.
ForwardResult forward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                      CaptureFlags capture = {}, const Hooks* hooks = nullptr);

struct Classification {
  Label label = Label::safe;
  double margin = 0.0;  // logit[last][vuln] - logit[last][safe]
};

/// Ties resolve to safe.
Classification classify_logits(const ModelSpec& spec, const MatrixD& logits);
Classification classify(const TransformerWeights& weights, std::span<const TokenId> tokens,
                        const Hooks* hooks = nullptr);

// ---------------------------------------------------------------------------
// Reverse pass

/// A linear scalar readout sum_t coefficient_t * logits[position_t][token_t].
struct LogitReadout {
  struct Term {
    std::size_t position = 0;
    TokenId token = 0;
    double coefficient = 0.0;
  };
  std::vector<Term> terms;

  double evaluate(const MatrixD& logits) const;

  /// The classification margin at the last position.
  static LogitReadout margin(const ModelSpec& spec, std::size_t seq_len);
  /// Sum of every logit at one position.
  static LogitReadout row_sum(const ModelSpec& spec, std::size_t position);
};

enum class Site { mlp_hidden, head_out };

const char* to_string(Site site) noexcept;

/// Gradient of some scalar with respect to every hookable activation.
struct ActivationGradients {
  std::vector<MatrixD> mlp_hidden;  // per layer [seq x d_mlp]
  std::vector<MatrixD> head_out;    // per layer [seq x d_model], head-partitioned columns
};

/// An upstream gradient injected at one site of one layer.
struct SiteSeed {
  Site site = Site::mlp_hidden;
  std::size_t layer = 0;
  MatrixD gradient;  // same shape as the site
};

namespace detail {
struct ForwardCache;
}

/// A recorded (hook-free) forward pass that can be differentiated repeatedly.
class Tape {
 public:
  Tape(const TransformerWeights& weights, std::span<const TokenId> tokens);
  ~Tape();
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;

  const MatrixD& logits() const;
  const MatrixD& mlp_hidden(std::size_t layer) const;
  const MatrixD& head_out(std::size_t layer) const;
  std::size_t seq_len() const noexcept;
  const ModelSpec& spec() const noexcept;

  ActivationGradients backward(const LogitReadout& readout) const;
  ActivationGradients backward(std::span<const SiteSeed> seeds) const;

 private:
  const TransformerWeights* weights_;
  std::unique_ptr<detail::ForwardCache> cache_;
};

struct BackwardResult {
  double value = 0.0;
  ActivationGradients gradients;
};

BackwardResult backward(const TransformerWeights& weights, std::span<const TokenId> tokens,
                        const LogitReadout& readout);

double gelu(double x) noexcept;
double gelu_derivative(double x) noexcept;

}  // namespace cprobe
