// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <string>

#include "binary_io.hpp"
#include "cprobe/error.hpp"
#include "cprobe/model.hpp"
#include "cprobe/rng.hpp"

namespace cprobe {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::format: return "format";
    case ErrorKind::corrupt: return "corrupt";
    case ErrorKind::validation: return "validation";
    case ErrorKind::parse: return "parse";
    case ErrorKind::domain: return "domain";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

const char* to_string(Label label) noexcept {
  return label == Label::vulnerable ? "vulnerable" : "safe";
}

// --- rng -------------------------------------------------------------------

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::uniform_index(std::uint64_t bound) {
  if (bound == 0) throw DomainError("Rng::uniform_index: bound must be positive");
  // Largest multiple of bound that fits; draws at or above it are rejected.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % bound;
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
  if (k > n) throw DomainError("sample_without_replacement: k > n");
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform_index(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

// --- spec / weights ----------------------------------------------------------

void ModelSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("model spec: " + msg); };
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_mlp < 1 || vocab_size < 1) {
    fail("all dimensions must be >= 1");
  }
  if (max_seq < 2) fail("max_seq must be >= 2");
  if (d_model % n_heads != 0) {
    fail("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
         std::to_string(n_heads) + ")");
  }
  if (bos_token_id >= vocab_size || vuln_token_id >= vocab_size || safe_token_id >= vocab_size) {
    fail("reserved token id outside vocabulary");
  }
  if (bos_token_id == vuln_token_id || bos_token_id == safe_token_id ||
      vuln_token_id == safe_token_id) {
    fail("bos/vuln/safe token ids must be distinct");
  }
}

TransformerWeights TransformerWeights::zeros(const ModelSpec& spec) {
  spec.validate();
  const std::size_t d = spec.d_model;
  TransformerWeights w;
  w.spec = spec;
  w.token_embedding = MatrixF(spec.vocab_size, d);
  w.position_embedding = MatrixF(spec.max_seq, d);
  w.layers.resize(spec.n_layers);
  for (auto& layer : w.layers) {
    layer.attn_norm.assign(d, 0.0f);
    layer.w_q = MatrixF(d, d);
    layer.w_k = MatrixF(d, d);
    layer.w_v = MatrixF(d, d);
    layer.w_o = MatrixF(d, d);
    layer.mlp_norm.assign(d, 0.0f);
    layer.w_in = MatrixF(d, spec.d_mlp);
    layer.w_out = MatrixF(spec.d_mlp, d);
  }
  w.final_norm.assign(d, 0.0f);
  w.unembedding = MatrixF(d, spec.vocab_size);
  return w;
}

TransformerWeights TransformerWeights::random(const ModelSpec& spec, std::uint64_t seed,
                                              double scale) {
  TransformerWeights w = zeros(spec);
  Rng rng(seed);
  auto noise = [&](std::span<float> values, double offset) {
    for (float& v : values) v = static_cast<float>(offset + scale * rng.normal());
  };
  noise(w.token_embedding.flat(), 0.0);
  noise(w.position_embedding.flat(), 0.0);
  for (auto& layer : w.layers) {
    noise(layer.attn_norm, 1.0);
    noise(layer.w_q.flat(), 0.0);
    noise(layer.w_k.flat(), 0.0);
    noise(layer.w_v.flat(), 0.0);
    noise(layer.w_o.flat(), 0.0);
    noise(layer.mlp_norm, 1.0);
    noise(layer.w_in.flat(), 0.0);
    noise(layer.w_out.flat(), 0.0);
  }
  noise(w.final_norm, 1.0);
  noise(w.unembedding.flat(), 0.0);
  return w;
}

namespace {

template <class Fn>
void for_each_tensor(const TransformerWeights& w, Fn&& fn) {
  fn("token_embedding", w.token_embedding.flat(), w.spec.vocab_size * w.spec.d_model);
  fn("position_embedding", w.position_embedding.flat(), w.spec.max_seq * w.spec.d_model);
  const std::size_t d = w.spec.d_model;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    fn(p + "attn_norm", std::span<const float>(layer.attn_norm), d);
    fn(p + "w_q", layer.w_q.flat(), d * d);
    fn(p + "w_k", layer.w_k.flat(), d * d);
    fn(p + "w_v", layer.w_v.flat(), d * d);
    fn(p + "w_o", layer.w_o.flat(), d * d);
    fn(p + "mlp_norm", std::span<const float>(layer.mlp_norm), d);
    fn(p + "w_in", layer.w_in.flat(), d * w.spec.d_mlp);
    fn(p + "w_out", layer.w_out.flat(), w.spec.d_mlp * d);
  }
  fn("final_norm", std::span<const float>(w.final_norm), d);
  fn("unembedding", w.unembedding.flat(), d * w.spec.vocab_size);
}

constexpr std::uint32_t kWeightsVersion = 1;

}  // namespace

void TransformerWeights::validate() const {
  spec.validate();
  if (layers.size() != spec.n_layers) throw ValidationError("weights: layer count mismatch");
  const std::size_t d = spec.d_model;
  auto check_shape = [](const MatrixF& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      throw ValidationError(std::string("weights: ") + name + " has shape " +
                            std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                            ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
  };
  check_shape(token_embedding, spec.vocab_size, d, "token_embedding");
  check_shape(position_embedding, spec.max_seq, d, "position_embedding");
  check_shape(unembedding, d, spec.vocab_size, "unembedding");
  if (final_norm.size() != d) throw ValidationError("weights: final_norm length mismatch");
  for (const auto& layer : layers) {
    check_shape(layer.w_q, d, d, "w_q");
    check_shape(layer.w_k, d, d, "w_k");
    check_shape(layer.w_v, d, d, "w_v");
    check_shape(layer.w_o, d, d, "w_o");
    check_shape(layer.w_in, d, spec.d_mlp, "w_in");
    check_shape(layer.w_out, spec.d_mlp, d, "w_out");
    if (layer.attn_norm.size() != d || layer.mlp_norm.size() != d) {
      throw ValidationError("weights: norm scale length mismatch");
    }
  }
  for_each_tensor(*this, [](const std::string& name, std::span<const float> values, std::size_t) {
    for (float v : values) {
      if (!std::isfinite(v)) throw ValidationError("weights: non-finite value in " + name);
    }
  });
}

void save_weights(const TransformerWeights& weights, const std::filesystem::path& path) {
  weights.validate();
  binary::Writer out;
  out.magic("CPB1");
  out.u32(kWeightsVersion);
  const ModelSpec& s = weights.spec;
  for (std::size_t v : {s.n_layers, s.n_heads, s.d_model, s.d_mlp, s.vocab_size, s.max_seq}) {
    out.u32(static_cast<std::uint32_t>(v));
  }
  out.u32(s.bos_token_id);
  out.u32(s.vuln_token_id);
  out.u32(s.safe_token_id);
  for_each_tensor(weights, [&](const std::string&, std::span<const float> values, std::size_t) {
    out.f32s(values);
  });
  binary::write_file(path.string(), out.bytes());
}

TransformerWeights load_weights(const std::filesystem::path& path) {
  const auto bytes = binary::read_file(path.string());
  binary::Reader in(bytes, path.string());
  if (!in.has_magic("CPB1")) throw FormatError(path.string() + ": missing CPB1 magic");
  in.skip(4);
  const std::uint32_t version = in.u32();
  if (version != kWeightsVersion) {
    throw FormatError(path.string() + ": unsupported weight format version " +
                      std::to_string(version));
  }
  ModelSpec spec;
  spec.n_layers = in.u32();
  spec.n_heads = in.u32();
  spec.d_model = in.u32();
  spec.d_mlp = in.u32();
  spec.vocab_size = in.u32();
  spec.max_seq = in.u32();
  spec.bos_token_id = in.u32();
  spec.vuln_token_id = in.u32();
  spec.safe_token_id = in.u32();
  spec.validate();

  // Size check before allocating so a hostile header cannot request gigabytes.
  const std::size_t d = spec.d_model;
  const std::size_t expected_floats =
      spec.vocab_size * d + spec.max_seq * d +
      spec.n_layers * (2 * d + 4 * d * d + 2 * d * spec.d_mlp) + d + d * spec.vocab_size;
  if (in.remaining() != 4 * expected_floats) {
    throw CorruptFileError(path.string() + ": payload is " + std::to_string(in.remaining()) +
                           " bytes, header implies " + std::to_string(4 * expected_floats));
  }

  TransformerWeights w = TransformerWeights::zeros(spec);
  in.f32s(w.token_embedding.flat());
  in.f32s(w.position_embedding.flat());
  for (auto& layer : w.layers) {
    in.f32s(layer.attn_norm);
    in.f32s(layer.w_q.flat());
    in.f32s(layer.w_k.flat());
    in.f32s(layer.w_v.flat());
    in.f32s(layer.w_o.flat());
    in.f32s(layer.mlp_norm);
    in.f32s(layer.w_in.flat());
    in.f32s(layer.w_out.flat());
  }
  in.f32s(w.final_norm);
  in.f32s(w.unembedding.flat());
  w.validate();
  return w;
}

// --- file helpers ------------------------------------------------------------

namespace binary {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace binary

}  // namespace cprobe
