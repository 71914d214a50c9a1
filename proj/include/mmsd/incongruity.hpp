#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mmsd/tensor.hpp"

namespace mmsd {

// Per-head projection maps plus the output map; each head owns its own
// d x d_k matrices.
struct MhaParams {
  std::vector<Tensor> w_query;  // h tensors, each d x d_k
  std::vector<Tensor> w_key;
  std::vector<Tensor> w_value;
  Tensor w_out;  // d x d

  std::size_t heads() const { return w_query.size(); }
  std::size_t head_dim() const { return w_query.front().extent(1); }

  static MhaParams init(std::size_t d, std::size_t h, std::mt19937_64& rng) {
    if (h < 1 || d % h != 0) throw ConfigError("model width " + std::to_string(d) + " not divisible by " +
                                               std::to_string(h) + " heads");
    MhaParams p;
    const std::size_t dk = d / h;
    for (std::size_t i = 0; i < h; ++i) {
      p.w_query.push_back(glorot({d, dk}, rng));
      p.w_key.push_back(glorot({d, dk}, rng));
      p.w_value.push_back(glorot({d, dk}, rng));
    }
    p.w_out = glorot({d, d}, rng);
    return p;
  }
};

struct MlpParams {
  Tensor w1;  // d x d_mlp
  Tensor b1;  // [d_mlp]
  Tensor w2;  // d_mlp x d
  Tensor b2;  // [d]
  Activation act = Activation::Gelu;

  static MlpParams init(std::size_t d, std::size_t d_mlp, std::mt19937_64& rng,
                        Activation act = Activation::Gelu) {
    if (d_mlp < d) throw ConfigError("mlp hidden width must be >= model width");
    return MlpParams{glorot({d, d_mlp}, rng), Tensor::zeros({d_mlp}), glorot({d_mlp, d}, rng), Tensor::zeros({d}),
                     act};
  }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams init(std::size_t d) { return {Tensor::full({d}, 1.0), Tensor::zeros({d})}; }
};

struct IncongruityBlockParams {
  MhaParams mha;
  MlpParams mlp;
  LayerNormParams norm;

  static IncongruityBlockParams init(std::size_t d, std::size_t h, std::size_t d_mlp, std::mt19937_64& rng) {
    return {MhaParams::init(d, h, rng), MlpParams::init(d, d_mlp, rng), LayerNormParams::init(d)};
  }
};

struct CoAttnParams {
  Tensor w;  // d x d bilinear map

  static CoAttnParams init(std::size_t d, std::mt19937_64& rng) { return {glorot({d, d}, rng)}; }
};

namespace detail {

// Stable name/tensor enumeration of one block, shared by the optimizer,
// checkpoints, and gradient checks.
template <class Fn>
void visit_block(const std::string& prefix, const IncongruityBlockParams& b, Fn&& fn) {
  for (std::size_t i = 0; i < b.mha.heads(); ++i) {
    fn(prefix + ".mha.query" + std::to_string(i), b.mha.w_query[i]);
    fn(prefix + ".mha.key" + std::to_string(i), b.mha.w_key[i]);
    fn(prefix + ".mha.value" + std::to_string(i), b.mha.w_value[i]);
  }
  fn(prefix + ".mha.out", b.mha.w_out);
  fn(prefix + ".mlp.w1", b.mlp.w1);
  fn(prefix + ".mlp.b1", b.mlp.b1);
  fn(prefix + ".mlp.w2", b.mlp.w2);
  fn(prefix + ".mlp.b2", b.mlp.b2);
  fn(prefix + ".norm.gain", b.norm.gain);
  fn(prefix + ".norm.bias", b.norm.bias);
}

}  // namespace detail

// Multi-head attention with the text rows as queries and the visual region
// rows as keys and values. Per head: softmax(Q K^T / sqrt(d_k)) V, heads
// concatenated and mixed by w_out. An optional key mask removes padded key
// rows from every softmax; attention_out, when given, collects the per-head
// weight matrices (T x r).
inline Tensor cross_modal_mha(Tape& tape, const Tensor& queries, const Tensor& keys_values, const MhaParams& params,
                              const std::vector<std::uint8_t>* key_mask = nullptr,
                              std::vector<Tensor>* attention_out = nullptr) {
  if (queries.rank() != 2 || keys_values.rank() != 2 || queries.extent(1) != keys_values.extent(1))
    throw ShapeError("cross_modal_mha width mismatch: " + shape_str(queries.shape()) + " vs " +
                     shape_str(keys_values.shape()));
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(params.head_dim()));
  std::vector<Tensor> heads;
  heads.reserve(params.heads());
  for (std::size_t i = 0; i < params.heads(); ++i) {
    Tensor q = matmul(tape, queries, params.w_query[i]);
    Tensor k = matmul(tape, keys_values, params.w_key[i]);
    Tensor v = matmul(tape, keys_values, params.w_value[i]);
    Tensor scores = scale(tape, matmul(tape, q, transpose(tape, k)), inv_scale);
    Tensor weights = key_mask ? softmax_rows_masked(tape, scores, *key_mask) : softmax_rows(tape, scores);
    if (attention_out) attention_out->push_back(weights);
    heads.push_back(matmul(tape, weights, v));
  }
  Tensor merged = heads.size() == 1 ? heads[0] : concat(tape, heads, 1);
  return matmul(tape, merged, params.w_out);
}

inline Tensor apply_mlp(Tape& tape, const Tensor& x, const MlpParams& p) {
  Tensor hidden = elementwise(tape, p.act, add_row_vector(tape, matmul(tape, x, p.w1), p.b1));
  return add_row_vector(tape, matmul(tape, hidden, p.w2), p.b2);
}

// Attention + MLP + residual + layer norm over the feature axis, returning
// the full sequence. Dropout is applied to the attention output and the MLP
// output while training.
inline Tensor incongruity_matrix(Tape& tape, const Tensor& queries, const Tensor& keys_values,
                                 const IncongruityBlockParams& params, double dropout_rate = 0.0,
                                 bool training = false, std::mt19937_64* rng = nullptr,
                                 const std::vector<std::uint8_t>* key_mask = nullptr,
                                 std::vector<Tensor>* attention_out = nullptr) {
  Tensor attended = cross_modal_mha(tape, queries, keys_values, params.mha, key_mask, attention_out);
  if (training && dropout_rate > 0.0) {
    if (!rng) throw ContractError("dropout requires an RNG while training");
    attended = dropout(tape, attended, dropout_rate, *rng);
  }
  Tensor transformed = apply_mlp(tape, attended, params.mlp);
  if (training && dropout_rate > 0.0) transformed = dropout(tape, transformed, dropout_rate, *rng);
  return layer_norm(tape, add(tape, queries, transformed), params.norm.gain, params.norm.bias);
}

// Disparity vector: the [CLS] row (row 0) of the normalized sequence.
inline Tensor incongruity_block(Tape& tape, const Tensor& queries, const Tensor& keys_values,
                                const IncongruityBlockParams& params, double dropout_rate = 0.0,
                                bool training = false, std::mt19937_64* rng = nullptr) {
  Tensor h = incongruity_matrix(tape, queries, keys_values, params, dropout_rate, training, rng);
  return reshape(tape, slice_rows(tape, h, 0, 1), {h.extent(1)});
}

// Bilinear co-attention between text (T x d) and caption (U x d):
// affinity A = tanh(S W C^T), column-wise max v over text positions, and the
// caption summary v C as the disparity vector.
inline Tensor coattention(Tape& tape, const Tensor& text, const Tensor& caption, const CoAttnParams& params,
                          Tensor* affinity_out = nullptr) {
  if (text.rank() != 2 || caption.rank() != 2 || text.extent(1) != caption.extent(1))
    throw ShapeError("coattention width mismatch: " + shape_str(text.shape()) + " vs " +
                     shape_str(caption.shape()));
  Tensor affinity = tanh_op(tape, matmul(tape, matmul(tape, text, params.w), transpose(tape, caption)));
  if (affinity_out) *affinity_out = affinity;
  Tensor v = reduce_max_cols(tape, affinity);
  Tensor summary = matmul(tape, reshape(tape, v, {1, caption.extent(0)}), caption);
  return reshape(tape, summary, {caption.extent(1)});
}

}  // namespace mmsd
