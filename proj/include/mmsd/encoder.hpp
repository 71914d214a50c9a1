#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "mmsd/data.hpp"
#include "mmsd/incongruity.hpp"
#include "mmsd/tensor.hpp"
#include "mmsd/vocab.hpp"

namespace mmsd {

enum class FeatureProvider { Toy, File };

inline FeatureProvider provider_from_name(const std::string& name) {
  if (name == "toy") return FeatureProvider::Toy;
  if (name == "file") return FeatureProvider::File;
  throw ConfigError("unknown feature provider: " + name);
}

struct EncoderConfig {
  std::size_t d = 64;
  std::size_t text_len = 64;     // T
  std::size_t caption_len = 32;  // U
  std::size_t layers = 1;
  FeatureProvider provider = FeatureProvider::Toy;
};

// Trainable toy encoder: embedding table plus a stack of self-attention
// blocks (the incongruity block applied with the sequence as query, key and
// value).
struct EncoderParams {
  Tensor embedding;  // V x d
  std::vector<IncongruityBlockParams> blocks;

  static EncoderParams init(std::size_t vocab_size, std::size_t d, std::size_t heads, std::size_t d_mlp,
                            std::size_t layers, std::mt19937_64& rng) {
    if (vocab_size < Vocab::reserved + 1) throw ConfigError("vocabulary too small to encode anything");
    EncoderParams p;
    p.embedding = glorot({vocab_size, d}, rng);
    for (std::size_t i = 0; i < layers; ++i) p.blocks.push_back(IncongruityBlockParams::init(d, heads, d_mlp, rng));
    return p;
  }
};

namespace detail {

template <class Fn>
void visit_encoder(const std::string& prefix, const EncoderParams& e, Fn&& fn) {
  fn(prefix + ".embedding", e.embedding);
  for (std::size_t i = 0; i < e.blocks.size(); ++i)
    visit_block(prefix + ".block" + std::to_string(i), e.blocks[i], fn);
}

}  // namespace detail

// Fixed interleaved sine/cosine position table, len x d.
inline Tensor positional_encoding(std::size_t len, std::size_t d) {
  Tensor pe = Tensor::zeros({len, d});
  for (std::size_t pos = 0; pos < len; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      pe.mutable_values()[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

// Token ids -> T x d sequence features. Row 0 is always the [CLS] summary;
// [PAD] key positions are excluded from every attention softmax.
inline Tensor encode_sequence(Tape& tape, const TokenSeq& seq, const EncoderParams& params,
                              double dropout_rate = 0.0, bool training = false, std::mt19937_64* rng = nullptr) {
  Tensor x = add(tape, embed(tape, params.embedding, seq.ids),
                 positional_encoding(seq.ids.size(), params.embedding.extent(1)));
  for (const IncongruityBlockParams& block : params.blocks)
    x = incongruity_matrix(tape, x, x, block, dropout_rate, training, rng, &seq.mask);
  return x;
}

// File provider: a precomputed sequence feature matrix, frozen (no gradient).
inline Tensor load_sequence_features(const std::filesystem::path& path, std::size_t expected_len,
                                     std::size_t expected_d) {
  Tensor t = read_tensor_file(path);
  if (t.rank() != 2 || t.extent(0) != expected_len || t.extent(1) != expected_d)
    throw DataError("sequence feature file " + path.string() + " has shape " + shape_str(t.shape()) +
                    ", expected " + shape_str({expected_len, expected_d}));
  return t;
}

}  // namespace mmsd
