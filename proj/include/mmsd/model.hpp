#pragma once

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmsd/data.hpp"
#include "mmsd/encoder.hpp"
#include "mmsd/incongruity.hpp"
#include "mmsd/tensor.hpp"
#include "mmsd/visual.hpp"
#include "mmsd/vocab.hpp"

namespace mmsd {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t heads = 8;
  std::size_t text_len = 64;     // T
  std::size_t caption_len = 32;  // U
  std::size_t regions = 49;      // r, a perfect square
  std::size_t region_width = 2048;
  std::size_t mlp_width = 0;  // 0 selects 2*d
  std::size_t reduction = 4;
  std::size_t encoder_layers = 1;
  std::size_t vocab_size = 0;  // filled in once the vocabulary exists
  double dropout = 0.5;
  double l2 = 1e-5;
  bool use_visual_attention = true;
  bool use_text_image = true;    // text/image incongruity branch
  bool use_text_caption = true;  // text/caption incongruity branch
  bool separate_caption_encoder = false;
  FeatureProvider provider = FeatureProvider::Toy;

  std::size_t mlp() const { return mlp_width ? mlp_width : 2 * d; }
  std::size_t fusion_dim() const { return d * ((use_text_image ? 1u : 0u) + (use_text_caption ? 1u : 0u)); }

  EncoderConfig encoder_config() const { return {d, text_len, caption_len, encoder_layers, provider}; }

  void validate() const {
    if (!use_text_image && !use_text_caption)
      throw ConfigError("at least one incongruity branch must stay enabled");
    if (heads < 1 || d % heads != 0)
      throw ConfigError("model width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    if (text_len < 2 || caption_len < 2) throw ConfigError("sequence lengths must be >= 2");
    if (mlp() < d) throw ConfigError("mlp width must be >= model width");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (use_text_image) {
      grid_side(regions);
      if (use_visual_attention && (reduction < 1 || d % reduction != 0))
        throw ConfigError("model width " + std::to_string(d) + " not divisible by reduction " +
                          std::to_string(reduction));
    }
  }
};

// All trainable state of one architecture variant. Only the tensors the
// variant actually uses are allocated.
struct ModelParams {
  std::optional<EncoderParams> encoder;          // toy provider
  std::optional<EncoderParams> caption_encoder;  // when tables are not shared
  Tensor region_projection;                      // raw region width x d
  std::optional<CoordAttnParams> coord_attn;
  std::optional<IncongruityBlockParams> text_image;
  std::optional<CoAttnParams> text_caption;
  Tensor classifier_w;  // 2 x fusion_dim
  Tensor classifier_b;  // [2]
};

// Stable name -> tensor listing; the single enumeration order used by the
// optimizer, the gradient checker, and checkpoints.
inline std::vector<std::pair<std::string, Tensor>> named_tensors(const ModelParams& p) {
  std::vector<std::pair<std::string, Tensor>> out;
  auto fn = [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); };
  if (p.encoder) detail::visit_encoder("encoder", *p.encoder, fn);
  if (p.caption_encoder) detail::visit_encoder("caption_encoder", *p.caption_encoder, fn);
  if (p.region_projection.defined()) fn("region_projection", p.region_projection);
  if (p.coord_attn) {
    fn("coord.squeeze", p.coord_attn->squeeze);
    fn("coord.expand_h", p.coord_attn->expand_h);
    fn("coord.expand_w", p.coord_attn->expand_w);
  }
  if (p.text_image) detail::visit_block("text_image", *p.text_image, fn);
  if (p.text_caption) fn("text_caption.bilinear", p.text_caption->w);
  fn("classifier.w", p.classifier_w);
  fn("classifier.b", p.classifier_b);
  return out;
}

inline void zero_all_grads(const ModelParams& p) {
  for (auto& [name, t] : named_tensors(p)) t.zero_grad();
}

namespace detail {

inline void deep_copy(Tensor& t) {
  if (t.defined()) t = t.clone();
}

inline void deep_copy(IncongruityBlockParams& b) {
  for (auto& w : b.mha.w_query) deep_copy(w);
  for (auto& w : b.mha.w_key) deep_copy(w);
  for (auto& w : b.mha.w_value) deep_copy(w);
  deep_copy(b.mha.w_out);
  deep_copy(b.mlp.w1);
  deep_copy(b.mlp.b1);
  deep_copy(b.mlp.w2);
  deep_copy(b.mlp.b2);
  deep_copy(b.norm.gain);
  deep_copy(b.norm.bias);
}

inline void deep_copy(EncoderParams& e) {
  deep_copy(e.embedding);
  for (auto& b : e.blocks) deep_copy(b);
}

}  // namespace detail

inline ModelParams clone_params(const ModelParams& p) {
  ModelParams c = p;  // copies structure and handles; now detach the storage
  if (c.encoder) detail::deep_copy(*c.encoder);
  if (c.caption_encoder) detail::deep_copy(*c.caption_encoder);
  detail::deep_copy(c.region_projection);
  if (c.coord_attn) {
    detail::deep_copy(c.coord_attn->squeeze);
    detail::deep_copy(c.coord_attn->expand_h);
    detail::deep_copy(c.coord_attn->expand_w);
  }
  if (c.text_image) detail::deep_copy(*c.text_image);
  if (c.text_caption) detail::deep_copy(c.text_caption->w);
  detail::deep_copy(c.classifier_w);
  detail::deep_copy(c.classifier_b);
  return c;
}

// Allocates exactly the tensors the configured variant needs, Glorot-uniform
// matrices and zero biases, deterministic under the seed.
inline ModelParams build_variant(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams p;
  if (cfg.provider == FeatureProvider::Toy) {
    p.encoder = EncoderParams::init(cfg.vocab_size, cfg.d, cfg.heads, cfg.mlp(), cfg.encoder_layers, rng);
    if (cfg.separate_caption_encoder && cfg.use_text_caption)
      p.caption_encoder = EncoderParams::init(cfg.vocab_size, cfg.d, cfg.heads, cfg.mlp(), cfg.encoder_layers, rng);
  }
  if (cfg.use_text_image) {
    p.region_projection = glorot({cfg.region_width, cfg.d}, rng);
    if (cfg.use_visual_attention) p.coord_attn = CoordAttnParams::init(cfg.d, cfg.reduction, rng);
    p.text_image = IncongruityBlockParams::init(cfg.d, cfg.heads, cfg.mlp(), rng);
  }
  if (cfg.use_text_caption) p.text_caption = CoAttnParams::init(cfg.d, rng);
  p.classifier_w = glorot({2, cfg.fusion_dim()}, rng);
  p.classifier_b = Tensor::zeros({2});
  for (auto& [name, t] : named_tensors(p)) t.set_requires_grad(true);
  return p;
}

// One dataset record with tokenized sequences and loaded feature tensors,
// ready for the forward pass.
struct PreparedSample {
  std::string id;
  int label = -1;
  TokenSeq text;
  TokenSeq caption;
  Tensor region_features;   // frozen r x region_width
  Tensor text_features;     // file provider only, frozen T x d
  Tensor caption_features;  // file provider only, frozen U x d
};

inline std::vector<PreparedSample> prepare_samples(const std::vector<Sample>& samples, const Vocab& vocab,
                                                   const ModelConfig& cfg) {
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) {
    PreparedSample p;
    p.id = s.id;
    p.label = s.label;
    if (cfg.provider == FeatureProvider::Toy) {
      p.text = tokenize(s.text, vocab, cfg.text_len);
      if (cfg.use_text_caption) p.caption = tokenize(s.caption, vocab, cfg.caption_len);
    } else {
      if (s.text_features_path.empty()) throw DataError("sample " + s.id + " is missing text features");
      p.text_features = load_sequence_features(s.text_features_path, cfg.text_len, cfg.d);
      if (cfg.use_text_caption) {
        if (s.caption_features_path.empty()) throw DataError("sample " + s.id + " is missing caption features");
        p.caption_features = load_sequence_features(s.caption_features_path, cfg.caption_len, cfg.d);
      }
    }
    if (cfg.use_text_image) {
      if (s.region_features_path.empty()) throw DataError("sample " + s.id + " is missing region features");
      Tensor r = read_tensor_file(s.region_features_path);
      if (r.rank() != 2 || r.extent(0) != cfg.regions || r.extent(1) != cfg.region_width)
        throw DataError("region feature file " + s.region_features_path + " has shape " + shape_str(r.shape()) +
                        ", expected " + shape_str({cfg.regions, cfg.region_width}));
      p.region_features = r;
    }
    out.push_back(std::move(p));
  }
  return out;
}

struct Prediction {
  Tensor probabilities;  // 1 x 2, sums to one
  int label = 0;         // argmax, ties resolve to 0
  Tensor fused;          // fusion vector, fusion_dim entries
};

// Full forward pass: encode text (and caption), attend over projected region
// features, extract the enabled disparity vectors, fuse, classify.
inline Prediction forward(Tape& tape, const PreparedSample& sample, const ModelParams& params,
                          const ModelConfig& cfg, bool training = false, std::mt19937_64* rng = nullptr) {
  const double rate = training ? cfg.dropout : 0.0;

  Tensor text_seq;
  if (cfg.provider == FeatureProvider::Toy) {
    text_seq = encode_sequence(tape, sample.text, *params.encoder, rate, training, rng);
  } else {
    if (!sample.text_features.defined()) throw DataError("sample " + sample.id + " is missing text features");
    text_seq = sample.text_features;
  }

  std::vector<Tensor> descriptors;
  if (cfg.use_text_image) {
    if (!sample.region_features.defined())
      throw DataError("sample " + sample.id + " is missing region features");
    Tensor projected = project_regions(tape, sample.region_features, params.region_projection);
    Tensor grid = regions_to_grid(tape, projected);
    Tensor attended = cfg.use_visual_attention ? coordinate_attention(tape, grid, *params.coord_attn)
                                               : bypass_attention(tape, grid);
    Tensor visual = grid_to_regions(tape, attended);
    descriptors.push_back(
        incongruity_block(tape, text_seq, visual, *params.text_image, rate, training, rng));
  }
  if (cfg.use_text_caption) {
    Tensor caption_seq;
    if (cfg.provider == FeatureProvider::Toy) {
      const EncoderParams& enc = params.caption_encoder ? *params.caption_encoder : *params.encoder;
      caption_seq = encode_sequence(tape, sample.caption, enc, rate, training, rng);
    } else {
      if (!sample.caption_features.defined())
        throw DataError("sample " + sample.id + " is missing caption features");
      caption_seq = sample.caption_features;
    }
    descriptors.push_back(coattention(tape, text_seq, caption_seq, *params.text_caption));
  }

  Tensor fused = descriptors.size() == 1 ? descriptors[0] : concat(tape, descriptors, 0);
  Tensor logits = add(tape, matmul(tape, params.classifier_w, reshape(tape, fused, {fused.extent(0), 1})),
                      reshape(tape, params.classifier_b, {2, 1}));
  Tensor probs = softmax_rows(tape, reshape(tape, logits, {1, 2}));

  Prediction pred;
  pred.probabilities = probs;
  pred.fused = fused;
  pred.label = probs.at(0, 1) > probs.at(0, 0) ? 1 : 0;
  return pred;
}

// Mean binary cross-entropy over the batch plus l2 * sum of squared
// parameter entries. Probabilities are clamped to [1e-12, 1 - 1e-12].
inline Tensor loss(Tape& tape, const std::vector<Prediction>& predictions, const std::vector<int>& labels,
                   const ModelParams& params, double l2_coeff) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw ContractError("loss requires a non-empty batch with matching labels");
  std::vector<Tensor> terms;
  terms.reserve(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw DataError("label " + std::to_string(labels[i]) + " outside {0,1}");
    Tensor p_true = slice_cols(tape, predictions[i].probabilities, labels[i], labels[i] + 1);
    terms.push_back(reshape(tape, log_op(tape, clamp(tape, p_true, 1e-12, 1.0 - 1e-12)), {1}));
  }
  Tensor stacked = terms.size() == 1 ? terms[0] : concat(tape, terms, 0);
  Tensor bce = scale(tape, sum_all(tape, stacked), -1.0 / static_cast<double>(predictions.size()));
  if (l2_coeff == 0.0) return bce;
  Tensor penalty;
  for (auto& [name, t] : named_tensors(params)) {
    Tensor sq = sum_all(tape, mul(tape, t, t));
    penalty = penalty.defined() ? add(tape, penalty, sq) : sq;
  }
  return add(tape, bce, scale(tape, penalty, l2_coeff));
}

}  // namespace mmsd
