#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmsd/gradcheck.hpp"
#include "mmsd/model.hpp"

namespace mmsd {

struct ModuleCheck {
  std::string name;
  GradCheckReport report;
};

namespace detail {

// Re-randomizes the listed tensors until the forward pass stays clear of
// relu/max/clamp kinks, then runs the finite-difference comparison.
inline GradCheckReport check_kink_free(const ScalarFn& f, std::vector<std::pair<std::string, Tensor>> params,
                                       std::mt19937_64& rng, double step) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    if (probe_kink_gap(f) > 1e-3) break;
    for (auto& [name, t] : params) {
      Tensor fresh = uniform(t.shape(), -1.0, 1.0, rng);
      std::copy(fresh.values().begin(), fresh.values().end(), t.mutable_values().begin());
    }
  }
  return finite_diff_check(f, params, step, 50, rng());
}

}  // namespace detail

// Gradient fidelity sweep: every tensor operation, each composite module,
// and the full model loss on a small random instance.
inline std::vector<ModuleCheck> run_gradcheck(std::uint64_t seed, double step = 1e-5) {
  std::mt19937_64 rng(seed);
  std::vector<ModuleCheck> results;
  auto run = [&](const std::string& name, const ScalarFn& f, std::vector<std::pair<std::string, Tensor>> params) {
    results.push_back({name, detail::check_kink_free(f, std::move(params), rng, step)});
  };

  // --- individual operations ---
  Tensor a = uniform({3, 4}, -1, 1, rng), b = uniform({4, 2}, -1, 1, rng);
  run("op.matmul", [&](Tape& t) { return sum_all(t, matmul(t, a, b)); }, {{"a", a}, {"b", b}});

  Tensor x = uniform({3, 4}, -1, 1, rng), y = uniform({3, 4}, -1, 1, rng);
  run("op.softmax_rows", [&](Tape& t) { return sum_all(t, mul(t, softmax_rows(t, x), y)); }, {{"x", x}, {"y", y}});
  run("op.tanh", [&](Tape& t) { return sum_all(t, tanh_op(t, x)); }, {{"x", x}});
  run("op.sigmoid", [&](Tape& t) { return sum_all(t, sigmoid(t, x)); }, {{"x", x}});
  run("op.relu", [&](Tape& t) { return sum_all(t, mul(t, relu(t, x), y)); }, {{"x", x}});
  run("op.gelu", [&](Tape& t) { return sum_all(t, gelu(t, x)); }, {{"x", x}});

  Tensor gain = uniform({4}, 0.5, 1.5, rng), bias = uniform({4}, -0.5, 0.5, rng);
  run("op.layer_norm", [&](Tape& t) { return sum_all(t, mul(t, layer_norm(t, x, gain, bias), y)); },
      {{"x", x}, {"gain", gain}, {"bias", bias}});
  run("op.reduce_max_cols", [&](Tape& t) { return sum_all(t, mul(t, reduce_max_cols(t, x), bias)); }, {{"x", x}});

  Tensor cube = uniform({4, 3, 3}, -1, 1, rng);
  run("op.avg_pool_axis",
      [&](Tape& t) {
        return add(t, sum_all(t, avg_pool_axis(t, cube, SpatialAxis::Width)),
                   sum_all(t, avg_pool_axis(t, cube, SpatialAxis::Height)));
      },
      {{"x", cube}});
  run("op.concat_slice",
      [&](Tape& t) { return sum_all(t, mul(t, slice_cols(t, concat(t, {x, y}, 1), 2, 6), x)); },
      {{"x", x}, {"y", y}});

  Tensor gate_h = uniform({4, 3, 1}, 0.1, 0.9, rng), gate_w = uniform({4, 1, 3}, 0.1, 0.9, rng);
  run("op.mul_broadcast",
      [&](Tape& t) { return sum_all(t, mul_broadcast(t, mul_broadcast(t, cube, gate_h), gate_w)); },
      {{"x", cube}, {"gh", gate_h}, {"gw", gate_w}});

  Tensor table = uniform({6, 4}, -1, 1, rng);
  Tensor embed_weights = uniform({3, 4}, 0.5, 1.5, rng);
  run("op.embed", [&](Tape& t) { return sum_all(t, mul(t, embed(t, table, {3, 0, 5}), embed_weights)); },
      {{"table", table}});
  run("op.log_clamp", [&](Tape& t) { return sum_all(t, log_op(t, clamp(t, sigmoid(t, x), 1e-12, 1.0 - 1e-12))); },
      {{"x", x}});

  // --- composite modules ---
  {
    CoordAttnParams coord = CoordAttnParams::init(4, 2, rng);
    Tensor cx = uniform({4, 3, 3}, -1, 1, rng);
    run("module.coordinate_attention",
        [&](Tape& t) { return sum_all(t, coordinate_attention(t, cx, coord)); },
        {{"x", cx}, {"squeeze", coord.squeeze}, {"expand_h", coord.expand_h}, {"expand_w", coord.expand_w}});
  }
  // Readouts go through fixed random weights: a plain sum of a layer-norm
  // output is constant (normalized rows have zero mean), which would leave
  // nothing for finite differences to measure.
  {
    MhaParams mha = MhaParams::init(8, 2, rng);
    Tensor s = uniform({3, 8}, -1, 1, rng), kv = uniform({4, 8}, -1, 1, rng);
    Tensor readout = uniform({3, 8}, -1, 1, rng);
    std::vector<std::pair<std::string, Tensor>> params{{"s", s}, {"kv", kv}, {"w_out", mha.w_out}};
    for (std::size_t i = 0; i < mha.heads(); ++i) {
      params.emplace_back("q" + std::to_string(i), mha.w_query[i]);
      params.emplace_back("k" + std::to_string(i), mha.w_key[i]);
      params.emplace_back("v" + std::to_string(i), mha.w_value[i]);
    }
    run("module.cross_modal_mha",
        [&](Tape& t) { return sum_all(t, mul(t, cross_modal_mha(t, s, kv, mha), readout)); }, params);

    IncongruityBlockParams block = IncongruityBlockParams::init(8, 2, 16, rng);
    Tensor vec_readout = uniform({8}, -1, 1, rng);
    std::vector<std::pair<std::string, Tensor>> bparams{{"s", s}, {"kv", kv}};
    detail::visit_block("block", block, [&](const std::string& n, const Tensor& t) { bparams.emplace_back(n, t); });
    run("module.incongruity_block",
        [&](Tape& t) { return sum_all(t, mul(t, incongruity_block(t, s, kv, block), vec_readout)); }, bparams);
  }
  {
    CoAttnParams co = CoAttnParams::init(8, rng);
    Tensor s = uniform({3, 8}, -1, 1, rng), c = uniform({4, 8}, -1, 1, rng);
    run("module.coattention", [&](Tape& t) { return sum_all(t, coattention(t, s, c, co)); },
        {{"s", s}, {"c", c}, {"w", co.w}});
  }
  {
    EncoderParams enc = EncoderParams::init(8, 8, 2, 16, 1, rng);
    Vocab vocab = Vocab::from_tokens({"alpha", "beta", "gamma", "delta"});
    TokenSeq seq = tokenize("alpha beta gamma", vocab, 4);
    Tensor readout = uniform({4, 8}, -1, 1, rng);
    std::vector<std::pair<std::string, Tensor>> params;
    detail::visit_encoder("encoder", enc, [&](const std::string& n, const Tensor& t) { params.emplace_back(n, t); });
    run("module.encoder", [&](Tape& t) { return sum_all(t, mul(t, encode_sequence(t, seq, enc), readout)); },
        params);
  }

  // --- full model loss (d=8, h=2, T=4, U=3, r=4, both branches on) ---
  {
    Vocab vocab = Vocab::from_tokens({"alpha", "beta", "gamma", "delta", "cluster", "scene"});
    ModelConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.text_len = 4;
    cfg.caption_len = 3;
    cfg.regions = 4;
    cfg.region_width = 6;
    cfg.reduction = 4;
    cfg.mlp_width = 16;
    cfg.vocab_size = vocab.size();
    cfg.l2 = 1e-5;
    ModelParams params = build_variant(cfg, rng());

    PreparedSample s0, s1;
    s0.id = "g0";
    s0.label = 1;
    s0.text = tokenize("alpha beta gamma", vocab, cfg.text_len);
    s0.caption = tokenize("cluster scene", vocab, cfg.caption_len);
    s0.region_features = uniform({cfg.regions, cfg.region_width}, -1, 1, rng);
    s1.id = "g1";
    s1.label = 0;
    s1.text = tokenize("delta alpha", vocab, cfg.text_len);
    s1.caption = tokenize("scene", vocab, cfg.caption_len);
    s1.region_features = uniform({cfg.regions, cfg.region_width}, -1, 1, rng);
    const std::vector<PreparedSample> batch{s0, s1};

    auto f = [&](Tape& t) {
      std::vector<Prediction> preds;
      std::vector<int> labels;
      for (const PreparedSample& s : batch) {
        preds.push_back(forward(t, s, params, cfg, false, nullptr));
        labels.push_back(s.label);
      }
      return loss(t, preds, labels, params, cfg.l2);
    };
    std::vector<std::pair<std::string, Tensor>> ptensors = named_tensors(params);
    ptensors.emplace_back("input.regions0", batch[0].region_features);
    ptensors.emplace_back("input.regions1", batch[1].region_features);
    run("model.loss", f, ptensors);
  }

  return results;
}

}  // namespace mmsd
