#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmsd/metrics.hpp"
#include "mmsd/model.hpp"
#include "mmsd/vocab.hpp"

namespace mmsd {

struct TrainConfig {
  double lr = 5e-5;
  std::size_t batch_size = 32;
  double warmup = 0.1;  // fraction of total steps
  std::size_t epochs = 15;
  std::size_t patience = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 42;
  double clip_norm = 0.0;          // 0 disables gradient clipping
  bool decay_after_warmup = true;  // false holds the peak rate after warmup

  void validate() const {
    if (warmup < 0.0 || warmup >= 1.0) throw ConfigError("warmup fraction must lie in [0, 1)");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (epochs < 1) throw ConfigError("epoch count must be >= 1");
  }
};

// Linear warmup to the peak rate over ceil(warmup * total) steps, then
// linear decay to exactly zero at step == total.
inline double lr_schedule(std::size_t step, std::size_t total, double warmup_fraction, double peak,
                          bool decay = true) {
  if (total == 0) throw ConfigError("lr_schedule requires a positive total step count");
  if (step > total) throw ContractError("lr_schedule step beyond total");
  const auto w = static_cast<std::size_t>(std::max(1.0, std::ceil(warmup_fraction * static_cast<double>(total))));
  if (step <= w) return peak * (static_cast<double>(step) / static_cast<double>(w));
  if (!decay) return peak;
  return peak * (static_cast<double>(total - step) / static_cast<double>(total - w));
}

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;

  static AdamState init(const NamedTensors& named) {
    AdamState s;
    for (auto& [name, t] : named) {
      s.m.emplace_back(t.numel(), 0.0);
      s.v.emplace_back(t.numel(), 0.0);
    }
    return s;
  }
  static AdamState init(const ModelParams& params) { return init(named_tensors(params)); }
};

// Bias-corrected Adam over every named tensor, reading gradients off the
// tensors themselves. lr_t is the already-scheduled rate for this step.
inline void adam_step(const NamedTensors& named, AdamState& state, const TrainConfig& cfg, double lr_t) {
  if (named.size() != state.m.size()) throw ContractError("optimizer state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < named.size(); ++p) {
    auto& [name, t] = named[p];
    auto g = t.grad();
    auto vals = t.mutable_values();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) throw TrainError("NaN gradient in parameter " + name);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      vals[i] -= lr_t * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
    }
  }
}

inline void adam_step(const ModelParams& params, AdamState& state, const TrainConfig& cfg, double lr_t) {
  adam_step(named_tensors(params), state, cfg, lr_t);
}

inline void clip_gradients(const NamedTensors& named, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto& [name, t] : named)
    for (double g : t.grad()) sq += g * g;
  double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  double factor = max_norm / norm;
  for (auto& [name, t] : named)
    for (double& g : t.mutable_grad()) g *= factor;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct SamplePrediction {
  std::string id;
  int label = 0;
  double p_sarcastic = 0.0;
};

struct EvalResult {
  MetricsReport metrics;
  double mean_loss = 0.0;  // cross-entropy only, no regularizer
  std::vector<SamplePrediction> predictions;
  std::size_t labeled = 0;
};

// Dropout-free forward over a whole split. Metrics cover only labeled
// samples; predictions cover everything.
inline EvalResult evaluate(const std::vector<PreparedSample>& samples, const ModelParams& params,
                           const ModelConfig& cfg) {
  EvalResult result;
  std::vector<int> predicted, gold;
  double loss_sum = 0.0;
  for (const PreparedSample& s : samples) {
    Tape tape;
    Prediction pred = forward(tape, s, params, cfg, /*training=*/false, nullptr);
    result.predictions.push_back({s.id, pred.label, pred.probabilities.at(0, 1)});
    if (s.label == 0 || s.label == 1) {
      predicted.push_back(pred.label);
      gold.push_back(s.label);
      double p_true = std::clamp(pred.probabilities.at(0, s.label), 1e-12, 1.0 - 1e-12);
      loss_sum += -std::log(p_true);
    }
  }
  result.labeled = gold.size();
  if (!gold.empty()) {
    result.metrics = compute_metrics(predicted, gold);
    result.mean_loss = loss_sum / static_cast<double>(gold.size());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double dev_acc = 0.0;
  double dev_f1 = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  ModelParams best_params;
  AdamState best_state;
  std::size_t best_epoch = 0;
  double best_dev_acc = 0.0;
  std::vector<EpochStats> history;
};

inline std::string history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,dev_loss,dev_acc,dev_f1,lr\n";
  for (const EpochStats& e : history)
    os << e.epoch << ',' << e.train_loss << ',' << e.dev_loss << ',' << e.dev_acc << ',' << e.dev_f1 << ',' << e.lr
       << '\n';
  return os.str();
}

// Seeded shuffle + mini-batch Adam with the warmup schedule, dev evaluation
// after each epoch, best-checkpoint tracking on dev accuracy (ties broken by
// lower dev loss), early stop after `patience` epochs without an accuracy
// improvement. With an empty dev set the loop runs all epochs and keeps the
// final parameters.
inline TrainResult train_loop(const std::vector<PreparedSample>& train_set,
                              const std::vector<PreparedSample>& dev_set, const ModelConfig& model_cfg,
                              const TrainConfig& cfg) {
  if (train_set.empty()) throw ContractError("train_loop requires a non-empty training set");
  cfg.validate();
  model_cfg.validate();
  for (const PreparedSample& s : train_set)
    if (s.label != 0 && s.label != 1) throw DataError("training sample " + s.id + " has no label");

  ModelParams params = build_variant(model_cfg, cfg.seed);
  AdamState state = AdamState::init(params);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  const std::size_t batches_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches_per_epoch;

  TrainResult result;
  double best_acc = -1.0, best_loss = std::numeric_limits<double>::infinity();
  std::size_t stale_epochs = 0;
  std::size_t global_step = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    double last_lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tape tape;
      std::vector<Prediction> preds;
      std::vector<int> labels;
      std::string batch_ids;
      for (std::size_t b = start; b < end; ++b) {
        const PreparedSample& s = train_set[order[b]];
        batch_ids += (batch_ids.empty() ? "" : ",") + s.id;
        preds.push_back(forward(tape, s, params, model_cfg, /*training=*/true, &rng));
        labels.push_back(s.label);
      }
      Tensor batch_loss;
      try {
        batch_loss = loss(tape, preds, labels, params, model_cfg.l2);
      } catch (const NumericError& e) {
        throw TrainError(std::string(e.what()) + " (batch: " + batch_ids + ")");
      }
      if (!std::isfinite(batch_loss[0]))
        throw TrainError("non-finite loss on batch: " + batch_ids);
      tape.backward(batch_loss);
      clip_gradients(named_tensors(params), cfg.clip_norm);
      ++global_step;
      last_lr = lr_schedule(global_step, total_steps, cfg.warmup, cfg.lr, cfg.decay_after_warmup);
      adam_step(params, state, cfg, last_lr);
      zero_all_grads(params);
      epoch_loss += batch_loss[0] * static_cast<double>(end - start);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / static_cast<double>(train_set.size());
    stats.lr = last_lr;

    if (!dev_set.empty()) {
      EvalResult dev = evaluate(dev_set, params, model_cfg);
      stats.dev_loss = dev.mean_loss;
      stats.dev_acc = dev.metrics.accuracy;
      stats.dev_f1 = dev.metrics.f1;
      const bool better_acc = dev.metrics.accuracy > best_acc;
      const bool tie_better_loss = dev.metrics.accuracy == best_acc && dev.mean_loss < best_loss;
      if (better_acc || tie_better_loss) {
        best_acc = dev.metrics.accuracy;
        best_loss = dev.mean_loss;
        result.best_params = clone_params(params);
        result.best_state = state;
        result.best_epoch = epoch;
        result.best_dev_acc = best_acc;
      }
      stale_epochs = better_acc ? 0 : stale_epochs + 1;
      result.history.push_back(stats);
      if (stale_epochs >= cfg.patience) break;
    } else {
      result.history.push_back(stats);
    }
  }

  if (dev_set.empty() || result.best_epoch == 0) {
    result.best_params = clone_params(params);
    result.best_state = state;
    result.best_epoch = result.history.empty() ? 0 : result.history.back().epoch;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: "MSCK" magic, format version, a JSON header with both configs
// and the vocabulary, then raw 64-bit tensor payloads and optimizer moments.
// Round trips are byte-identical.
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[4] = {'M', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void config_to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d", c.d},
                     {"heads", c.heads},
                     {"text_len", c.text_len},
                     {"caption_len", c.caption_len},
                     {"regions", c.regions},
                     {"region_width", c.region_width},
                     {"mlp_width", c.mlp_width},
                     {"reduction", c.reduction},
                     {"encoder_layers", c.encoder_layers},
                     {"vocab_size", c.vocab_size},
                     {"dropout", c.dropout},
                     {"l2", c.l2},
                     {"use_visual_attention", c.use_visual_attention},
                     {"use_text_image", c.use_text_image},
                     {"use_text_caption", c.use_text_caption},
                     {"separate_caption_encoder", c.separate_caption_encoder},
                     {"provider", c.provider == FeatureProvider::Toy ? "toy" : "file"}};
}

inline void config_from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d = j.at("d").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.text_len = j.at("text_len").get<std::size_t>();
  c.caption_len = j.at("caption_len").get<std::size_t>();
  c.regions = j.at("regions").get<std::size_t>();
  c.region_width = j.at("region_width").get<std::size_t>();
  c.mlp_width = j.at("mlp_width").get<std::size_t>();
  c.reduction = j.at("reduction").get<std::size_t>();
  c.encoder_layers = j.at("encoder_layers").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.l2 = j.at("l2").get<double>();
  c.use_visual_attention = j.at("use_visual_attention").get<bool>();
  c.use_text_image = j.at("use_text_image").get<bool>();
  c.use_text_caption = j.at("use_text_caption").get<bool>();
  c.separate_caption_encoder = j.at("separate_caption_encoder").get<bool>();
  c.provider = provider_from_name(j.at("provider").get<std::string>());
}

inline void config_to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"batch_size", c.batch_size},
                     {"warmup", c.warmup},
                     {"epochs", c.epochs},
                     {"patience", c.patience},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"seed", c.seed},
                     {"clip_norm", c.clip_norm},
                     {"decay_after_warmup", c.decay_after_warmup}};
}

inline void config_from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.warmup = j.at("warmup").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.decay_after_warmup = j.at("decay_after_warmup").get<bool>();
}

struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  Vocab vocab;
  ModelParams params;
  AdamState state;
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& in, const std::string& what) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("checkpoint truncated while reading " + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64s(std::ostream& out, std::span<const double> vals) {
  for (double d : vals) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

inline void get_f64s(std::istream& in, std::span<double> vals, const std::string& what) {
  for (double& d : vals) d = std::bit_cast<double>(get_u64(in, what));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& model_cfg,
                            const TrainConfig& train_cfg, const Vocab& vocab, const ModelParams& params,
                            const AdamState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint " + path.string() + " for writing");
  nlohmann::json header;
  config_to_json(header["model"], model_cfg);
  config_to_json(header["train"], train_cfg);
  header["vocab"] = vocab.tokens();
  const std::string header_str = header.dump();

  out.write(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  auto named = named_tensors(params);
  if (named.size() != state.m.size()) throw ContractError("optimizer state does not match parameter list");
  detail::put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (std::size_t p = 0; p < named.size(); ++p) {
    const auto& [name, t] = named[p];
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    detail::put_f64s(out, t.values());
    detail::put_f64s(out, state.m[p]);
    detail::put_f64s(out, state.v[p]);
  }
  detail::put_u64(out, state.step);
  if (!out) throw DataError("failed while writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kCheckpointMagic, 4))
    throw DataError("bad magic in checkpoint " + path.string());
  std::uint32_t version = detail::get_u32(in, "version");
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  std::uint64_t header_len = detail::get_u64(in, "header length");
  std::string header_str(header_len, '\0');
  if (!in.read(header_str.data(), static_cast<std::streamsize>(header_len)))
    throw DataError("checkpoint truncated while reading header");

  Checkpoint ck;
  try {
    nlohmann::json header = nlohmann::json::parse(header_str);
    config_from_json(header.at("model"), ck.model_config);
    config_from_json(header.at("train"), ck.train_config);
    ck.vocab = Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint header: " + std::string(e.what()));
  }

  ck.params = build_variant(ck.model_config, ck.train_config.seed);
  ck.state = AdamState::init(ck.params);
  auto named = named_tensors(ck.params);
  std::uint32_t count = detail::get_u32(in, "tensor count");
  if (count != named.size())
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(named.size()));
  for (std::size_t p = 0; p < named.size(); ++p) {
    auto& [name, t] = named[p];
    std::uint32_t name_len = detail::get_u32(in, "name length");
    std::string name_in(name_len, '\0');
    if (!in.read(name_in.data(), name_len)) throw DataError("checkpoint truncated while reading tensor name");
    if (name_in != name) throw DataError("checkpoint tensor '" + name_in + "' does not match expected '" + name + "'");
    std::uint32_t rank = detail::get_u32(in, "rank");
    if (rank != t.rank()) throw DataError("checkpoint tensor '" + name + "' rank mismatch");
    for (std::size_t a = 0; a < rank; ++a)
      if (detail::get_u32(in, "extent") != t.extent(a))
        throw DataError("checkpoint tensor '" + name + "' shape mismatch");
    detail::get_f64s(in, t.mutable_values(), "tensor payload");
    detail::get_f64s(in, ck.state.m[p], "optimizer first moment");
    detail::get_f64s(in, ck.state.v[p], "optimizer second moment");
  }
  ck.state.step = detail::get_u64(in, "optimizer step");
  if (in.peek() != std::ifstream::traits_type::eof())
    throw DataError("checkpoint " + path.string() + " has trailing bytes beyond the declared payload");
  return ck;
}

}  // namespace mmsd
