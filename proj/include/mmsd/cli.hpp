#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmsd/data.hpp"
#include "mmsd/gradcheck_suite.hpp"
#include "mmsd/metrics.hpp"
#include "mmsd/model.hpp"
#include "mmsd/train.hpp"
#include "mmsd/vocab.hpp"

namespace mmsd::cli {

// Exit codes are a stable contract: 0 success, 2 usage/config error,
// 3 data error, 4 verification failure.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitVerification = 4;

namespace detail {

struct Options {
  ModelConfig model;
  TrainConfig train;
  std::string provider = "toy";
  std::string manifest;
  std::string out_dir;
  std::string checkpoint;
  std::string split = "test";
  std::string config_file;
  // synth
  SynthConfig synth;
  // gradcheck
  std::uint64_t gradcheck_seed = 7;
  double gradcheck_tol = 1e-4;
};

// Flat "section.key=value" INI: [section] headers, #/; comments, optional
// quotes around values.
inline std::map<std::string, std::string> read_ini(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open configuration file " + path.string());
  std::map<std::string, std::string> kv;
  std::string line, section;
  auto trim = [](std::string s) {
    const char* ws = " \t\r";
    s.erase(0, s.find_first_not_of(ws));
    s.erase(s.find_last_not_of(ws) + 1);
    return s;
  };
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("configuration file " + path.string() + " line " + std::to_string(lineno) +
                        ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && ((value.front() == '"' && value.back() == '"') ||
                              (value.front() == '\'' && value.back() == '\'')))
      value = value.substr(1, value.size() - 2);
    kv[section.empty() ? key : section + "." + key] = value;
  }
  return kv;
}

// Ties a CLI option to its config-file key. Config values apply only where
// the command line did not set the option, so flags win over the file.
class ConfigBindings {
 public:
  template <class T>
  void bind(CLI::App* cmd, const std::string& key, T& target, const std::string& help) {
    attach(cmd->add_option("--" + key, target, help), key, target);
  }

  template <class T>
  void attach(CLI::Option* opt, const std::string& key, T& target) {
    bindings_.push_back({key, opt, [&target, key](const std::string& value) {
                           T parsed{};
                           if (!CLI::detail::lexical_cast(value, parsed))
                             throw ConfigError("cannot parse value '" + value + "' for configuration key " + key);
                           target = parsed;
                         }});
  }

  void apply(const std::map<std::string, std::string>& kv) const {
    for (const auto& [key, value] : kv) {
      auto it = std::find_if(bindings_.begin(), bindings_.end(), [&](const Binding& b) { return b.key == key; });
      if (it == bindings_.end()) throw ConfigError("unknown configuration key '" + key + "'");
      if (it->opt->count() == 0) it->apply(value);
    }
  }

 private:
  struct Binding {
    std::string key;
    CLI::Option* opt;
    std::function<void(const std::string&)> apply;
  };
  std::vector<Binding> bindings_;
};

inline void add_model_options(CLI::App* cmd, Options& o, ConfigBindings& b) {
  b.bind(cmd, "model.d", o.model.d, "model width d");
  b.bind(cmd, "model.heads", o.model.heads, "attention head count");
  b.bind(cmd, "model.text_len", o.model.text_len, "max text length T");
  b.bind(cmd, "model.caption_len", o.model.caption_len, "max caption length U");
  b.bind(cmd, "model.regions", o.model.regions, "image region count r (perfect square)");
  b.bind(cmd, "model.region_width", o.model.region_width, "raw region feature width");
  b.bind(cmd, "model.mlp_width", o.model.mlp_width, "mlp hidden width (0 = 2d)");
  b.bind(cmd, "model.reduction", o.model.reduction, "spatial attention reduction ratio");
  b.bind(cmd, "model.encoder_layers", o.model.encoder_layers, "toy encoder depth");
  b.bind(cmd, "model.dropout", o.model.dropout, "dropout rate during training");
  b.bind(cmd, "model.l2", o.model.l2, "L2 regularization coefficient");
  b.bind(cmd, "model.use_visual_attention", o.model.use_visual_attention, "enable spatial attention");
  b.bind(cmd, "model.use_text_image", o.model.use_text_image, "enable text/image incongruity branch");
  b.bind(cmd, "model.use_text_caption", o.model.use_text_caption, "enable text/caption incongruity branch");
  b.bind(cmd, "model.separate_caption_encoder", o.model.separate_caption_encoder,
         "give captions their own embedding table");
  b.bind(cmd, "model.provider", o.provider, "sequence feature provider: toy or file");
}

inline void add_train_options(CLI::App* cmd, Options& o, ConfigBindings& b) {
  b.bind(cmd, "train.lr", o.train.lr, "peak learning rate");
  b.bind(cmd, "train.batch_size", o.train.batch_size, "batch size");
  b.bind(cmd, "train.warmup", o.train.warmup, "warmup fraction of total steps");
  b.bind(cmd, "train.epochs", o.train.epochs, "epoch count");
  b.bind(cmd, "train.patience", o.train.patience, "early stopping patience");
  b.bind(cmd, "train.seed", o.train.seed, "run seed");
  b.bind(cmd, "train.clip_norm", o.train.clip_norm, "max gradient norm (0 = off)");
  b.bind(cmd, "train.decay_after_warmup", o.train.decay_after_warmup, "linearly decay to zero after warmup");
  b.bind(cmd, "train.beta1", o.train.beta1, "Adam beta1");
  b.bind(cmd, "train.beta2", o.train.beta2, "Adam beta2");
  b.bind(cmd, "train.eps", o.train.eps, "Adam epsilon");
}

inline std::string bool_str(bool b) { return b ? "true" : "false"; }

inline std::string num_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// INI echo of the fully resolved configuration; the file can be fed straight
// back through --config.
inline std::string config_ini(const ModelConfig& m, const TrainConfig& t, const std::string& manifest) {
  std::ostringstream os;
  os << "[run]\n";
  if (!manifest.empty()) os << "manifest=" << manifest << '\n';
  os << "\n[model]\n"
     << "d=" << m.d << '\n'
     << "heads=" << m.heads << '\n'
     << "text_len=" << m.text_len << '\n'
     << "caption_len=" << m.caption_len << '\n'
     << "regions=" << m.regions << '\n'
     << "region_width=" << m.region_width << '\n'
     << "mlp_width=" << m.mlp_width << '\n'
     << "reduction=" << m.reduction << '\n'
     << "encoder_layers=" << m.encoder_layers << '\n'
     << "dropout=" << num_str(m.dropout) << '\n'
     << "l2=" << num_str(m.l2) << '\n'
     << "use_visual_attention=" << bool_str(m.use_visual_attention) << '\n'
     << "use_text_image=" << bool_str(m.use_text_image) << '\n'
     << "use_text_caption=" << bool_str(m.use_text_caption) << '\n'
     << "separate_caption_encoder=" << bool_str(m.separate_caption_encoder) << '\n'
     << "provider=" << (m.provider == FeatureProvider::Toy ? "toy" : "file") << '\n'
     << "\n[train]\n"
     << "lr=" << num_str(t.lr) << '\n'
     << "batch_size=" << t.batch_size << '\n'
     << "warmup=" << num_str(t.warmup) << '\n'
     << "epochs=" << t.epochs << '\n'
     << "patience=" << t.patience << '\n'
     << "seed=" << t.seed << '\n'
     << "clip_norm=" << num_str(t.clip_norm) << '\n'
     << "decay_after_warmup=" << bool_str(t.decay_after_warmup) << '\n'
     << "beta1=" << num_str(t.beta1) << '\n'
     << "beta2=" << num_str(t.beta2) << '\n'
     << "eps=" << num_str(t.eps) << '\n';
  return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
}

inline Vocab build_vocab(const std::vector<Sample>& samples, bool include_captions) {
  Vocab v;
  for (const Sample& s : samples) {
    for (const std::string& tok : split_tokens(s.text)) v.add(tok);
    if (include_captions)
      for (const std::string& tok : split_tokens(s.caption)) v.add(tok);
  }
  return v;
}

inline std::string metrics_csv_row(const std::string& label, const MetricsReport& m) {
  std::ostringstream os;
  os << label << ',' << std::fixed << std::setprecision(4) << m.accuracy << ',' << m.precision << ',' << m.recall
     << ',' << m.f1;
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

inline int cmd_synth(const Options& o, std::ostream& out) {
  std::filesystem::path dir(o.out_dir);
  auto manifest = synth_dataset(o.synth, dir);
  std::ostringstream ini;
  ini << "[synth]\n"
      << "n=" << o.synth.n << '\n'
      << "feature_width=" << o.synth.feature_width << '\n'
      << "regions=" << o.synth.regions << '\n'
      << "seed=" << o.synth.seed << '\n';
  write_file(dir / "config.ini", ini.str());
  out << "wrote " << manifest.string() << " (" << o.synth.n << " samples)\n";
  return kExitOk;
}

inline int cmd_stats(const Options& o, std::ostream& out) {
  Manifest man = parse_manifest(o.manifest);
  std::size_t grand = 0;
  for (const char* name : {"train", "dev", "test"}) {
    SplitStats st;
    if (auto it = man.stats.find(name); it != man.stats.end()) st = it->second;
    out << "split " << name << " sarcastic " << st.sarcastic << " non_sarcastic " << st.non_sarcastic;
    if (st.unlabeled > 0) out << " unlabeled " << st.unlabeled;
    out << " total " << st.total() << '\n';
    grand += st.total();
  }
  out << "total " << grand << '\n';
  return kExitOk;
}

inline int cmd_train(Options& o, std::ostream& out) {
  Manifest man = parse_manifest(o.manifest);
  std::vector<Sample> train_raw = man.split("train");
  std::vector<Sample> dev_raw = man.split("dev");
  if (train_raw.empty()) throw DataError("manifest " + o.manifest + " has no train split");

  Vocab vocab = build_vocab(train_raw, o.model.provider == FeatureProvider::Toy);
  o.model.vocab_size = vocab.size();
  o.model.validate();
  o.train.validate();

  std::filesystem::path dir(o.out_dir);
  std::filesystem::create_directories(dir);
  write_file(dir / "config.ini", config_ini(o.model, o.train, o.manifest));
  vocab.save(dir / "vocab.txt");

  auto train_set = prepare_samples(train_raw, vocab, o.model);
  auto dev_set = prepare_samples(dev_raw, vocab, o.model);
  TrainResult result = train_loop(train_set, dev_set, o.model, o.train);

  write_file(dir / "history.csv", history_csv(result.history));
  save_checkpoint(dir / "checkpoint.bin", o.model, o.train, vocab, result.best_params, result.best_state);

  out << "trained " << result.history.size() << " epochs";
  if (!dev_set.empty())
    out << ", best epoch " << result.best_epoch << " dev accuracy " << std::fixed << std::setprecision(4)
        << result.best_dev_acc;
  out << '\n' << "wrote " << (dir / "checkpoint.bin").string() << '\n';
  return kExitOk;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  Manifest man = parse_manifest(o.manifest);
  std::vector<Sample> raw = man.split(o.split);
  if (raw.empty()) throw DataError("manifest has no samples in split '" + o.split + "'");
  auto samples = prepare_samples(raw, ck.vocab, ck.model_config);
  EvalResult r = evaluate(samples, ck.params, ck.model_config);
  out << "split " << o.split << " samples " << samples.size() << " labeled " << r.labeled << '\n';
  if (r.labeled == 0) {
    out << "no labeled samples; metrics unavailable\n";
    return kExitOk;
  }
  out << r.metrics.format();
  if (!o.out_dir.empty()) {
    std::filesystem::path dir(o.out_dir);
    std::filesystem::create_directories(dir);
    write_file(dir / "metrics.txt", r.metrics.format());
    write_file(dir / "config.ini", config_ini(ck.model_config, ck.train_config, o.manifest));
  }
  return kExitOk;
}

inline int cmd_predict(const Options& o, std::ostream& out) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  Manifest man = parse_manifest(o.manifest);
  std::vector<Sample> raw = man.split(o.split);
  if (raw.empty()) throw DataError("manifest has no samples in split '" + o.split + "'");
  auto samples = prepare_samples(raw, ck.vocab, ck.model_config);
  EvalResult r = evaluate(samples, ck.params, ck.model_config);

  std::ostringstream csv;
  csv << "id,label,p_sarcastic\n";
  csv.precision(6);
  csv << std::fixed;
  for (const SamplePrediction& p : r.predictions) csv << p.id << ',' << p.label << ',' << p.p_sarcastic << '\n';

  std::filesystem::path dir(o.out_dir);
  std::filesystem::create_directories(dir);
  write_file(dir / "predictions.csv", csv.str());
  write_file(dir / "config.ini", config_ini(ck.model_config, ck.train_config, o.manifest));
  out << "wrote " << (dir / "predictions.csv").string() << " (" << r.predictions.size() << " rows)\n";
  return kExitOk;
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
  auto checks = run_gradcheck(o.gradcheck_seed);
  bool all_ok = true;
  for (const ModuleCheck& c : checks) {
    bool ok = c.report.ok(o.gradcheck_tol);
    all_ok = all_ok && ok;
    out << (ok ? "PASS " : "FAIL ") << c.name << " max_rel_error " << std::scientific << std::setprecision(3)
        << c.report.max_rel_error << " entries " << c.report.entries_checked;
    out.unsetf(std::ios::floatfield);
    if (!ok) out << " (" << c.report.describe() << ")";
    out << '\n';
  }
  out << (all_ok ? "gradcheck passed" : "gradcheck FAILED") << " (" << checks.size() << " modules, tolerance "
      << o.gradcheck_tol << ")\n";
  return all_ok ? kExitOk : kExitVerification;
}

inline int cmd_ablate(Options& o, std::ostream& out) {
  Manifest man = parse_manifest(o.manifest);
  std::vector<Sample> train_raw = man.split("train");
  std::vector<Sample> dev_raw = man.split("dev");
  std::vector<Sample> test_raw = man.split("test");
  if (train_raw.empty()) throw DataError("manifest " + o.manifest + " has no train split");
  if (test_raw.empty()) throw DataError("manifest " + o.manifest + " has no test split to compare variants on");

  Vocab vocab = build_vocab(train_raw, o.model.provider == FeatureProvider::Toy);

  struct Variant {
    const char* name;
    void (*tweak)(ModelConfig&);
  };
  const Variant variants[] = {
      {"full", [](ModelConfig&) {}},
      {"no_visual_attention", [](ModelConfig& c) { c.use_visual_attention = false; }},
      {"no_text_image", [](ModelConfig& c) { c.use_text_image = false; }},
      {"no_text_caption", [](ModelConfig& c) { c.use_text_caption = false; }},
  };

  std::filesystem::path dir(o.out_dir);
  std::filesystem::create_directories(dir);
  write_file(dir / "config.ini", config_ini(o.model, o.train, o.manifest));

  std::ostringstream csv;
  csv << "variant,accuracy,precision,recall,f1\n";
  for (const Variant& v : variants) {
    ModelConfig cfg = o.model;
    v.tweak(cfg);
    cfg.vocab_size = vocab.size();
    cfg.validate();
    auto train_set = prepare_samples(train_raw, vocab, cfg);
    auto dev_set = prepare_samples(dev_raw, vocab, cfg);
    auto test_set = prepare_samples(test_raw, vocab, cfg);
    TrainResult result = train_loop(train_set, dev_set, cfg, o.train);
    EvalResult r = evaluate(test_set, result.best_params, cfg);
    std::string row = metrics_csv_row(v.name, r.metrics);
    csv << row << '\n';
    out << row << '\n';
  }
  write_file(dir / "ablation.csv", csv.str());
  out << "wrote " << (dir / "ablation.csv").string() << '\n';
  return kExitOk;
}

}  // namespace detail

// Parses argv-style arguments (without the program name) and runs one
// subcommand, writing human output to `out` and failures to `err`.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  detail::Options o;
  CLI::App app{"multi-level cross-modal incongruity workbench for sarcasm detection"};
  app.require_subcommand(1);

  CLI::App* synth = app.add_subcommand("synth", "generate a planted-incongruity synthetic dataset");
  synth->add_option("--out", o.out_dir, "output directory")->required();
  synth->add_option("--n", o.synth.n, "sample count (even, >= 8)");
  synth->add_option("--width", o.synth.feature_width, "region feature width");
  synth->add_option("--regions", o.synth.regions, "regions per image (perfect square)");
  synth->add_option("--seed", o.synth.seed, "generator seed");

  CLI::App* stats = app.add_subcommand("stats", "per-split label statistics of a manifest");
  stats->add_option("--manifest", o.manifest, "manifest path")->required();

  detail::ConfigBindings train_bindings;
  CLI::App* train = app.add_subcommand("train", "train a model and write the best checkpoint");
  train_bindings.attach(train->add_option("--manifest", o.manifest, "manifest path"), "run.manifest", o.manifest);
  train->add_option("--out", o.out_dir, "output directory")->required();
  train->add_option("--config", o.config_file, "INI configuration file");
  detail::add_model_options(train, o, train_bindings);
  detail::add_train_options(train, o, train_bindings);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint path")->required();
  eval_cmd->add_option("--manifest", o.manifest, "manifest path")->required();
  eval_cmd->add_option("--split", o.split, "split name (default test)");
  eval_cmd->add_option("--out", o.out_dir, "optional output directory");

  CLI::App* predict = app.add_subcommand("predict", "write per-sample predictions as CSV");
  predict->add_option("--checkpoint", o.checkpoint, "checkpoint path")->required();
  predict->add_option("--manifest", o.manifest, "manifest path")->required();
  predict->add_option("--split", o.split, "split name (default test)");
  predict->add_option("--out", o.out_dir, "output directory")->required();

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every module");
  gradcheck->add_option("--seed", o.gradcheck_seed, "instance seed");
  gradcheck->add_option("--tol", o.gradcheck_tol, "relative error tolerance");

  detail::ConfigBindings ablate_bindings;
  CLI::App* ablate = app.add_subcommand("ablate", "train the full model and the three ablation variants");
  ablate_bindings.attach(ablate->add_option("--manifest", o.manifest, "manifest path"), "run.manifest", o.manifest);
  ablate->add_option("--out", o.out_dir, "output directory")->required();
  ablate->add_option("--config", o.config_file, "INI configuration file");
  detail::add_model_options(ablate, o, ablate_bindings);
  detail::add_train_options(ablate, o, ablate_bindings);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (!o.config_file.empty()) {
      auto kv = detail::read_ini(o.config_file);
      if (train->parsed()) train_bindings.apply(kv);
      if (ablate->parsed()) ablate_bindings.apply(kv);
    }
    if (o.manifest.empty() && (train->parsed() || ablate->parsed()))
      throw ConfigError("a manifest is required (--manifest or run.manifest in the configuration file)");
    o.model.provider = provider_from_name(o.provider);
    if (synth->parsed()) return detail::cmd_synth(o, out);
    if (stats->parsed()) return detail::cmd_stats(o, out);
    if (train->parsed()) return detail::cmd_train(o, out);
    if (eval_cmd->parsed()) return detail::cmd_eval(o, out);
    if (predict->parsed()) return detail::cmd_predict(o, out);
    if (gradcheck->parsed()) return detail::cmd_gradcheck(o, out);
    if (ablate->parsed()) return detail::cmd_ablate(o, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << "no subcommand given\n";
  return kExitUsage;
}

}  // namespace mmsd::cli
