#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmsd/errors.hpp"
#include "mmsd/tensor.hpp"

namespace mmsd {

// ---------------------------------------------------------------------------
// Binary tensor files ("FT01"): u32 LE rank, u32 LE extents, f32 LE payload.
// The 32-bit payload matches what external feature extractors emit.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff), static_cast<char>((v >> 16) & 0xff),
               static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("tensor file truncated while reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

constexpr char kTensorMagic[4] = {'F', 'T', '0', '1'};

inline void write_tensor_file(const std::filesystem::path& path, const Tensor& tensor) {
  for (double v : tensor.values())
    if (!std::isfinite(v)) throw DataError("refusing to write non-finite tensor to " + path.string());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(kTensorMagic, 4);
  detail::put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t e : tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
  for (double v : tensor.values()) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    detail::put_u32(out, bits);
  }
  if (!out) throw DataError("failed while writing " + path.string());
}

inline Tensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open tensor file " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kTensorMagic, 4))
    throw DataError("bad magic in tensor file " + path.string());
  std::uint32_t rank = detail::get_u32(in, "rank");
  if (rank < 1 || rank > 4) throw DataError("unsupported tensor rank " + std::to_string(rank) + " in " + path.string());
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    e = detail::get_u32(in, "extent");
    if (e == 0) throw DataError("zero extent in tensor file " + path.string());
    n *= e;
  }
  std::vector<double> data(n);
  for (double& v : data) {
    std::uint32_t bits = detail::get_u32(in, "payload");
    v = static_cast<double>(std::bit_cast<float>(bits));
  }
  if (in.peek() != std::ifstream::traits_type::eof())
    throw DataError("tensor file " + path.string() + " has trailing bytes beyond the declared payload");
  return Tensor::from_data(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Dataset manifests: UTF-8 JSON lines with id/text/caption/label/
// region_features_path/split (plus optional precomputed feature paths).
// ---------------------------------------------------------------------------

struct Sample {
  std::string id;
  std::string text;
  std::string caption;
  int label = -1;  // -1 when absent (allowed on test for predict mode)
  std::string region_features_path;
  std::string text_features_path;
  std::string caption_features_path;
  std::string split;
};

struct SplitStats {
  std::size_t sarcastic = 0;
  std::size_t non_sarcastic = 0;
  std::size_t unlabeled = 0;
  std::size_t total() const { return sarcastic + non_sarcastic + unlabeled; }
};

struct Manifest {
  std::vector<Sample> samples;
  std::map<std::string, SplitStats> stats;

  std::vector<Sample> split(const std::string& name) const {
    std::vector<Sample> out;
    for (const Sample& s : samples)
      if (s.split == name) out.push_back(s);
    return out;
  }
};

inline Manifest parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    if (p.empty()) return p;
    std::filesystem::path fp(p);
    return fp.is_absolute() ? p : (base / fp).string();
  };

  Manifest manifest;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest " + path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    auto fail = [&](const std::string& msg) {
      throw DataError("manifest " + path.string() + " line " + std::to_string(lineno) + ": " + msg);
    };
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) fail("missing string field 'id'");
    if (!j.contains("split") || !j["split"].is_string()) fail("missing string field 'split'");
    Sample s;
    s.id = j["id"].get<std::string>();
    s.split = j["split"].get<std::string>();
    if (s.split != "train" && s.split != "dev" && s.split != "test") fail("unknown split '" + s.split + "'");
    if (!seen.insert(s.id).second) fail("duplicate id '" + s.id + "'");
    if (j.contains("text")) {
      if (!j["text"].is_string()) fail("field 'text' must be a string");
      s.text = j["text"].get<std::string>();
    }
    if (j.contains("caption")) {
      if (!j["caption"].is_string()) fail("field 'caption' must be a string");
      s.caption = j["caption"].get<std::string>();
    }
    if (j.contains("label") && !j["label"].is_null()) {
      if (!j["label"].is_number_integer()) fail("field 'label' must be 0 or 1");
      s.label = j["label"].get<int>();
      if (s.label != 0 && s.label != 1) fail("field 'label' must be 0 or 1");
    }
    if (s.label == -1 && s.split != "test") fail("label required for split '" + s.split + "'");
    if (j.contains("region_features_path") && j["region_features_path"].is_string())
      s.region_features_path = resolve(j["region_features_path"].get<std::string>());
    if (j.contains("text_features_path") && j["text_features_path"].is_string())
      s.text_features_path = resolve(j["text_features_path"].get<std::string>());
    if (j.contains("caption_features_path") && j["caption_features_path"].is_string())
      s.caption_features_path = resolve(j["caption_features_path"].get<std::string>());

    SplitStats& st = manifest.stats[s.split];
    if (s.label == 1)
      ++st.sarcastic;
    else if (s.label == 0)
      ++st.non_sarcastic;
    else
      ++st.unlabeled;
    manifest.samples.push_back(std::move(s));
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Synthetic planted-incongruity dataset. The label is the agreement between a
// text token pattern and the region-feature cluster, so neither modality
// alone is predictive but any cross-modal pairing is separable. Captions
// verbalize the region cluster. Regions within one image carry distinct base
// patterns whose sign encodes the cluster; the within-image variation is
// what lets region-level attention discriminate.
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t n = 200;
  std::size_t feature_width = 8;  // raw width of the planted region features
  std::size_t regions = 4;        // perfect square
  std::uint64_t seed = 7;
};

// Writes manifest.jsonl plus one region feature file per sample under
// out_dir; returns the manifest path.
inline std::filesystem::path synth_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.n < 8 || cfg.n % 2 != 0) throw ConfigError("synthetic dataset size must be even and >= 8");
  std::filesystem::create_directories(out_dir / "features");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, 0.25);
  std::uniform_int_distribution<int> pick_filler(0, 5);
  static const char* fillers[] = {"the", "a", "photo", "of", "one", "scene"};
  static const char* bright[] = {"gleaming", "sunlit", "marvel"};
  static const char* dull[] = {"rusty", "overcast", "clutter"};

  std::filesystem::path manifest_path = out_dir / "manifest.jsonl";
  std::ofstream out(manifest_path, std::ios::binary);
  if (!out) throw DataError("cannot write " + manifest_path.string());

  const std::size_t n_train = (cfg.n * 70) / 100;
  const std::size_t n_dev = (cfg.n * 15) / 100;
  for (std::size_t k = 0; k < cfg.n; ++k) {
    const int label = static_cast<int>(k % 2);
    const int pattern = static_cast<int>((k / 2) % 2);           // 1 = bright wording
    const int cluster = label == 1 ? pattern : 1 - pattern;      // 1 = cluster b
    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "s%04zu", k);

    std::string text = fillers[pick_filler(rng)];
    const char* const* words = pattern ? bright : dull;
    text += std::string(" ") + words[k % 3] + " " + words[(k / 3) % 3] + " " + fillers[pick_filler(rng)];
    std::string caption = cluster ? "cluster b scene" : "cluster a scene";

    const double sign = cluster ? -1.0 : 1.0;
    std::vector<double> feat(cfg.regions * cfg.feature_width);
    for (std::size_t j = 0; j < cfg.regions; ++j)
      for (std::size_t k = 0; k < cfg.feature_width; ++k) {
        double base = (k + j) % cfg.regions == 0 ? 1.5 : -0.5;
        feat[j * cfg.feature_width + k] = sign * base + noise(rng);
      }
    std::string feat_rel = std::string("features/") + idbuf + ".ft";
    write_tensor_file(out_dir / feat_rel, Tensor::from_data({cfg.regions, cfg.feature_width}, std::move(feat)));

    const char* split = k < n_train ? "train" : (k < n_train + n_dev ? "dev" : "test");
    nlohmann::json j{{"id", idbuf},
                     {"text", text},
                     {"caption", caption},
                     {"label", label},
                     {"region_features_path", feat_rel},
                     {"split", split}};
    out << j.dump() << '\n';
  }
  return manifest_path;
}

}  // namespace mmsd
