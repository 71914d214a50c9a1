#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "mmsd/data.hpp"
#include "mmsd/metrics.hpp"
#include "mmsd/vocab.hpp"

using namespace mmsd;

namespace {

std::filesystem::path temp_dir(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "mmsd_data_tests" / name;
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  out << content;
}

// Bag-of-words logistic regression: the independent probe that shows text
// alone carries no label signal in the synthetic set.
double text_probe_accuracy(const Manifest& man) {
  Vocab vocab;
  for (const Sample& s : man.split("train"))
    for (const auto& tok : split_tokens(s.text)) vocab.add(tok);
  const std::size_t dim = vocab.size();
  auto featurize = [&](const Sample& s) {
    std::vector<double> x(dim, 0.0);
    for (const auto& tok : split_tokens(s.text)) {
      int id = vocab.lookup(tok);
      if (id >= Vocab::reserved) x[id] = 1.0;
    }
    return x;
  };
  std::vector<double> w(dim, 0.0);
  double b = 0.0;
  auto train = man.split("train");
  for (int iter = 0; iter < 500; ++iter) {
    std::vector<double> gw(dim, 0.0);
    double gb = 0.0;
    for (const Sample& s : train) {
      auto x = featurize(s);
      double z = b;
      for (std::size_t j = 0; j < dim; ++j) z += w[j] * x[j];
      double p = 1.0 / (1.0 + std::exp(-z));
      double err = p - s.label;
      for (std::size_t j = 0; j < dim; ++j) gw[j] += err * x[j];
      gb += err;
    }
    for (std::size_t j = 0; j < dim; ++j) w[j] -= 0.5 * gw[j] / train.size();
    b -= 0.5 * gb / train.size();
  }
  auto test = man.split("test");
  std::size_t hits = 0;
  for (const Sample& s : test) {
    auto x = featurize(s);
    double z = b;
    for (std::size_t j = 0; j < dim; ++j) z += w[j] * x[j];
    hits += ((z > 0.0) ? 1 : 0) == s.label;
  }
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

}  // namespace

TEST_CASE("tensor files") {
  auto dir = temp_dir("tensors");
  std::mt19937_64 rng(3);

  SECTION("round trip preserves shape and 32-bit-representable values") {
    Tensor t = Tensor::from_data({2, 2}, {0.5, -1.25, 3.0, 0.0078125});
    write_tensor_file(dir / "a.ft", t);
    Tensor r = read_tensor_file(dir / "a.ft");
    REQUIRE(r.shape() == t.shape());
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(r[i] == t[i]);
  }
  SECTION("arbitrary doubles round trip through 32-bit floats") {
    Tensor t = uniform({3, 5}, -10, 10, rng);
    write_tensor_file(dir / "b.ft", t);
    Tensor r = read_tensor_file(dir / "b.ft");
    for (std::size_t i = 0; i < t.numel(); ++i)
      REQUIRE(r[i] == static_cast<double>(static_cast<float>(t[i])));
  }
  SECTION("bad magic is rejected") {
    spit(dir / "bad.ft", std::string("XX01") + std::string(24, '\0'));
    REQUIRE_THROWS_MATCHES(read_tensor_file(dir / "bad.ft"), DataError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("magic")));
  }
  SECTION("truncated payload is rejected") {
    write_tensor_file(dir / "c.ft", Tensor::zeros({3, 3}));
    std::filesystem::resize_file(dir / "c.ft", 4 + 4 + 8 + 8 * 4);  // declares 9 floats, holds 8
    REQUIRE_THROWS_AS(read_tensor_file(dir / "c.ft"), DataError);
  }
  SECTION("trailing bytes are rejected") {
    write_tensor_file(dir / "d.ft", Tensor::zeros({2, 2}));
    std::ofstream out(dir / "d.ft", std::ios::binary | std::ios::app);
    out << "extra";
    out.close();
    REQUIRE_THROWS_AS(read_tensor_file(dir / "d.ft"), DataError);
  }
  SECTION("rank above four is rejected") {
    std::string blob = "FT01";
    blob += '\x05';
    blob += std::string(3, '\0');
    spit(dir / "e.ft", blob);
    REQUIRE_THROWS_MATCHES(read_tensor_file(dir / "e.ft"), DataError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("rank")));
  }
  SECTION("non-finite tensors are never written") {
    Tensor t = Tensor::from_data({2}, {1.0, std::numeric_limits<double>::infinity()});
    REQUIRE_THROWS_AS(write_tensor_file(dir / "f.ft", t), DataError);
  }
}

TEST_CASE("manifest parsing") {
  auto dir = temp_dir("manifests");
  auto path = dir / "m.jsonl";

  SECTION("well-formed lines group by split") {
    spit(path,
         R"({"id":"a","text":"one","caption":"c","label":1,"split":"train"})"
         "\n"
         R"({"id":"b","text":"two","label":0,"split":"train"})"
         "\n"
         R"({"id":"c","text":"three","label":1,"split":"dev"})"
         "\n"
         R"({"id":"d","text":"four","split":"test"})"
         "\n");
    Manifest man = parse_manifest(path);
    REQUIRE(man.samples.size() == 4);
    REQUIRE(man.stats["train"].sarcastic == 1);
    REQUIRE(man.stats["train"].non_sarcastic == 1);
    REQUIRE(man.stats["dev"].total() == 1);
    REQUIRE(man.stats["test"].unlabeled == 1);
    REQUIRE(man.split("train").size() == 2);
  }
  SECTION("duplicate id reports the line number") {
    spit(path,
         R"({"id":"a","text":"x","label":1,"split":"train"})"
         "\n"
         R"({"id":"a","text":"y","label":0,"split":"train"})"
         "\n");
    REQUIRE_THROWS_MATCHES(parse_manifest(path), DataError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("line 2") &&
                                                           Catch::Matchers::ContainsSubstring("duplicate")));
  }
  SECTION("unknown split is rejected") {
    spit(path, R"({"id":"a","text":"x","label":1,"split":"validation"})" "\n");
    REQUIRE_THROWS_AS(parse_manifest(path), DataError);
  }
  SECTION("malformed json reports the line number") {
    spit(path,
         R"({"id":"a","text":"x","label":1,"split":"train"})"
         "\n{oops\n");
    REQUIRE_THROWS_MATCHES(parse_manifest(path), DataError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("line 2")));
  }
  SECTION("missing label outside the test split is rejected") {
    spit(path, R"({"id":"a","text":"x","split":"train"})" "\n");
    REQUIRE_THROWS_AS(parse_manifest(path), DataError);
  }
  SECTION("labels other than 0/1 are rejected") {
    spit(path, R"({"id":"a","text":"x","label":2,"split":"train"})" "\n");
    REQUIRE_THROWS_AS(parse_manifest(path), DataError);
  }
  SECTION("empty file gives an empty dataset") {
    spit(path, "");
    Manifest man = parse_manifest(path);
    REQUIRE(man.samples.empty());
    REQUIRE(man.stats.empty());
  }
  SECTION("statistics are invariant under line reordering") {
    std::string l1 = R"({"id":"a","text":"x","label":1,"split":"train"})";
    std::string l2 = R"({"id":"b","text":"y","label":0,"split":"train"})";
    std::string l3 = R"({"id":"c","text":"z","label":1,"split":"dev"})";
    spit(path, l1 + "\n" + l2 + "\n" + l3 + "\n");
    Manifest fwd = parse_manifest(path);
    spit(path, l3 + "\n" + l1 + "\n" + l2 + "\n");
    Manifest rev = parse_manifest(path);
    REQUIRE(fwd.stats["train"].sarcastic == rev.stats["train"].sarcastic);
    REQUIRE(fwd.stats["train"].non_sarcastic == rev.stats["train"].non_sarcastic);
    REQUIRE(fwd.stats["dev"].total() == rev.stats["dev"].total());
  }
  SECTION("relative feature paths resolve against the manifest directory") {
    spit(path, R"({"id":"a","text":"x","label":1,"split":"train","region_features_path":"feat/a.ft"})" "\n");
    Manifest man = parse_manifest(path);
    REQUIRE(man.samples[0].region_features_path == (dir / "feat/a.ft").string());
  }
}

TEST_CASE("compute_metrics") {
  SECTION("perfect predictions") {
    MetricsReport m = compute_metrics({1, 0}, {1, 0});
    REQUIRE(m.accuracy == 1.0);
    REQUIRE(m.precision == 1.0);
    REQUIRE(m.recall == 1.0);
    REQUIRE(m.f1 == 1.0);
  }
  SECTION("hand confusion-matrix arithmetic") {
    // tp=3, fp=1, fn=2, tn=4
    std::vector<int> gold{1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
    std::vector<int> pred{1, 1, 1, 0, 0, 1, 0, 0, 0, 0};
    MetricsReport m = compute_metrics(pred, gold);
    REQUIRE(m.tp == 3);
    REQUIRE(m.fp == 1);
    REQUIRE(m.fn == 2);
    REQUIRE(m.tn == 4);
    REQUIRE_THAT(m.accuracy, Catch::Matchers::WithinAbs(0.7, 1e-4));
    REQUIRE_THAT(m.precision, Catch::Matchers::WithinAbs(0.75, 1e-4));
    REQUIRE_THAT(m.recall, Catch::Matchers::WithinAbs(0.6, 1e-4));
    REQUIRE_THAT(m.f1, Catch::Matchers::WithinAbs(0.6667, 1e-4));
  }
  SECTION("reported precision/recall pair reproduces the reported F1") {
    REQUIRE_THAT(f1_score(0.8767, 0.9043), Catch::Matchers::WithinAbs(0.8903, 0.0002));
  }
  SECTION("0/0 ratios collapse to zero") {
    MetricsReport m = compute_metrics({0, 0}, {0, 0});
    REQUIRE(m.accuracy == 1.0);
    REQUIRE(m.precision == 0.0);
    REQUIRE(m.recall == 0.0);
    REQUIRE(m.f1 == 0.0);
  }
  SECTION("matches a brute-force confusion count on random pairings") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 30; ++trial) {
      std::size_t n = 1 + rng() % 1000;
      std::vector<int> pred(n), gold(n);
      for (std::size_t i = 0; i < n; ++i) {
        pred[i] = static_cast<int>(rng() % 2);
        gold[i] = static_cast<int>(rng() % 2);
      }
      MetricsReport m = compute_metrics(pred, gold);
      std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (gold[i] == 1 && pred[i] == 1) ++tp;
        if (gold[i] == 0 && pred[i] == 1) ++fp;
        if (gold[i] == 1 && pred[i] == 0) ++fn;
        if (gold[i] == 0 && pred[i] == 0) ++tn;
      }
      REQUIRE(m.tp == tp);
      REQUIRE(m.fp == fp);
      REQUIRE(m.fn == fn);
      REQUIRE(m.tn == tn);
      REQUIRE(m.tp + m.fp + m.fn + m.tn == n);
      double p = tp + fp ? double(tp) / (tp + fp) : 0.0;
      double r = tp + fn ? double(tp) / (tp + fn) : 0.0;
      REQUIRE_THAT(m.f1, Catch::Matchers::WithinAbs(f1_score(p, r), 1e-12));
    }
  }
  SECTION("length mismatch is a contract error") {
    REQUIRE_THROWS_AS(compute_metrics({1}, {1, 0}), ContractError);
  }
  SECTION("macro averaging covers both classes") {
    MetricsReport m = compute_metrics({1, 1, 0, 0}, {1, 0, 1, 0}, true);
    REQUIRE_THAT(m.precision, Catch::Matchers::WithinAbs(0.5, 1e-12));
    REQUIRE_THAT(m.recall, Catch::Matchers::WithinAbs(0.5, 1e-12));
  }
}

TEST_CASE("synthetic dataset") {
  SECTION("fixed seed reproduces manifest and feature bytes") {
    SynthConfig sc;
    sc.n = 24;
    sc.seed = 99;
    auto d1 = temp_dir("synth_a"), d2 = temp_dir("synth_b");
    auto m1 = synth_dataset(sc, d1);
    auto m2 = synth_dataset(sc, d2);
    REQUIRE(slurp(m1) == slurp(m2));
    REQUIRE(slurp(d1 / "features" / "s0003.ft") == slurp(d2 / "features" / "s0003.ft"));
  }
  SECTION("class balance is exact and splits are 70/15/15") {
    SynthConfig sc;
    sc.n = 200;
    auto dir = temp_dir("synth_c");
    Manifest man = parse_manifest(synth_dataset(sc, dir));
    std::size_t pos = 0;
    for (const Sample& s : man.samples) pos += s.label == 1;
    REQUIRE(pos == 100);
    REQUIRE(man.split("train").size() == 140);
    REQUIRE(man.split("dev").size() == 30);
    REQUIRE(man.split("test").size() == 30);
  }
  SECTION("odd sample counts are rejected") {
    SynthConfig sc;
    sc.n = 9;
    REQUIRE_THROWS_AS(synth_dataset(sc, temp_dir("synth_d")), ConfigError);
  }
  SECTION("a text-only probe stays near chance") {
    SynthConfig sc;
    sc.n = 200;
    sc.seed = 4;
    Manifest man = parse_manifest(synth_dataset(sc, temp_dir("synth_e")));
    double acc = text_probe_accuracy(man);
    INFO("text probe accuracy " << acc);
    REQUIRE(acc <= 0.6);
  }
  SECTION("captions verbalize the region cluster") {
    SynthConfig sc;
    sc.n = 16;
    Manifest man = parse_manifest(synth_dataset(sc, temp_dir("synth_f")));
    for (const Sample& s : man.samples)
      REQUIRE((s.caption == "cluster a scene" || s.caption == "cluster b scene"));
  }
}
