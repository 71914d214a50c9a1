#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "mmsd/gradcheck.hpp"
#include "mmsd/tensor.hpp"

using namespace mmsd;

namespace {

// Naive triple-loop reference for matrix products.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      out.mutable_values()[i * n + j] = s;
    }
  return out;
}

void require_close(const Tensor& got, const Tensor& want, double tol) {
  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.numel(); ++i) REQUIRE_THAT(got[i], Catch::Matchers::WithinAbs(want[i], tol));
}

}  // namespace

TEST_CASE("matmul") {
  Tape t;
  SECTION("identity") {
    Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
    Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
    require_close(matmul(t, eye, b), b, 0.0);
  }
  SECTION("annihilation") {
    Tensor z = Tensor::zeros({2, 3});
    Tensor b = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
    require_close(matmul(t, z, b), Tensor::zeros({2, 2}), 0.0);
  }
  SECTION("against triple-loop oracle") {
    Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
    Tensor got = matmul(t, a, b);
    require_close(got, Tensor::matrix({{19, 22}, {43, 50}}), 0.0);
    require_close(got, matmul_oracle(a, b), 0.0);

    std::mt19937_64 rng(11);
    Tensor ra = uniform({5, 7}, -2, 2, rng);
    Tensor rb = uniform({7, 3}, -2, 2, rng);
    require_close(matmul(t, ra, rb), matmul_oracle(ra, rb), 1e-12);
  }
  SECTION("shape mismatch reports both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    REQUIRE_THROWS_MATCHES(matmul(t, a, b), ShapeError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("[2x3]")));
  }
}

TEST_CASE("softmax_rows") {
  Tape t;
  SECTION("uniform input") {
    require_close(softmax_rows(t, Tensor::matrix({{0, 0}})), Tensor::matrix({{0.5, 0.5}}), 1e-15);
  }
  SECTION("analytic log-odds") {
    require_close(softmax_rows(t, Tensor::matrix({{0, std::log(3.0)}})), Tensor::matrix({{0.25, 0.75}}), 1e-12);
  }
  SECTION("shift invariance and row sums") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = uniform({4, 6}, -5, 5, rng);
      double c = std::uniform_real_distribution<double>(-10, 10)(rng);
      Tensor shifted = add_scalar(t, x, c);
      require_close(softmax_rows(t, shifted), softmax_rows(t, x), 1e-12);
      Tensor y = softmax_rows(t, x);
      for (std::size_t i = 0; i < 4; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 6; ++j) s += y.at(i, j);
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-9));
      }
    }
  }
  SECTION("empty rows are unconstructible") {
    REQUIRE_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
  }
  SECTION("masked columns receive zero weight") {
    Tensor x = Tensor::matrix({{5, 1, 3}, {0, 9, 2}});
    Tensor y = softmax_rows_masked(t, x, {1, 0, 1});
    for (std::size_t i = 0; i < 2; ++i) {
      REQUIRE(y.at(i, 1) == 0.0);
      REQUIRE_THAT(y.at(i, 0) + y.at(i, 2), Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
  }
}

TEST_CASE("elementwise activations") {
  Tape t;
  Tensor x = Tensor::matrix({{0, 1, -2, 3}});
  require_close(tanh_op(t, x), Tensor::matrix({{0, 0.7615941559557649, std::tanh(-2.0), std::tanh(3.0)}}), 1e-6);
  Tensor s = sigmoid(t, Tensor::matrix({{0}}));
  REQUIRE(s[0] == 0.5);
  Tensor r = relu(t, x);
  require_close(r, Tensor::matrix({{0, 1, 0, 3}}), 0.0);
  REQUIRE_THROWS_AS(activation_from_name("swish"), ConfigError);
}

TEST_CASE("layer_norm") {
  Tape t;
  Tensor gain1 = Tensor::full({4}, 1.0);
  Tensor bias0 = Tensor::zeros({4});
  SECTION("constant row") {
    require_close(layer_norm(t, Tensor::matrix({{1, 1, 1, 1}}), gain1, bias0), Tensor::zeros({1, 4}), 1e-12);
  }
  SECTION("hand mean/variance arithmetic") {
    Tensor g = Tensor::full({2}, 1.0);
    Tensor b = Tensor::zeros({2});
    require_close(layer_norm(t, Tensor::matrix({{1, 3}}), g, b), Tensor::matrix({{-1, 1}}), 1e-6);
  }
  SECTION("zero gain yields broadcast bias") {
    std::mt19937_64 rng(5);
    Tensor x = uniform({3, 4}, -1, 1, rng);
    Tensor b = uniform({4}, -1, 1, rng);
    Tensor y = layer_norm(t, x, Tensor::zeros({4}), b);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) REQUIRE(y.at(i, j) == b[j]);
  }
  SECTION("zero variance handled by eps") {
    REQUIRE_NOTHROW(layer_norm(t, Tensor::matrix({{2, 2, 2, 2}}), gain1, bias0));
  }
}

TEST_CASE("reduce_max_cols") {
  Tape t;
  require_close(reduce_max_cols(t, Tensor::matrix({{1, 5}, {3, 2}})), Tensor::from_data({2}, {3, 5}), 0.0);
  Tensor row = Tensor::matrix({{4, -1, 7}});
  require_close(reduce_max_cols(t, row), Tensor::from_data({3}, {4, -1, 7}), 0.0);

  std::mt19937_64 rng(7);
  Tensor x = uniform({5, 7}, -3, 3, rng);
  Tensor got = reduce_max_cols(t, x);
  for (std::size_t j = 0; j < 7; ++j) {
    double best = x.at(0, j);
    for (std::size_t i = 1; i < 5; ++i) best = std::max(best, x.at(i, j));
    REQUIRE(got[j] == best);
  }
}

TEST_CASE("avg_pool_axis") {
  Tape t;
  SECTION("constant input") {
    Tensor x = Tensor::full({2, 3, 4}, 1.0);
    require_close(avg_pool_axis(t, x, SpatialAxis::Width), Tensor::full({2, 3, 1}, 1.0), 0.0);
    require_close(avg_pool_axis(t, x, SpatialAxis::Height), Tensor::full({2, 1, 4}, 1.0), 0.0);
  }
  SECTION("two-point mean") {
    Tensor x = Tensor::from_data({1, 1, 2}, {1, 3});
    REQUIRE(avg_pool_axis(t, x, SpatialAxis::Width)[0] == 2.0);
  }
  SECTION("against naive summation oracle") {
    std::mt19937_64 rng(9);
    Tensor x = uniform({3, 5, 7}, -2, 2, rng);
    Tensor pw = avg_pool_axis(t, x, SpatialAxis::Width);
    Tensor ph = avg_pool_axis(t, x, SpatialAxis::Height);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t h = 0; h < 5; ++h) {
        double s = 0;
        for (std::size_t w = 0; w < 7; ++w) s += x.at(c, h, w);
        REQUIRE_THAT(pw.at(c, h, 0), Catch::Matchers::WithinAbs(s / 7.0, 1e-12));
      }
      for (std::size_t w = 0; w < 7; ++w) {
        double s = 0;
        for (std::size_t h = 0; h < 5; ++h) s += x.at(c, h, w);
        REQUIRE_THAT(ph.at(c, 0, w), Catch::Matchers::WithinAbs(s / 5.0, 1e-12));
      }
    }
  }
}

TEST_CASE("concat and slicing") {
  Tape t;
  std::mt19937_64 rng(13);
  SECTION("singleton") {
    Tensor a = uniform({2, 3}, -1, 1, rng);
    require_close(concat(t, {a}, 0), a, 0.0);
  }
  SECTION("two rows along last axis") {
    Tensor a = uniform({1, 4}, -1, 1, rng);
    Tensor b = uniform({1, 4}, -1, 1, rng);
    Tensor c = concat(t, {a, b}, 1);
    REQUIRE(c.shape() == Shape{1, 8});
  }
  SECTION("slice-back round trip") {
    Tensor a = uniform({3, 2}, -1, 1, rng);
    Tensor b = uniform({3, 5}, -1, 1, rng);
    Tensor c = concat(t, {a, b}, 1);
    require_close(slice_cols(t, c, 0, 2), a, 0.0);
    require_close(slice_cols(t, c, 2, 7), b, 0.0);

    Tensor d = concat(t, {a, a}, 0);
    require_close(slice_rows(t, d, 3, 6), a, 0.0);
  }
  SECTION("off-axis mismatch") {
    REQUIRE_THROWS_AS(concat(t, {Tensor::zeros({2, 3}), Tensor::zeros({2, 4})}, 0), ShapeError);
  }
}

TEST_CASE("backward") {
  SECTION("sum gives all-ones gradient") {
    Tape t;
    std::mt19937_64 rng(17);
    Tensor x = uniform({3, 4}, -1, 1, rng).set_requires_grad(true);
    Tensor loss = sum_all(t, x);
    t.backward(loss);
    for (double g : x.grad()) REQUIRE(g == 1.0);
  }
  SECTION("half sum of squares gives x") {
    Tape t;
    std::mt19937_64 rng(19);
    Tensor x = uniform({2, 5}, -1, 1, rng).set_requires_grad(true);
    Tensor loss = scale(t, sum_all(t, mul(t, x, x)), 0.5);
    t.backward(loss);
    for (std::size_t i = 0; i < x.numel(); ++i) REQUIRE_THAT(x.grad()[i], Catch::Matchers::WithinAbs(x[i], 1e-15));
  }
  SECTION("additive accumulation") {
    std::mt19937_64 rng(23);
    Tensor x = uniform({4}, -1, 1, rng).set_requires_grad(true);

    Tape t1;
    Tensor l1 = sum_all(t1, mul(t1, x, x));
    Tensor l2 = sum_all(t1, x);
    t1.backward(l1);
    t1.backward(l2);
    std::vector<double> accumulated(x.grad().begin(), x.grad().end());

    x.zero_grad();
    Tape t2;
    Tensor joint = add(t2, sum_all(t2, mul(t2, x, x)), sum_all(t2, x));
    t2.backward(joint);
    for (std::size_t i = 0; i < 4; ++i)
      REQUIRE_THAT(accumulated[i], Catch::Matchers::WithinAbs(x.grad()[i], 1e-12));
  }
  SECTION("non-scalar loss rejected") {
    Tape t;
    Tensor x = Tensor::zeros({2, 2}).set_requires_grad(true);
    Tensor y = add_scalar(t, x, 1.0);
    REQUIRE_THROWS_AS(t.backward(y), ContractError);
  }
  SECTION("non-participating tensors report zero gradient") {
    Tape t;
    Tensor x = Tensor::full({3}, 2.0).set_requires_grad(true);
    Tensor bystander = Tensor::full({3}, 5.0).set_requires_grad(true);
    t.backward(sum_all(t, x));
    for (double g : bystander.grad()) REQUIRE(g == 0.0);
  }
}

TEST_CASE("forward determinism") {
  std::mt19937_64 rng(29);
  Tensor a = uniform({4, 4}, -2, 2, rng);
  Tensor b = uniform({4, 4}, -2, 2, rng);
  Tape t;
  Tensor y1 = softmax_rows(t, matmul(t, a, b));
  Tensor y2 = softmax_rows(t, matmul(t, a, b));
  for (std::size_t i = 0; i < y1.numel(); ++i) REQUIRE(y1[i] == y2[i]);
}

TEST_CASE("non-finite forward values are rejected") {
  Tape t;
  REQUIRE_THROWS_AS(log_op(t, Tensor::zeros({2})), NumericError);
}

TEST_CASE("dropout") {
  Tape t;
  std::mt19937_64 rng(31);
  Tensor x = Tensor::full({100}, 1.0).set_requires_grad(true);
  Tensor kept = dropout(t, x, 0.0, rng);
  REQUIRE(kept.same_node(x));
  Tensor y = dropout(t, x, 0.5, rng);
  for (double v : y.values()) REQUIRE((v == 0.0 || v == 2.0));
}

TEST_CASE("embed") {
  Tape t;
  Tensor table = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}).set_requires_grad(true);
  Tensor out = embed(t, table, {2, 0, 2});
  require_close(out, Tensor::matrix({{5, 6}, {1, 2}, {5, 6}}), 0.0);
  t.backward(sum_all(t, out));
  REQUIRE(table.grad()[0] == 1.0);  // row 0 used once
  REQUIRE(table.grad()[4] == 2.0);  // row 2 used twice
  REQUIRE(table.grad()[2] == 0.0);  // row 1 unused
  REQUIRE_THROWS_AS(embed(t, table, {3}), DataError);
  REQUIRE_THROWS_AS(embed(t, table, {-1}), DataError);
}

TEST_CASE("finite_diff_check on sum of squares is exact to roundoff") {
  std::mt19937_64 rng(37);
  Tensor theta = uniform({3, 3}, -2, 2, rng);
  auto f = [&](Tape& tape) { return sum_all(tape, mul(tape, theta, theta)); };
  auto report = finite_diff_check(f, {{"theta", theta}}, 1e-5);
  REQUIRE(report.entries_checked == 9);
  REQUIRE(report.max_rel_error < 1e-8);
}

// Every registered op's gradient against central differences on random,
// kink-free inputs.
TEST_CASE("per-op gradients match finite differences") {
  std::mt19937_64 rng(41);
  auto check = [&](const char* name, auto&& build, std::vector<std::pair<std::string, Tensor>> params) {
    ScalarFn f = [&](Tape& tape) { return sum_all(tape, build(tape)); };
    for (int attempt = 0;; ++attempt) {
      REQUIRE(attempt < 20);
      if (probe_kink_gap(f) > 1e-3) break;
      for (auto& [n, p] : params) {
        Tensor fresh = uniform(p.shape(), -1.5, 1.5, rng);
        std::copy(fresh.values().begin(), fresh.values().end(), p.mutable_values().begin());
      }
    }
    auto report = finite_diff_check(f, params, 1e-5);
    INFO(name << ": " << report.describe());
    REQUIRE(report.max_rel_error < 1e-4);
  };

  Tensor a = uniform({3, 4}, -1.5, 1.5, rng);
  Tensor b = uniform({4, 2}, -1.5, 1.5, rng);
  check("matmul", [&](Tape& t) { return matmul(t, a, b); }, {{"a", a}, {"b", b}});

  Tensor x34 = uniform({3, 4}, -1.5, 1.5, rng);
  Tensor x34b = uniform({3, 4}, -1.5, 1.5, rng);
  check("add", [&](Tape& t) { return mul(t, add(t, x34, x34b), x34); }, {{"x", x34}, {"y", x34b}});
  check("transpose", [&](Tape& t) { return matmul(t, transpose(t, x34), x34b); }, {{"x", x34}});
  check("softmax_rows", [&](Tape& t) { return mul(t, softmax_rows(t, x34), x34b); }, {{"x", x34}});
  check("softmax_rows_masked",
        [&](Tape& t) { return mul(t, softmax_rows_masked(t, x34, {1, 0, 1, 1}), x34b); }, {{"x", x34}});
  check("tanh", [&](Tape& t) { return tanh_op(t, x34); }, {{"x", x34}});
  check("sigmoid", [&](Tape& t) { return sigmoid(t, x34); }, {{"x", x34}});
  check("relu", [&](Tape& t) { return mul(t, relu(t, x34), x34b); }, {{"x", x34}});
  check("gelu", [&](Tape& t) { return gelu(t, x34); }, {{"x", x34}});
  check("scale+add_scalar", [&](Tape& t) { return add_scalar(t, scale(t, x34, 2.5), 1.0); }, {{"x", x34}});

  Tensor gain = uniform({4}, 0.5, 1.5, rng);
  Tensor bias = uniform({4}, -0.5, 0.5, rng);
  check("layer_norm", [&](Tape& t) { return mul(t, layer_norm(t, x34, gain, bias), x34b); },
        {{"x", x34}, {"gain", gain}, {"bias", bias}});
  check("add_row_vector", [&](Tape& t) { return mul(t, add_row_vector(t, x34, bias), x34b); },
        {{"x", x34}, {"b", bias}});
  check("reduce_max_cols", [&](Tape& t) { return mul(t, reduce_max_cols(t, x34), bias); }, {{"x", x34}});

  Tensor cube = uniform({2, 3, 3}, -1.5, 1.5, rng);
  check("avg_pool_w", [&](Tape& t) { return avg_pool_axis(t, cube, SpatialAxis::Width); }, {{"x", cube}});
  check("avg_pool_h", [&](Tape& t) { return avg_pool_axis(t, cube, SpatialAxis::Height); }, {{"x", cube}});

  Tensor gate_h = uniform({2, 3, 1}, 0.1, 0.9, rng);
  Tensor gate_w = uniform({2, 1, 3}, 0.1, 0.9, rng);
  check("mul_broadcast",
        [&](Tape& t) { return mul_broadcast(t, mul_broadcast(t, cube, gate_h), gate_w); },
        {{"x", cube}, {"gh", gate_h}, {"gw", gate_w}});

  check("concat+slice",
        [&](Tape& t) {
          Tensor c = concat(t, {x34, x34b}, 1);
          return mul(t, slice_cols(t, c, 2, 6), x34);
        },
        {{"x", x34}, {"y", x34b}});
  check("reshape", [&](Tape& t) { return matmul(t, reshape(t, x34, {4, 3}), x34b); }, {{"x", x34}});
  check("log(clamp)",
        [&](Tape& t) { return log_op(t, clamp(t, sigmoid(t, x34), 1e-12, 1.0 - 1e-12)); }, {{"x", x34}});
}
