#include "scenepred/numerics/adam.hpp"
#include "scenepred/numerics/checkpoint.hpp"
#include "scenepred/numerics/graph.hpp"
#include "scenepred/numerics/mlp.hpp"
#include "support/gradcheck.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

using namespace scenepred;
using nn::Graph;
using nn::ParameterSet;
using nn::Tensor;
using nn::Var;
using testing::gradient_error;
using testing::random_tensor;

TEST_CASE("tensor construction") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t(1, 2) == 6);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), nn::ShapeError);
  CHECK_THROWS_AS(Tensor::from_external({1, 2}, {1.0, std::numeric_limits<double>::quiet_NaN()}), nn::NumericError);
  CHECK_THROWS_AS(Tensor::from_external({1, 1}, {std::numeric_limits<double>::infinity()}), nn::NumericError);
  CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), nn::ShapeError);
}

TEST_CASE("forward examples") {
  Graph g;
  const Var a = g.input(Tensor::matrix({{1, 2}, {3, 4}}));
  const Var b = g.input(Tensor::matrix({{1}, {1}}));
  const Tensor& m = g.value(g.matmul(a, b));
  CHECK(m(0, 0) == 3);
  CHECK(m(1, 0) == 7);

  CHECK(g.value(g.tanh(g.input(Tensor::scalar(0.0)))).item() == 0.0);
  const Tensor& s = g.value(g.softmax(g.input(Tensor::matrix({{0, 0}}))));
  CHECK(s(0, 0) == doctest::Approx(0.5));
  CHECK(s(0, 1) == doctest::Approx(0.5));

  const Tensor& big = g.value(g.softmax(g.input(Tensor::matrix({{1000, 0}}))));
  CHECK(std::isfinite(big(0, 0)));
  CHECK(big(0, 0) == doctest::Approx(1.0));
  CHECK(big(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("shape mismatch names the op") {
  Graph g;
  const Var a = g.input(Tensor(2, 3));
  const Var b = g.input(Tensor(2, 3));
  try {
    g.matmul(a, b);
    FAIL("expected a shape error");
  } catch (const nn::ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("2x3") != std::string::npos);
  }
  CHECK_THROWS_AS(g.add(a, g.input(Tensor(3, 2))), nn::ShapeError);
  CHECK_THROWS_AS(g.slice(a, 2, 5), nn::ShapeError);
}

TEST_CASE("softmax rows are distributions") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    Graph g;
    const Tensor& p = g.value(g.softmax(g.input(random_tensor(4, 6, rng, -30, 30))));
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        CHECK(p(r, c) >= 0.0);
        sum += p(r, c);
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("masked softmax zeroes excluded entries") {
  Graph g;
  Tensor mask = Tensor::matrix({{1, 0, 1}});
  const Tensor& p = g.value(g.softmax(g.input(Tensor::matrix({{0.0, 50.0, 0.0}})), mask));
  CHECK(p(0, 1) == 0.0);
  CHECK(p(0, 0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(g.softmax(g.input(Tensor::matrix({{1.0, 2.0}})), Tensor::matrix({{0, 0}})), nn::NumericError);
}

TEST_CASE("backward basics") {
  ParameterSet p{{"x", Tensor::scalar(3.0)}};
  Graph g;
  const Var x = g.parameter(p, "x");
  const auto grads = g.backward(g.square(x));
  CHECK(grads.at("x").item() == doctest::Approx(6.0));

  ParameterSet q{{"w", Tensor::scalar(2.0)}, {"unused", Tensor(2, 2, 1.0)}};
  Graph h;
  h.parameter(q, "w");
  h.parameter(q, "unused");
  const auto zero = h.backward(h.input(Tensor::scalar(5.0)));
  CHECK(zero.at("w").item() == 0.0);
  for (double v : zero.at("unused").values()) CHECK(v == 0.0);

  Graph k;
  const Var w = k.parameter(q, "unused");
  CHECK_THROWS_AS(k.backward(w), nn::ShapeError);
}

TEST_CASE("forward is deterministic") {
  std::mt19937_64 rng(11);
  ParameterSet p{{"W", random_tensor(5, 4, rng)}};
  const Tensor x = random_tensor(3, 5, rng);
  auto run = [&] {
    Graph g;
    return g.value(g.softmax(g.tanh(g.matmul(g.input(x), g.parameter(p, "W"))))).storage();
  };
  CHECK(run() == run());
}

namespace {

// One random instance per op family; each returns a scalar built from parameters "a" (and "b").
double op_error(int op, std::mt19937_64& rng) {
  ParameterSet p;
  testing::Builder build;
  std::uniform_int_distribution<int> dim(1, 4);
  const std::size_t r = static_cast<std::size_t>(dim(rng)), c = static_cast<std::size_t>(dim(rng)) + 1;
  switch (op) {
    case 0:  // sum(tanh(W x))
      p = {{"a", random_tensor(c, 3, rng)}, {"b", random_tensor(r, c, rng)}};
      build = [](Graph& g, const ParameterSet& ps) { return g.sum(g.tanh(g.matmul(g.parameter(ps, "b"), g.parameter(ps, "a")))); };
      break;
    case 1:  // broadcast add, sub, mul, scale
      p = {{"a", random_tensor(r, c, rng)}, {"b", random_tensor(1, c, rng)}};
      build = [](Graph& g, const ParameterSet& ps) {
        const Var a = g.parameter(ps, "a"), b = g.parameter(ps, "b");
        return g.mean(g.mul(g.add(a, b), g.scale(g.sub(a, g.tanh(g.add(a, b))), 1.7)));
      };
      break;
    case 2:  // exp, log, square, row_sum
      p = {{"a", random_tensor(r, c, rng, 0.2, 2.0)}};
      build = [](Graph& g, const ParameterSet& ps) {
        const Var a = g.parameter(ps, "a");
        return g.sum(g.square(g.row_sum(g.add(g.log(a), g.exp(g.scale(a, 0.5))))));
      };
      break;
    case 3:  // concat + slice
      p = {{"a", random_tensor(r, c, rng)}, {"b", random_tensor(r, 2, rng)}};
      build = [](Graph& g, const ParameterSet& ps) {
        const Var parts[] = {g.parameter(ps, "a"), g.tanh(g.parameter(ps, "b"))};
        const Var cat = g.concat(parts);
        return g.sum(g.square(g.slice(cat, 1, 3)));
      };
      break;
    case 4: {  // masked softmax / log_softmax
      p = {{"a", random_tensor(r, c + 1, rng, -3, 3)}, {"b", random_tensor(r, c + 1, rng)}};
      Tensor mask(r, c + 1, 1.0);
      for (std::size_t i = 0; i < r; ++i) mask(i, i % (c + 1)) = 0.0;
      build = [mask](Graph& g, const ParameterSet& ps) {
        const Var a = g.parameter(ps, "a"), b = g.parameter(ps, "b");
        return g.add(g.sum(g.mul(g.softmax(a, mask), b)), g.sum(g.mul(g.log_softmax(a, mask), g.softmax(b, mask))));
      };
      break;
    }
    case 5:  // gaussian log-density
      p = {{"a", random_tensor(r, c, rng)}, {"b", random_tensor(r, c, rng)}, {"s", random_tensor(r, c, rng, -1, 1)}};
      build = [](Graph& g, const ParameterSet& ps) {
        return g.sum(g.gaussian_log_density(g.parameter(ps, "a"), g.parameter(ps, "b"), g.parameter(ps, "s")));
      };
      break;
    case 6:  // KL to standard normal
      p = {{"a", random_tensor(r, c, rng)}, {"b", random_tensor(r, c, rng, -2, 1)}};
      build = [](Graph& g, const ParameterSet& ps) { return g.sum(g.kl_std_normal(g.parameter(ps, "a"), g.parameter(ps, "b"))); };
      break;
    case 7: {  // gmm2d log-density, M = 2
      p = {{"a", random_tensor(r, 12, rng)}, {"b", random_tensor(r, 2, rng, -2, 2)}};
      build = [](Graph& g, const ParameterSet& ps) {
        return g.sum(g.gmm2d_log_density(g.parameter(ps, "a"), g.parameter(ps, "b"), 2, 1e-3));
      };
      break;
    }
    case 8: {  // weighted log-sum-exp with a one-hot weight
      p = {{"a", random_tensor(r, c, rng, -5, 5)}};
      Tensor w(r, c, 0.0);
      for (std::size_t i = 0; i < r; ++i) {
        w(i, i % c) = 1.0;
        w(i, (i + 1) % c) = 0.5;
      }
      build = [w](Graph& g, const ParameterSet& ps) { return g.sum(g.log_weighted_sum_exp(g.parameter(ps, "a"), g.input(w))); };
      break;
    }
    default: {  // dropout with a fixed mask
      p = {{"a", random_tensor(r, c, rng)}};
      const std::uint64_t seed = rng();
      build = [seed](Graph& g, const ParameterSet& ps) {
        std::mt19937_64 local(seed);
        return g.sum(g.square(g.dropout(g.parameter(ps, "a"), 0.3, local)));
      };
    }
  }
  return gradient_error(p, build);
}

}  // namespace

TEST_CASE("every op matches central differences on 100 instances") {
  std::mt19937_64 rng(2024);
  for (int op = 0; op <= 9; ++op) {
    CAPTURE(op);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) worst = std::max(worst, op_error(op, rng));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("dropout scales kept entries") {
  std::mt19937_64 rng(5);
  Graph g;
  const Tensor& y = g.value(g.dropout(g.input(Tensor(200, 50, 1.0)), 0.2, rng));
  std::size_t kept = 0;
  for (double v : y.values()) {
    CHECK((v == 0.0 || std::abs(v - 1.25) < 1e-12));
    kept += v != 0.0;
  }
  CHECK(std::abs(static_cast<double>(kept) / 10000.0 - 0.8) < 0.02);
}

TEST_CASE("adam step examples") {
  nn::Adam adam(nn::AdamConfig{0.1});
  ParameterSet p{{"x", Tensor::scalar(1.0)}, {"y", Tensor::scalar(5.0)}};
  adam.step(p, {{"x", Tensor::scalar(1.0)}, {"y", Tensor::scalar(0.0)}});
  CHECK(p.at("x").item() == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p.at("y").item() == 5.0);
  CHECK(adam.step_count() == 1);

  adam.step(p, {{"x", Tensor::scalar(1.0)}, {"y", Tensor::scalar(0.0)}});
  CHECK(p.at("x").item() == doctest::Approx(0.8).epsilon(1e-6));
  CHECK(adam.step_count() == 2);

  ParameterSet before = p;
  CHECK_THROWS_AS(adam.step(p, {{"x", Tensor::scalar(std::numeric_limits<double>::quiet_NaN())}}), nn::NumericError);
  CHECK(p.at("x").item() == before.at("x").item());
  try {
    adam.step(p, {{"y", Tensor::scalar(std::numeric_limits<double>::infinity())}});
  } catch (const nn::NumericError& e) {
    CHECK(std::string(e.what()).find("'y'") != std::string::npos);
  }
}

TEST_CASE("adam state round trip") {
  std::mt19937_64 rng(9);
  ParameterSet p{{"w", random_tensor(3, 3, rng)}};
  nn::Adam a;
  for (int i = 0; i < 3; ++i) a.step(p, {{"w", random_tensor(3, 3, rng)}});
  nn::Adam b;
  b.import_state(a.export_state(), a.step_count());
  ParameterSet pa = p, pb = p;
  const nn::Gradients g{{"w", random_tensor(3, 3, rng)}};
  a.step(pa, g);
  b.step(pb, g);
  CHECK(pa.at("w").storage() == pb.at("w").storage());
}

TEST_CASE("mlp infer matches graph forward") {
  std::mt19937_64 rng(17);
  nn::Mlp mlp{"m", {5, 8, 8, 3}};
  ParameterSet p;
  mlp.init(p, rng);
  const Tensor x = random_tensor(4, 5, rng);
  Graph g;
  const Tensor& y = g.value(mlp.forward(g, p, g.input(x)));
  const nn::RowMatrix z = mlp.infer(p, x.mat());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(y(i, j) - z(i, j)) < 1e-12);
  CHECK_THROWS_AS(mlp.infer(p, nn::RowMatrix::Zero(2, 4)), nn::ShapeError);

  const double err = gradient_error(p, [&](Graph& h, const ParameterSet& ps) {
    return h.mean(h.square(mlp.forward(h, ps, h.input(x))));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("tensor checkpoint round trip is exact") {
  std::mt19937_64 rng(23);
  ParameterSet p{{"b", random_tensor(1, 7, rng)}, {"a", random_tensor(3, 2, rng, -1e6, 1e6)}};
  p.at("a")(0, 0) = 1e-300;
  const auto dir = std::filesystem::temp_directory_path() / "scenepred_test_ckpt";
  std::filesystem::create_directories(dir);
  nn::save_tensors(dir / "t.json", p);
  const auto q = nn::load_tensors(dir / "t.json");
  REQUIRE(q.size() == 2);
  for (const auto& [name, t] : p) {
    CHECK(q.at(name).shape() == t.shape());
    CHECK(q.at(name).storage() == t.storage());
  }
  CHECK_THROWS_AS(nn::load_tensors(dir / "missing.json"), io::IoError);
  io::write_text_atomic(dir / "bad.json", R"({"format": "other"})");
  CHECK_THROWS(nn::load_tensors(dir / "bad.json"));
  std::filesystem::remove_all(dir);
}
