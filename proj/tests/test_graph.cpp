#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "ifnet/grad_check.hpp"
#include "ifnet/graph.hpp"
#include "ifnet/kernels.hpp"
#include "test_util.hpp"

using namespace ifnet;
using G = Graph<double>;
using Var = G::Var;

namespace {

// Runs body once per available kernel backend.
template <typename F>
void for_each_backend(F&& body) {
  const auto before = kernels::active_backend();
  for (auto b : {kernels::Backend::Scalar, kernels::Backend::Avx2}) {
    if (!kernels::backend_supported(b)) continue;
    kernels::set_backend(b);
    CAPTURE(kernels::backend_name(b));
    body();
  }
  kernels::set_backend(before);
}

int checked_points = 0;
int total_points = 0;

void expect_grad_ok(const GradFn& fn, const Tensor<double>& point, double bound = 1e-4) {
  const auto r = grad_check(fn, point);
  ++total_points;
  if (r.status == GradCheckStatus::Ok) {
    ++checked_points;
    CHECK(r.max_relative_error < bound);
  }
}

}  // namespace

TEST_CASE("conv2d with identity-center kernel is the identity") {
  std::mt19937_64 rng(1);
  auto x = testing::random_tensor<double>(Shape{2, 1, 6, 5}, rng);
  Tensor<double> w(Shape{1, 1, 3, 3});
  w[4] = 1.0;
  for_each_backend([&] {
    G g;
    auto y = g.conv2d(g.bind(x), g.bind(w), 1, 1);
    CHECK(g.value(y).shape() == x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(g.value(y)[i] == x[i]);
  });
}

TEST_CASE("conv2d matches a direct convolution oracle with stride and padding") {
  std::mt19937_64 rng(2);
  auto x = testing::random_tensor<double>(Shape{2, 3, 7, 7}, rng);
  auto w = testing::random_tensor<double>(Shape{4, 3, 3, 3}, rng);
  for_each_backend([&] {
    G g;
    auto y = g.conv2d(g.bind(x), g.bind(w), 2, 1);
    const auto& out = g.value(y);
    REQUIRE(out.shape() == Shape{2, 4, 4, 4});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t o = 0; o < 4; ++o)
        for (std::size_t oy = 0; oy < 4; ++oy)
          for (std::size_t ox = 0; ox < 4; ++ox) {
            double acc = 0;
            for (std::size_t c = 0; c < 3; ++c)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int iy = static_cast<int>(oy) * 2 + ky - 1;
                  const int ix = static_cast<int>(ox) * 2 + kx - 1;
                  if (iy < 0 || ix < 0 || iy >= 7 || ix >= 7) continue;
                  acc += x[((b * 3 + c) * 7 + iy) * 7 + ix] * w[((o * 3 + c) * 3 + ky) * 3 + kx];
                }
            CHECK(out[((b * 4 + o) * 4 + oy) * 4 + ox] == doctest::Approx(acc).epsilon(1e-12));
          }
  });
}

TEST_CASE("l2_normalize of (3, 4) is (0.6, 0.8)") {
  Tensor<double> x(Shape{1, 2}, {3.0, 4.0});
  G g;
  auto y = g.l2_normalize(g.bind(x));
  CHECK(g.value(y)[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(g.value(y)[1] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("l2_normalize output norm is 1 above the floor and zero rows stay finite") {
  std::mt19937_64 rng(5);
  auto x = testing::random_tensor<float>(Shape{50, 16}, rng, -1e-3, 1e-3);
  Graph<float> g;
  auto y = g.l2_normalize(g.bind(x));
  for (std::size_t r = 0; r < 50; ++r) {
    double n = 0;
    for (std::size_t c = 0; c < 16; ++c) n += double(g.value(y)[r * 16 + c]) * g.value(y)[r * 16 + c];
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
  }
  Tensor<double> zero(Shape{1, 3});
  G g2;
  auto z = g2.l2_normalize(g2.bind(zero));
  for (double v : g2.value(z).values()) CHECK(v == 0.0);
}

TEST_CASE("relu of all-negative tensor is all zero") {
  Tensor<double> x(Shape{4}, {-1.0, -0.5, -3.0, -1e-9});
  G g;
  auto y = g.relu(g.bind(x));
  for (double v : g.value(y).values()) CHECK(v == 0.0);
}

TEST_CASE("backward of sum gives all-ones") {
  Tensor<double> x(Shape{2, 3}, {1, 2, 3, 4, 5, 6}, true);
  G g;
  g.backward(g.sum(g.bind(x)));
  for (double v : x.grad()) CHECK(v == 1.0);
}

TEST_CASE("l2_normalize backward with unit input and seed x is zero") {
  Tensor<double> x(Shape{1, 3}, {0.6, 0.0, 0.8}, true);
  G g;
  auto y = g.l2_normalize(g.bind(x));
  g.backward(y, Tensor<double>(Shape{1, 3}, {0.6, 0.0, 0.8}));
  for (double v : x.grad()) CHECK(std::abs(v) < 1e-15);
}

TEST_CASE("backward visits ops in exact reverse recording order") {
  std::mt19937_64 rng(9);
  auto x = testing::random_tensor<double>(Shape{3, 4}, rng);
  auto y = testing::random_tensor<double>(Shape{2, 4}, rng);
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  G g;
  auto d = g.pairwise_distance(g.l2_normalize(g.bind(x)), g.bind(y));
  auto loss = g.mean(g.relu(g.add_scalar(g.gather(d, {0, 3, 5}), 0.1)));
  g.backward(loss);
  auto ops = g.recorded_ops();
  std::reverse(ops.begin(), ops.end());
  CHECK(g.backward_trace() == ops);
}

TEST_CASE("error contracts") {
  Tensor<double> x(Shape{2, 3});
  Tensor<double> w(Shape{1, 2, 3, 3});
  G g;
  auto xv = g.bind(x);
  try {
    g.pairwise_distance(xv, g.bind(w));
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeMismatch);
    CHECK(std::string(e.what()).find("pairwise_distance") != std::string::npos);
  }
  CHECK_THROWS_AS(g.backward(xv), Error);  // non-scalar without seed

  G empty;
  CHECK_THROWS_AS(empty.backward(Var{}), Error);
  G other;
  auto stale = other.sum(other.bind(x));
  other.reset();
  try {
    other.backward(stale);
    FAIL("expected BackwardBeforeForward");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::BackwardBeforeForward);
  }
}

TEST_CASE("max/min route the subgradient to the lowest index among ties") {
  Tensor<double> x(Shape{5}, {1.0, 3.0, 0.5, 3.0, 0.5}, true);
  G g;
  g.backward(g.max(g.bind(x)));
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[3] == 0.0);
  CHECK(g.at_kink());
  x.zero_grad();
  G h;
  h.backward(h.min(h.bind(x)));
  CHECK(x.grad()[2] == 1.0);
  CHECK(x.grad()[4] == 0.0);
}

TEST_CASE("forward is deterministic") {
  std::mt19937_64 rng(11);
  auto x = testing::random_tensor<float>(Shape{3, 2, 8, 8}, rng);
  auto w = testing::random_tensor<float>(Shape{4, 2, 3, 3}, rng);
  auto run = [&] {
    Graph<float> g;
    auto y = g.l2_normalize(g.reshape(g.conv2d(g.bind(x), g.bind(w), 2, 1), Shape{3, 64}));
    return g.value(y);
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check: sum of squares below 1e-9") {
  std::mt19937_64 rng(13);
  for (int i = 0; i < 10; ++i) {
    auto p = testing::random_tensor<double>(Shape{6}, rng, -3, 3);
    const auto r = grad_check([](G& g, Var x) { return g.sum(g.square(x)); }, p);
    REQUIRE(r.status == GradCheckStatus::Ok);
    CHECK(r.max_relative_error < 1e-9);
  }
}

TEST_CASE("grad_check: hinge exactly at the boundary is skipped, not failed") {
  // m + d_ap - d_an = 1 + 0.5 - 1.5 = 0 exactly
  Tensor<double> p(Shape{2}, {0.5, 1.5});
  const auto r = grad_check(
      [](G& g, Var d) {
        auto ap = g.gather(d, {0});
        auto an = g.gather(d, {1});
        return g.sum(g.relu(g.sub(g.add_scalar(ap, 1.0), an)));
      },
      p);
  CHECK(r.status == GradCheckStatus::SkippedNondifferentiable);
}

TEST_CASE("grad_check rejects non-scalar functions") {
  Tensor<double> p(Shape{3}, {1, 2, 3});
  try {
    grad_check([](G& g, Var x) { return g.relu(x); }, p);
    FAIL("expected NonScalarOutput");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonScalarOutput);
  }
}

TEST_CASE("every primitive passes grad_check at 100 random points") {
  std::mt19937_64 rng(17);
  checked_points = total_points = 0;
  for_each_backend([&] {
    for (int trial = 0; trial < 100; ++trial) {
      // weighted sums keep the seed non-uniform so that every Jacobian entry matters
      auto probe = testing::random_vector<double>(64, rng);
      auto weighted = [probe](G& g, Var v) {
        const auto n = g.value(v).size();
        return g.sum(g.mul_elementwise(v, std::vector<double>(probe.begin(), probe.begin() + n)));
      };
      auto x4 = testing::random_tensor<double>(Shape{2, 2, 4, 4}, rng);
      auto w4 = testing::random_tensor<double>(Shape{2, 2, 3, 3}, rng);
      auto x2 = testing::random_tensor<double>(Shape{3, 4}, rng);
      auto y2 = testing::random_tensor<double>(Shape{2, 4}, rng);

      expect_grad_ok([&](G& g, Var x) { return weighted(g, g.conv2d(x, g.bind(w4), 1, 1)); }, x4);
      expect_grad_ok([&](G& g, Var w) { return weighted(g, g.conv2d(g.bind(x4), w, 2, 1)); }, w4);
      expect_grad_ok(
          [&](G& g, Var x) {
            Tensor<double> wa(Shape{3, 4}, std::vector<double>(probe.begin(), probe.begin() + 12));
            Tensor<double> ba(Shape{3}, {0.1, -0.2, 0.3});
            return weighted(g, g.affine(x, g.constant(wa), g.constant(ba)));
          },
          x2);
      expect_grad_ok(
          [&](G& g, Var x) {
            BatchNormState<double> bn(2);
            return weighted(g, g.batch_norm(x, bn, true, 0.1));
          },
          x4);
      expect_grad_ok(
          [&](G& g, Var x) {
            BatchNormState<double> bn(2);
            bn.running_mean[0] = 0.3;
            bn.running_var[1] = 2.0;
            return weighted(g, g.batch_norm(x, bn, false, 0.1));
          },
          x4);
      expect_grad_ok([&](G& g, Var x) { return weighted(g, g.relu(x)); }, x2);
      expect_grad_ok([&](G& g, Var x) { return weighted(g, g.l2_normalize(x)); }, x2);
      expect_grad_ok([&](G& g, Var x) { return g.mean(g.square(x)); }, x2);
      expect_grad_ok([&](G& g, Var x) { return g.max(x); }, x2);
      expect_grad_ok([&](G& g, Var x) { return g.min(x); }, x2);
      expect_grad_ok([&](G& g, Var x) { return weighted(g, g.pairwise_distance(x, g.bind(y2))); },
                     x2);
      expect_grad_ok([&](G& g, Var y) { return weighted(g, g.pairwise_distance(g.bind(x2), y)); },
                     y2);
      expect_grad_ok(
          [&](G& g, Var x) {
            auto a = g.gather_rows(x, {0, 2});
            auto c = g.gather_rows(x, {1, 2, 0, 1});
            return weighted(g, g.grouped_distance(a, c, 2));
          },
          x2);
      expect_grad_ok(
          [&](G& g, Var x) {
            auto a = g.gather(x, {0, 5, 7});
            auto b = g.gather(x, {2, 5, 11});
            return weighted(g, g.add(g.mul_scalar(a, 3.0), g.sub(b, g.add_scalar(a, 2.0))));
          },
          x2);
      expect_grad_ok([&](G& g, Var x) { return weighted(g, g.reshape(x, Shape{4, 3})); }, x2);
    }
  });
  // random points essentially never sit exactly on a kink
  CHECK(checked_points == total_points);
}
