#include "ifnet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ifnet {
namespace {

struct Evaluation {
  double value;
  std::uint64_t signature;
};

Evaluation evaluate(const GradFnLeaves& fn) {
  Graph<double> g;
  auto out = fn(g);
  const auto& v = g.value(out);
  if (v.size() != 1)
    fail(ErrorKind::NonScalarOutput, "grad_check needs a scalar function, got shape " +
                                         shape_string(v.shape()));
  return {v[0], g.branch_signature()};
}

}  // namespace

GradCheckResult grad_check(const GradFnLeaves& fn, const std::vector<Tensor<double>*>& leaves,
                           double step, std::size_t max_coords_per_tensor, std::uint64_t seed) {
  for (auto* t : leaves) t->set_requires_grad(true);

  Graph<double> g;
  auto out = fn(g);
  if (g.value(out).size() != 1)
    fail(ErrorKind::NonScalarOutput, "grad_check needs a scalar function, got shape " +
                                         shape_string(g.value(out).shape()));
  GradCheckResult result;
  if (g.at_kink()) {
    result.status = GradCheckStatus::SkippedNondifferentiable;
    return result;
  }
  const std::uint64_t base_signature = g.branch_signature();
  g.backward(out);

  std::mt19937_64 rng(seed);
  for (auto* t : leaves) {
    const std::vector<double> analytic(t->grad().begin(), t->grad().end());
    std::vector<std::size_t> coords(t->size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords_per_tensor != 0 && coords.size() > max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      const double original = (*t)[c];
      (*t)[c] = original + step;
      const auto plus = evaluate(fn);
      (*t)[c] = original - step;
      const auto minus = evaluate(fn);
      (*t)[c] = original;
      if (plus.signature != base_signature || minus.signature != base_signature) {
        ++result.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * step);
      const double denom = std::max({1.0, std::abs(analytic[c]), std::abs(numeric)});
      result.max_relative_error =
          std::max(result.max_relative_error, std::abs(analytic[c] - numeric) / denom);
      ++result.checked;
    }
    t->zero_grad();
  }
  if (result.checked == 0) result.status = GradCheckStatus::SkippedNondifferentiable;
  return result;
}

GradCheckResult grad_check(const GradFn& fn, const Tensor<double>& point, double step) {
  Tensor<double> x = point;
  return grad_check([&](Graph<double>& g) { return fn(g, g.bind(x)); },
                    std::vector<Tensor<double>*>{&x}, step);
}

}  // namespace ifnet
