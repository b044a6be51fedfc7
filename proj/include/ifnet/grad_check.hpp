#pragma once

// Central finite-difference verification of graph gradients (64-bit).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "ifnet/graph.hpp"

namespace ifnet {

enum class GradCheckStatus { Ok, SkippedNondifferentiable };

struct GradCheckResult {
  GradCheckStatus status = GradCheckStatus::Ok;
  // max over checked coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose +/- step evaluations landed on a different smooth piece.
  std::size_t skipped = 0;
};

using GradFn = std::function<Graph<double>::Var(Graph<double>&, Graph<double>::Var)>;
using GradFnLeaves = std::function<Graph<double>::Var(Graph<double>&)>;

// fn receives the point bound as a leaf and must return a scalar.
GradCheckResult grad_check(const GradFn& fn, const Tensor<double>& point, double step = 1e-5);

// fn binds the given tensors itself. When max_coords_per_tensor is nonzero,
// that many coordinates per tensor are sampled deterministically from seed.
GradCheckResult grad_check(const GradFnLeaves& fn, const std::vector<Tensor<double>*>& leaves,
                           double step = 1e-5, std::size_t max_coords_per_tensor = 0,
                           std::uint64_t seed = 0);

}  // namespace ifnet
