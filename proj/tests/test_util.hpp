#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ifnet/tensor.hpp"

namespace ifnet::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> values(shape_size(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
std::vector<T> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> values(n);
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return values;
}

}  // namespace ifnet::testing
