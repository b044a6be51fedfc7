#include "ifnet/patch.hpp"

#include <algorithm>
#include <cmath>

namespace ifnet {

template <typename T>
void prepare_patch(const Patch& patch, std::size_t side, std::span<T> out) {
  const std::size_t src = patch.side;
  const double scale = static_cast<double>(src) / static_cast<double>(side);
  const double max_coord = static_cast<double>(src - 1);
  for (std::size_t y = 0; y < side; ++y) {
    const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, max_coord);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, src - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < side; ++x) {
      const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, max_coord);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, src - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1 - fx) * patch.intensity(x0, y0) + fx * patch.intensity(x1, y0);
      const double bottom = (1 - fx) * patch.intensity(x0, y1) + fx * patch.intensity(x1, y1);
      out[y * side + x] = static_cast<T>((1 - fy) * top + fy * bottom);
    }
  }
  const std::size_t n = side * side;
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += out[i];
  mean /= static_cast<double>(n);
  double var = 0;
  for (std::size_t i = 0; i < n; ++i) var += (out[i] - mean) * (out[i] - mean);
  const double denom = std::max(std::sqrt(var / static_cast<double>(n)), 1e-6);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>((out[i] - mean) / denom);
}

template void prepare_patch<float>(const Patch&, std::size_t, std::span<float>);
template void prepare_patch<double>(const Patch&, std::size_t, std::span<double>);

}  // namespace ifnet
