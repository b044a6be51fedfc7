#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ifnet {

inline constexpr std::size_t kPatchSide = 64;

// Grayscale frame, intensities in [0, 1], row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), pixels(w * h, fill) {}

  float& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  float at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

struct PatchSource {
  std::string scene_id;
  std::int64_t frame_id = 0;
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const PatchSource&, const PatchSource&) = default;
};

// Square 8-bit crop; intensity() maps to [0, 1].
struct Patch {
  std::size_t side = kPatchSide;
  std::vector<std::uint8_t> pixels;
  PatchSource source;

  Patch() : pixels(kPatchSide * kPatchSide, 0) {}
  explicit Patch(std::size_t s) : side(s), pixels(s * s, 0) {}

  float intensity(std::size_t x, std::size_t y) const { return pixels[y * side + x] / 255.0f; }

  friend bool operator==(const Patch&, const Patch&) = default;
};

inline std::uint8_t quantize_intensity(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

// Bilinear resample (pixel-center aligned) of a patch to side x side, then
// per-patch standardization: subtract the mean, divide by max(std, 1e-6).
template <typename T>
void prepare_patch(const Patch& patch, std::size_t side, std::span<T> out);

extern template void prepare_patch<float>(const Patch&, std::size_t, std::span<float>);
extern template void prepare_patch<double>(const Patch&, std::size_t, std::span<double>);

}  // namespace ifnet
