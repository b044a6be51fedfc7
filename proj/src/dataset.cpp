#include "ifnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "ifnet/error.hpp"
#include "ifnet/rng.hpp"

namespace fs = std::filesystem;

namespace ifnet {

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  return k;
}

// Separable blur with clamp-to-edge.
std::vector<double> blur(const std::vector<double>& in, std::size_t w, std::size_t h,
                         const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(in.size()), out(in.size());
  auto clampi = [](int v, int hi) { return std::clamp(v, 0, hi); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i)
        s += k[i + r] * in[y * w + clampi(static_cast<int>(x) + i, static_cast<int>(w) - 1)];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i)
        s += k[i + r] * tmp[clampi(static_cast<int>(y) + i, static_cast<int>(h) - 1) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

}  // namespace

std::vector<Keypoint> detect_keypoints(const Image& frame, const DetectorConfig& config) {
  const std::size_t w = frame.width, h = frame.height;
  const std::size_t need = kPatchSide + 2 * config.margin;
  if (w < need || h < need)
    fail(ErrorKind::ImageTooSmall, "frame " + std::to_string(w) + "x" + std::to_string(h) +
                                       " is below " + std::to_string(need) + " px per side");
  std::vector<double> ixx(w * h, 0.0), iyy(w * h, 0.0), ixy(w * h, 0.0);
  for (std::size_t y = 1; y + 1 < h; ++y)
    for (std::size_t x = 1; x + 1 < w; ++x) {
      auto p = [&](std::size_t xx, std::size_t yy) { return static_cast<double>(frame.at(xx, yy)); };
      const double gx = (p(x + 1, y - 1) + 2 * p(x + 1, y) + p(x + 1, y + 1)) -
                        (p(x - 1, y - 1) + 2 * p(x - 1, y) + p(x - 1, y + 1));
      const double gy = (p(x - 1, y + 1) + 2 * p(x, y + 1) + p(x + 1, y + 1)) -
                        (p(x - 1, y - 1) + 2 * p(x, y - 1) + p(x + 1, y - 1));
      ixx[y * w + x] = gx * gx;
      iyy[y * w + x] = gy * gy;
      ixy[y * w + x] = gx * gy;
    }
  const auto k = gaussian_kernel(config.sigma);
  const auto sxx = blur(ixx, w, h, k), syy = blur(iyy, w, h, k), sxy = blur(ixy, w, h, k);
  std::vector<double> response(w * h);
  for (std::size_t i = 0; i < w * h; ++i) {
    const double tr = sxx[i] + syy[i];
    response[i] = sxx[i] * syy[i] - sxy[i] * sxy[i] - config.harris_k * tr * tr;
  }

  const std::size_t lo = config.margin;
  const std::size_t hi_x = w - config.margin, hi_y = h - config.margin;
  double peak = 0.0;
  for (std::size_t y = lo; y < hi_y; ++y)
    for (std::size_t x = lo; x < hi_x; ++x) peak = std::max(peak, response[y * w + x]);
  std::vector<Keypoint> out;
  if (peak <= 1e-12) return out;
  const double threshold = config.relative_threshold * peak;
  const long r = static_cast<long>(config.nms_radius);
  for (std::size_t y = lo; y < hi_y; ++y)
    for (std::size_t x = lo; x < hi_x; ++x) {
      const double v = response[y * w + x];
      if (v <= threshold) continue;
      bool is_max = true;
      for (long dy = -r; dy <= r && is_max; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const long xx = static_cast<long>(x) + dx, yy = static_cast<long>(y) + dy;
          if (xx < 0 || yy < 0 || xx >= static_cast<long>(w) || yy >= static_cast<long>(h)) continue;
          const double u = response[yy * w + xx];
          // Equal responses: the earlier pixel in raster order wins.
          if (u > v || (u == v && (dy < 0 || (dy == 0 && dx < 0)))) {
            is_max = false;
            break;
          }
        }
      if (is_max) out.push_back({static_cast<double>(x), static_cast<double>(y), v});
    }
  std::stable_sort(out.begin(), out.end(),
                   [](const Keypoint& a, const Keypoint& b) { return a.score > b.score; });
  if (out.size() > config.max_keypoints) out.resize(config.max_keypoints);
  return out;
}

std::vector<FrameKeypoints> read_keypoint_import(std::istream& in) {
  std::map<std::int64_t, std::vector<Keypoint>> frames;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    std::int64_t frame_id;
    Keypoint kp;
    std::string extra;
    if (!(fields >> frame_id >> kp.x >> kp.y >> kp.score) || (fields >> extra))
      fail(ErrorKind::MalformedImport,
           "line " + std::to_string(line_no) + ": expected 'frame_id x y score', got '" + line + "'");
    if (!std::isfinite(kp.x) || !std::isfinite(kp.y) || !std::isfinite(kp.score))
      fail(ErrorKind::MalformedImport, "line " + std::to_string(line_no) + ": non-finite value");
    frames[frame_id].push_back(kp);
  }
  std::vector<FrameKeypoints> out;
  for (auto& [id, kps] : frames) out.push_back({id, std::move(kps)});
  return out;
}

std::vector<FrameKeypoints> read_keypoint_import(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::MalformedImport, "cannot open keypoint file " + path.string());
  return read_keypoint_import(in);
}

std::vector<KeypointTrack> group_by_position(const std::vector<FrameKeypoints>& frames,
                                             double tolerance_px) {
  std::vector<const FrameKeypoints*> order;
  for (const auto& f : frames) order.push_back(&f);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->frame_id < b->frame_id; });

  std::vector<KeypointTrack> tracks;
  std::vector<std::int64_t> last_frame;
  for (const auto* frame : order) {
    std::vector<Keypoint> kps = frame->keypoints;
    std::stable_sort(kps.begin(), kps.end(),
                     [](const Keypoint& a, const Keypoint& b) { return a.score > b.score; });
    for (const auto& kp : kps) {
      std::size_t best = tracks.size();
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < tracks.size(); ++t) {
        const double d = std::hypot(kp.x - tracks[t].x, kp.y - tracks[t].y);
        if (d <= tolerance_px && d < best_d) {
          best = t;
          best_d = d;
        }
      }
      if (best == tracks.size()) {
        tracks.push_back({0, kp.x, kp.y, {{frame->frame_id, kp}}});
        last_frame.push_back(frame->frame_id);
      } else if (last_frame[best] != frame->frame_id) {
        tracks[best].members.push_back({frame->frame_id, kp});
        last_frame[best] = frame->frame_id;
      }
    }
  }
  std::vector<KeypointTrack> out;
  for (auto& t : tracks)
    if (t.members.size() >= 2) {
      t.track_id = static_cast<std::int64_t>(out.size());
      out.push_back(std::move(t));
    }
  return out;
}

Patch extract_patch(const Image& frame, double x, double y, std::size_t side) {
  const long cx = std::lround(x), cy = std::lround(y);
  const long x0 = cx - static_cast<long>(side / 2), y0 = cy - static_cast<long>(side / 2);
  if (x0 < 0 || y0 < 0 || x0 + static_cast<long>(side) > static_cast<long>(frame.width) ||
      y0 + static_cast<long>(side) > static_cast<long>(frame.height))
    fail(ErrorKind::OutOfBounds, "window at (" + std::to_string(x0) + ", " + std::to_string(y0) +
                                     ") size " + std::to_string(side) + " leaves " +
                                     std::to_string(frame.width) + "x" +
                                     std::to_string(frame.height) + " frame");
  Patch p(side);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c)
      p.pixels[r * side + c] = quantize_intensity(frame.at(x0 + c, y0 + r));
  p.source.x = x;
  p.source.y = y;
  return p;
}

std::size_t CorrespondenceStore::patch_count() const {
  std::size_t n = 0;
  for (const auto& t : tracks) n += t.patches.size();
  return n;
}

std::vector<std::size_t> subsample_frames(std::size_t count, std::size_t keep) {
  std::vector<std::size_t> idx;
  if (keep == 0 || keep >= count) {
    for (std::size_t i = 0; i < count; ++i) idx.push_back(i);
    return idx;
  }
  for (std::size_t i = 0; i < keep; ++i) idx.push_back(i * count / keep);
  return idx;
}

CorrespondenceStore build_store(const std::vector<Scene>& scenes, const BuildConfig& config) {
  CorrespondenceStore store;
  std::size_t frames_used = 0;
  for (const auto& scene : scenes) {
    if (scene.frames.size() < 2)
      fail(ErrorKind::InvalidParams, "scene " + scene.scene_id + " has fewer than 2 frames");
    if (!scene.frame_ids.empty() && scene.frame_ids.size() != scene.frames.size())
      fail(ErrorKind::InvalidParams, "scene " + scene.scene_id + ": frame id count mismatch");
    const auto keep = subsample_frames(scene.frames.size(), config.frames_per_scene);
    std::map<std::int64_t, const Image*> by_id;
    std::vector<FrameKeypoints> detections;
    for (std::size_t i : keep) {
      const std::int64_t id =
          scene.frame_ids.empty() ? static_cast<std::int64_t>(i) : scene.frame_ids[i];
      by_id[id] = &scene.frames[i];
      if (!scene.imported) detections.push_back({id, detect_keypoints(scene.frames[i], config.detector)});
    }
    if (scene.imported)
      for (const auto& f : *scene.imported)
        if (by_id.count(f.frame_id)) detections.push_back(f);
    frames_used += keep.size();

    for (const auto& kt : group_by_position(detections, config.tolerance_px)) {
      Track track;
      track.scene_id = scene.scene_id;
      track.x = kt.x;
      track.y = kt.y;
      try {
        for (const auto& m : kt.members) {
          auto patch = extract_patch(*by_id.at(m.frame_id), kt.x, kt.y);
          patch.source.scene_id = scene.scene_id;
          patch.source.frame_id = m.frame_id;
          track.patches.push_back(std::move(patch));
        }
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::OutOfBounds) throw;
        continue;
      }
      track.track_id = static_cast<std::int64_t>(store.tracks.size());
      store.tracks.push_back(std::move(track));
    }
  }
  std::ostringstream tol;
  tol << config.tolerance_px;
  store.provenance["generator"] = "build_store";
  store.provenance["detector"] = "harris k=" + std::to_string(config.detector.harris_k) +
                                 " sigma=" + std::to_string(config.detector.sigma) +
                                 " nms=" + std::to_string(config.detector.nms_radius);
  store.provenance["tolerance_px"] = tol.str();
  store.provenance["scenes"] = std::to_string(scenes.size());
  store.provenance["frames"] = std::to_string(frames_used);
  return store;
}

std::string synth_mode_name(SynthMode mode) {
  switch (mode) {
    case SynthMode::Geometry: return "geometry";
    case SynthMode::Illumination: return "illumination";
    case SynthMode::Both: return "both";
  }
  return "unknown";
}

SynthMode parse_synth_mode(const std::string& text) {
  if (text == "geometry") return SynthMode::Geometry;
  if (text == "illumination") return SynthMode::Illumination;
  if (text == "both") return SynthMode::Both;
  fail(ErrorKind::InvalidParams, "mode '" + text + "' (expected geometry, illumination or both)");
}

void SynthParams::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorKind::InvalidParams, what); };
  if (n_tracks < 2) bad("n_tracks must be >= 2");
  if (n_views < 2) bad("n_views must be >= 2");
  if (min_scale <= 0 || min_scale > max_scale) bad("scale range must satisfy 0 < min <= max");
  if (min_gain <= 0 || min_gain > max_gain) bad("gain range must satisfy 0 < min <= max");
  if (min_gamma <= 0 || min_gamma > max_gamma) bad("gamma range must satisfy 0 < min <= max");
  if (max_rotation_deg < 0 || max_shift_px < 0 || max_bias < 0 || noise_sigma < 0)
    bad("rotation, shift, bias and noise must be >= 0");
  if (night_fraction < 0 || night_fraction > 1) bad("night_fraction must lie in [0, 1]");
}

namespace {

struct Texture {
  struct Grating {
    double fx, fy, phase, amp;
  };
  struct Blob {
    double x, y, inv2s2, amp;
  };
  std::vector<Grating> gratings;
  std::vector<Blob> blobs;

  explicit Texture(Rng& rng) {
    for (int i = 0; i < 5; ++i) {
      const double theta = uniform(rng, 0.0, 3.141592653589793);
      const double f = uniform(rng, 1.0 / 24.0, 1.0 / 6.0) * 6.283185307179586;
      gratings.push_back({f * std::cos(theta), f * std::sin(theta),
                          uniform(rng, 0.0, 6.283185307179586), uniform(rng, 0.15, 0.5)});
    }
    for (int i = 0; i < 6; ++i) {
      const double s = uniform(rng, 2.5, 8.0);
      blobs.push_back({uniform(rng, -22.0, 22.0), uniform(rng, -22.0, 22.0), 1.0 / (2 * s * s),
                       uniform(rng, -1.2, 1.2)});
    }
  }

  double operator()(double u, double v) const {
    double s = 0;
    for (const auto& g : gratings) s += g.amp * std::sin(g.fx * u + g.fy * v + g.phase);
    for (const auto& b : blobs) {
      const double dx = u - b.x, dy = v - b.y;
      s += b.amp * std::exp(-(dx * dx + dy * dy) * b.inv2s2);
    }
    return 1.0 / (1.0 + std::exp(-2.0 * s));
  }
};

}  // namespace

CorrespondenceStore synth_store(const SynthParams& params) {
  params.validate();
  const bool geometry = params.mode != SynthMode::Illumination;
  const bool illumination = params.mode != SynthMode::Geometry;
  const double c = (kPatchSide - 1) / 2.0;
  CorrespondenceStore store;
  for (std::size_t t = 0; t < params.n_tracks; ++t) {
    Rng rng(derive_seed(params.seed, t));
    const Texture tex(rng);
    Track track;
    track.track_id = params.first_track_id + static_cast<std::int64_t>(t);
    track.scene_id = "synth";
    track.x = c;
    track.y = c;
    for (std::size_t v = 0; v < params.n_views; ++v) {
      double cos_t = 1, sin_t = 0, scale = 1, tx = 0, ty = 0;
      if (geometry) {
        const double rot = uniform(rng, -params.max_rotation_deg, params.max_rotation_deg) *
                           3.141592653589793 / 180.0;
        cos_t = std::cos(rot);
        sin_t = std::sin(rot);
        scale = std::exp(uniform(rng, std::log(params.min_scale), std::log(params.max_scale)));
        tx = uniform(rng, -params.max_shift_px, params.max_shift_px);
        ty = uniform(rng, -params.max_shift_px, params.max_shift_px);
      }
      double gain = 1, bias = 0, gamma = 1, noise = 0;
      bool night = false;
      if (illumination) {
        gain = uniform(rng, params.min_gain, params.max_gain);
        bias = uniform(rng, -params.max_bias, params.max_bias);
        gamma = std::exp(uniform(rng, std::log(params.min_gamma), std::log(params.max_gamma)));
        night = uniform01(rng) < params.night_fraction;
        noise = params.noise_sigma;
      }
      Patch p;
      for (std::size_t y = 0; y < kPatchSide; ++y)
        for (std::size_t x = 0; x < kPatchSide; ++x) {
          const double dx = x - c - tx, dy = y - c - ty;
          const double u = (cos_t * dx + sin_t * dy) / scale;
          const double w = (-sin_t * dx + cos_t * dy) / scale;
          double value = tex(u, w);
          if (illumination) {
            value = gain * std::pow(value, gamma) + bias;
            if (night) value = 0.05 + 0.45 * std::pow(std::clamp(value, 0.0, 1.0), 2.2);
            if (noise > 0) value += noise * normal(rng);
          }
          p.pixels[y * kPatchSide + x] = quantize_intensity(value);
        }
      p.source = {"synth", static_cast<std::int64_t>(v), c, c};
      track.patches.push_back(std::move(p));
    }
    store.tracks.push_back(std::move(track));
  }
  store.provenance["generator"] = "synth_store";
  store.provenance["mode"] = synth_mode_name(params.mode);
  store.provenance["seed"] = std::to_string(params.seed);
  store.provenance["views"] = std::to_string(params.n_views);
  return store;
}

PlantedSequence planted_corner_sequence(std::size_t frames, std::size_t corners,
                                        std::uint64_t seed) {
  const std::size_t cols = 5;
  const std::size_t rows = (corners + cols - 1) / cols;
  const std::size_t spacing = 40;
  const std::size_t width = 2 * 48 + (cols - 1) * spacing;
  const std::size_t height = 2 * 48 + (rows ? rows - 1 : 0) * spacing;
  PlantedSequence seq;
  seq.scene.scene_id = "planted";
  Rng rng(seed);
  std::vector<double> contrast;
  for (std::size_t i = 0; i < corners; ++i) {
    seq.corners.emplace_back(48.0 + (i % cols) * spacing, 48.0 + (i / cols) * spacing);
    contrast.push_back(uniform(rng, 0.4, 0.7));
  }
  // Soft L-corners: a bright quadrant wedge faded out by a Gaussian window.
  Image base(width, height, 0.2f);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      double v = 0.2;
      for (std::size_t i = 0; i < corners; ++i) {
        const double dx = x - seq.corners[i].first, dy = y - seq.corners[i].second;
        const double r2 = dx * dx + dy * dy;
        if (r2 > 18.0 * 18.0) continue;
        v += contrast[i] / (1.0 + std::exp(-dx / 0.7)) / (1.0 + std::exp(-dy / 0.7)) *
             std::exp(-r2 / (2 * 8.0 * 8.0));
      }
      base.at(x, y) = static_cast<float>(v);
    }
  for (std::size_t f = 0; f < frames; ++f) {
    const double t = frames > 1 ? static_cast<double>(f) / (frames - 1) : 0.0;
    const double gain = 0.3 + 0.7 * t, bias = 0.05 - 0.1 * t;
    Image frame(width, height);
    for (std::size_t i = 0; i < base.pixels.size(); ++i)
      frame.pixels[i] = static_cast<float>(std::clamp(gain * base.pixels[i] + bias, 0.0, 1.0));
    seq.scene.frames.push_back(std::move(frame));
  }
  return seq;
}

namespace {

void skip_pgm_space(std::istream& in) {
  while (true) {
    const int ch = in.peek();
    if (ch == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      return;
    }
  }
}

struct Greymap {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

Greymap read_greymap(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2") fail(ErrorKind::Io, path.string() + ": not a PGM file");
  std::size_t dims[3];
  for (auto& d : dims) {
    skip_pgm_space(in);
    if (!(in >> d)) fail(ErrorKind::Io, path.string() + ": bad PGM header");
  }
  const std::size_t maxval = dims[2];
  if (maxval == 0 || maxval > 255) fail(ErrorKind::Io, path.string() + ": maxval must be 1..255");
  Greymap g{dims[0], dims[1], std::vector<std::uint8_t>(dims[0] * dims[1])};
  if (magic == "P5") {
    in.get();
    in.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(g.pixels.size()))
      fail(ErrorKind::Io, path.string() + ": truncated PGM data");
  } else {
    for (auto& p : g.pixels) {
      skip_pgm_space(in);
      unsigned v;
      if (!(in >> v)) fail(ErrorKind::Io, path.string() + ": truncated PGM data");
      p = static_cast<std::uint8_t>(v);
    }
  }
  if (maxval != 255)
    for (auto& p : g.pixels) p = static_cast<std::uint8_t>(std::lround(p * 255.0 / maxval));
  return g;
}

void write_greymap(const fs::path& path, std::size_t w, std::size_t h, const std::uint8_t* data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(w * h));
  if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

Image read_pgm(const fs::path& path) {
  const auto g = read_greymap(path);
  Image img(g.width, g.height);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) img.pixels[i] = g.pixels[i] / 255.0f;
  return img;
}

void write_pgm(const fs::path& path, const Image& image) {
  std::vector<std::uint8_t> px(image.pixels.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = quantize_intensity(image.pixels[i]);
  write_greymap(path, image.width, image.height, px.data());
}

Patch read_patch_pgm(const fs::path& path) {
  auto g = read_greymap(path);
  if (g.width != g.height) fail(ErrorKind::WrongPatchSize, path.string() + " is not square");
  Patch p(g.width);
  p.pixels = std::move(g.pixels);
  return p;
}

void write_patch_pgm(const fs::path& path, const Patch& patch) {
  write_greymap(path, patch.side, patch.side, patch.pixels.data());
}

void save_store(const CorrespondenceStore& store, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "patches", ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + (dir / "patches").string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) fail(ErrorKind::Io, "cannot write " + (dir / "manifest.tsv").string());
  manifest << "track_id\tscene_id\tframe_id\tx\ty\tpatch_path\n";
  for (const auto& t : store.tracks) {
    const auto track_dir = fs::path("patches") / std::to_string(t.track_id);
    fs::create_directories(dir / track_dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create " + (dir / track_dir).string());
    for (const auto& p : t.patches) {
      const auto rel = track_dir / (std::to_string(p.source.frame_id) + ".pgm");
      write_patch_pgm(dir / rel, p);
      manifest << t.track_id << '\t' << t.scene_id << '\t' << p.source.frame_id << '\t'
               << format_double(p.source.x) << '\t' << format_double(p.source.y) << '\t'
               << rel.generic_string() << '\n';
    }
  }
  if (!manifest) fail(ErrorKind::Io, "failed writing manifest in " + dir.string());
  std::ofstream prov(dir / "provenance.txt");
  for (const auto& [k, v] : store.provenance) prov << k << '=' << v << '\n';
  prov << "store.tracks=" << store.tracks.size() << '\n';
  prov << "store.patches=" << store.patch_count() << '\n';
  if (!prov) fail(ErrorKind::Io, "failed writing provenance in " + dir.string());
}

CorrespondenceStore load_store(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.tsv";
  std::ifstream manifest(manifest_path);
  if (!manifest) fail(ErrorKind::CorruptManifest, "cannot open " + manifest_path.string());
  std::string line;
  if (!std::getline(manifest, line) || line != "track_id\tscene_id\tframe_id\tx\ty\tpatch_path")
    fail(ErrorKind::CorruptManifest, manifest_path.string() + ": missing or wrong header");

  CorrespondenceStore store;
  std::set<std::int64_t> closed;
  std::size_t line_no = 1;
  auto corrupt = [&](const std::string& why) {
    fail(ErrorKind::CorruptManifest,
         manifest_path.string() + " line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::istringstream fields(line);
    for (std::string col; std::getline(fields, col, '\t');) cols.push_back(col);
    if (cols.size() != 6) corrupt("expected 6 tab-separated columns");
    std::int64_t track_id, frame_id;
    double x, y;
    try {
      std::size_t used;
      track_id = std::stoll(cols[0], &used);
      if (used != cols[0].size()) throw std::invalid_argument("track_id");
      frame_id = std::stoll(cols[2], &used);
      if (used != cols[2].size()) throw std::invalid_argument("frame_id");
      x = std::stod(cols[3]);
      y = std::stod(cols[4]);
    } catch (const std::exception&) {
      corrupt("non-numeric field");
    }
    if (store.tracks.empty() || store.tracks.back().track_id != track_id) {
      if (!store.tracks.empty()) closed.insert(store.tracks.back().track_id);
      if (closed.count(track_id)) corrupt("duplicate track_id " + std::to_string(track_id));
      store.tracks.push_back({track_id, cols[1], x, y, {}});
    }
    auto& track = store.tracks.back();
    if (track.scene_id != cols[1]) corrupt("track " + cols[0] + " spans two scenes");
    for (const auto& p : track.patches)
      if (p.source.frame_id == frame_id)
        corrupt("track " + cols[0] + " repeats frame " + cols[2]);
    const auto patch_path = dir / cols[5];
    if (!fs::exists(patch_path))
      fail(ErrorKind::MissingPatchFile, "missing patch file " + patch_path.string());
    Patch patch = read_patch_pgm(patch_path);
    if (patch.side != kPatchSide)
      corrupt(patch_path.string() + " is " + std::to_string(patch.side) + " px, expected " +
              std::to_string(kPatchSide));
    patch.source = {cols[1], frame_id, x, y};
    track.patches.push_back(std::move(patch));
  }
  for (const auto& t : store.tracks)
    if (t.patches.size() < 2)
      fail(ErrorKind::CorruptManifest, "track " + std::to_string(t.track_id) + " has one member");

  std::ifstream prov(dir / "provenance.txt");
  while (std::getline(prov, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    store.provenance[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto check_count = [&](const std::string& key, std::size_t actual) {
    auto it = store.provenance.find(key);
    if (it == store.provenance.end()) return;
    if (it->second != std::to_string(actual))
      fail(ErrorKind::CorruptManifest, "provenance records " + key + "=" + it->second +
                                           " but manifest lists " + std::to_string(actual));
    store.provenance.erase(it);
  };
  check_count("store.tracks", store.tracks.size());
  check_count("store.patches", store.patch_count());
  return store;
}

CorrespondenceStore concatenate_stores(const CorrespondenceStore& a, const CorrespondenceStore& b) {
  CorrespondenceStore out = a;
  std::int64_t next = 0;
  for (const auto& t : a.tracks) next = std::max(next, t.track_id + 1);
  for (auto t : b.tracks) {
    t.track_id = next++;
    out.tracks.push_back(std::move(t));
  }
  for (const auto& [k, v] : b.provenance) out.provenance["second." + k] = v;
  return out;
}

}  // namespace ifnet
