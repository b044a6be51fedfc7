#pragma once

// Patch-correspondence stores: built from fixed-camera frame sequences
// (detect, group by pixel position, crop) or rendered synthetically, and
// persisted as a manifest plus one PGM file per patch.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ifnet/patch.hpp"

namespace ifnet {

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;
};

struct DetectorConfig {
  double harris_k = 0.04;
  double sigma = 1.0;               // structure-tensor window
  double relative_threshold = 0.01; // of the frame's strongest response
  std::size_t nms_radius = 3;
  std::size_t max_keypoints = 500;
  std::size_t margin = 8;           // no detections closer to the border
};

// Harris response, non-maximum suppression, top-K by score (ties by y, x).
// Throws ImageTooSmall when a side is below kPatchSide + 2 * margin.
std::vector<Keypoint> detect_keypoints(const Image& frame, const DetectorConfig& config = {});

struct FrameKeypoints {
  std::int64_t frame_id = 0;
  std::vector<Keypoint> keypoints;
};

// "frame_id x y score" per line; blank lines and '#' comments ignored.
// Frames come back in ascending frame_id. Throws MalformedImport.
std::vector<FrameKeypoints> read_keypoint_import(std::istream& in);
std::vector<FrameKeypoints> read_keypoint_import(const std::filesystem::path& path);

struct TrackMember {
  std::int64_t frame_id = 0;
  Keypoint keypoint;
};

struct KeypointTrack {
  std::int64_t track_id = 0;
  double x = 0.0;  // canonical position: the seeding detection
  double y = 0.0;
  std::vector<TrackMember> members;
};

// Frames in ascending frame_id, detections by descending score. A detection
// joins the nearest track within tolerance_px; if that track already has a
// member from the same frame the detection is dropped. Otherwise it seeds a
// new track. Tracks with fewer than 2 members are discarded; survivors are
// numbered from 0 in seeding order.
std::vector<KeypointTrack> group_by_position(const std::vector<FrameKeypoints>& frames,
                                             double tolerance_px);

// Window of `side` pixels starting at round(center) - side / 2.
// Throws OutOfBounds.
Patch extract_patch(const Image& frame, double x, double y, std::size_t side = kPatchSide);

struct Track {
  std::int64_t track_id = 0;
  std::string scene_id;
  double x = 0.0;
  double y = 0.0;
  std::vector<Patch> patches;

  friend bool operator==(const Track&, const Track&) = default;
};

struct CorrespondenceStore {
  std::vector<Track> tracks;
  std::map<std::string, std::string> provenance;

  std::size_t patch_count() const;

  friend bool operator==(const CorrespondenceStore&, const CorrespondenceStore&) = default;
};

struct Scene {
  std::string scene_id;
  std::vector<Image> frames;
  std::vector<std::int64_t> frame_ids;  // defaults to 0..n-1
  // When set, replaces the built-in detector for this scene.
  std::optional<std::vector<FrameKeypoints>> imported;
};

// Indices of `keep` frames spread uniformly over `count`: floor(i * count / keep).
std::vector<std::size_t> subsample_frames(std::size_t count, std::size_t keep);

struct BuildConfig {
  DetectorConfig detector;
  double tolerance_px = 2.0;
  std::size_t frames_per_scene = 200;
};

// Patches of a track are all cut at its canonical position. Tracks whose
// window leaves any member frame are dropped. Track ids run across scenes.
CorrespondenceStore build_store(const std::vector<Scene>& scenes, const BuildConfig& config = {});

enum class SynthMode { Geometry, Illumination, Both };

std::string synth_mode_name(SynthMode mode);
// Throws InvalidParams.
SynthMode parse_synth_mode(const std::string& text);

struct SynthParams {
  std::uint64_t seed = 0;
  std::size_t n_tracks = 100;
  std::size_t n_views = 4;
  SynthMode mode = SynthMode::Both;
  // geometry
  double max_rotation_deg = 25.0;
  double min_scale = 0.8;
  double max_scale = 1.25;
  double max_shift_px = 3.0;
  // illumination
  double min_gain = 0.4;
  double max_gain = 1.6;
  double max_bias = 0.2;
  double min_gamma = 0.5;
  double max_gamma = 2.0;
  double night_fraction = 0.3;
  double noise_sigma = 0.02;
  std::int64_t first_track_id = 0;

  // Throws InvalidParams.
  void validate() const;
};

// Procedural textures, one per track, rendered in n_views perturbed views.
// Deterministic in params.
CorrespondenceStore synth_store(const SynthParams& params);

// Renders a fixed-camera sequence of `frames` frames with `corners` planted
// L-corners on a flat background under a global brightness ramp.
struct PlantedSequence {
  Scene scene;
  std::vector<std::pair<double, double>> corners;
};
PlantedSequence planted_corner_sequence(std::size_t frames = 200, std::size_t corners = 10,
                                        std::uint64_t seed = 0);

// Binary (P5) or ASCII (P2) greymap, maxval <= 255. Throws Io.
Image read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image& image);
Patch read_patch_pgm(const std::filesystem::path& path);
void write_patch_pgm(const std::filesystem::path& path, const Patch& patch);

// <dir>/manifest.tsv, <dir>/provenance.txt, <dir>/patches/<track_id>/<frame_id>.pgm
void save_store(const CorrespondenceStore& store, const std::filesystem::path& dir);
// Throws CorruptManifest, MissingPatchFile.
CorrespondenceStore load_store(const std::filesystem::path& dir);

// Appends b's tracks to a's with ids renumbered after a's largest id.
CorrespondenceStore concatenate_stores(const CorrespondenceStore& a, const CorrespondenceStore& b);

}  // namespace ifnet
