#pragma once

// Desk-scale experiments on synthetic data: the two-domain schedule
// comparison and the illumination-robustness comparison of training recipes.

#include <cstdint>
#include <string>
#include <vector>

#include "ifnet/eval.hpp"
#include "ifnet/scheduling.hpp"

namespace ifnet {

struct TwoDomainConfig {
  std::size_t train_tracks = 256;  // per domain
  std::size_t eval_tracks = 120;
  std::size_t views = 4;
  std::size_t epochs = 10;
  double lr0 = 0.01;
  std::size_t anchors = 32;  // N per update
  std::size_t positives = 2;
  std::size_t sequence_tracks = 20;
  NetConfig net = NetConfig::toy();
};

struct TwoDomainData {
  CorrespondenceStore geometry;
  CorrespondenceStore illumination;
  CorrespondenceStore held_out;  // both perturbations, disjoint track ids
  EvalSplit split;
};

TwoDomainData make_two_domain(const TwoDomainConfig& config, std::uint64_t seed);

enum class Table1Schedule { RandomInit, Mixed, FineTuneGeoIll, FineTuneIllGeo, Separation };

std::string table1_schedule_name(Table1Schedule s);

struct ScheduleOutcome {
  double matching_map = 0.0;
  TrainingReport report;
};

// Trains a fresh toy network under the schedule and scores held-out matching.
ScheduleOutcome run_table1_schedule(const TwoDomainData& data, const TwoDomainConfig& config,
                                    Table1Schedule schedule, std::uint64_t seed);

struct IlluminationConfig {
  std::size_t train_tracks = 256;
  std::size_t eval_tracks = 120;
  std::size_t views = 6;
  std::size_t positives = 4;
  std::size_t anchors = 24;
  std::size_t epochs = 10;
  double lr0 = 0.01;
  double noise_sigma = 0.05;
  double night_fraction = 0.5;
  NetConfig net = NetConfig::toy();
};

struct IlluminationData {
  CorrespondenceStore train;
  EvalSplit split;  // one sequence holding every held-out track
};

IlluminationData make_illumination(const IlluminationConfig& config, std::uint64_t seed);

enum class Recipe {
  HardPositiveRoi,   // hardest positive, ROI loss with batch weights
  RandomPositivePlain  // random positive, unweighted triplet loss
};

// Same data, epochs and batch shape for either recipe.
ScheduleOutcome run_recipe(const IlluminationData& data, const IlluminationConfig& config,
                           Recipe recipe, std::uint64_t seed);

}  // namespace ifnet
