#include "ifnet/experiments.hpp"

#include <algorithm>

namespace ifnet {

namespace {

OptimizerConfig scaled_optimizer(double lr0, std::size_t epochs) {
  OptimizerConfig opt;
  opt.lr0 = lr0;
  opt.decay_start = epochs * 6 / 10;
  opt.decay_every = std::max<std::size_t>(1, epochs / 5);
  return opt;
}

CorrespondenceStore render(SynthMode mode, std::uint64_t seed, std::size_t tracks,
                           std::size_t views, std::int64_t first_id) {
  SynthParams p;
  p.seed = seed;
  p.n_tracks = tracks;
  p.n_views = views;
  p.mode = mode;
  p.first_track_id = first_id;
  return synth_store(p);
}

}  // namespace

TwoDomainData make_two_domain(const TwoDomainConfig& config, std::uint64_t seed) {
  TwoDomainData d;
  d.geometry = render(SynthMode::Geometry, seed * 10 + 1, config.train_tracks, config.views, 0);
  d.illumination =
      render(SynthMode::Illumination, seed * 10 + 2, config.train_tracks, config.views, 100000);
  d.held_out = render(SynthMode::Both, seed * 10 + 3, config.eval_tracks, config.views, 200000);
  SplitConfig sc;
  sc.sequence_tracks = config.sequence_tracks;
  sc.seed = seed;
  d.split = make_eval_split(d.held_out, sc);
  return d;
}

std::string table1_schedule_name(Table1Schedule s) {
  switch (s) {
    case Table1Schedule::RandomInit: return "random_init";
    case Table1Schedule::Mixed: return "mixed";
    case Table1Schedule::FineTuneGeoIll: return "finetune_geo_ill";
    case Table1Schedule::FineTuneIllGeo: return "finetune_ill_geo";
    case Table1Schedule::Separation: return "separation";
  }
  return "unknown";
}

ScheduleOutcome run_table1_schedule(const TwoDomainData& data, const TwoDomainConfig& config,
                                    Table1Schedule schedule, std::uint64_t seed) {
  NetConfig net_cfg = config.net;
  net_cfg.rng_seed = seed;
  Network<float> net(net_cfg);
  ScheduleOutcome out;
  if (schedule != Table1Schedule::RandomInit) {
    TrainingSchedule s;
    s.epochs = config.epochs;
    s.positives_per_anchor = config.positives;
    s.anchors_per_batch = config.anchors;
    s.batch_size = config.anchors * (config.positives + 1);
    CorrespondenceStore mixed;
    switch (schedule) {
      case Table1Schedule::Mixed:
        mixed = concatenate_stores(data.geometry, data.illumination);
        s.first = &mixed;
        break;
      case Table1Schedule::FineTuneGeoIll:
      case Table1Schedule::FineTuneIllGeo: {
        const bool geo_first = schedule == Table1Schedule::FineTuneGeoIll;
        s.kind = ScheduleKind::FineTune;
        s.first = geo_first ? &data.geometry : &data.illumination;
        s.second = geo_first ? &data.illumination : &data.geometry;
        s.split_epoch = config.epochs / 2;
        break;
      }
      case Table1Schedule::Separation:
        s.kind = ScheduleKind::Separation;
        s.first = &data.geometry;
        s.second = &data.illumination;
        break;
      case Table1Schedule::RandomInit:
        break;
    }
    out.report = train(net, s, LossConfig{}, scaled_optimizer(config.lr0, config.epochs), seed);
  }
  out.matching_map = matching_map(net, data.split);
  return out;
}

IlluminationData make_illumination(const IlluminationConfig& config, std::uint64_t seed) {
  auto render_ill = [&](std::uint64_t s, std::size_t tracks, std::int64_t first_id) {
    SynthParams p;
    p.seed = s;
    p.n_tracks = tracks;
    p.n_views = config.views;
    p.mode = SynthMode::Illumination;
    p.first_track_id = first_id;
    p.noise_sigma = config.noise_sigma;
    p.night_fraction = config.night_fraction;
    return synth_store(p);
  };
  IlluminationData d;
  d.train = render_ill(seed * 10 + 2, config.train_tracks, 0);
  const auto held_out = render_ill(seed * 10 + 4, config.eval_tracks, 300000);
  SplitConfig sc;
  sc.sequence_tracks = config.eval_tracks;
  sc.seed = seed;
  d.split = make_eval_split(held_out, sc);
  return d;
}

ScheduleOutcome run_recipe(const IlluminationData& data, const IlluminationConfig& config,
                           Recipe recipe, std::uint64_t seed) {
  NetConfig net_cfg = config.net;
  net_cfg.rng_seed = seed;
  Network<float> net(net_cfg);
  TrainingSchedule s;
  s.first = &data.train;
  s.epochs = config.epochs;
  s.positives_per_anchor = config.positives;
  s.anchors_per_batch = config.anchors;
  s.batch_size = config.anchors * (config.positives + 1);
  LossConfig loss;
  StepOptions options;
  if (recipe == Recipe::RandomPositivePlain) {
    loss.weight_mode = WeightMode::Unit;
    options.positive_mining = PositiveMining::Random;
  }
  ScheduleOutcome out;
  out.report = train(net, s, loss, scaled_optimizer(config.lr0, config.epochs), seed, options);
  out.matching_map = matching_map(net, data.split);
  return out;
}

}  // namespace ifnet
