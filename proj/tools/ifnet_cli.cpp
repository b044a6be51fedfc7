#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ifnet/experiments.hpp"

namespace fs = std::filesystem;
using namespace ifnet;

namespace {

constexpr int kUsage = 2;
constexpr int kTraining = 3;
constexpr int kMismatch = 4;

// Raised by command bodies; carries the exit status.
struct Exit {
  int code;
  std::string message;
};

[[noreturn]] void exit_with(int code, const std::string& message) { throw Exit{code, message}; }

// Every flag of the running subcommand with its effective value; loadable
// again through --config.
void write_resolved_config(const CLI::App& sub, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "config.ini");
  out << '[' << sub.get_name() << "]\n" << sub.config_to_str(true, false);
  if (!out) exit_with(kUsage, "cannot write " + (dir / "config.ini").string());
}

CorrespondenceStore load_input_store(const std::string& path, const char* flag) {
  if (path.empty()) exit_with(kUsage, std::string(flag) + " is required for this schedule");
  try {
    return load_store(path);
  } catch (const Error& e) {
    exit_with(kUsage, std::string(flag) + " " + path + ": " + e.what());
  }
}

Network<float> load_checkpoint(const std::string& path) {
  try {
    return Network<float>::load(path);
  } catch (const Error& e) {
    exit_with(kMismatch, "checkpoint " + path + ": " + e.what());
  }
}

// The store may record the network shape it was prepared for.
void check_store_matches(const CorrespondenceStore& store, const NetConfig& cfg,
                         const std::string& store_path, const std::string& ckpt_path) {
  auto expect = [&](const char* key, std::size_t have, const char* what) {
    const auto it = store.provenance.find(key);
    if (it == store.provenance.end()) return;
    if (it->second != std::to_string(have))
      exit_with(kMismatch, "checkpoint " + ckpt_path + " has " + what + "=" + std::to_string(have) +
                               " but " + store_path + " expects " + what + "=" + it->second);
  };
  expect("expected_descriptor_dim", cfg.descriptor_dim, "descriptor_dim");
  expect("expected_input_side", cfg.input_side, "input_side");
}

// ---- build-dataset -------------------------------------------------------

struct BuildArgs {
  std::string out;
  bool synth = false;
  std::size_t tracks = 100;
  std::size_t views = 4;
  std::string mode = "both";
  std::uint64_t seed = 0;
  std::string frames;
  std::string keypoints;
  std::size_t frames_per_scene = 200;
  double tolerance = 2.0;
  std::size_t max_keypoints = 500;
  std::size_t expect_dim = 0;
  std::size_t expect_input_side = 0;
};

std::vector<fs::path> sorted_pgms(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

Scene read_scene(const fs::path& dir, std::size_t keep) {
  const auto files = sorted_pgms(dir);
  if (files.size() < 2) exit_with(kUsage, "scene " + dir.string() + " holds fewer than 2 .pgm frames");
  Scene scene;
  scene.scene_id = dir.filename().string();
  for (auto i : subsample_frames(files.size(), std::min(keep, files.size()))) {
    try {
      scene.frames.push_back(read_pgm(files[i]));
    } catch (const Error& e) {
      exit_with(kUsage, e.what());
    }
    scene.frame_ids.push_back(static_cast<std::int64_t>(i));
  }
  return scene;
}

int cmd_build_dataset(const BuildArgs& a, const CLI::App& app) {
  CorrespondenceStore store;
  try {
    if (a.synth) {
      SynthParams p;
      p.seed = a.seed;
      p.n_tracks = a.tracks;
      p.n_views = a.views;
      p.mode = parse_synth_mode(a.mode);
      store = synth_store(p);
    } else {
      if (a.frames.empty()) exit_with(kUsage, "either --synth or --frames is required");
      const fs::path root(a.frames);
      if (!fs::is_directory(root)) exit_with(kUsage, "--frames " + a.frames + " is not a directory");
      std::vector<Scene> scenes;
      std::vector<fs::path> subdirs;
      for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) subdirs.push_back(e.path());
      std::sort(subdirs.begin(), subdirs.end());
      if (subdirs.empty()) subdirs.push_back(root);
      for (const auto& d : subdirs) scenes.push_back(read_scene(d, a.frames_per_scene));
      if (!a.keypoints.empty()) {
        if (scenes.size() != 1) exit_with(kUsage, "--keypoints needs a single-scene --frames directory");
        scenes[0].imported = read_keypoint_import(fs::path(a.keypoints));
      }
      BuildConfig cfg;
      cfg.tolerance_px = a.tolerance;
      cfg.frames_per_scene = a.frames_per_scene;
      cfg.detector.max_keypoints = a.max_keypoints;
      store = build_store(scenes, cfg);
    }
  } catch (const Error& e) {
    exit_with(kUsage, e.what());
  }
  if (a.expect_dim) store.provenance["expected_descriptor_dim"] = std::to_string(a.expect_dim);
  if (a.expect_input_side) store.provenance["expected_input_side"] = std::to_string(a.expect_input_side);
  try {
    save_store(store, a.out);
  } catch (const Error& e) {
    exit_with(kUsage, e.what());
  }
  write_resolved_config(app, a.out);
  std::map<std::string, int> scenes;
  for (const auto& t : store.tracks) scenes[t.scene_id]++;
  std::cout << "wrote " << a.out << ": " << store.tracks.size() << " tracks, " << store.patch_count()
            << " patches, " << scenes.size() << " scenes\n";
  return 0;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string schedule = "basic";
  std::string store, geo, ill, first, second;
  std::size_t split_epoch = 0;
  std::size_t epochs = 50;
  std::size_t batch_size = 512;
  std::size_t positives = 2;
  std::size_t anchors = 0;
  double lr = 0.1;
  std::size_t decay_start = 30;
  std::size_t decay_every = 10;
  double margin = 1.0;
  std::string weight_mode = "batch-sigmoid";
  std::string positive_mining = "hardest";
  bool toy = false;
  std::size_t dim = 0;
  std::size_t input_side = 0;
  std::string channel_plan;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;
  std::string out = "run";
};

int cmd_train(const TrainArgs& a, const CLI::App& app) {
  NetConfig net_cfg = a.toy ? NetConfig::toy() : NetConfig{};
  LossConfig loss;
  OptimizerConfig opt;
  TrainingSchedule s;
  StepOptions options;
  try {
    if (a.dim) net_cfg.descriptor_dim = a.dim;
    if (a.input_side) net_cfg.input_side = a.input_side;
    if (!a.channel_plan.empty()) net_cfg.channel_plan = parse_channel_plan(a.channel_plan);
    net_cfg.rng_seed = a.seed;
    net_cfg.validate();
    loss.margin = a.margin;
    loss.weight_mode = parse_weight_mode(a.weight_mode);
    loss.validate();
    opt.lr0 = a.lr;
    opt.decay_start = a.decay_start;
    opt.decay_every = a.decay_every;
    opt.validate();
    if (a.positive_mining == "random")
      options.positive_mining = PositiveMining::Random;
    else if (a.positive_mining != "hardest")
      exit_with(kUsage, "--positive-mining must be hardest or random, got " + a.positive_mining);
    s.kind = parse_schedule_kind(a.schedule);
  } catch (const Error& e) {
    exit_with(kUsage, e.what());
  }

  CorrespondenceStore first, second;
  if (s.kind == ScheduleKind::Separation) {
    first = load_input_store(a.geo, "--geo");
    second = load_input_store(a.ill, "--ill");
  } else if (s.kind == ScheduleKind::FineTune) {
    first = load_input_store(a.first, "--first");
    second = load_input_store(a.second, "--second");
  } else if (a.schedule == "mixed" && a.store.empty()) {
    first = concatenate_stores(load_input_store(a.geo, "--geo"), load_input_store(a.ill, "--ill"));
  } else {
    first = load_input_store(a.store, "--store");
  }
  s.first = &first;
  s.second = s.kind == ScheduleKind::Basic ? nullptr : &second;
  s.split_epoch = a.split_epoch;
  s.epochs = a.epochs;
  s.batch_size = a.batch_size;
  s.positives_per_anchor = a.positives;
  s.anchors_per_batch = a.anchors;
  try {
    s.validate();
  } catch (const Error& e) {
    exit_with(kUsage, e.what());
  }

  const fs::path out(a.out);
  write_resolved_config(app, out);
  Network<float> net(net_cfg);
  TrainCallbacks cb;
  cb.on_event = [](const std::string& msg) { std::cout << msg << '\n'; };
  cb.on_epoch = [&](const EpochReport& e) {
    std::cout << "epoch " << e.epoch << " lr " << e.lr << " loss " << std::fixed << std::setprecision(4)
              << e.loss_geo;
    if (e.loss_ill) std::cout << " / " << *e.loss_ill;
    std::cout << std::defaultfloat << " (" << e.iterations << " it, " << std::setprecision(3)
              << e.wall_ms / 1000.0 << " s)\n"
              << std::setprecision(6);
    if (a.checkpoint_every && (e.epoch + 1) % a.checkpoint_every == 0)
      net.save((out / ("epoch_" + std::to_string(e.epoch) + ".ckpt")).string());
  };
  TrainingReport report;
  try {
    report = train(net, s, loss, opt, a.seed, options, cb);
  } catch (const Error& e) {
    exit_with(kTraining, std::string("training failed: ") + e.what());
  }
  net.save((out / "final.ckpt").string());
  std::ofstream csv(out / "report.csv");
  write_report_csv(csv, report);
  std::cout << "wrote " << (out / "final.ckpt").string() << " and " << (out / "report.csv").string() << '\n';
  return 0;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> compare;
  std::string split;
  std::string out = "eval";
  std::uint64_t seed = 0;
  bool mutual = false;
  std::size_t sequence_tracks = 20;
  std::size_t max_queries = 200;
};

int cmd_eval(const EvalArgs& a, const CLI::App& app) {
  if (a.checkpoint.empty() == a.compare.empty())
    exit_with(kUsage, "give exactly one of --checkpoint or --compare");
  const auto store = load_input_store(a.split, "--split");
  SplitConfig sc;
  sc.sequence_tracks = a.sequence_tracks;
  sc.max_queries = a.max_queries;
  sc.seed = a.seed;
  EvalSplit split;
  try {
    split = make_eval_split(store, sc);
  } catch (const Error& e) {
    exit_with(kUsage, "--split " + a.split + ": " + e.what());
  }
  const fs::path out(a.out);
  write_resolved_config(app, out);

  auto run = [&](const std::string& path) {
    const auto net = load_checkpoint(path);
    check_store_matches(store, net.config(), a.split, path);
    return evaluate(net, split, a.seed, a.mutual);
  };
  auto print = [](const std::string& label, const EvalResult& r) {
    for (const auto& row : r.rows)
      std::cout << label << row.task << '/' << row.split << ": " << std::fixed << std::setprecision(4)
                << row.value << std::defaultfloat << " (" << row.items << " items)\n";
  };
  if (!a.compare.empty()) {
    const auto ra = run(a.compare[0]);
    const auto rb = run(a.compare[1]);
    print("A ", ra);
    print("B ", rb);
    std::ofstream csv(out / "compare.csv");
    write_compare_csv(csv, ra.rows, rb.rows);
    std::cout << "wrote " << (out / "compare.csv").string() << '\n';
    return 0;
  }
  const auto r = run(a.checkpoint);
  print("", r);
  std::ofstream csv(out / "eval.csv");
  write_eval_csv(csv, r.rows);
  std::ofstream plot(out / "precision_by_rank.txt");
  write_plot_data(plot, r.precision_by_rank);
  std::cout << "wrote " << (out / "eval.csv").string() << " and " << (out / "precision_by_rank.txt").string()
            << '\n';
  return 0;
}

// ---- export-descriptors --------------------------------------------------

struct ExportArgs {
  std::string checkpoint;
  std::string store;
  std::string out;
};

int cmd_export(const ExportArgs& a) {
  const auto store = load_input_store(a.store, "--store");
  const auto net = load_checkpoint(a.checkpoint);
  check_store_matches(store, net.config(), a.store, a.checkpoint);
  std::vector<Patch> patches;
  for (const auto& t : store.tracks) patches.insert(patches.end(), t.patches.begin(), t.patches.end());
  const auto desc = net.describe(patches);
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream file(out);
  write_descriptors(file, desc);
  if (!file) exit_with(kUsage, "cannot write " + a.out);
  std::cout << "wrote " << desc.count << " descriptors of dim " << desc.dim << " to " << a.out << '\n';
  return 0;
}

// ---- repro-table1 --------------------------------------------------------

struct ReproArgs {
  std::string out = "table1";
  std::size_t seeds = 3;
  std::size_t tracks = 256;
  std::size_t eval_tracks = 120;
  std::size_t epochs = 10;
  double lr = 0.01;
};

int cmd_repro(const ReproArgs& a, const CLI::App& app) {
  TwoDomainConfig cfg;
  cfg.train_tracks = a.tracks;
  cfg.eval_tracks = a.eval_tracks;
  cfg.epochs = a.epochs;
  cfg.lr0 = a.lr;
  const fs::path out(a.out);
  write_resolved_config(app, out);
  const std::vector<Table1Schedule> schedules{Table1Schedule::RandomInit, Table1Schedule::Mixed,
                                              Table1Schedule::FineTuneGeoIll, Table1Schedule::FineTuneIllGeo,
                                              Table1Schedule::Separation};
  std::map<Table1Schedule, std::vector<double>> scores;
  std::ofstream csv(out / "table1.csv");
  csv << "schedule,seed,matching_map\n" << std::setprecision(10);
  try {
    for (std::uint64_t seed = 0; seed < a.seeds; ++seed) {
      const auto data = make_two_domain(cfg, seed);
      for (auto s : schedules) {
        const double map = run_table1_schedule(data, cfg, s, seed).matching_map;
        scores[s].push_back(map);
        csv << table1_schedule_name(s) << ',' << seed << ',' << map << '\n';
        std::cout << "seed " << seed << ' ' << table1_schedule_name(s) << ": " << std::fixed
                  << std::setprecision(4) << map << std::defaultfloat << '\n';
      }
    }
  } catch (const Error& e) {
    exit_with(kTraining, std::string("training failed: ") + e.what());
  }
  std::cout << "\nschedule            mean matching mAP\n";
  for (auto s : schedules) {
    const auto& v = scores[s];
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    std::cout << std::left << std::setw(20) << table1_schedule_name(s) << std::fixed << std::setprecision(4)
              << mean << std::defaultfloat << '\n';
  }
  std::cout << "wrote " << (out / "table1.csv").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Illumination-robust local patch descriptors: datasets, training, evaluation"};
  app.set_config("--config", "", "INI or TOML file supplying any flag; the command line wins");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  BuildArgs b;
  auto* build = app.add_subcommand("build-dataset", "Build a correspondence store from frames or synthesis");
  build->add_option("--out", b.out, "Output store directory")->required();
  build->add_flag("--synth", b.synth, "Render a synthetic store");
  build->add_option("--tracks", b.tracks, "Synthetic tracks");
  build->add_option("--views", b.views, "Synthetic views per track");
  build->add_option("--mode", b.mode, "geometry, illumination or both");
  build->add_option("--seed", b.seed, "Synthesis seed");
  build->add_option("--frames", b.frames, "Directory of .pgm frames, or of one subdirectory per scene");
  build->add_option("--keypoints", b.keypoints, "Keypoint import file replacing the detector");
  build->add_option("--frames-per-scene", b.frames_per_scene, "Frames kept per scene");
  build->add_option("--tolerance", b.tolerance, "Grouping tolerance in pixels");
  build->add_option("--max-keypoints", b.max_keypoints, "Detections kept per frame");
  build->add_option("--expect-dim", b.expect_dim, "Record the descriptor_dim this store is meant for");
  build->add_option("--expect-input-side", b.expect_input_side, "Record the input_side this store is meant for");

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train a descriptor network");
  tr->add_option("--schedule", t.schedule, "basic, mixed, finetune or separation");
  tr->add_option("--store", t.store, "Store for basic / mixed");
  tr->add_option("--geo", t.geo, "Geometry store (separation, or mixed without --store)");
  tr->add_option("--ill", t.ill, "Illumination store (separation, or mixed without --store)");
  tr->add_option("--first", t.first, "First store (finetune)");
  tr->add_option("--second", t.second, "Second store (finetune)");
  tr->add_option("--split-epoch", t.split_epoch, "Epoch at which finetune switches stores");
  tr->add_option("--epochs", t.epochs, "Epochs");
  tr->add_option("--batch-size", t.batch_size, "Patches per update");
  tr->add_option("--positives", t.positives, "Positives per anchor (M)");
  tr->add_option("--anchors", t.anchors, "Anchors per batch (N); 0 derives it from the batch size");
  tr->add_option("--lr", t.lr, "Initial learning rate");
  tr->add_option("--decay-start", t.decay_start, "First epoch with a decayed rate");
  tr->add_option("--decay-every", t.decay_every, "Epochs between decays");
  tr->add_option("--margin", t.margin, "Triplet margin");
  tr->add_option("--weight-mode", t.weight_mode, "unit, batch-sigmoid or relative");
  tr->add_option("--positive-mining", t.positive_mining, "hardest or random");
  tr->add_flag("--toy", t.toy, "Use the reduced-width network");
  tr->add_option("--dim", t.dim, "Descriptor dimension override");
  tr->add_option("--input-side", t.input_side, "Network input side override");
  tr->add_option("--channel-plan", t.channel_plan, "Stages as channels/stride, e.g. 32/1,64/2");
  tr->add_option("--seed", t.seed, "Initialization and sampling seed");
  tr->add_option("--checkpoint-every", t.checkpoint_every, "Also checkpoint every K epochs");
  tr->add_option("--out", t.out, "Output directory");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints on a held-out store");
  ev->add_option("--checkpoint", e.checkpoint, "Checkpoint to evaluate");
  ev->add_option("--compare", e.compare, "Two checkpoints to compare")->expected(2);
  ev->add_option("--split", e.split, "Held-out store directory")->required();
  ev->add_option("--out", e.out, "Output directory");
  ev->add_option("--seed", e.seed, "Split sampling seed");
  ev->add_flag("--mutual", e.mutual, "Keep only mutual nearest neighbours when matching");
  ev->add_option("--sequence-tracks", e.sequence_tracks, "Tracks per matching sequence");
  ev->add_option("--max-queries", e.max_queries, "Retrieval queries");

  ExportArgs x;
  auto* ex = app.add_subcommand("export-descriptors", "Write descriptors for every patch of a store");
  ex->add_option("--checkpoint", x.checkpoint, "Checkpoint")->required();
  ex->add_option("--store", x.store, "Store directory")->required();
  ex->add_option("--out", x.out, "Descriptor file")->required();

  ReproArgs r;
  auto* rp = app.add_subcommand("repro-table1", "Compare training schedules on the synthetic two-domain benchmark");
  rp->add_option("--out", r.out, "Output directory");
  rp->add_option("--seeds", r.seeds, "Seeds");
  rp->add_option("--tracks", r.tracks, "Training tracks per domain");
  rp->add_option("--eval-tracks", r.eval_tracks, "Held-out tracks");
  rp->add_option("--epochs", r.epochs, "Epochs per schedule");
  rp->add_option("--lr", r.lr, "Initial learning rate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (build->parsed()) return cmd_build_dataset(b, *build);
    if (tr->parsed()) return cmd_train(t, *tr);
    if (ev->parsed()) return cmd_eval(e, *ev);
    if (ex->parsed()) return cmd_export(x);
    if (rp->parsed()) return cmd_repro(r, *rp);
  } catch (const Exit& ex_) {
    std::cerr << "error: " << ex_.message << '\n';
    return ex_.code;
  } catch (const std::exception& ex_) {
    std::cerr << "error: " << ex_.what() << '\n';
    return 1;
  }
  return kUsage;
}
