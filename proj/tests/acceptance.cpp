// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ifnet/experiments.hpp"
#include "ifnet/grad_check.hpp"

using namespace ifnet;
using G = Graph<double>;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::vector<std::int64_t> iota_ids(std::size_t n) {
  std::vector<std::int64_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

Tensor<double> random_point(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

double row_norm(std::span<const float> r) {
  double s = 0;
  for (float v : r) s += double(v) * double(v);
  return std::sqrt(s);
}

double row_norm(std::span<const double> r) {
  double s = 0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

Patch random_patch(std::mt19937_64& rng) {
  Patch p;
  for (auto& v : p.pixels) v = static_cast<std::uint8_t>(rng() % 256);
  return p;
}

// Collects finite-difference results until `needed` smooth points pass.
struct GradTally {
  std::size_t ok = 0, kinks = 0;
  double worst = 0;
  void add(const GradCheckResult& r) {
    if (r.status != GradCheckStatus::Ok) {
      ++kinks;
      return;
    }
    ++ok;
    worst = std::max(worst, r.max_relative_error);
  }
};

Outcome criterion1() {
  constexpr std::size_t kPoints = 100, kN = 4, kM = 3, kD = 5;
  std::mt19937_64 rng(101);
  Outcome out;
  auto run = [&](const char* name, const std::function<GradCheckResult(const Tensor<double>&)>& check,
                 Shape shape) {
    GradTally t;
    for (std::size_t attempt = 0; t.ok < kPoints && attempt < 10 * kPoints; ++attempt)
      t.add(check(random_point(shape, rng)));
    const bool pass = t.ok >= kPoints && t.worst < 1e-4;
    out.pass = out.pass && pass;
    out.detail += std::string(name) + " " + std::to_string(t.ok) + " pts max " + fmt("%.2e", t.worst) + "; ";
  };

  // plain triplet margin loss on explicit (anchor, positive, negative) rows
  run("plain", [&](const Tensor<double>& p) {
    return grad_check([](G& g, G::Var x) {
      auto y = g.l2_normalize(x);
      std::vector<std::size_t> a(kN), pos(kN), neg(kN);
      for (std::size_t i = 0; i < kN; ++i) a[i] = i, pos[i] = kN + i, neg[i] = 2 * kN + i;
      auto ya = g.gather_rows(y, a);
      auto dp = g.reshape(g.grouped_distance(ya, g.gather_rows(y, pos), 1), {kN});
      auto dn = g.reshape(g.grouped_distance(ya, g.gather_rows(y, neg), 1), {kN});
      return g.mean(g.relu(g.add_scalar(g.sub(dp, dn), 1.0)));
    }, p);
  }, {3 * kN, kD});

  run("hard-positive", [&](const Tensor<double>& p) {
    return grad_check([](G& g, G::Var x) {
      const auto t = mine_triplets(g, g.l2_normalize(x), kN, kM, iota_ids(kN));
      return hard_positive_triplet_loss(g, t, 1.0);
    }, p);
  }, {kN * (kM + 1), kD});

  for (auto mode : {WeightMode::BatchSigmoid, WeightMode::Relative}) {
    const std::string name = "roi-" + weight_mode_name(mode);
    run(name.c_str(), [&](const Tensor<double>& p) {
      // weights enter backward as constants, so they are frozen at the base point
      G base;
      const auto t0 = mine_triplets(base, base.l2_normalize(base.constant(p)), kN, kM, iota_ids(kN));
      const auto w = batch_weights(t0.d_max, t0.d_min, mode);
      return grad_check([&](G& g, G::Var x) {
        const auto t = mine_triplets(g, g.l2_normalize(x), kN, kM, iota_ids(kN));
        return weighted_triplet_loss(g, t.d_M, t.d_m, w, 1.0);
      }, p);
    }, {kN * (kM + 1), kD});
  }

  // patches -> network -> mining -> ROI loss, over the network parameters
  NetConfig cfg;
  cfg.channel_plan = {{2, 1}, {2, 2}, {4, 2}};
  cfg.input_side = 8;
  cfg.descriptor_dim = 4;
  cfg.rng_seed = 5;
  Network<double> net(cfg);
  CorrespondenceBatch batch;
  batch.n = 3;
  batch.m = 2;
  batch.track_ids = {0, 1, 2};
  for (int i = 0; i < 3; ++i) batch.anchors.push_back(random_patch(rng));
  for (int i = 0; i < 6; ++i) batch.positives.push_back(random_patch(rng));
  BatchWeights w;
  {
    G g;
    const auto t = form_triplets(g, net, batch, true);
    w = batch_weights(t.d_max, t.d_min, WeightMode::BatchSigmoid);
  }
  const auto r = grad_check([&](G& g) {
    const auto t = form_triplets(g, net, batch, true);
    return weighted_triplet_loss(g, t.d_M, t.d_m, w, 1.0);
  }, net.parameters());
  const bool composite = r.status == GradCheckStatus::Ok && r.max_relative_error < 1e-4;
  out.pass = out.pass && composite;
  out.detail += "composite " + std::to_string(r.checked) + " coords max " + fmt("%.2e", r.max_relative_error) +
                (composite ? "" : " FAILED");
  return out;
}

// Every hard-negative candidate as (distance, side, k); side 0 = positive side.
std::tuple<double, int, std::size_t> brute_negative(const DistanceMatrix& d,
                                                    const std::vector<std::int64_t>& ids,
                                                    std::size_t i) {
  std::vector<std::tuple<double, int, std::size_t>> cands;
  for (std::size_t k = 0; k < d.rows; ++k) {
    if (ids[k] == ids[i]) continue;
    cands.emplace_back(d.at(i, k), 0, k);
    cands.emplace_back(d.at(k, i), 1, k);
  }
  return *std::min_element(cands.begin(), cands.end());
}

Outcome criterion2() {
  std::mt19937_64 rng(202);
  std::size_t agreed = 0, ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng() % 7, m = 1 + rng() % 4, dim = 1 + rng() % 4;
    auto grid = [&](std::size_t count) {
      std::vector<double> v(count);
      for (auto& x : v) x = static_cast<double>(static_cast<int>(rng() % 5) - 2) * 0.5;
      return v;
    };
    const DescriptorBatch<double> anchors(n, dim, grid(n * dim)), positives(n * m, dim, grid(n * m * dim));
    auto dist = [&](std::span<const double> a, std::span<const double> b) {
      long double s = 0;
      for (std::size_t k = 0; k < dim; ++k) s += (long double)(a[k] - b[k]) * (a[k] - b[k]);
      return static_cast<double>(std::sqrt(s));
    };
    DistanceMatrix d_pos{n, m, std::vector<double>(n * m)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) d_pos.entries[i * m + j] = dist(anchors.row(i), positives.row(i * m + j));
    const auto jstar = mine_hard_positive(d_pos);
    bool ok = true;
    std::vector<double> chosen;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < m; ++j) {
        if (d_pos.at(i, j) == d_pos.at(i, best)) ++ties;
        if (d_pos.at(i, j) > d_pos.at(i, best)) best = j;
      }
      ok = ok && best == jstar[i];
      const auto row = positives.row(i * m + jstar[i]);
      chosen.insert(chosen.end(), row.begin(), row.end());
    }
    auto ids = iota_ids(n);
    if (n > 3 && trial % 3 == 0) ids[n - 1] = ids[0];
    const DescriptorBatch<double> chosen_batch(n, dim, chosen);
    const auto neg = mine_hard_negative(anchors, chosen_batch, ids);
    DistanceMatrix d_ap{n, n, std::vector<double>(n * n)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) d_ap.entries[i * n + k] = dist(anchors.row(i), chosen_batch.row(k));
    for (std::size_t i = 0; i < n; ++i) {
      const auto [dd, side, k] = brute_negative(d_ap, ids, i);
      const auto src = side == 0 ? NegativeSource::OtherRowPositive : NegativeSource::OtherRowAnchor;
      ok = ok && neg[i].index == k && neg[i].source == src && std::abs(neg[i].distance - dd) < 1e-12;
    }
    agreed += ok;
  }
  return {agreed == 1000, std::to_string(agreed) + "/1000 batches agree (" + std::to_string(ties) +
                              " positive ties exercised)"};
}

Outcome criterion3() {
  std::mt19937_64 rng(303);
  std::size_t bitwise = 0, argmax_ok = 0, argmax_cases = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 7, m = 1 + rng() % 4;
    G g;
    auto y = g.l2_normalize(g.constant(random_point({n * (m + 1), 6}, rng)));
    const auto t = mine_triplets(g, y, n, m, iota_ids(n));
    const double roi = g.value(roi_loss(g, t, LossConfig{1.0, WeightMode::Unit}))[0];
    const double hp = g.value(hard_positive_triplet_loss(g, t, 1.0))[0];
    bitwise += std::memcmp(&roi, &hp, sizeof roi) == 0;
    const auto& dM = t.d_max;
    if (std::adjacent_find(dM.begin(), dM.end(), std::not_equal_to<>()) == dM.end()) continue;
    ++argmax_cases;
    const auto w = batch_weights(dM, t.d_min, WeightMode::Relative);
    argmax_ok += std::max_element(w.w_p.begin(), w.w_p.end()) - w.w_p.begin() ==
                 std::max_element(dM.begin(), dM.end()) - dM.begin();
  }
  return {bitwise == 100 && argmax_ok == argmax_cases,
          std::to_string(bitwise) + "/100 bitwise equal; relative argmax " + std::to_string(argmax_ok) +
              "/" + std::to_string(argmax_cases)};
}

CorrespondenceStore render(SynthMode mode, std::uint64_t seed, std::size_t tracks, std::size_t views) {
  SynthParams p;
  p.seed = seed;
  p.n_tracks = tracks;
  p.n_views = views;
  p.mode = mode;
  return synth_store(p);
}

Outcome criterion4() {
  Outcome out;
  // (a) FineTune over two identical stores against Basic
  const auto store = render(SynthMode::Both, 41, 64, 4);
  const auto copy = store;
  TrainingSchedule basic;
  basic.first = &store;
  basic.epochs = 4;
  basic.positives_per_anchor = 2;
  basic.anchors_per_batch = 16;
  basic.batch_size = 48;
  auto fine = basic;
  fine.kind = ScheduleKind::FineTune;
  fine.second = &copy;
  fine.split_epoch = 2;
  OptimizerConfig opt;
  opt.lr0 = 0.01;
  Network<float> a(NetConfig::toy()), b(NetConfig::toy());
  const auto ra = train(a, basic, {}, opt, 9);
  const auto rb = train(b, fine, {}, opt, 9);
  std::ostringstream sa, sb;
  a.save(sa);
  b.save(sb);
  bool same_losses = ra.epochs.size() == rb.epochs.size();
  for (std::size_t e = 0; same_losses && e < ra.epochs.size(); ++e)
    same_losses = ra.epochs[e].loss_geo == rb.epochs[e].loss_geo;
  const bool pa = sa.str() == sb.str() && same_losses;
  out.detail += std::string("(a) finetune==basic ") + (pa ? "bitwise" : "DIFFERS");

  // (b) duplicated separation batch against a doubled single-batch loss
  std::vector<std::size_t> order(16);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(4);
  const auto batch = sample_batch(store, order, 0, 16, 2, rng);
  Network<double> c(NetConfig::toy()), d(NetConfig::toy());
  Trainer<double> tc(c, {}, {}), td(d, {}, {});
  tc.separation_step(batch, batch, 0.1);
  td.basic_step(batch, 0.1, 2.0);
  double worst = 0;
  const auto pc = c.parameters(), pd = d.parameters();
  for (std::size_t i = 0; i < pc.size(); ++i)
    for (std::size_t j = 0; j < pc[i]->size(); ++j)
      worst = std::max(worst, std::abs((*pc[i])[j] - (*pd[i])[j]));
  const bool pb = worst <= 1e-10;
  out.detail += "; (b) max param diff " + fmt("%.1e", worst);

  // (c) step schedule
  const OptimizerConfig def;
  bool pcs = true;
  for (std::size_t e = 0; e < 50; ++e)
    pcs = pcs && lr_at(e, def) == (e < 30 ? 0.1 : e < 40 ? 0.01 : 0.001);
  out.detail += std::string("; (c) lr schedule ") + (pcs ? "exact" : "WRONG");
  out.pass = pa && pb && pcs;
  return out;
}

Outcome criterion5() {
  const TwoDomainConfig cfg;
  std::size_t ordered = 0, above_random = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto data = make_two_domain(cfg, seed);
    const double r = run_table1_schedule(data, cfg, Table1Schedule::RandomInit, seed).matching_map;
    const double mix = run_table1_schedule(data, cfg, Table1Schedule::Mixed, seed).matching_map;
    const double sep = run_table1_schedule(data, cfg, Table1Schedule::Separation, seed).matching_map;
    ordered += sep >= mix;
    above_random += sep - r >= 0.10;
    detail += "seed " + std::to_string(seed) + ": sep " + fmt("%.3f", sep) + " mixed " + fmt("%.3f", mix) +
              " random " + fmt("%.3f", r) + "; ";
  }
  detail += "sep>=mixed in " + std::to_string(ordered) + "/3, sep-random>=0.10 in " +
            std::to_string(above_random) + "/3";
  return {ordered >= 2 && above_random == 3, detail};
}

Outcome criterion6() {
  const IlluminationConfig cfg;
  std::size_t wins = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto data = make_illumination(cfg, seed);
    const double roi = run_recipe(data, cfg, Recipe::HardPositiveRoi, seed).matching_map;
    const double plain = run_recipe(data, cfg, Recipe::RandomPositivePlain, seed).matching_map;
    wins += roi >= plain;
    detail += "seed " + std::to_string(seed) + ": roi " + fmt("%.4f", roi) + " control " + fmt("%.4f", plain) + "; ";
  }
  detail += "roi>=control in " + std::to_string(wins) + "/3";
  return {wins >= 2, detail};
}

double brute_ap(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  const std::size_t n = s.size();
  std::vector<std::pair<std::size_t, double>> terms;
  for (std::size_t i = 0; i < n; ++i) {
    if (!l[i]) continue;
    auto rank_of = [&](std::size_t x) {
      std::size_t r = 1;
      for (std::size_t j = 0; j < n; ++j) r += s[j] > s[x] || (s[j] == s[x] && j < x);
      return r;
    };
    const std::size_t ri = rank_of(i);
    std::size_t above = 0;
    for (std::size_t j = 0; j < n; ++j) above += l[j] && rank_of(j) <= ri;
    terms.emplace_back(ri, static_cast<double>(above) / static_cast<double>(ri));
  }
  std::sort(terms.begin(), terms.end());
  double sum = 0;
  for (const auto& t : terms) sum += t.second;
  return sum / static_cast<double>(terms.size());
}

Outcome criterion7() {
  std::mt19937_64 rng(707);
  std::size_t exact = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<double> s(n);
    std::vector<std::uint8_t> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 10) / 3.0;
      l[i] = rng() % 3 == 0;
    }
    l[rng() % n] = 1;
    exact += average_precision(s, l) == brute_ap(s, l);
  }
  const std::vector<double> three{3, 2, 1};
  const double fixture = average_precision(three, std::vector<std::uint8_t>{1, 0, 1});
  const bool fix_ok = std::abs(fixture - 0.833333) <= 1e-6;
  const std::vector<double> d{0.1, 0.2, 0.3};
  const bool pk = precision_at_k(d, std::vector<std::uint8_t>{1, 1, 1}, 40) == 1.0 &&
                  precision_at_k(d, std::vector<std::uint8_t>{1, 0, 1}, 2) == 0.5 &&
                  precision_at_k(d, std::vector<std::uint8_t>{1, 0, 1}, 40) == 2.0 / 3.0;
  return {exact == 1000 && fix_ok && pk, std::to_string(exact) + "/1000 exact; fixture " +
                                             fmt("%.6f", fixture) + "; precision@k " + (pk ? "ok" : "WRONG")};
}

Outcome criterion8() {
  const auto seq = planted_corner_sequence(200, 10, 8);
  const BuildConfig cfg;
  const auto store = build_store({seq.scene}, cfg);
  auto nearest_corner = [&](double x, double y) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < seq.corners.size(); ++i)
      if (std::hypot(x - seq.corners[i].first, y - seq.corners[i].second) <
          std::hypot(x - seq.corners[best].first, y - seq.corners[best].second))
        best = i;
    return best;
  };
  bool sizes = store.tracks.size() == 10;
  std::vector<int> owners(seq.corners.size(), 0);
  for (const auto& t : store.tracks) {
    sizes = sizes && t.patches.size() == 200;
    ++owners[nearest_corner(t.x, t.y)];
  }
  // member level: every detection grouped into a track comes from that track's corner
  std::vector<FrameKeypoints> frames;
  for (std::size_t f = 0; f < seq.scene.frames.size(); ++f)
    frames.push_back({static_cast<std::int64_t>(f), detect_keypoints(seq.scene.frames[f], cfg.detector)});
  std::size_t contaminated = 0;
  for (const auto& kt : group_by_position(frames, cfg.tolerance_px)) {
    const auto owner = nearest_corner(kt.x, kt.y);
    for (const auto& m : kt.members) contaminated += nearest_corner(m.keypoint.x, m.keypoint.y) != owner;
  }
  const bool unique = std::all_of(owners.begin(), owners.end(), [](int o) { return o == 1; });

  const auto dir = std::filesystem::temp_directory_path() / ("ifnet_accept_" + std::to_string(::getpid()));
  save_store(store, dir);
  const auto back = load_store(dir);
  std::filesystem::remove_all(dir);
  const bool round_trip = back == store;
  return {sizes && unique && contaminated == 0 && round_trip,
          std::to_string(store.tracks.size()) + " tracks" + (sizes ? " of 200" : " (wrong sizes)") +
              ", one per corner: " + (unique ? "yes" : "no") + ", contaminated members " +
              std::to_string(contaminated) + ", round trip " + (round_trip ? "lossless" : "LOSSY")};
}

Outcome criterion9() {
  std::mt19937_64 rng(909);
  std::vector<Patch> patches;
  for (int i = 0; i < 24; ++i) patches.push_back(random_patch(rng));
  patches.push_back(Patch());
  Patch bright;
  std::fill(bright.pixels.begin(), bright.pixels.end(), 255);
  patches.push_back(bright);

  double worst = 0;
  std::size_t rows = 0;
  auto take = [&](auto span_rows, std::size_t count, std::size_t dim) {
    for (std::size_t i = 0; i < count; ++i) {
      worst = std::max(worst, std::abs(row_norm(std::span(span_rows.data() + i * dim, dim)) - 1.0));
      ++rows;
    }
  };

  for (auto cfg : {NetConfig{}, NetConfig::toy()}) {
    Network<float> f(cfg);
    const auto e = f.describe(patches);
    take(std::span<const float>(e.rows), e.count, e.dim);
    Graph<float> g;
    const auto& v = g.value(f.describe(g, patches, true));
    take(v.values(), patches.size(), cfg.descriptor_dim);
    Network<double> d(cfg);
    const auto ed = d.describe(patches);
    take(std::span<const double>(ed.rows), ed.count, ed.dim);
  }
  // degenerate train-mode batches: one patch, identical patches
  for (const auto& batch : {std::vector<Patch>{patches[0]}, std::vector<Patch>(4, patches[1])}) {
    Network<float> f(NetConfig::toy());
    Graph<float> g;
    const auto& v = g.value(f.describe(g, batch, true));
    take(v.values(), batch.size(), 128);
  }
  // after training, and through the export format
  const auto store = render(SynthMode::Both, 91, 32, 3);
  TrainingSchedule s;
  s.first = &store;
  s.epochs = 2;
  s.positives_per_anchor = 2;
  s.anchors_per_batch = 16;
  s.batch_size = 48;
  Network<float> trained(NetConfig::toy());
  OptimizerConfig opt;
  opt.lr0 = 0.05;
  train(trained, s, {}, opt, 1);
  std::ostringstream file;
  write_descriptors(file, trained.describe(patches));
  std::istringstream in(file.str());
  const auto back = read_descriptors(in);
  take(std::span<const float>(back.rows), back.count, back.dim);

  return {worst <= 1e-5, std::to_string(rows) + " rows, max |norm - 1| " + fmt("%.2e", worst)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", criterion1},     {"mining oracle equivalence", criterion2},
      {"loss reduction identities", criterion3}, {"schedule semantics", criterion4},
      {"two-domain schedule ordering", criterion5}, {"illumination robustness trend", criterion6},
      {"evaluation correctness", criterion7},   {"dataset builder soundness", criterion8},
      {"descriptor invariant", criterion9}};
  const std::vector<double> budget_s{60, 30, 1e9, 1e9, 900, 1e9, 1e9, 1e9, 1e9};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > budget_s[i]) {
      o.pass = false;
      o.detail += " (over the " + fmt("%.0f", budget_s[i]) + " s budget)";
    }
    failed += !o.pass;
    std::printf("criterion %zu %s: %s - %s [%.1f s]\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
