#include "ifnet/scheduling.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

namespace ifnet {

void OptimizerConfig::validate() const {
  if (!(lr0 > 0.0)) fail(ErrorKind::InvalidConfig, "lr0 must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    fail(ErrorKind::InvalidConfig, "Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail(ErrorKind::InvalidConfig, "Adam eps must be > 0");
  if (decay_every == 0) fail(ErrorKind::InvalidConfig, "decay_every must be >= 1");
  if (!(decay_factor >= 1.0)) fail(ErrorKind::InvalidConfig, "decay_factor must be >= 1");
}

double lr_at(std::size_t epoch, const OptimizerConfig& config) {
  if (epoch < config.decay_start) return config.lr0;
  const std::size_t k = (epoch - config.decay_start) / config.decay_every + 1;
  double divisor = 1.0;
  for (std::size_t i = 0; i < k; ++i) divisor *= config.decay_factor;
  return config.lr0 / divisor;
}

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState& state, double lr,
               const OptimizerConfig& config) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    fail(ErrorKind::ShapeMismatch, "optimizer state holds " + std::to_string(state.m.size()) +
                                       " tensors, got " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].size() != params[i]->size())
      fail(ErrorKind::ShapeMismatch, "optimizer state for parameter " + std::to_string(i) +
                                         " has " + std::to_string(state.m[i].size()) +
                                         " entries, parameter has " +
                                         std::to_string(params[i]->size()));
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i]->values();
    const auto grad = params[i]->grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = static_cast<double>(grad[j]);
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config.eps);
      values[j] = static_cast<T>(static_cast<double>(values[j]) - update);
    }
  }
}

std::string schedule_kind_name(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Basic: return "basic";
    case ScheduleKind::FineTune: return "finetune";
    case ScheduleKind::Separation: return "separation";
  }
  return "unknown";
}

ScheduleKind parse_schedule_kind(const std::string& text) {
  if (text == "basic" || text == "mixed") return ScheduleKind::Basic;
  if (text == "finetune") return ScheduleKind::FineTune;
  if (text == "separation") return ScheduleKind::Separation;
  fail(ErrorKind::InvalidConfig,
       "schedule '" + text + "' (expected basic, mixed, finetune or separation)");
}

std::size_t TrainingSchedule::anchors() const {
  return anchors_per_batch ? anchors_per_batch : batch_size / (positives_per_anchor + 1);
}

void TrainingSchedule::validate() const {
  if (!first) fail(ErrorKind::InvalidConfig, "schedule has no store");
  if (epochs == 0) fail(ErrorKind::InvalidConfig, "epochs must be >= 1");
  if (positives_per_anchor == 0) fail(ErrorKind::InvalidConfig, "M must be >= 1");
  if (anchors() < 2) fail(ErrorKind::InvalidConfig, "batch must hold at least 2 anchors");
  if (anchors() * (positives_per_anchor + 1) > batch_size)
    fail(ErrorKind::InvalidConfig, "N * (M + 1) = " +
                                       std::to_string(anchors() * (positives_per_anchor + 1)) +
                                       " exceeds batch_size " + std::to_string(batch_size));
  switch (kind) {
    case ScheduleKind::Basic:
      break;
    case ScheduleKind::FineTune:
      if (!second) fail(ErrorKind::InvalidConfig, "finetune needs a second store");
      if (split_epoch == 0 || split_epoch >= epochs)
        fail(ErrorKind::InvalidConfig, "split epoch " + std::to_string(split_epoch) +
                                           " must lie strictly inside (0, " +
                                           std::to_string(epochs) + ")");
      break;
    case ScheduleKind::Separation:
      if (!second) fail(ErrorKind::InvalidConfig, "separation needs two stores");
      if (second == first) fail(ErrorKind::InvalidConfig, "separation needs two distinct stores");
      if (anchors() < 4) fail(ErrorKind::InvalidConfig, "separation needs at least 2 anchors per branch");
      break;
  }
}

template <typename T>
Trainer<T>::Trainer(Network<T>& net, LossConfig loss, OptimizerConfig opt, StepOptions options,
                    std::uint64_t seed)
    : net_(net), loss_(loss), opt_(opt), options_(options), rng_(seed) {
  loss_.validate();
  opt_.validate();
}

template <typename T>
typename Graph<T>::Var Trainer<T>::branch_loss(Graph<T>& graph, const CorrespondenceBatch& batch) {
  const auto triplets =
      form_triplets(graph, net_, batch, true, options_.positive_mining, &rng_);
  return roi_loss(graph, triplets, loss_);
}

template <typename T>
void Trainer<T>::apply(double lr) {
  adam_step(net_.parameters(), adam_, lr, opt_);
}

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) fail(ErrorKind::NonFiniteLoss, std::string(what) + " is not finite");
}

}  // namespace

template <typename T>
double Trainer<T>::basic_step(const CorrespondenceBatch& batch, double lr, double loss_scale) {
  net_.zero_grad();
  Graph<T> graph;
  auto loss = branch_loss(graph, batch);
  const double value = static_cast<double>(graph.value(loss)[0]);
  require_finite(value, "loss");
  graph.backward(loss_scale == 1.0 ? loss : graph.mul_scalar(loss, static_cast<T>(loss_scale)));
  apply(lr);
  return value;
}

template <typename T>
std::pair<double, double> Trainer<T>::separation_step(const CorrespondenceBatch& geo,
                                                      const CorrespondenceBatch& ill, double lr) {
  net_.zero_grad();
  Graph<T> graph;
  auto loss_geo = branch_loss(graph, geo);
  auto loss_ill = branch_loss(graph, ill);
  const double lg = static_cast<double>(graph.value(loss_geo)[0]);
  const double li = static_cast<double>(graph.value(loss_ill)[0]);
  require_finite(lg, "geometry loss");
  require_finite(li, "illumination loss");
  graph.backward(graph.add(loss_geo, loss_ill));
  apply(lr);
  return {lg, li};
}

CorrespondenceBatch sample_batch(const CorrespondenceStore& store,
                                 const std::vector<std::size_t>& order, std::size_t offset,
                                 std::size_t n, std::size_t m, Rng& rng) {
  if (offset + n > order.size())
    fail(ErrorKind::InsufficientTracks, "batch needs tracks " + std::to_string(offset) + ".." +
                                            std::to_string(offset + n) + " of " +
                                            std::to_string(order.size()));
  CorrespondenceBatch batch;
  batch.n = n;
  batch.m = m;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& track = store.tracks[order[offset + i]];
    const std::size_t size = track.patches.size();
    if (size == 0) fail(ErrorKind::InsufficientTracks, "empty track in store");
    batch.track_ids.push_back(track.track_id);
    if (size >= m + 1) {
      const auto pick = sample_without_replacement(size, m + 1, rng);
      batch.anchors.push_back(track.patches[pick[0]]);
      for (std::size_t j = 1; j <= m; ++j) batch.positives.push_back(track.patches[pick[j]]);
    } else {
      const std::size_t a = uniform_index(rng, size);
      batch.anchors.push_back(track.patches[a]);
      for (std::size_t j = 0; j < m; ++j) batch.positives.push_back(track.patches[uniform_index(rng, size)]);
    }
  }
  return batch;
}

void write_report_csv(std::ostream& out, const TrainingReport& report) {
  out << "epoch,lr,loss_geo,loss_ill,wall_ms\n";
  out.precision(10);
  for (const auto& e : report.epochs) {
    out << e.epoch << ',' << e.lr << ',' << e.loss_geo << ',';
    if (e.loss_ill) out << *e.loss_ill;
    out << ',' << e.wall_ms << '\n';
  }
}

namespace {

std::vector<std::size_t> shuffled_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  return order;
}

void require_tracks(const CorrespondenceStore& store, std::size_t n, const char* which) {
  if (store.tracks.size() < n)
    fail(ErrorKind::InsufficientTracks, std::string(which) + " store has " +
                                            std::to_string(store.tracks.size()) +
                                            " tracks, batch needs " + std::to_string(n));
}

template <typename F>
auto with_context(std::size_t epoch, std::size_t iteration, F&& step) {
  try {
    return step();
  } catch (const Error& e) {
    const std::string what = e.what();
    const auto colon = what.find(": ");
    fail(e.kind(), "epoch " + std::to_string(epoch) + ", iteration " + std::to_string(iteration) +
                       ": " + (colon == std::string::npos ? what : what.substr(colon + 2)));
  }
}

}  // namespace

template <typename T>
TrainingReport train(Network<T>& net, const TrainingSchedule& schedule, const LossConfig& loss,
                     const OptimizerConfig& opt, std::uint64_t seed, StepOptions options,
                     const TrainCallbacks& callbacks) {
  schedule.validate();
  const std::size_t m = schedule.positives_per_anchor;
  const std::size_t n = schedule.kind == ScheduleKind::Separation ? schedule.anchors() / 2
                                                                    : schedule.anchors();
  require_tracks(*schedule.first, n, "first");
  if (schedule.kind != ScheduleKind::Basic) require_tracks(*schedule.second, n, "second");

  Trainer<T> trainer(net, loss, opt, options, derive_seed(seed, 0xbeef));
  TrainingReport report;
  auto event = [&](const std::string& msg) {
    if (callbacks.on_event) callbacks.on_event(msg);
  };
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochReport er;
    er.epoch = epoch;
    er.lr = lr_at(epoch, opt);
    Rng rng_first(derive_seed(seed, 2 * epoch));
    if (schedule.kind == ScheduleKind::Separation) {
      Rng rng_second(derive_seed(seed, 2 * epoch + 1));
      const auto& geo = *schedule.first;
      const auto& ill = *schedule.second;
      const auto order_geo = shuffled_order(geo.tracks.size(), rng_first);
      const auto order_ill = shuffled_order(ill.tracks.size(), rng_second);
      er.iterations = std::min(geo.tracks.size(), ill.tracks.size()) / n;
      double sum_geo = 0, sum_ill = 0;
      for (std::size_t it = 0; it < er.iterations; ++it) {
        const auto [lg, li] = with_context(epoch, it, [&] {
          const auto bg = sample_batch(geo, order_geo, it * n, n, m, rng_first);
          const auto bi = sample_batch(ill, order_ill, it * n, n, m, rng_second);
          return trainer.separation_step(bg, bi, er.lr);
        });
        sum_geo += lg;
        sum_ill += li;
      }
      er.loss_geo = sum_geo / er.iterations;
      er.loss_ill = sum_ill / er.iterations;
      er.dataset = "both";
    } else {
      const bool second = schedule.kind == ScheduleKind::FineTune && epoch >= schedule.split_epoch;
      if (schedule.kind == ScheduleKind::FineTune && epoch == schedule.split_epoch)
        event("epoch " + std::to_string(epoch) + ": switching to the second store");
      const auto& store = second ? *schedule.second : *schedule.first;
      const auto order = shuffled_order(store.tracks.size(), rng_first);
      er.iterations = store.tracks.size() / n;
      double sum = 0;
      for (std::size_t it = 0; it < er.iterations; ++it)
        sum += with_context(epoch, it, [&] {
          return trainer.basic_step(sample_batch(store, order, it * n, n, m, rng_first), er.lr);
        });
      er.loss_geo = sum / er.iterations;
      er.dataset = second ? "second" : "first";
    }
    er.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                     .count();
    report.epochs.push_back(er);
    if (callbacks.on_epoch) callbacks.on_epoch(er);
  }
  return report;
}

#define IFNET_INSTANTIATE_SCHEDULING(T)                                                        \
  template void adam_step<T>(const std::vector<Tensor<T>*>&, AdamState&, double,               \
                             const OptimizerConfig&);                                          \
  template class Trainer<T>;                                                                   \
  template TrainingReport train<T>(Network<T>&, const TrainingSchedule&, const LossConfig&,    \
                                   const OptimizerConfig&, std::uint64_t, StepOptions,         \
                                   const TrainCallbacks&);

IFNET_INSTANTIATE_SCHEDULING(float)
IFNET_INSTANTIATE_SCHEDULING(double)

}  // namespace ifnet
