#pragma once

// Learning-rate schedule, Adam, single-batch and two-branch training steps,
// and the epoch loop over the Basic / FineTune / Separation schedules.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ifnet/dataset.hpp"
#include "ifnet/losses.hpp"
#include "ifnet/mining.hpp"
#include "ifnet/net.hpp"

namespace ifnet {

struct OptimizerConfig {
  double lr0 = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t decay_start = 30;  // first epoch at lr0 / 10
  std::size_t decay_every = 10;
  double decay_factor = 10.0;

  // Throws InvalidConfig.
  void validate() const;
};

// lr0 / factor^k with k = 0 before decay_start, else floor((e - start) / every) + 1.
double lr_at(std::size_t epoch, const OptimizerConfig& config);

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update of every parameter from its gradient
// accumulator. Throws ShapeMismatch when the state was built for other shapes.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState& state, double lr,
               const OptimizerConfig& config);

enum class ScheduleKind { Basic, FineTune, Separation };

std::string schedule_kind_name(ScheduleKind kind);
// Throws InvalidConfig.
ScheduleKind parse_schedule_kind(const std::string& text);

struct TrainingSchedule {
  ScheduleKind kind = ScheduleKind::Basic;
  // Basic: first. FineTune: first, then second from split_epoch on.
  // Separation: first = geometry store, second = illumination store; the
  // batch is split evenly between the two branches.
  const CorrespondenceStore* first = nullptr;
  const CorrespondenceStore* second = nullptr;
  std::size_t split_epoch = 0;
  std::size_t epochs = 50;
  std::size_t batch_size = 512;
  std::size_t positives_per_anchor = 2;  // M
  std::size_t anchors_per_batch = 0;     // N; 0 = batch_size / (M + 1)

  std::size_t anchors() const;
  // Throws InvalidConfig.
  void validate() const;
};

struct StepOptions {
  PositiveMining positive_mining = PositiveMining::Hardest;
};

template <typename T>
class Trainer {
 public:
  Trainer(Network<T>& net, LossConfig loss, OptimizerConfig opt, StepOptions options = {},
          std::uint64_t seed = 0);

  // Forms triplets, evaluates the loss, backpropagates and applies one update.
  // loss_scale multiplies the loss before backward.
  double basic_step(const CorrespondenceBatch& batch, double lr, double loss_scale = 1.0);
  // Both branches through the one network, mined separately; the gradient of
  // loss_geo + loss_ill drives a single update.
  std::pair<double, double> separation_step(const CorrespondenceBatch& geo,
                                            const CorrespondenceBatch& ill, double lr);

  Network<T>& net() { return net_; }
  const AdamState& optimizer_state() const { return adam_; }

 private:
  typename Graph<T>::Var branch_loss(Graph<T>& graph, const CorrespondenceBatch& batch);
  void apply(double lr);

  Network<T>& net_;
  LossConfig loss_;
  OptimizerConfig opt_;
  StepOptions options_;
  Rng rng_;
  AdamState adam_;
};

// Draws n distinct tracks (in order[offset .. offset + n)) and for each an
// anchor plus m positives: m + 1 distinct members when the track has enough,
// otherwise positives with replacement.
CorrespondenceBatch sample_batch(const CorrespondenceStore& store,
                                 const std::vector<std::size_t>& order, std::size_t offset,
                                 std::size_t n, std::size_t m, Rng& rng);

struct EpochReport {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_geo = 0.0;  // the single stream for Basic / FineTune
  std::optional<double> loss_ill;
  double wall_ms = 0.0;
  std::size_t iterations = 0;
  std::string dataset;  // "first", "second" or "both"
};

struct TrainingReport {
  std::vector<EpochReport> epochs;
};

// epoch, lr, loss_geo, loss_ill, wall_ms
void write_report_csv(std::ostream& out, const TrainingReport& report);

struct TrainCallbacks {
  std::function<void(const EpochReport&)> on_epoch;
  std::function<void(const std::string&)> on_event;
};

// Throws InsufficientTracks, InvalidConfig, NonFiniteLoss.
template <typename T>
TrainingReport train(Network<T>& net, const TrainingSchedule& schedule, const LossConfig& loss,
                     const OptimizerConfig& opt, std::uint64_t seed, StepOptions options = {},
                     const TrainCallbacks& callbacks = {});

}  // namespace ifnet
