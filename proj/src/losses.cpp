#include "ifnet/losses.hpp"

#include <algorithm>

namespace ifnet {

std::string weight_mode_name(WeightMode mode) {
  switch (mode) {
    case WeightMode::Unit: return "unit";
    case WeightMode::BatchSigmoid: return "batch-sigmoid";
    case WeightMode::Relative: return "relative";
  }
  return "unknown";
}

WeightMode parse_weight_mode(const std::string& text) {
  if (text == "unit") return WeightMode::Unit;
  if (text == "batch-sigmoid") return WeightMode::BatchSigmoid;
  if (text == "relative") return WeightMode::Relative;
  fail(ErrorKind::InvalidConfig,
       "weight_mode '" + text + "' (expected unit, batch-sigmoid or relative)");
}

void LossConfig::validate() const {
  if (!(margin >= 0.0)) fail(ErrorKind::InvalidConfig, "margin must be >= 0");
}

double triplet_margin_loss(double d_ap, double d_an, double margin) {
  if (d_ap < 0.0 || d_an < 0.0)
    fail(ErrorKind::NegativeDistance, "distances must be >= 0, got d_ap=" + std::to_string(d_ap) +
                                          ", d_an=" + std::to_string(d_an));
  return std::max(margin + d_ap - d_an, 0.0);
}

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

void check_lists(const std::vector<double>& d_max, const std::vector<double>& d_min) {
  if (d_max.empty()) fail(ErrorKind::EmptyBatch, "no mined distances");
  if (d_max.size() != d_min.size())
    fail(ErrorKind::DimMismatch, "d_M has " + std::to_string(d_max.size()) + " entries, d_m has " +
                                     std::to_string(d_min.size()));
}

}  // namespace

BatchWeights batch_weights(const std::vector<double>& d_max, const std::vector<double>& d_min,
                           WeightMode mode) {
  check_lists(d_max, d_min);
  const std::size_t n = d_max.size();
  BatchWeights w{std::vector<double>(n, 1.0), std::vector<double>(n, 1.0)};
  switch (mode) {
    case WeightMode::Unit:
      break;
    case WeightMode::BatchSigmoid:
      std::fill(w.w_p.begin(), w.w_p.end(), sigmoid(mean_of(d_max)));
      std::fill(w.w_n.begin(), w.w_n.end(), sigmoid(mean_of(d_min)));
      break;
    case WeightMode::Relative: {
      const double mp = mean_of(d_max), mn = mean_of(d_min);
      for (std::size_t i = 0; i < n; ++i) {
        w.w_p[i] = sigmoid(d_max[i] - mp) + 0.5;
        w.w_n[i] = sigmoid(d_min[i] - mn) + 0.5;
      }
      break;
    }
  }
  return w;
}

double hard_positive_triplet_loss(const std::vector<double>& d_max,
                                  const std::vector<double>& d_min, double margin) {
  check_lists(d_max, d_min);
  double s = 0;
  for (std::size_t i = 0; i < d_max.size(); ++i) s += triplet_margin_loss(d_max[i], d_min[i], margin);
  return s / static_cast<double>(d_max.size());
}

double roi_loss(const std::vector<double>& d_max, const std::vector<double>& d_min,
                const LossConfig& config) {
  const auto w = batch_weights(d_max, d_min, config.weight_mode);
  double s = 0;
  for (std::size_t i = 0; i < d_max.size(); ++i) {
    if (d_max[i] < 0.0 || d_min[i] < 0.0)
      fail(ErrorKind::NegativeDistance, "negative mined distance in row " + std::to_string(i));
    s += std::max(w.w_p[i] * d_max[i] + config.margin - w.w_n[i] * d_min[i], 0.0);
  }
  return s / static_cast<double>(d_max.size());
}

template <typename T>
typename Graph<T>::Var weighted_triplet_loss(Graph<T>& graph, typename Graph<T>::Var d_max,
                                             typename Graph<T>::Var d_min,
                                             const BatchWeights& weights, double margin) {
  std::vector<T> wp(weights.w_p.begin(), weights.w_p.end());
  std::vector<T> wn(weights.w_n.begin(), weights.w_n.end());
  auto pos = graph.add_scalar(graph.mul_elementwise(d_max, std::move(wp)), static_cast<T>(margin));
  auto hinge = graph.relu(graph.sub(pos, graph.mul_elementwise(d_min, std::move(wn))));
  return graph.mean(hinge);
}

template <typename T>
typename Graph<T>::Var hard_positive_triplet_loss(Graph<T>& graph, const MinedTriplets<T>& t,
                                                  double margin) {
  auto hinge = graph.relu(graph.sub(graph.add_scalar(t.d_M, static_cast<T>(margin)), t.d_m));
  return graph.mean(hinge);
}

template <typename T>
typename Graph<T>::Var roi_loss(Graph<T>& graph, const MinedTriplets<T>& t,
                                const LossConfig& config) {
  return weighted_triplet_loss(graph, t.d_M, t.d_m,
                               batch_weights(t.d_max, t.d_min, config.weight_mode), config.margin);
}

#define IFNET_INSTANTIATE_LOSSES(T)                                                            \
  template Graph<T>::Var weighted_triplet_loss<T>(Graph<T>&, Graph<T>::Var, Graph<T>::Var,     \
                                                  const BatchWeights&, double);                \
  template Graph<T>::Var hard_positive_triplet_loss<T>(Graph<T>&, const MinedTriplets<T>&,     \
                                                       double);                                \
  template Graph<T>::Var roi_loss<T>(Graph<T>&, const MinedTriplets<T>&, const LossConfig&);

IFNET_INSTANTIATE_LOSSES(float)
IFNET_INSTANTIATE_LOSSES(double)

}  // namespace ifnet
