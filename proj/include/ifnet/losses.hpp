#pragma once

// Triplet margin loss, its hard-positive batch form, and the ROI weighted
// variant. Weights are computed from the mined distances and enter the graph
// as constants.

#include <cmath>
#include <string>
#include <vector>

#include "ifnet/graph.hpp"
#include "ifnet/mining.hpp"

namespace ifnet {

enum class WeightMode { Unit, BatchSigmoid, Relative };

std::string weight_mode_name(WeightMode mode);
// Throws InvalidConfig.
WeightMode parse_weight_mode(const std::string& text);

struct LossConfig {
  double margin = 1.0;
  WeightMode weight_mode = WeightMode::BatchSigmoid;

  // Throws InvalidConfig.
  void validate() const;
};

struct BatchWeights {
  std::vector<double> w_p;
  std::vector<double> w_n;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// max(m + d_ap - d_an, 0). Throws NegativeDistance.
double triplet_margin_loss(double d_ap, double d_an, double margin);

// Throws EmptyBatch, DimMismatch.
BatchWeights batch_weights(const std::vector<double>& d_max, const std::vector<double>& d_min,
                           WeightMode mode);

// mean_i max(m + d_M,i - d_m,i, 0) over value lists.
double hard_positive_triplet_loss(const std::vector<double>& d_max,
                                  const std::vector<double>& d_min, double margin);
// mean_i max(m + w_p,i d_M,i - w_n,i d_m,i, 0) over value lists.
double roi_loss(const std::vector<double>& d_max, const std::vector<double>& d_min,
                const LossConfig& config);

// Graph forms over mined triplets; return a scalar node.
template <typename T>
typename Graph<T>::Var hard_positive_triplet_loss(Graph<T>& graph, const MinedTriplets<T>& t,
                                                  double margin);
template <typename T>
typename Graph<T>::Var roi_loss(Graph<T>& graph, const MinedTriplets<T>& t,
                                const LossConfig& config);
// Loss with the given weights frozen.
template <typename T>
typename Graph<T>::Var weighted_triplet_loss(Graph<T>& graph, typename Graph<T>::Var d_max,
                                             typename Graph<T>::Var d_min,
                                             const BatchWeights& weights, double margin);

}  // namespace ifnet
