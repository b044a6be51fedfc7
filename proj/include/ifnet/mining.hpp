#pragma once

// Correspondence batches and in-batch mining: the farthest positive per
// anchor and the closest non-matching descriptor on either side of the pair.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ifnet/graph.hpp"
#include "ifnet/net.hpp"
#include "ifnet/patch.hpp"
#include "ifnet/rng.hpp"

namespace ifnet {

struct CorrespondenceBatch {
  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<Patch> anchors;    // n
  std::vector<Patch> positives;  // n * m, row-major: positives[i * m + j]
  std::vector<std::int64_t> track_ids;

  // Throws BatchTooSmall, DuplicateTrackIds, ShapeMismatch.
  void validate() const;
  // Anchors followed by the positives, the order fed to the network.
  std::vector<Patch> all_patches() const;
};

struct DistanceMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> entries;

  double at(std::size_t i, std::size_t j) const { return entries[i * cols + j]; }
};

// Throws DimMismatch.
template <typename T>
DistanceMatrix pairwise_distances(const DescriptorBatch<T>& left, const DescriptorBatch<T>& right);

// argmax per row, lowest column on ties. Throws EmptyRow.
std::vector<std::size_t> mine_hard_positive(const DistanceMatrix& d_pos);

enum class NegativeSource { OtherRowPositive, OtherRowAnchor };

struct HardNegative {
  std::size_t index = 0;
  NegativeSource source = NegativeSource::OtherRowPositive;
  double distance = 0.0;

  friend bool operator==(const HardNegative&, const HardNegative&) = default;
};

// d_ap[i][k] = distance(anchor i, chosen positive k). For row i the candidates
// are p_k (entry [i][k]) and a_k (entry [k][i]) over every k whose track id
// differs from row i's. Ordered by (distance, source, k): on equal distance a
// positive-side candidate wins, then the lowest k.
// Throws BatchTooSmall, DuplicateTrackIds (a row with no candidate left).
std::vector<HardNegative> mine_hard_negative(const DistanceMatrix& d_ap,
                                             const std::vector<std::int64_t>& track_ids);

template <typename T>
std::vector<HardNegative> mine_hard_negative(const DescriptorBatch<T>& anchors,
                                             const DescriptorBatch<T>& chosen_positives,
                                             const std::vector<std::int64_t>& track_ids);

enum class PositiveMining { Hardest, Random };

template <typename T>
struct MinedTriplets {
  using Var = typename Graph<T>::Var;

  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<std::size_t> positive_index;
  std::vector<HardNegative> negatives;
  std::vector<double> d_max;  // value of d_M per row
  std::vector<double> d_min;  // value of d_m per row

  Var descriptors;  // [n * (m + 1), dim]: anchors, then positives
  Var d_pos;        // [n, m]
  Var d_ap;         // [n, n]
  Var d_M;          // [n]
  Var d_m;          // [n]
};

// Describes all n * (m + 1) patches in one pass, mines on the recorded
// distances and gathers the selected entries as graph nodes. `rng` is only
// used with PositiveMining::Random.
template <typename T>
MinedTriplets<T> form_triplets(Graph<T>& graph, Network<T>& net, const CorrespondenceBatch& batch,
                               bool train_mode, PositiveMining positives = PositiveMining::Hardest,
                               Rng* rng = nullptr);

// Same mining steps over precomputed descriptors [n * (m + 1), dim].
template <typename T>
MinedTriplets<T> mine_triplets(Graph<T>& graph, typename Graph<T>::Var descriptors, std::size_t n,
                               std::size_t m, const std::vector<std::int64_t>& track_ids,
                               PositiveMining positives = PositiveMining::Hardest,
                               Rng* rng = nullptr);

}  // namespace ifnet
