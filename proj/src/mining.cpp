#include "ifnet/mining.hpp"

#include <cmath>
#include <numeric>
#include <unordered_set>

#include "ifnet/kernels.hpp"

namespace ifnet {

void CorrespondenceBatch::validate() const {
  if (n < 2) fail(ErrorKind::BatchTooSmall, "batch has " + std::to_string(n) + " rows, need >= 2");
  if (m < 1) fail(ErrorKind::BatchTooSmall, "batch needs at least one positive per anchor");
  if (anchors.size() != n || positives.size() != n * m || track_ids.size() != n)
    fail(ErrorKind::ShapeMismatch, "batch holds " + std::to_string(anchors.size()) +
                                       " anchors, " + std::to_string(positives.size()) +
                                       " positives, " + std::to_string(track_ids.size()) +
                                       " track ids for n=" + std::to_string(n) +
                                       ", m=" + std::to_string(m));
  std::unordered_set<std::int64_t> seen;
  for (auto id : track_ids)
    if (!seen.insert(id).second)
      fail(ErrorKind::DuplicateTrackIds, "track id " + std::to_string(id) + " repeats in batch");
}

std::vector<Patch> CorrespondenceBatch::all_patches() const {
  std::vector<Patch> out(anchors);
  out.insert(out.end(), positives.begin(), positives.end());
  return out;
}

template <typename T>
DistanceMatrix pairwise_distances(const DescriptorBatch<T>& left, const DescriptorBatch<T>& right) {
  if (left.dim != right.dim)
    fail(ErrorKind::DimMismatch, "descriptor dims " + std::to_string(left.dim) + " vs " +
                                     std::to_string(right.dim));
  const auto& kern = kernels::active<T>();
  DistanceMatrix d{left.count, right.count, std::vector<double>(left.count * right.count)};
  for (std::size_t i = 0; i < left.count; ++i)
    for (std::size_t j = 0; j < right.count; ++j)
      d.entries[i * right.count + j] = static_cast<double>(std::sqrt(std::max(
          kern.squared_distance(left.row(i).data(), right.row(j).data(), left.dim), T(0))));
  return d;
}

std::vector<std::size_t> mine_hard_positive(const DistanceMatrix& d_pos) {
  if (d_pos.cols == 0) fail(ErrorKind::EmptyRow, "positive distance matrix has no columns");
  std::vector<std::size_t> out(d_pos.rows, 0);
  for (std::size_t i = 0; i < d_pos.rows; ++i)
    for (std::size_t j = 1; j < d_pos.cols; ++j)
      if (d_pos.at(i, j) > d_pos.at(i, out[i])) out[i] = j;
  return out;
}

std::vector<HardNegative> mine_hard_negative(const DistanceMatrix& d_ap,
                                             const std::vector<std::int64_t>& track_ids) {
  const std::size_t n = d_ap.rows;
  if (n < 2) fail(ErrorKind::BatchTooSmall, "negative mining needs >= 2 rows");
  if (d_ap.cols != n || track_ids.size() != n)
    fail(ErrorKind::DimMismatch, "anchor/positive distances must be " + std::to_string(n) + "x" +
                                     std::to_string(n) + " with one track id per row");
  std::vector<HardNegative> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool found = false;
    HardNegative best;
    // Positives first; only a strictly smaller distance replaces the current pick.
    for (auto source : {NegativeSource::OtherRowPositive, NegativeSource::OtherRowAnchor})
      for (std::size_t k = 0; k < n; ++k) {
        if (track_ids[k] == track_ids[i]) continue;
        const double d =
            source == NegativeSource::OtherRowPositive ? d_ap.at(i, k) : d_ap.at(k, i);
        if (!found || d < best.distance) {
          best = {k, source, d};
          found = true;
        }
      }
    if (!found)
      fail(ErrorKind::DuplicateTrackIds,
           "row " + std::to_string(i) + " has no row with a different track id");
    out[i] = best;
  }
  return out;
}

template <typename T>
std::vector<HardNegative> mine_hard_negative(const DescriptorBatch<T>& anchors,
                                             const DescriptorBatch<T>& chosen_positives,
                                             const std::vector<std::int64_t>& track_ids) {
  if (anchors.count != chosen_positives.count)
    fail(ErrorKind::DimMismatch, "anchor and positive batches differ in length");
  if (anchors.count < 2) fail(ErrorKind::BatchTooSmall, "negative mining needs >= 2 rows");
  return mine_hard_negative(pairwise_distances(anchors, chosen_positives), track_ids);
}

namespace {

template <typename T>
DistanceMatrix matrix_of(const Tensor<T>& t) {
  return {t.extent(0), t.extent(1), std::vector<double>(t.values().begin(), t.values().end())};
}

}  // namespace

template <typename T>
MinedTriplets<T> mine_triplets(Graph<T>& graph, typename Graph<T>::Var descriptors, std::size_t n,
                               std::size_t m, const std::vector<std::int64_t>& track_ids,
                               PositiveMining positives, Rng* rng) {
  if (n < 2) fail(ErrorKind::BatchTooSmall, "batch has " + std::to_string(n) + " rows, need >= 2");
  if (m < 1) fail(ErrorKind::EmptyRow, "no positives per anchor");
  if (graph.value(descriptors).extent(0) != n * (m + 1))
    fail(ErrorKind::ShapeMismatch, "descriptor rows do not match n * (m + 1)");
  if (positives == PositiveMining::Random && !rng)
    fail(ErrorKind::InvalidConfig, "random positive selection needs an rng");

  MinedTriplets<T> t;
  t.n = n;
  t.m = m;
  t.descriptors = descriptors;
  std::vector<std::size_t> anchor_rows(n), positive_rows(n * m);
  std::iota(anchor_rows.begin(), anchor_rows.end(), 0);
  std::iota(positive_rows.begin(), positive_rows.end(), n);
  auto a = graph.gather_rows(descriptors, anchor_rows);
  auto p = graph.gather_rows(descriptors, positive_rows);

  t.d_pos = graph.grouped_distance(a, p, m);
  const auto d_pos = matrix_of(graph.value(t.d_pos));
  if (positives == PositiveMining::Hardest) {
    t.positive_index = mine_hard_positive(d_pos);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (j != t.positive_index[i] && d_pos.at(i, j) == d_pos.at(i, t.positive_index[i]))
          graph.note_tie();
  } else {
    t.positive_index.resize(n);
    for (auto& j : t.positive_index) j = uniform_index(*rng, m);
  }
  std::vector<std::size_t> pos_flat(n), chosen_rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    pos_flat[i] = i * m + t.positive_index[i];
    chosen_rows[i] = i * m + t.positive_index[i];
    graph.note_branch(0x100000 + pos_flat[i]);
  }
  t.d_M = graph.gather(t.d_pos, pos_flat);

  auto chosen = graph.gather_rows(p, chosen_rows);
  t.d_ap = graph.pairwise_distance(a, chosen);
  const auto d_ap = matrix_of(graph.value(t.d_ap));
  t.negatives = mine_hard_negative(d_ap, track_ids);
  std::vector<std::size_t> neg_flat(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& hn = t.negatives[i];
    neg_flat[i] = hn.source == NegativeSource::OtherRowPositive ? i * n + hn.index
                                                                : hn.index * n + i;
    graph.note_branch(0x200000 + neg_flat[i]);
    for (std::size_t k = 0; k < n; ++k) {
      if (track_ids[k] == track_ids[i]) continue;
      if ((k != hn.index || hn.source != NegativeSource::OtherRowPositive) &&
          d_ap.at(i, k) == hn.distance)
        graph.note_tie();
      if ((k != hn.index || hn.source != NegativeSource::OtherRowAnchor) &&
          d_ap.at(k, i) == hn.distance)
        graph.note_tie();
    }
  }
  t.d_m = graph.gather(t.d_ap, neg_flat);

  const auto& dM = graph.value(t.d_M);
  const auto& dm = graph.value(t.d_m);
  t.d_max.assign(dM.values().begin(), dM.values().end());
  t.d_min.assign(dm.values().begin(), dm.values().end());
  return t;
}

template <typename T>
MinedTriplets<T> form_triplets(Graph<T>& graph, Network<T>& net, const CorrespondenceBatch& batch,
                               bool train_mode, PositiveMining positives, Rng* rng) {
  batch.validate();
  const auto patches = batch.all_patches();
  auto y = net.describe(graph, patches, train_mode);
  return mine_triplets(graph, y, batch.n, batch.m, batch.track_ids, positives, rng);
}

#define IFNET_INSTANTIATE_MINING(T)                                                          \
  template DistanceMatrix pairwise_distances<T>(const DescriptorBatch<T>&,                   \
                                                const DescriptorBatch<T>&);                  \
  template std::vector<HardNegative> mine_hard_negative<T>(                                  \
      const DescriptorBatch<T>&, const DescriptorBatch<T>&, const std::vector<std::int64_t>&); \
  template MinedTriplets<T> mine_triplets<T>(Graph<T>&, typename Graph<T>::Var, std::size_t,  \
                                             std::size_t, const std::vector<std::int64_t>&,  \
                                             PositiveMining, Rng*);                          \
  template MinedTriplets<T> form_triplets<T>(Graph<T>&, Network<T>&,                         \
                                             const CorrespondenceBatch&, bool,               \
                                             PositiveMining, Rng*);

IFNET_INSTANTIATE_MINING(float)
IFNET_INSTANTIATE_MINING(double)

}  // namespace ifnet
