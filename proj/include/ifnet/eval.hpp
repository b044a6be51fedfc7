#pragma once

// Mean-average-precision evaluation: verification, matching, retrieval and
// precision among the k best matches, plus the report and export formats.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ifnet/dataset.hpp"
#include "ifnet/net.hpp"

namespace ifnet {

// Scores sort descending; ties keep input order. AP is the mean, over the
// positives, of the precision at each positive's rank. When total_positives
// exceeds the labelled positives the missing ones count as never retrieved.
// Throws NoPositives, DimMismatch.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels,
                         std::size_t total_positives = 0);

// Fraction correct among the k smallest distances (stable), all if fewer.
// Throws InvalidParams when k == 0.
double precision_at_k(std::span<const double> distances, std::span<const std::uint8_t> correct,
                      std::size_t k = 40);

struct LabeledPair {
  std::size_t a = 0;  // row indices into a descriptor batch
  std::size_t b = 0;
  bool match = false;
};

// Pairs scored by negative L2 distance. Throws NoPositives.
template <typename T>
double verification_ap(const DescriptorBatch<T>& desc, const std::vector<LabeledPair>& pairs);

struct MatchCandidate {
  std::size_t query = 0;
  std::size_t match = 0;
  double distance = 0.0;
  bool correct = false;
};

struct MatchingResult {
  double ap = 0.0;
  std::vector<MatchCandidate> candidates;  // ascending distance
};

// Nearest neighbour in b for every row of a (lowest index on ties), then AP
// over the candidates against the number of rows of a that have a true
// correspondent in b. With mutual, only mutual nearest neighbours are kept.
// Throws EmptyBatch, DimMismatch, NoPositives.
template <typename T>
MatchingResult match_sets(const DescriptorBatch<T>& a, std::span<const std::int64_t> ids_a,
                          const DescriptorBatch<T>& b, std::span<const std::int64_t> ids_b,
                          bool mutual = false);

// Per query: pool ranked by ascending distance, AP against same-id entries.
// Throws NoPositives naming the query.
template <typename T>
std::vector<double> retrieval_ap(const DescriptorBatch<T>& queries,
                                 std::span<const std::int64_t> query_ids,
                                 const DescriptorBatch<T>& pool,
                                 std::span<const std::int64_t> pool_ids);

struct MatchingSetPair {
  std::vector<Patch> a, b;
  std::vector<std::int64_t> ids_a, ids_b;
};

struct EvalSplit {
  std::vector<Patch> pair_patches;
  std::vector<LabeledPair> verification_intra;  // negatives from the same sequence
  std::vector<LabeledPair> verification_inter;  // negatives across sequences
  std::vector<MatchingSetPair> matching;
  std::vector<Patch> queries, pool;
  std::vector<std::int64_t> query_ids, pool_ids;
};

struct SplitConfig {
  std::size_t sequence_tracks = 20;    // tracks per pseudo-sequence
  std::size_t negatives_per_positive = 1;
  std::size_t max_queries = 200;
  std::uint64_t seed = 0;
};

// Builds every task from a held-out store. Tracks need >= 2 patches.
// Throws InvalidParams.
EvalSplit make_eval_split(const CorrespondenceStore& store, const SplitConfig& config = {});

struct EvalRow {
  std::string task;
  std::string split;
  double value = 0.0;
  std::size_t items = 0;
  std::uint64_t seed = 0;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  // precision among the first r matching candidates, pooled over set pairs
  std::vector<std::pair<std::size_t, double>> precision_by_rank;
};

template <typename T>
EvalResult evaluate(const Network<T>& net, const EvalSplit& split, std::uint64_t seed = 0,
                    bool mutual = false);

// Matching mAP only (the quantity used to compare schedules).
template <typename T>
double matching_map(const Network<T>& net, const EvalSplit& split, bool mutual = false);

// task,split,value,items,seed
void write_eval_csv(std::ostream& out, const std::vector<EvalRow>& rows);
// task,split,value_a,value_b,delta; rows paired by (task, split)
void write_compare_csv(std::ostream& out, const std::vector<EvalRow>& a,
                       const std::vector<EvalRow>& b);
// "rank precision" per line
void write_plot_data(std::ostream& out, const std::vector<std::pair<std::size_t, double>>& xy);

// "IFDESC1 dim=D count=B", then one row of D decimals per descriptor.
template <typename T>
void write_descriptors(std::ostream& out, const DescriptorBatch<T>& desc);
// Throws Io.
DescriptorBatch<float> read_descriptors(std::istream& in);

}  // namespace ifnet
