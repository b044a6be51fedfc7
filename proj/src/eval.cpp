#include "ifnet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "ifnet/error.hpp"
#include "ifnet/rng.hpp"

namespace ifnet {

namespace {

template <typename T>
double l2(std::span<const T> a, std::span<const T> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

std::vector<std::size_t> stable_order(std::span<const double> keys, bool descending) {
  std::vector<std::size_t> order(keys.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return descending ? keys[x] > keys[y] : keys[x] < keys[y];
  });
  return order;
}

}  // namespace

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels,
                         std::size_t total_positives) {
  if (scores.size() != labels.size())
    fail(ErrorKind::DimMismatch, std::to_string(scores.size()) + " scores vs " +
                                     std::to_string(labels.size()) + " labels");
  const std::size_t listed = std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; });
  const std::size_t denom = std::max(listed, total_positives);
  if (denom == 0) fail(ErrorKind::NoPositives, "ranked list has no positive label");
  const auto order = stable_order(scores, true);
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!labels[order[r]]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return sum / static_cast<double>(denom);
}

double precision_at_k(std::span<const double> distances, std::span<const std::uint8_t> correct,
                      std::size_t k) {
  if (k == 0) fail(ErrorKind::InvalidParams, "k must be >= 1");
  if (distances.size() != correct.size())
    fail(ErrorKind::DimMismatch, std::to_string(distances.size()) + " distances vs " +
                                     std::to_string(correct.size()) + " labels");
  if (distances.empty()) return 0.0;
  const auto order = stable_order(distances, false);
  const std::size_t n = std::min(k, order.size());
  std::size_t good = 0;
  for (std::size_t i = 0; i < n; ++i) good += correct[order[i]] != 0;
  return static_cast<double>(good) / static_cast<double>(n);
}

template <typename T>
double verification_ap(const DescriptorBatch<T>& desc, const std::vector<LabeledPair>& pairs) {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  scores.reserve(pairs.size());
  labels.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.a >= desc.count || p.b >= desc.count)
      fail(ErrorKind::OutOfBounds, "pair index beyond " + std::to_string(desc.count) + " rows");
    scores.push_back(-l2<T>(desc.row(p.a), desc.row(p.b)));
    labels.push_back(p.match ? 1 : 0);
  }
  return average_precision(scores, labels);
}

namespace {

template <typename T>
std::size_t nearest(const DescriptorBatch<T>& from, std::size_t i, const DescriptorBatch<T>& to,
                    double* distance) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < to.count; ++j) {
    const double d = l2<T>(from.row(i), to.row(j));
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  if (distance) *distance = best_d;
  return best;
}

template <typename T>
void check_sets(const DescriptorBatch<T>& a, std::size_t ids_a, const DescriptorBatch<T>& b,
                std::size_t ids_b) {
  if (a.count == 0 || b.count == 0) fail(ErrorKind::EmptyBatch, "matching needs two non-empty sets");
  if (a.dim != b.dim)
    fail(ErrorKind::DimMismatch, "descriptor dims " + std::to_string(a.dim) + " vs " +
                                     std::to_string(b.dim));
  if (ids_a != a.count || ids_b != b.count)
    fail(ErrorKind::DimMismatch, "id lists do not match descriptor counts");
}

}  // namespace

template <typename T>
MatchingResult match_sets(const DescriptorBatch<T>& a, std::span<const std::int64_t> ids_a,
                          const DescriptorBatch<T>& b, std::span<const std::int64_t> ids_b,
                          bool mutual) {
  check_sets(a, ids_a.size(), b, ids_b.size());
  const std::unordered_set<std::int64_t> in_b(ids_b.begin(), ids_b.end());
  std::size_t answerable = 0;
  for (auto id : ids_a) answerable += in_b.count(id);
  if (answerable == 0) fail(ErrorKind::NoPositives, "no query in A has a correspondent in B");

  std::vector<MatchCandidate> found;
  for (std::size_t i = 0; i < a.count; ++i) {
    MatchCandidate c;
    c.query = i;
    c.match = nearest(a, i, b, &c.distance);
    if (mutual && nearest(b, c.match, a, nullptr) != i) continue;
    found.push_back(c);
  }
  // Labels are attached only after every assignment is fixed.
  for (auto& c : found) c.correct = ids_a[c.query] == ids_b[c.match];

  std::vector<double> scores(found.size());
  std::vector<std::uint8_t> labels(found.size());
  for (std::size_t i = 0; i < found.size(); ++i) {
    scores[i] = -found[i].distance;
    labels[i] = found[i].correct ? 1 : 0;
  }
  MatchingResult result;
  result.ap = average_precision(scores, labels, answerable);
  const auto order = stable_order(scores, true);
  result.candidates.reserve(found.size());
  for (auto k : order) result.candidates.push_back(found[k]);
  return result;
}

template <typename T>
std::vector<double> retrieval_ap(const DescriptorBatch<T>& queries,
                                 std::span<const std::int64_t> query_ids,
                                 const DescriptorBatch<T>& pool,
                                 std::span<const std::int64_t> pool_ids) {
  check_sets(queries, query_ids.size(), pool, pool_ids.size());
  std::vector<double> out;
  out.reserve(queries.count);
  std::vector<double> scores(pool.count);
  std::vector<std::uint8_t> labels(pool.count);
  for (std::size_t q = 0; q < queries.count; ++q) {
    for (std::size_t j = 0; j < pool.count; ++j) {
      scores[j] = -l2<T>(queries.row(q), pool.row(j));
      labels[j] = pool_ids[j] == query_ids[q] ? 1 : 0;
    }
    if (std::find(labels.begin(), labels.end(), 1) == labels.end())
      fail(ErrorKind::NoPositives, "query " + std::to_string(q) + " (track " +
                                       std::to_string(query_ids[q]) +
                                       ") has no correspondent in the pool");
    out.push_back(average_precision(scores, labels));
  }
  return out;
}

EvalSplit make_eval_split(const CorrespondenceStore& store, const SplitConfig& config) {
  if (store.tracks.size() < 2) fail(ErrorKind::InvalidParams, "eval split needs >= 2 tracks");
  if (config.sequence_tracks < 2) fail(ErrorKind::InvalidParams, "sequence_tracks must be >= 2");
  for (const auto& t : store.tracks)
    if (t.patches.size() < 2)
      fail(ErrorKind::InvalidParams, "track " + std::to_string(t.track_id) + " has fewer than 2 patches");

  Rng rng(derive_seed(config.seed, 0x5e11));
  EvalSplit split;
  const std::size_t n_tracks = store.tracks.size();
  std::vector<std::size_t> base(n_tracks);
  for (std::size_t t = 0; t < n_tracks; ++t) {
    base[t] = split.pair_patches.size();
    for (const auto& p : store.tracks[t].patches) split.pair_patches.push_back(p);
  }
  const std::size_t seq_len = config.sequence_tracks;
  const std::size_t n_seq = (n_tracks + seq_len - 1) / seq_len;
  auto seq_begin = [&](std::size_t s) { return s * seq_len; };
  auto seq_end = [&](std::size_t s) { return std::min(n_tracks, (s + 1) * seq_len); };
  auto random_member = [&](std::size_t t) {
    return base[t] + uniform_index(rng, store.tracks[t].patches.size());
  };

  for (std::size_t t = 0; t < n_tracks; ++t) {
    const std::size_t s = t / seq_len;
    const std::size_t lo = seq_begin(s), hi = seq_end(s);
    for (std::size_t v = 1; v < store.tracks[t].patches.size(); ++v) {
      const LabeledPair pos{base[t], base[t] + v, true};
      split.verification_intra.push_back(pos);
      split.verification_inter.push_back(pos);
      for (std::size_t k = 0; k < config.negatives_per_positive; ++k) {
        if (hi - lo >= 2) {
          std::size_t u = lo + uniform_index(rng, hi - lo - 1);
          if (u >= t) ++u;
          split.verification_intra.push_back({base[t], random_member(u), false});
        }
        if (n_seq >= 2) {
          const std::size_t outside = n_tracks - (hi - lo);
          std::size_t u = uniform_index(rng, outside);
          if (u >= lo) u += hi - lo;
          split.verification_inter.push_back({base[t], random_member(u), false});
        }
      }
    }
  }
  if (n_seq < 2) split.verification_inter.clear();

  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t lo = seq_begin(s), hi = seq_end(s);
    if (hi - lo < 2) continue;
    std::size_t views = 0;
    for (std::size_t t = lo; t < hi; ++t) views = std::max(views, store.tracks[t].patches.size());
    for (std::size_t v = 1; v < views; ++v) {
      MatchingSetPair pair;
      std::vector<std::size_t> order;
      for (std::size_t t = lo; t < hi; ++t) {
        pair.a.push_back(store.tracks[t].patches[0]);
        pair.ids_a.push_back(store.tracks[t].track_id);
        if (v < store.tracks[t].patches.size()) order.push_back(t);
      }
      shuffle(order, rng);
      for (auto t : order) {
        pair.b.push_back(store.tracks[t].patches[v]);
        pair.ids_b.push_back(store.tracks[t].track_id);
      }
      split.matching.push_back(std::move(pair));
    }
  }

  std::vector<std::size_t> query_tracks(n_tracks);
  std::iota(query_tracks.begin(), query_tracks.end(), 0);
  shuffle(query_tracks, rng);
  query_tracks.resize(std::min(config.max_queries, n_tracks));
  std::sort(query_tracks.begin(), query_tracks.end());
  for (auto t : query_tracks) {
    split.queries.push_back(store.tracks[t].patches[0]);
    split.query_ids.push_back(store.tracks[t].track_id);
  }
  for (const auto& t : store.tracks)
    for (std::size_t v = 1; v < t.patches.size(); ++v) {
      split.pool.push_back(t.patches[v]);
      split.pool_ids.push_back(t.track_id);
    }
  return split;
}

template <typename T>
double matching_map(const Network<T>& net, const EvalSplit& split, bool mutual) {
  if (split.matching.empty()) fail(ErrorKind::InvalidParams, "split has no matching set pairs");
  double sum = 0.0;
  for (const auto& pair : split.matching) {
    const auto a = net.describe(pair.a);
    const auto b = net.describe(pair.b);
    sum += match_sets(a, pair.ids_a, b, pair.ids_b, mutual).ap;
  }
  return sum / static_cast<double>(split.matching.size());
}

template <typename T>
EvalResult evaluate(const Network<T>& net, const EvalSplit& split, std::uint64_t seed,
                    bool mutual) {
  EvalResult result;
  const auto pair_desc = net.describe(split.pair_patches);
  if (!split.verification_intra.empty())
    result.rows.push_back({"verification", "intra", verification_ap(pair_desc, split.verification_intra),
                           split.verification_intra.size(), seed});
  if (!split.verification_inter.empty())
    result.rows.push_back({"verification", "inter", verification_ap(pair_desc, split.verification_inter),
                           split.verification_inter.size(), seed});

  if (!split.matching.empty()) {
    double sum = 0.0;
    std::vector<double> dist;
    std::vector<std::uint8_t> correct;
    for (const auto& pair : split.matching) {
      const auto a = net.describe(pair.a);
      const auto b = net.describe(pair.b);
      const auto r = match_sets(a, pair.ids_a, b, pair.ids_b, mutual);
      sum += r.ap;
      for (const auto& c : r.candidates) {
        dist.push_back(c.distance);
        correct.push_back(c.correct ? 1 : 0);
      }
    }
    result.rows.push_back({"matching", "all", sum / static_cast<double>(split.matching.size()),
                           split.matching.size(), seed});
    result.rows.push_back({"top40", "all", precision_at_k(dist, correct, 40), dist.size(), seed});
    const auto order = stable_order(dist, false);
    std::size_t good = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      good += correct[order[r]];
      result.precision_by_rank.emplace_back(r + 1, static_cast<double>(good) / static_cast<double>(r + 1));
    }
  }

  if (!split.queries.empty()) {
    const auto q = net.describe(split.queries);
    const auto p = net.describe(split.pool);
    const auto aps = retrieval_ap(q, split.query_ids, p, split.pool_ids);
    const double mean = std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(aps.size());
    result.rows.push_back({"retrieval", "all", mean, aps.size(), seed});
  }
  return result;
}

void write_eval_csv(std::ostream& out, const std::vector<EvalRow>& rows) {
  out << "task,split,value,items,seed\n";
  out << std::setprecision(10);
  for (const auto& r : rows)
    out << r.task << ',' << r.split << ',' << r.value << ',' << r.items << ',' << r.seed << '\n';
}

void write_compare_csv(std::ostream& out, const std::vector<EvalRow>& a,
                       const std::vector<EvalRow>& b) {
  out << "task,split,value_a,value_b,delta\n";
  out << std::setprecision(10);
  for (const auto& ra : a)
    for (const auto& rb : b)
      if (ra.task == rb.task && ra.split == rb.split)
        out << ra.task << ',' << ra.split << ',' << ra.value << ',' << rb.value << ','
            << rb.value - ra.value << '\n';
}

void write_plot_data(std::ostream& out, const std::vector<std::pair<std::size_t, double>>& xy) {
  out << "# rank precision\n" << std::setprecision(10);
  for (const auto& [x, y] : xy) out << x << ' ' << y << '\n';
}

template <typename T>
void write_descriptors(std::ostream& out, const DescriptorBatch<T>& desc) {
  out << "IFDESC1 dim=" << desc.dim << " count=" << desc.count << '\n';
  out << std::setprecision(std::numeric_limits<T>::max_digits10);
  for (std::size_t i = 0; i < desc.count; ++i) {
    const auto row = desc.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) out << (j ? " " : "") << row[j];
    out << '\n';
  }
}

DescriptorBatch<float> read_descriptors(std::istream& in) {
  std::string magic, dim_tok, count_tok;
  if (!(in >> magic >> dim_tok >> count_tok) || magic != "IFDESC1" ||
      dim_tok.rfind("dim=", 0) != 0 || count_tok.rfind("count=", 0) != 0)
    fail(ErrorKind::Io, "descriptor file: bad header");
  std::size_t dim = 0, count = 0;
  try {
    dim = std::stoul(dim_tok.substr(4));
    count = std::stoul(count_tok.substr(6));
  } catch (const std::exception&) {
    fail(ErrorKind::Io, "descriptor file: bad header numbers");
  }
  std::vector<float> values(dim * count);
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!(in >> values[i]))
      fail(ErrorKind::Io, "descriptor file: expected " + std::to_string(values.size()) +
                              " values, read " + std::to_string(i));
  std::string extra;
  if (in >> extra) fail(ErrorKind::Io, "descriptor file: trailing data");
  return DescriptorBatch<float>(count, dim, std::move(values));
}

#define IFNET_INSTANTIATE_EVAL(T)                                                               \
  template double verification_ap<T>(const DescriptorBatch<T>&, const std::vector<LabeledPair>&); \
  template MatchingResult match_sets<T>(const DescriptorBatch<T>&, std::span<const std::int64_t>, \
                                        const DescriptorBatch<T>&, std::span<const std::int64_t>, \
                                        bool);                                                  \
  template std::vector<double> retrieval_ap<T>(const DescriptorBatch<T>&,                       \
                                               std::span<const std::int64_t>,                   \
                                               const DescriptorBatch<T>&,                       \
                                               std::span<const std::int64_t>);                  \
  template double matching_map<T>(const Network<T>&, const EvalSplit&, bool);                   \
  template EvalResult evaluate<T>(const Network<T>&, const EvalSplit&, std::uint64_t, bool);    \
  template void write_descriptors<T>(std::ostream&, const DescriptorBatch<T>&);

IFNET_INSTANTIATE_EVAL(float)
IFNET_INSTANTIATE_EVAL(double)

}  // namespace ifnet
