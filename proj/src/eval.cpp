#include "ralnet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "ralnet/binary_io.hpp"

namespace ralnet {

std::size_t ScoredPairSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

namespace {

void check_set(const ScoredPairSet& set, const char* who) {
  if (set.scores.size() != set.labels.size()) {
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(set.scores.size()) + " scores but " +
                                std::to_string(set.labels.size()) + " labels");
  }
  for (double s : set.scores) {
    if (!std::isfinite(s)) throw NumericError(std::string(who) + ": non-finite score");
  }
}

}  // namespace

Fpr95Result fpr95(const ScoredPairSet& set) {
  check_set(set, "fpr95");
  std::vector<double> match_scores, non_match_scores;
  for (std::size_t i = 0; i < set.scores.size(); ++i) {
    (set.labels[i] ? match_scores : non_match_scores).push_back(set.scores[i]);
  }
  if (match_scores.empty() || non_match_scores.empty()) {
    throw std::invalid_argument("fpr95: need at least one match and one non-match (got " +
                                std::to_string(match_scores.size()) + " and " +
                                std::to_string(non_match_scores.size()) + ")");
  }
  const std::size_t m = match_scores.size();
  // Smallest count k with k / m >= 0.95, in integers.
  const std::size_t k = (95 * m + 99) / 100;
  std::sort(match_scores.begin(), match_scores.end(), std::greater<>());
  Fpr95Result r;
  r.threshold = match_scores[k - 1];
  r.matches = m;
  r.non_matches = non_match_scores.size();
  r.false_positives = static_cast<std::size_t>(
      std::count_if(non_match_scores.begin(), non_match_scores.end(), [&](double s) { return s >= r.threshold; }));
  r.fpr = static_cast<double>(r.false_positives) / static_cast<double>(r.non_matches);
  return r;
}

double average_precision(const ScoredPairSet& set) {
  check_set(set, "average_precision");
  if (set.scores.empty()) throw std::invalid_argument("average_precision: empty set");
  std::vector<std::size_t> order(set.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return set.scores[a] > set.scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (set.labels[order[rank]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

double cosine_score(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

EvalReport fpr95_report(const ScoredPairSet& set) {
  const Fpr95Result r = fpr95(set);
  EvalReport rep;
  rep.metric = "fpr95";
  rep.value = r.fpr;
  rep.threshold = r.threshold;
  rep.count = set.scores.size();
  rep.metadata["matches"] = std::to_string(r.matches);
  rep.metadata["non_matches"] = std::to_string(r.non_matches);
  rep.metadata["false_positives"] = std::to_string(r.false_positives);
  return rep;
}

namespace {

void check_dims(const Tensor<float>& a, const Tensor<float>& b, const char* who) {
  if (a.shape().per_item() != b.shape().per_item()) {
    throw std::invalid_argument(std::string(who) + ": descriptor widths differ (" + a.shape().str() + " vs " +
                                b.shape().str() + ")");
  }
}

EvalReport mean_report(std::string metric, std::vector<double> per_set) {
  EvalReport rep;
  rep.metric = std::move(metric);
  rep.count = per_set.size();
  rep.value = per_set.empty() ? 0.0 : std::accumulate(per_set.begin(), per_set.end(), 0.0) / per_set.size();
  rep.per_set = std::move(per_set);
  return rep;
}

}  // namespace

EvalReport verification_map(std::span<const VerificationSet> sets) {
  if (sets.empty()) throw std::invalid_argument("verification_map: no sets");
  std::vector<double> aps;
  for (const VerificationSet& s : sets) {
    check_dims(s.first, s.second, "verification_map");
    const int n = s.first.shape().n;
    if (s.second.shape().n != n || s.labels.size() != static_cast<std::size_t>(n)) {
      throw std::invalid_argument("verification_map: set has " + std::to_string(n) + " and " +
                                  std::to_string(s.second.shape().n) + " descriptors and " +
                                  std::to_string(s.labels.size()) + " labels");
    }
    ScoredPairSet sp;
    sp.labels = s.labels;
    for (int i = 0; i < n; ++i) sp.scores.push_back(cosine_score(s.first.item(i), s.second.item(i)));
    aps.push_back(average_precision(sp));
  }
  return mean_report("verification_map", std::move(aps));
}

MatchingAssignment match_descriptors(const Tensor<float>& reference, const Tensor<float>& target) {
  check_dims(reference, target, "match_descriptors");
  const int n = reference.shape().n, m = target.shape().n;
  if (m < 1) throw std::invalid_argument("match_descriptors: empty target collection");
  MatchingAssignment out;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double best_score = cosine_score(reference.item(i), target.item(0));
    for (int j = 1; j < m; ++j) {
      const double s = cosine_score(reference.item(i), target.item(j));
      if (s > best_score) {
        best_score = s;
        best = j;
      }
    }
    out.target.push_back(best);
    out.confidence.push_back(best_score);
    out.correct.push_back(best == i ? 1 : 0);
  }
  return out;
}

EvalReport matching_map(const Tensor<float>& reference, std::span<const Tensor<float>> targets) {
  if (targets.empty()) throw std::invalid_argument("matching_map: no target collections");
  if (reference.shape().n < 1) throw std::invalid_argument("matching_map: empty reference collection");
  std::vector<double> aps;
  for (const Tensor<float>& t : targets) {
    const MatchingAssignment a = match_descriptors(reference, t);
    aps.push_back(average_precision(ScoredPairSet{a.confidence, a.correct}));
  }
  return mean_report("matching_map", std::move(aps));
}

EvalReport retrieval_map(const Tensor<float>& queries, std::span<const std::int64_t> query_labels,
                         const Tensor<float>& pool, std::span<const std::int64_t> pool_labels,
                         const RetrievalOptions& opts) {
  check_dims(queries, pool, "retrieval_map");
  if (query_labels.size() != static_cast<std::size_t>(queries.shape().n) ||
      pool_labels.size() != static_cast<std::size_t>(pool.shape().n)) {
    throw std::invalid_argument("retrieval_map: label counts do not match descriptor counts");
  }
  if (opts.distractor_ratio < 0) throw std::invalid_argument("retrieval_map: distractor_ratio must be >= 0");
  std::vector<double> aps;
  std::size_t skipped = 0;
  for (int q = 0; q < queries.shape().n; ++q) {
    const std::size_t positives = static_cast<std::size_t>(
        std::count(pool_labels.begin(), pool_labels.end(), query_labels[q]));
    if (positives == 0) {
      ++skipped;
      continue;
    }
    std::size_t distractor_budget = pool_labels.size();
    if (opts.distractor_ratio > 0) {
      distractor_budget = static_cast<std::size_t>(std::ceil(opts.distractor_ratio * static_cast<double>(positives)));
    }
    ScoredPairSet sp;
    std::size_t distractors = 0;
    for (int j = 0; j < pool.shape().n; ++j) {
      const bool pos = pool_labels[j] == query_labels[q];
      if (!pos) {
        if (distractors == distractor_budget) continue;
        ++distractors;
      }
      sp.scores.push_back(cosine_score(queries.item(q), pool.item(j)));
      sp.labels.push_back(pos ? 1 : 0);
    }
    aps.push_back(average_precision(sp));
  }
  EvalReport rep = mean_report("retrieval_map", std::move(aps));
  rep.metadata["skipped_queries"] = std::to_string(skipped);
  return rep;
}

void export_descriptors(const Tensor<float>& batch, const std::filesystem::path& path) {
  ByteWriter w;
  w.magic("RALD");
  w.u32(static_cast<std::uint32_t>(batch.shape().n));
  w.u32(static_cast<std::uint32_t>(batch.shape().per_item()));
  w.f32s(batch.span());
  write_file_bytes(path, w.bytes());
}

Tensor<float> import_descriptors(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes, "descriptor file '" + path.string() + "'");
  r.expect_magic("RALD");
  const std::uint32_t count = r.u32("count");
  const std::uint32_t dim = r.u32("dim");
  if (static_cast<std::uint64_t>(count) * dim * 4 != r.remaining()) {
    throw FormatError(r.what() + ": payload holds " + std::to_string(r.remaining()) + " bytes, header promises " +
                      std::to_string(static_cast<std::uint64_t>(count) * dim * 4));
  }
  Tensor<float> t(matrix_shape(static_cast<int>(count), static_cast<int>(dim)));
  r.f32s(t.span(), "descriptors");
  return t;
}

std::vector<std::int64_t> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open label file '" + path.string() + "'");
  std::vector<std::int64_t> out;
  std::int64_t v;
  while (in >> v) out.push_back(v);
  if (!in.eof()) throw std::runtime_error("label file '" + path.string() + "': non-integer entry");
  return out;
}

std::vector<std::uint8_t> read_binary_labels(const std::filesystem::path& path) {
  std::vector<std::uint8_t> out;
  for (std::int64_t v : read_labels(path)) {
    if (v != 1 && v != 0 && v != -1) {
      throw std::runtime_error("label file '" + path.string() + "': expected 1, 0 or -1, got " + std::to_string(v));
    }
    out.push_back(v == 1 ? 1 : 0);
  }
  return out;
}

}  // namespace ralnet
