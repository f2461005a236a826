#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ralnet/binary_io.hpp"
#include "ralnet/eval.hpp"
#include "ralnet/layers.hpp"
#include "ralnet/rng.hpp"

using namespace ralnet;
namespace fs = std::filesystem;

namespace {

ScoredPairSet make_set(std::vector<double> match_scores, std::vector<double> non_scores) {
  ScoredPairSet s;
  for (double v : match_scores) {
    s.scores.push_back(v);
    s.labels.push_back(1);
  }
  for (double v : non_scores) {
    s.scores.push_back(v);
    s.labels.push_back(0);
  }
  return s;
}

// Tries every distinct score as a threshold and keeps the largest one whose
// recall reaches 95%.
double fpr95_sweep(const ScoredPairSet& s) {
  std::set<double> thresholds(s.scores.begin(), s.scores.end());
  double best_t = -INFINITY;
  for (double t : thresholds) {
    std::size_t tp = 0, m = 0;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      if (!s.labels[i]) continue;
      ++m;
      if (s.scores[i] >= t) ++tp;
    }
    if (static_cast<double>(tp) >= 0.95 * static_cast<double>(m) - 1e-12) best_t = std::max(best_t, t);
  }
  std::size_t fp = 0, n = 0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    if (s.labels[i]) continue;
    ++n;
    if (s.scores[i] >= best_t) ++fp;
  }
  return static_cast<double>(fp) / static_cast<double>(n);
}

// Rank of item i = number of items ahead of it (higher score, or equal score
// and smaller index) plus one; AP averages hits-so-far / rank at positives.
double ap_bruteforce(const ScoredPairSet& s) {
  const std::size_t n = s.scores.size();
  double sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!s.labels[i]) continue;
    ++positives;
    std::size_t rank = 1, hits = 1;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool ahead = s.scores[j] > s.scores[i] || (s.scores[j] == s.scores[i] && j < i);
      if (!ahead) continue;
      ++rank;
      if (s.labels[j]) ++hits;
    }
    sum += static_cast<double>(hits) / static_cast<double>(rank);
  }
  return positives ? sum / static_cast<double>(positives) : 0.0;
}

ScoredPairSet random_set(Rng& rng, bool coarse) {
  ScoredPairSet s;
  const std::size_t n = 2 + rng.below(99);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = rng.uniform(-1, 1);
    s.scores.push_back(coarse ? std::round(v * 4) / 4 : v);
    s.labels.push_back(rng.bernoulli(0.4) ? 1 : 0);
  }
  s.labels[0] = 1;
  s.labels[1] = 0;
  return s;
}

Tensor<float> unit_rows(int n, int d, Rng& rng) {
  Tensor<float> t(matrix_shape(n, d));
  for (auto& v : t.vec()) v = static_cast<float>(rng.normal());
  return l2_normalize_rows_forward(t);
}

}  // namespace

TEST_CASE("fpr95 hand cases") {
  CHECK(fpr95(make_set({1, 1, 1}, {0, 0})).fpr == 0.0);
  const auto r = fpr95(make_set({0.9, 0.8, 0.7, 0.1}, {0.5, 0.3, 0.2, 0.05}));
  CHECK(r.fpr == 0.75);
  CHECK(r.threshold == 0.1);
  CHECK(r.matches == 4);
  CHECK(r.non_matches == 4);
  CHECK(r.false_positives == 3);
  // Ties sit on the accepting side.
  CHECK(fpr95(make_set({0.5, 0.5}, {0.5, 0.4})).fpr == 0.5);
  CHECK_THROWS(fpr95(make_set({0.5}, {})));
  CHECK_THROWS(fpr95(make_set({}, {0.5})));
}

TEST_CASE("fpr95 threshold keeps at least 95 percent of matches") {
  // 40 matches: the threshold may drop at most 2 of them.
  std::vector<double> m;
  for (int i = 0; i < 40; ++i) m.push_back(i);
  const auto r = fpr95(make_set(m, {0.5, 1.5, 2.5, 100}));
  CHECK(r.threshold == 2.0);
  CHECK(r.fpr == 0.5);
}

TEST_CASE("average precision hand cases") {
  CHECK(average_precision(make_set({3, 2}, {1, 0})) == 1.0);
  ScoredPairSet s{{0.9, 0.5, 0.1}, {1, 0, 1}};
  CHECK(average_precision(s) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(average_precision(ScoredPairSet{{0.3, 0.2}, {0, 0}}) == 0.0);
  CHECK_THROWS(average_precision(ScoredPairSet{}));
}

TEST_CASE("metrics match brute-force oracles") {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const ScoredPairSet s = random_set(rng, t % 2 == 0);
    CHECK(fpr95(s).fpr == fpr95_sweep(s));
    CHECK(average_precision(s) == doctest::Approx(ap_bruteforce(s)).epsilon(1e-15));
    ScoredPairSet moved = s;
    for (auto& v : moved.scores) v = 2 * v + 1;
    CHECK(fpr95(moved).fpr == fpr95(s).fpr);
    CHECK(average_precision(moved) == average_precision(s));
  }
}

TEST_CASE("verification mAP") {
  Rng rng(2);
  const Tensor<float> a = unit_rows(6, 16, rng);
  VerificationSet set{a, a, {1, 1, 1, 0, 0, 0}};
  // Make the three negatives dissimilar.
  Tensor<float> b = a;
  for (int r = 3; r < 6; ++r)
    for (int k = 0; k < 16; ++k) b.at(r, k) = -a.at(r, k);
  set.second = b;
  const VerificationSet sets[] = {set, set};
  const EvalReport rep = verification_map(sets);
  CHECK(rep.metric == "verification_map");
  CHECK(rep.value == 1.0);
  CHECK(rep.per_set.size() == 2);
  CHECK(rep.count == 2);
  VerificationSet bad = set;
  bad.labels.pop_back();
  const VerificationSet bad_sets[] = {bad};
  CHECK_THROWS(verification_map(bad_sets));
}

TEST_CASE("matching") {
  Rng rng(3);
  const Tensor<float> ref = unit_rows(20, 32, rng);
  SUBCASE("target equal to reference") {
    const Tensor<float> targets[] = {ref};
    const EvalReport r = matching_map(ref, targets);
    CHECK(r.value == 1.0);
  }
  SUBCASE("two swapped descriptors") {
    Tensor<float> two(matrix_shape(2, 2), std::vector<float>{1, 0, 0, 1});
    Tensor<float> swapped(matrix_shape(2, 2), std::vector<float>{0, 1, 1, 0});
    const auto m = match_descriptors(two, swapped);
    CHECK(m.target == std::vector<int>{1, 0});
    CHECK(m.correct == std::vector<std::uint8_t>{0, 0});
    const Tensor<float> targets[] = {swapped};
    CHECK(matching_map(two, targets).value == 0.0);
  }
  SUBCASE("random case against an exhaustive argmax") {
    Tensor<float> target = unit_rows(20, 32, rng);
    for (int r = 0; r < 10; ++r)
      for (int k = 0; k < 32; ++k) target.at(r, k) = ref.at(r, k) + 0.1f * target.at(r, k);
    target = l2_normalize_rows_forward(target);
    const auto m = match_descriptors(ref, target);
    for (int i = 0; i < 20; ++i) {
      int best = 0;
      double best_s = -INFINITY;
      for (int j = 0; j < 20; ++j) {
        double s = 0.0;
        for (int k = 0; k < 32; ++k) s += static_cast<double>(ref.at(i, k)) * target.at(j, k);
        if (s > best_s) {
          best_s = s;
          best = j;
        }
      }
      CHECK(m.target[i] == best);
      CHECK(m.confidence[i] == doctest::Approx(best_s).epsilon(1e-12));
      CHECK(m.correct[i] == (best == i ? 1 : 0));
    }
    ScoredPairSet s{m.confidence, m.correct};
    const Tensor<float> targets[] = {target};
    CHECK(matching_map(ref, targets).value == average_precision(s));
  }
  SUBCASE("ties go to the smallest index") {
    Tensor<float> r1(matrix_shape(1, 2), std::vector<float>{1, 0});
    Tensor<float> t(matrix_shape(3, 2), std::vector<float>{0, 1, 1, 0, 1, 0});
    CHECK(match_descriptors(r1, t).target[0] == 1);
  }
}

TEST_CASE("cosine matching equals nearest neighbour in L2 on unit descriptors") {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const Tensor<float> q = unit_rows(8, 16, rng), p = unit_rows(30, 16, rng);
    const MatchingAssignment m = match_descriptors(q, p);
    for (int i = 0; i < 8; ++i) {
      int best_l2 = -1;
      double bl = INFINITY;
      for (int j = 0; j < 30; ++j) {
        double dist = 0.0;
        for (int k = 0; k < 16; ++k) {
          const double d = static_cast<double>(q.at(i, k)) - p.at(j, k);
          dist += d * d;
        }
        if (dist < bl) bl = dist, best_l2 = j;
      }
      CHECK(m.target[i] == best_l2);
    }
  }
}

TEST_CASE("retrieval mAP") {
  Rng rng(5);
  const Tensor<float> pool = unit_rows(12, 8, rng);
  std::vector<std::int64_t> pool_labels{0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5};
  Tensor<float> queries(matrix_shape(3, 8));
  for (int k = 0; k < 8; ++k) {
    queries.at(0, k) = pool.at(0, k);
    queries.at(1, k) = pool.at(4, k);
    queries.at(2, k) = pool.at(7, k);
  }
  std::vector<std::int64_t> ql{0, 2, 9};  // label 9 has no positives: skipped
  const EvalReport r = retrieval_map(queries, ql, pool, pool_labels);
  CHECK(r.count == 2);
  // Per query, its own pool copy ranks first.
  for (double v : r.per_set) CHECK(v >= 0.5);
  // Oracle for query 0.
  ScoredPairSet s;
  for (int j = 0; j < 12; ++j) {
    double d = 0.0;
    for (int k = 0; k < 8; ++k) d += static_cast<double>(queries.at(0, k)) * pool.at(j, k);
    s.scores.push_back(d);
    s.labels.push_back(pool_labels[j] == 0);
  }
  CHECK(r.per_set[0] == doctest::Approx(ap_bruteforce(s)).epsilon(1e-12));

  // Distractor cap: label 0 has two positives, so ratio 0.5 keeps one
  // distractor, the earliest non-matching pool item (index 2).
  const EvalReport capped = retrieval_map(queries, ql, pool, pool_labels, RetrievalOptions{0.5});
  CHECK(capped.count == 2);
  ScoredPairSet kept{{s.scores[0], s.scores[1], s.scores[2]}, {1, 1, 0}};
  CHECK(capped.per_set[0] == doctest::Approx(ap_bruteforce(kept)).epsilon(1e-12));
  CHECK_THROWS(retrieval_map(queries, std::vector<std::int64_t>{0}, pool, pool_labels));
}

TEST_CASE("descriptor file round trip") {
  const fs::path dir = fs::temp_directory_path() / "ralnet_test_rald";
  fs::create_directories(dir);
  Rng rng(6);
  const Tensor<float> d = unit_rows(9, 128, rng);
  export_descriptors(d, dir / "d.rald");
  const Tensor<float> back = import_descriptors(dir / "d.rald");
  CHECK(back.shape() == d.shape());
  CHECK(back.vec() == d.vec());
  auto bytes = read_file_bytes(dir / "d.rald");
  CHECK(bytes.size() == 12 + 9 * 128 * 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RALD");
  bytes[0] = 'Q';
  write_file_bytes(dir / "bad.rald", bytes);
  CHECK_THROWS_AS(import_descriptors(dir / "bad.rald"), FormatError);
}

TEST_CASE("label files") {
  const fs::path dir = fs::temp_directory_path() / "ralnet_test_labels";
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "l.txt");
    f << "3 1 4\n1 5\n";
    std::ofstream g(dir / "b.txt");
    g << "1 0 -1 1\n";
    std::ofstream h(dir / "bad.txt");
    h << "1 2\n";
  }
  CHECK(read_labels(dir / "l.txt") == std::vector<std::int64_t>{3, 1, 4, 1, 5});
  CHECK(read_binary_labels(dir / "b.txt") == std::vector<std::uint8_t>{1, 0, 0, 1});
  CHECK_THROWS(read_binary_labels(dir / "bad.txt"));
  CHECK_THROWS(read_labels(dir / "missing.txt"));
}

TEST_CASE("fpr95 report") {
  const EvalReport r = fpr95_report(make_set({0.9, 0.8, 0.7, 0.1}, {0.5, 0.3, 0.2, 0.05}));
  CHECK(r.metric == "fpr95");
  CHECK(r.value == 0.75);
  CHECK(r.threshold == 0.1);
  CHECK(r.count == 8);
}
