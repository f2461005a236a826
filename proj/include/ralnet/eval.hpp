#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ralnet/tensor.hpp"

namespace ralnet {

// Scores (higher = more similar) with binary labels.
struct ScoredPairSet {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;  // 1 = match, 0 = non-match

  std::size_t positives() const;
};

struct Fpr95Result {
  double fpr = 0.0;
  double threshold = 0.0;
  std::size_t matches = 0;
  std::size_t non_matches = 0;
  std::size_t false_positives = 0;
};

// Threshold t is the largest score keeping at least 95% of matches at
// score >= t; the result is the fraction of non-matches with score >= t.
Fpr95Result fpr95(const ScoredPairSet& set);

// Mean of precision@k over the ranks k of the positives, ranking by score
// descending with ties broken by original index. 0 when there are no
// positives.
double average_precision(const ScoredPairSet& set);

struct EvalReport {
  std::string metric;
  double value = 0.0;
  double threshold = 0.0;  // FPR95 only
  std::size_t count = 0;   // pairs, sets, or queries evaluated
  std::vector<double> per_set;
  std::map<std::string, std::string> metadata;
};

// Dot product of two descriptor rows, accumulated in double.
double cosine_score(std::span<const float> a, std::span<const float> b);

EvalReport fpr95_report(const ScoredPairSet& set);

struct VerificationSet {
  Tensor<float> first;   // N x d
  Tensor<float> second;  // N x d
  std::vector<std::uint8_t> labels;
};

// AP of cosine scores per set, mean over sets.
EvalReport verification_map(std::span<const VerificationSet> sets);

struct MatchingAssignment {
  std::vector<int> target;  // sigma_i
  std::vector<double> confidence;
  std::vector<std::uint8_t> correct;  // sigma_i == i
};

// Nearest target for every reference row by cosine; ties go to the smaller
// target index.
MatchingAssignment match_descriptors(const Tensor<float>& reference, const Tensor<float>& target);

// AP of the correctness labels ranked by confidence, mean over targets.
EvalReport matching_map(const Tensor<float>& reference, std::span<const Tensor<float>> targets);

struct RetrievalOptions {
  // 0 keeps every non-matching pool item; otherwise each query sees at most
  // ceil(ratio * positives) distractors, the earliest in pool order.
  double distractor_ratio = 0.0;
};

// Per query: rank the pool by cosine, positives are pool items sharing the
// query label. Queries without positives are skipped.
EvalReport retrieval_map(const Tensor<float>& queries, std::span<const std::int64_t> query_labels,
                         const Tensor<float>& pool, std::span<const std::int64_t> pool_labels,
                         const RetrievalOptions& opts = {});

// Descriptor file ("RALD"): magic, u32 count, u32 dim, count*dim f32 LE.
void export_descriptors(const Tensor<float>& batch, const std::filesystem::path& path);
Tensor<float> import_descriptors(const std::filesystem::path& path);

// Whitespace-separated integers, one label per entry.
std::vector<std::int64_t> read_labels(const std::filesystem::path& path);
// Verification labels: 1 = match; 0 or -1 = non-match.
std::vector<std::uint8_t> read_binary_labels(const std::filesystem::path& path);

}  // namespace ralnet
