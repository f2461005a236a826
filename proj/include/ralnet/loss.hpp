#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ralnet/tensor.hpp"

namespace ralnet {

enum class SimilarityKind { Cosine, NegativeL2 };
enum class LossVariant { RobustAngular, HingeTriplet, Contrastive };

SimilarityKind parse_similarity_kind(std::string_view s);
LossVariant parse_loss_variant(std::string_view s);
std::string to_string(SimilarityKind k);
std::string to_string(LossVariant v);

struct LossConfig {
  LossVariant variant = LossVariant::RobustAngular;
  SimilarityKind similarity = SimilarityKind::Cosine;
  double margin = 1.0;  // unused by the robust-angular variant
};

// D(i, j) = s(a_i, p_j). Larger always means more similar: cosine is the
// dot product of unit rows and negative-L2 is -|a_i - p_j|.
template <typename T>
struct SimilarityMatrix {
  SimilarityKind kind = SimilarityKind::Cosine;
  Tensor<T> values;  // N x N

  int size() const { return values.shape().n; }
  T operator()(int i, int j) const { return values.at(i, j); }
};

inline constexpr double kUnitNormTolerance = 1e-4;

// Requires equal row counts and widths; under cosine every row must have
// unit norm within kUnitNormTolerance.
template <typename T>
SimilarityMatrix<T> similarity_matrix(const Tensor<T>& anchors, const Tensor<T>& positives, SimilarityKind kind);

// Per anchor i: the positive D(i, i) and the hardest negative, the largest
// D(k, l) with exactly one of k, l equal to i. Ties go to the first
// candidate in row-major order.
template <typename T>
struct TripletSelection {
  std::vector<T> pos;
  std::vector<T> neg;
  std::vector<int> neg_row;
  std::vector<int> neg_col;

  int size() const { return static_cast<int>(pos.size()); }
};

template <typename T>
TripletSelection<T> mine_hard_negatives(const SimilarityMatrix<T>& d);

// Batch-mean loss with its derivative w.r.t. every pos_i and neg_i.
struct LossResult {
  double loss = 0.0;
  std::vector<double> dpos;
  std::vector<double> dneg;
};

// (1/N) sum 1 - tanh(pos_i - neg_i)
LossResult robust_angular_loss(std::span<const double> pos, std::span<const double> neg);
// (1/N) sum [neg_i - pos_i + m]_+ ; zero subgradient at the kink.
LossResult hinge_triplet_loss(std::span<const double> pos, std::span<const double> neg, double margin);
// (1/N) sum ([m + neg_i]_+ - pos_i), with similarity scores as written.
LossResult contrastive_loss(std::span<const double> pos, std::span<const double> neg, double margin);

LossResult compute_loss(const LossConfig& cfg, std::span<const double> pos, std::span<const double> neg);

template <typename T>
LossResult compute_loss(const LossConfig& cfg, const TripletSelection<T>& sel);

// Chains the per-item derivatives through the similarity entries the
// selection used. Returns (dL/dA, dL/dP).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> loss_backward_to_descriptors(const Tensor<T>& anchors, const Tensor<T>& positives,
                                                              const SimilarityMatrix<T>& d,
                                                              const TripletSelection<T>& sel,
                                                              const LossResult& grads);

// One (pos, neg) cell of a single-item loss surface.
struct LossSurfaceCell {
  double pos;
  double neg;
  double loss;
  double dpos_abs;
  double dneg_abs;
};

// grid_n x grid_n cells over [-1, 1]^2, pos-major (pos outer, neg inner).
std::vector<LossSurfaceCell> dump_loss_surface(LossVariant variant, double margin, int grid_n);
// Header "pos,neg,loss,dpos_abs,dneg_abs".
void write_loss_surface_csv(std::ostream& out, const std::vector<LossSurfaceCell>& cells);

}  // namespace ralnet
