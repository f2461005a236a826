#include "ralnet/loss.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace ralnet {

SimilarityKind parse_similarity_kind(std::string_view s) {
  if (s == "cosine") return SimilarityKind::Cosine;
  if (s == "l2" || s == "negative-l2") return SimilarityKind::NegativeL2;
  throw std::invalid_argument("unknown similarity kind '" + std::string(s) + "' (cosine | l2)");
}

LossVariant parse_loss_variant(std::string_view s) {
  if (s == "robust" || s == "robust-angular") return LossVariant::RobustAngular;
  if (s == "hinge" || s == "hinge-triplet") return LossVariant::HingeTriplet;
  if (s == "contrastive") return LossVariant::Contrastive;
  throw std::invalid_argument("unknown loss variant '" + std::string(s) + "' (robust | hinge | contrastive)");
}

std::string to_string(SimilarityKind k) { return k == SimilarityKind::Cosine ? "cosine" : "l2"; }

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::RobustAngular:
      return "robust";
    case LossVariant::HingeTriplet:
      return "hinge";
    case LossVariant::Contrastive:
      return "contrastive";
  }
  return "?";
}

template <typename T>
SimilarityMatrix<T> similarity_matrix(const Tensor<T>& anchors, const Tensor<T>& positives, SimilarityKind kind) {
  const int n = anchors.shape().n;
  const std::size_t dim = anchors.shape().per_item();
  if (positives.shape().n != n || positives.shape().per_item() != dim) {
    throw std::invalid_argument("similarity_matrix: anchors " + anchors.shape().str() + " and positives " +
                                positives.shape().str() + " differ in size");
  }
  if (kind == SimilarityKind::Cosine) {
    for (const Tensor<T>* t : {&anchors, &positives}) {
      for (int i = 0; i < n; ++i) {
        double sq = 0.0;
        for (T v : t->item(i)) sq += static_cast<double>(v) * v;
        if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance) {
          throw std::invalid_argument("similarity_matrix: cosine similarity needs unit rows, row " +
                                      std::to_string(i) + " has norm " + std::to_string(std::sqrt(sq)));
        }
      }
    }
  }
  SimilarityMatrix<T> d{kind, Tensor<T>(matrix_shape(n, n))};
  for (int i = 0; i < n; ++i) {
    const T* a = anchors.data() + i * dim;
    for (int j = 0; j < n; ++j) {
      const T* p = positives.data() + j * dim;
      T acc = T(0);
      if (kind == SimilarityKind::Cosine) {
        for (std::size_t k = 0; k < dim; ++k) acc += a[k] * p[k];
      } else {
        for (std::size_t k = 0; k < dim; ++k) acc += (a[k] - p[k]) * (a[k] - p[k]);
        acc = -std::sqrt(acc);
      }
      d.values.at(i, j) = acc;
    }
  }
  return d;
}

template <typename T>
TripletSelection<T> mine_hard_negatives(const SimilarityMatrix<T>& d) {
  const int n = d.size();
  if (n < 2) throw std::invalid_argument("mine_hard_negatives: need at least 2 pairs, got " + std::to_string(n));
  TripletSelection<T> sel;
  sel.pos.resize(n);
  sel.neg.resize(n);
  sel.neg_row.resize(n);
  sel.neg_col.resize(n);
  for (int i = 0; i < n; ++i) {
    int best_r = -1, best_c = -1;
    T best = T(0);
    auto consider = [&](int k, int l) {
      const T v = d(k, l);
      if (best_r < 0 || v > best) {
        best = v;
        best_r = k;
        best_c = l;
      }
    };
    // Row-major walk over row i and column i, diagonal excluded.
    for (int k = 0; k < n; ++k) {
      if (k == i) {
        for (int l = 0; l < n; ++l) {
          if (l != i) consider(k, l);
        }
      } else {
        consider(k, i);
      }
    }
    sel.pos[i] = d(i, i);
    sel.neg[i] = best;
    sel.neg_row[i] = best_r;
    sel.neg_col[i] = best_c;
  }
  return sel;
}

namespace {

void check_items(std::span<const double> pos, std::span<const double> neg, const char* who) {
  if (pos.size() != neg.size() || pos.empty()) {
    throw std::invalid_argument(std::string(who) + ": need equal, non-empty pos/neg lists (got " +
                                std::to_string(pos.size()) + " and " + std::to_string(neg.size()) + ")");
  }
}

}  // namespace

LossResult robust_angular_loss(std::span<const double> pos, std::span<const double> neg) {
  check_items(pos, neg, "robust_angular_loss");
  const double inv_n = 1.0 / static_cast<double>(pos.size());
  LossResult r;
  r.dpos.resize(pos.size());
  r.dneg.resize(pos.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const double t = std::tanh(pos[i] - neg[i]);
    sum += 1.0 - t;
    const double dx = (t * t - 1.0) * inv_n;
    r.dpos[i] = dx;
    r.dneg[i] = -dx;
  }
  r.loss = sum * inv_n;
  return r;
}

LossResult hinge_triplet_loss(std::span<const double> pos, std::span<const double> neg, double margin) {
  check_items(pos, neg, "hinge_triplet_loss");
  if (margin < 0) throw std::invalid_argument("hinge_triplet_loss: margin must be >= 0");
  const double inv_n = 1.0 / static_cast<double>(pos.size());
  LossResult r;
  r.dpos.assign(pos.size(), 0.0);
  r.dneg.assign(pos.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const double v = neg[i] - pos[i] + margin;
    if (v > 0.0) {
      sum += v;
      r.dpos[i] = -inv_n;
      r.dneg[i] = inv_n;
    }
  }
  r.loss = sum * inv_n;
  return r;
}

LossResult contrastive_loss(std::span<const double> pos, std::span<const double> neg, double margin) {
  check_items(pos, neg, "contrastive_loss");
  if (margin < 0) throw std::invalid_argument("contrastive_loss: margin must be >= 0");
  const double inv_n = 1.0 / static_cast<double>(pos.size());
  LossResult r;
  r.dpos.assign(pos.size(), -inv_n);
  r.dneg.assign(pos.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const double v = margin + neg[i];
    if (v > 0.0) {
      sum += v;
      r.dneg[i] = inv_n;
    }
    sum -= pos[i];
  }
  r.loss = sum * inv_n;
  return r;
}

LossResult compute_loss(const LossConfig& cfg, std::span<const double> pos, std::span<const double> neg) {
  switch (cfg.variant) {
    case LossVariant::RobustAngular:
      return robust_angular_loss(pos, neg);
    case LossVariant::HingeTriplet:
      return hinge_triplet_loss(pos, neg, cfg.margin);
    case LossVariant::Contrastive:
      return contrastive_loss(pos, neg, cfg.margin);
  }
  throw std::invalid_argument("compute_loss: unknown variant");
}

template <typename T>
LossResult compute_loss(const LossConfig& cfg, const TripletSelection<T>& sel) {
  std::vector<double> pos(sel.pos.begin(), sel.pos.end());
  std::vector<double> neg(sel.neg.begin(), sel.neg.end());
  return compute_loss(cfg, pos, neg);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> loss_backward_to_descriptors(const Tensor<T>& anchors, const Tensor<T>& positives,
                                                              const SimilarityMatrix<T>& d,
                                                              const TripletSelection<T>& sel,
                                                              const LossResult& grads) {
  const int n = d.size();
  const std::size_t dim = anchors.shape().per_item();
  if (anchors.shape().n != n || positives.shape().n != n || sel.size() != n ||
      grads.dpos.size() != static_cast<std::size_t>(n) || grads.dneg.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("loss_backward_to_descriptors: inconsistent batch sizes");
  }
  Tensor<T> ga(anchors.shape()), gp(positives.shape());
  // dL/dD(i, j) += g, then chain through the similarity of row i and col j.
  auto scatter = [&](int i, int j, double g) {
    if (g == 0.0) return;
    const T* a = anchors.data() + i * dim;
    const T* p = positives.data() + j * dim;
    T* da = ga.data() + i * dim;
    T* dp = gp.data() + j * dim;
    if (d.kind == SimilarityKind::Cosine) {
      const T gt = static_cast<T>(g);
      for (std::size_t k = 0; k < dim; ++k) {
        da[k] += gt * p[k];
        dp[k] += gt * a[k];
      }
    } else {
      const T dist = -d(i, j);
      if (!(dist > T(0))) return;  // zero subgradient at coincident points
      const T s = static_cast<T>(g) / dist;
      for (std::size_t k = 0; k < dim; ++k) {
        const T diff = a[k] - p[k];
        da[k] -= s * diff;
        dp[k] += s * diff;
      }
    }
  };
  for (int i = 0; i < n; ++i) {
    scatter(i, i, grads.dpos[i]);
    scatter(sel.neg_row[i], sel.neg_col[i], grads.dneg[i]);
  }
  return {std::move(ga), std::move(gp)};
}

std::vector<LossSurfaceCell> dump_loss_surface(LossVariant variant, double margin, int grid_n) {
  if (grid_n < 2) throw std::invalid_argument("dump_loss_surface: grid_n must be >= 2");
  LossConfig cfg{variant, SimilarityKind::Cosine, margin};
  std::vector<LossSurfaceCell> cells;
  cells.reserve(static_cast<std::size_t>(grid_n) * grid_n);
  const double step = 2.0 / (grid_n - 1);
  for (int i = 0; i < grid_n; ++i) {
    const double pos = -1.0 + step * i;
    for (int j = 0; j < grid_n; ++j) {
      const double neg = -1.0 + step * j;
      const LossResult r = compute_loss(cfg, std::span<const double>(&pos, 1), std::span<const double>(&neg, 1));
      cells.push_back({pos, neg, r.loss, std::abs(r.dpos[0]), std::abs(r.dneg[0])});
    }
  }
  return cells;
}

void write_loss_surface_csv(std::ostream& out, const std::vector<LossSurfaceCell>& cells) {
  out << "pos,neg,loss,dpos_abs,dneg_abs\n";
  out << std::setprecision(17);
  for (const auto& c : cells) {
    out << c.pos << ',' << c.neg << ',' << c.loss << ',' << c.dpos_abs << ',' << c.dneg_abs << '\n';
  }
}

#define RALNET_INSTANTIATE_LOSS(T)                                                                               \
  template SimilarityMatrix<T> similarity_matrix<T>(const Tensor<T>&, const Tensor<T>&, SimilarityKind);       \
  template TripletSelection<T> mine_hard_negatives<T>(const SimilarityMatrix<T>&);                             \
  template LossResult compute_loss<T>(const LossConfig&, const TripletSelection<T>&);                          \
  template std::pair<Tensor<T>, Tensor<T>> loss_backward_to_descriptors<T>(                                    \
      const Tensor<T>&, const Tensor<T>&, const SimilarityMatrix<T>&, const TripletSelection<T>&, const LossResult&);

RALNET_INSTANTIATE_LOSS(float)
RALNET_INSTANTIATE_LOSS(double)

}  // namespace ralnet
