#include "ralnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "ralnet/layers.hpp"
#include "ralnet/loss.hpp"
#include "ralnet/net.hpp"
#include "ralnet/rng.hpp"

namespace ralnet {

double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale == 0.0 ? 0.0 : diff / scale;
}

std::vector<double> numeric_gradient(const std::function<double()>& f, std::vector<double>& x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f();
    x[i] = keep - h;
    const double fm = f();
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

namespace {

using T = double;

Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> as_vec(const Tensor<T>& t) { return t.vec(); }

Tensor<T> unit_rows(Shape s, Rng& rng) {
  Tensor<T> t = random_tensor(s, rng);
  return l2_normalize_rows_forward(t);
}

GradcheckCase conv_case(const std::string& name, Shape in_shape, Shape w_shape, ConvSpec spec, bool wrt_weights,
                        Rng& rng) {
  Tensor<T> x = random_tensor(in_shape, rng);
  ParamBuffer<T> w("w", random_tensor(w_shape, rng));
  const Tensor<T> y0 = conv2d_forward(x, w.value, spec);
  const Tensor<T> u = random_tensor(y0.shape(), rng);
  w.zero_grad();
  const Tensor<T> gx = conv2d_backward(x, w, spec, u);
  auto f = [&] { return dot(u, conv2d_forward(x, w.value, spec)); };
  std::vector<double> num;
  if (wrt_weights) {
    num = numeric_gradient(f, w.value.vec());
    return {name, max_relative_error(as_vec(w.grad), num), kLayerTolerance};
  }
  num = numeric_gradient(f, x.vec());
  return {name, max_relative_error(as_vec(gx), num), kLayerTolerance};
}

GradcheckCase batch_norm_case(const std::string& name, Mode mode, Rng& rng) {
  Tensor<T> x = random_tensor(Shape{4, 2, 3, 3}, rng, -2.0, 2.0);
  BatchNormState<T> st(2);
  for (int c = 0; c < 2; ++c) {
    st.running_mean[c] = rng.uniform(-0.5, 0.5);
    st.running_var[c] = rng.uniform(0.5, 2.0);
  }
  BatchNormCache<T> cache;
  BatchNormState<T> scratch = st;
  const Tensor<T> y0 = batch_norm_forward(x, scratch, mode, &cache);
  const Tensor<T> u = random_tensor(y0.shape(), rng);
  const Tensor<T> gx = batch_norm_backward(cache, u);
  auto f = [&] {
    BatchNormState<T> s = st;
    return dot(u, batch_norm_forward(x, s, mode, static_cast<BatchNormCache<T>*>(nullptr)));
  };
  return {name, max_relative_error(as_vec(gx), numeric_gradient(f, x.vec())), kLayerTolerance};
}

GradcheckCase relu_case(Rng& rng) {
  Tensor<T> x = random_tensor(Shape{2, 3, 4, 4}, rng);
  for (auto& v : x.vec()) v = (v < 0 ? -1.0 : 1.0) * (0.01 + std::abs(v));
  const Tensor<T> y = relu_forward(x);
  const Tensor<T> u = random_tensor(y.shape(), rng);
  const Tensor<T> gx = relu_backward(y, u);
  auto f = [&] { return dot(u, relu_forward(x)); };
  return {"relu", max_relative_error(as_vec(gx), numeric_gradient(f, x.vec())), kLayerTolerance};
}

GradcheckCase dropout_case(Rng& rng) {
  Tensor<T> x = random_tensor(Shape{2, 3, 4, 4}, rng);
  Tensor<T> mask;
  Rng mask_rng(7);
  const Tensor<T> y = dropout_forward(x, 0.3, mask_rng, Mode::Train, &mask);
  const Tensor<T> u = random_tensor(y.shape(), rng);
  const Tensor<T> gx = dropout_backward(mask, u);
  auto f = [&] {
    Rng r(7);
    return dot(u, dropout_forward(x, 0.3, r, Mode::Train, static_cast<Tensor<T>*>(nullptr)));
  };
  return {"dropout", max_relative_error(as_vec(gx), numeric_gradient(f, x.vec())), kLayerTolerance};
}

GradcheckCase l2_normalize_case(Rng& rng) {
  Tensor<T> x = random_tensor(matrix_shape(5, 8), rng);
  std::vector<T> norms;
  const Tensor<T> y = l2_normalize_rows_forward(x, &norms);
  const Tensor<T> u = random_tensor(y.shape(), rng);
  const Tensor<T> gx = l2_normalize_rows_backward(y, std::span<const T>(norms), u);
  auto f = [&] { return dot(u, l2_normalize_rows_forward(x, static_cast<std::vector<T>*>(nullptr))); };
  return {"l2_normalize_rows", max_relative_error(as_vec(gx), numeric_gradient(f, x.vec())), kLayerTolerance};
}

std::vector<GradcheckCase> matmul_cases(Rng& rng) {
  Tensor<T> a = random_tensor(matrix_shape(3, 4), rng);
  Tensor<T> b = random_tensor(matrix_shape(5, 4), rng);
  const Tensor<T> u = random_tensor(matrix_shape(3, 5), rng);
  auto [ga, gb] = matmul_abt_backward(a, b, u);
  auto f = [&] { return dot(u, matmul_abt(a, b)); };
  const auto na = numeric_gradient(f, a.vec());
  const auto nb = numeric_gradient(f, b.vec());
  return {{"matmul dA", max_relative_error(as_vec(ga), na), kLayerTolerance},
          {"matmul dB", max_relative_error(as_vec(gb), nb), kLayerTolerance}};
}

// Smallest gap between the chosen negative and the runner-up candidate,
// and between each hinge argument and its kink.
double selection_safety(const SimilarityMatrix<T>& d, const TripletSelection<T>& sel, const LossConfig& cfg) {
  const int n = d.size();
  double safety = 1e9;
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n; ++k) {
      for (int l = 0; l < n; ++l) {
        if (k == l || ((k == i) == (l == i))) continue;
        if (k == sel.neg_row[i] && l == sel.neg_col[i]) continue;
        safety = std::min(safety, sel.neg[i] - d(k, l));
      }
    }
    if (cfg.variant == LossVariant::HingeTriplet) {
      safety = std::min(safety, std::abs(sel.neg[i] - sel.pos[i] + cfg.margin));
    } else if (cfg.variant == LossVariant::Contrastive) {
      safety = std::min(safety, std::abs(cfg.margin + sel.neg[i]));
    }
  }
  return safety;
}

GradcheckCase loss_case(LossConfig cfg, Rng& rng) {
  constexpr int n = 4, dim = 8;
  Tensor<T> a, p;
  for (int attempt = 0;; ++attempt) {
    a = unit_rows(matrix_shape(n, dim), rng);
    p = unit_rows(matrix_shape(n, dim), rng);
    const auto d = similarity_matrix(a, p, cfg.similarity);
    if (selection_safety(d, mine_hard_negatives(d), cfg) > 1e-3 || attempt > 1000) break;
  }
  const auto d = similarity_matrix(a, p, cfg.similarity);
  const auto sel = mine_hard_negatives(d);
  const auto res = compute_loss(cfg, sel);
  auto [ga, gp] = loss_backward_to_descriptors(a, p, d, sel, res);
  auto f = [&] { return compute_loss(cfg, mine_hard_negatives(similarity_matrix(a, p, cfg.similarity))).loss; };
  std::vector<double> analytic = as_vec(ga);
  analytic.insert(analytic.end(), gp.vec().begin(), gp.vec().end());
  std::vector<double> numeric = numeric_gradient(f, a.vec());
  const auto np = numeric_gradient(f, p.vec());
  numeric.insert(numeric.end(), np.begin(), np.end());
  return {to_string(cfg.variant) + " loss / " + to_string(cfg.similarity), max_relative_error(analytic, numeric),
          kLayerTolerance};
}

// u^T J v for the full network, against (f(x + h v) - f(x - h v)) . u / 2h.
// The step is halved until x - h v, x and x + h v share one ReLU pattern, so
// the probe never straddles a kink.
std::vector<GradcheckCase> network_cases(std::uint64_t seed, Rng& rng) {
  DescriptorNet<T> net(NetConfig::l2net(seed, 0.3));
  Tensor<T> x = random_tensor(Shape{4, 1, 32, 32}, rng, -2.0, 2.0);
  constexpr std::uint64_t kDropoutSeed = 99;
  auto forward = [&] {
    net.reseed_dropout(kDropoutSeed);
    return net.forward(x, Mode::Train);
  };
  const Tensor<T> y = forward();
  const Tensor<T> u = random_tensor(y.shape(), rng);
  const std::vector<std::uint8_t> pattern = net.activation_pattern();

  // shift(s) moves the probed variables by s along the current direction.
  auto directional = [&](const std::function<void(double)>& shift) {
    for (double h = kFiniteDifferenceStep; h > 1e-9; h *= 0.5) {
      shift(h);
      const double fp = dot(u, forward());
      const bool same_p = net.activation_pattern() == pattern;
      shift(-2.0 * h);
      const double fm = dot(u, forward());
      const bool same_m = net.activation_pattern() == pattern;
      shift(h);
      if (same_p && same_m) return (fp - fm) / (2.0 * h);
    }
    throw NumericError("gradcheck: no kink-free step found for the network probe");
  };
  auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-300}); };

  constexpr int kDirections = 3;
  double input_err = 0.0, param_err = 0.0;
  for (int k = 0; k < kDirections; ++k) {
    const Tensor<T> v = random_tensor(x.shape(), rng);
    const double numeric = directional([&](double s) {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += s * v[i];
    });
    net.zero_grad();
    forward();
    const Tensor<T> gx = net.backward(u);
    input_err = std::max(input_err, rel(dot(gx, v), numeric));
  }

  auto params = net.params();
  for (int k = 0; k < kDirections; ++k) {
    std::vector<Tensor<T>> dirs;
    for (auto* p : params) dirs.push_back(random_tensor(p->value.shape(), rng));
    const double numeric = directional([&](double s) {
      for (std::size_t j = 0; j < params.size(); ++j) {
        for (std::size_t i = 0; i < params[j]->value.size(); ++i) params[j]->value[i] += s * dirs[j][i];
      }
    });
    net.zero_grad();
    forward();
    net.backward(u);
    double analytic = 0.0;
    for (std::size_t j = 0; j < params.size(); ++j) analytic += dot(params[j]->grad, dirs[j]);
    param_err = std::max(param_err, rel(analytic, numeric));
  }
  return {{"network JVP (input)", input_err, kNetworkTolerance},
          {"network JVP (weights)", param_err, kNetworkTolerance}};
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradcheckCase> out;
  out.push_back(conv_case("conv2d s1 p1 dX", {2, 2, 8, 8}, {3, 2, 3, 3}, {1, 1}, false, rng));
  out.push_back(conv_case("conv2d s1 p1 dW", {2, 2, 8, 8}, {3, 2, 3, 3}, {1, 1}, true, rng));
  out.push_back(conv_case("conv2d s2 p1 dX", {2, 2, 8, 8}, {3, 2, 3, 3}, {2, 1}, false, rng));
  out.push_back(conv_case("conv2d s2 p1 dW", {2, 2, 8, 8}, {3, 2, 3, 3}, {2, 1}, true, rng));
  out.push_back(conv_case("conv2d 8x8 p0 dX", {2, 3, 8, 8}, {4, 3, 8, 8}, {1, 0}, false, rng));
  out.push_back(conv_case("conv2d 8x8 p0 dW", {2, 3, 8, 8}, {4, 3, 8, 8}, {1, 0}, true, rng));
  out.push_back(batch_norm_case("batch_norm train", Mode::Train, rng));
  out.push_back(batch_norm_case("batch_norm eval", Mode::Eval, rng));
  out.push_back(relu_case(rng));
  out.push_back(dropout_case(rng));
  out.push_back(l2_normalize_case(rng));
  for (auto& c : matmul_cases(rng)) out.push_back(c);
  for (SimilarityKind kind : {SimilarityKind::Cosine, SimilarityKind::NegativeL2}) {
    out.push_back(loss_case({LossVariant::RobustAngular, kind, 0.0}, rng));
    out.push_back(loss_case({LossVariant::HingeTriplet, kind, 1.0}, rng));
    out.push_back(loss_case({LossVariant::Contrastive, kind, 0.5}, rng));
  }
  for (auto& c : network_cases(seed, rng)) out.push_back(c);
  return out;
}

bool print_gradcheck(std::ostream& out, const std::vector<GradcheckCase>& cases) {
  bool all = true;
  out << std::left << std::setw(32) << "case" << std::setw(16) << "max rel err" << std::setw(12) << "tolerance"
      << "result\n";
  for (const auto& c : cases) {
    all = all && c.pass();
    out << std::left << std::setw(32) << c.name << std::setw(16) << std::scientific << std::setprecision(3)
        << c.max_rel_error << std::setw(12) << c.tolerance << (c.pass() ? "PASS" : "FAIL") << '\n';
  }
  out << std::defaultfloat << (all ? "all gradient checks passed\n" : "gradient check FAILED\n");
  return all;
}

}  // namespace ralnet
