#include "ralnet/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "ralnet/parallel.hpp"

namespace ralnet {

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRow = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapRow = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int batch, in_c, in_h, in_w;
  int out_c, k;
  int out_h, out_w;
  ConvSpec spec;

  int patch_rows() const { return in_c * k * k; }
  int positions() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weights, ConvSpec spec) {
  const Shape& is = input.shape();
  const Shape& ws = weights.shape();
  if (spec.stride != 1 && spec.stride != 2) {
    throw std::invalid_argument("conv2d: stride must be 1 or 2, got " + std::to_string(spec.stride));
  }
  if (spec.pad < 0) throw std::invalid_argument("conv2d: negative padding");
  if (ws.h != ws.w) throw std::invalid_argument("conv2d: non-square kernel " + ws.str());
  if (is.c != ws.c) {
    throw std::invalid_argument("conv2d: input " + is.str() + " has " + std::to_string(is.c) +
                                " channels but weights " + ws.str() + " expect " + std::to_string(ws.c));
  }
  ConvGeometry g{is.n, is.c, is.h, is.w, ws.n, ws.h, 0, 0, spec};
  if (is.h + 2 * spec.pad < ws.h || is.w + 2 * spec.pad < ws.w) {
    throw std::invalid_argument("conv2d: kernel " + ws.str() + " does not fit padded input " + is.str());
  }
  g.out_h = conv_output_extent(is.h, ws.h, spec);
  g.out_w = conv_output_extent(is.w, ws.w, spec);
  return g;
}

// Unrolls samples [first, first+count) into a (C*k*k) x (count*P) matrix.
template <typename T>
void im2col(const Tensor<T>& input, const ConvGeometry& g, int first, int count, RowMat<T>& col) {
  const int P = g.positions();
  col.resize(g.patch_rows(), static_cast<Eigen::Index>(count) * P);
  for (int ci = 0; ci < g.in_c; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col.row((ci * g.k + ky) * g.k + kx).data();
        for (int s = 0; s < count; ++s) {
          const T* src = input.data() + ((static_cast<std::size_t>(first + s) * g.in_c + ci) * g.in_h) * g.in_w;
          T* dst = row + static_cast<std::size_t>(s) * P;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.spec.stride - g.spec.pad + ky;
            T* out = dst + oy * g.out_w;
            if (iy < 0 || iy >= g.in_h) {
              std::fill(out, out + g.out_w, T(0));
              continue;
            }
            const T* in_row = src + static_cast<std::size_t>(iy) * g.in_w;
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.spec.stride - g.spec.pad + kx;
              out[ox] = (ix >= 0 && ix < g.in_w) ? in_row[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const RowMat<T>& col, const ConvGeometry& g, int first, int count, Tensor<T>& grad_in) {
  const int P = g.positions();
  for (int ci = 0; ci < g.in_c; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col.row((ci * g.k + ky) * g.k + kx).data();
        for (int s = 0; s < count; ++s) {
          T* dst = grad_in.data() + ((static_cast<std::size_t>(first + s) * g.in_c + ci) * g.in_h) * g.in_w;
          const T* src = row + static_cast<std::size_t>(s) * P;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.spec.stride - g.spec.pad + ky;
            if (iy < 0 || iy >= g.in_h) continue;
            T* in_row = dst + static_cast<std::size_t>(iy) * g.in_w;
            const T* grow = src + oy * g.out_w;
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.spec.stride - g.spec.pad + kx;
              if (ix >= 0 && ix < g.in_w) in_row[ix] += grow[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

int conv_output_extent(int in, int kernel, ConvSpec spec) {
  const int span = in + 2 * spec.pad - kernel;
  if (span < 0) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kernel) + " does not fit input extent " +
                                std::to_string(in) + " with padding " + std::to_string(spec.pad));
  }
  return span / spec.stride + 1;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, ConvSpec spec) {
  const ConvGeometry g = conv_geometry(input, weights, spec);
  Tensor<T> out(Shape{g.batch, g.out_c, g.out_h, g.out_w});
  const int P = g.positions();
  const int chunk = batch_chunk_size(g.batch);
  const int chunks = (g.batch + chunk - 1) / chunk;
  ConstMapRow<T> w(weights.data(), g.out_c, g.patch_rows());

  parallel_for(chunks, [&](std::size_t ch) {
    const int first = static_cast<int>(ch) * chunk;
    const int count = std::min(chunk, g.batch - first);
    RowMat<T> col;
    im2col(input, g, first, count, col);
    RowMat<T> res(g.out_c, static_cast<Eigen::Index>(count) * P);
    res.noalias() = w * col;
    for (int s = 0; s < count; ++s) {
      for (int co = 0; co < g.out_c; ++co) {
        std::copy_n(res.row(co).data() + static_cast<std::size_t>(s) * P, P,
                    out.data() + (static_cast<std::size_t>(first + s) * g.out_c + co) * P);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& input, ParamBuffer<T>& weights, ConvSpec spec,
                          const Tensor<T>& grad_out) {
  const ConvGeometry g = conv_geometry(input, weights.value, spec);
  const Shape expect{g.batch, g.out_c, g.out_h, g.out_w};
  if (grad_out.shape() != expect) {
    throw std::invalid_argument("conv2d backward: gradient " + grad_out.shape().str() +
                                " does not match output " + expect.str());
  }
  if (weights.grad.shape() != weights.value.shape()) {
    throw std::invalid_argument("conv2d backward: grad buffer " + weights.grad.shape().str() +
                                " does not match weights " + weights.value.shape().str());
  }
  Tensor<T> grad_in(input.shape());
  const int P = g.positions();
  const int chunk = batch_chunk_size(g.batch);
  const int chunks = (g.batch + chunk - 1) / chunk;
  ConstMapRow<T> w(weights.value.data(), g.out_c, g.patch_rows());
  std::vector<RowMat<T>> partial(chunks);

  parallel_for(chunks, [&](std::size_t ch) {
    const int first = static_cast<int>(ch) * chunk;
    const int count = std::min(chunk, g.batch - first);
    RowMat<T> dy(g.out_c, static_cast<Eigen::Index>(count) * P);
    for (int s = 0; s < count; ++s) {
      for (int co = 0; co < g.out_c; ++co) {
        std::copy_n(grad_out.data() + (static_cast<std::size_t>(first + s) * g.out_c + co) * P, P,
                    dy.row(co).data() + static_cast<std::size_t>(s) * P);
      }
    }
    RowMat<T> col;
    im2col(input, g, first, count, col);
    partial[ch].noalias() = dy * col.transpose();
    RowMat<T> dcol(g.patch_rows(), static_cast<Eigen::Index>(count) * P);
    dcol.noalias() = w.transpose() * dy;
    col2im_add(dcol, g, first, count, grad_in);
  });

  MapRow<T> dw(weights.grad.data(), g.out_c, g.patch_rows());
  for (const auto& p : partial) dw += p;
  return grad_in;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> batch_norm_impl(const Tensor<T>& input, const BatchNormState<T>& state, BatchNormState<T>* update,
                          Mode mode, BatchNormCache<T>* cache) {
  const Shape& s = input.shape();
  if (s.c != state.channels) {
    throw std::invalid_argument("batch_norm: input " + s.str() + " has " + std::to_string(s.c) +
                                " channels, state has " + std::to_string(state.channels));
  }
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  const std::size_t per_channel = hw * s.n;
  if (mode == Mode::Train && s.n < 2) {
    throw std::invalid_argument("batch_norm: train mode needs a batch of at least 2, got " + std::to_string(s.n));
  }
  Tensor<T> out(s);
  std::vector<T> inv_std(s.c), mean_v(s.c), var_v(s.c);
  const T eps = static_cast<T>(state.eps);

  parallel_for(static_cast<std::size_t>(s.c), [&](std::size_t c) {
    T mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = input.data() + (static_cast<std::size_t>(n) * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      const double m = sum / static_cast<double>(per_channel);
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = input.data() + (static_cast<std::size_t>(n) * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - m;
          sq += d * d;
        }
      }
      mean = static_cast<T>(m);
      var = static_cast<T>(sq / static_cast<double>(per_channel));
      const double unbiased = per_channel > 1 ? sq / static_cast<double>(per_channel - 1) : 0.0;
      const double mom = state.momentum;
      if (update) {
        update->running_mean[c] = static_cast<T>((1.0 - mom) * state.running_mean[c] + mom * m);
        update->running_var[c] = static_cast<T>((1.0 - mom) * state.running_var[c] + mom * unbiased);
      }
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[c] = inv;
    mean_v[c] = mean;
    var_v[c] = var;
    for (int n = 0; n < s.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * hw;
      const T* p = input.data() + off;
      T* o = out.data() + off;
      for (std::size_t i = 0; i < hw; ++i) o[i] = (p[i] - mean) * inv;
    }
  });

  if (cache) {
    cache->mode = mode;
    cache->normalized = out;
    cache->inv_std = std::move(inv_std);
    cache->batch_mean = std::move(mean_v);
    cache->batch_var = std::move(var_v);
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> batch_norm_forward(const Tensor<T>& input, BatchNormState<T>& state, Mode mode,
                             BatchNormCache<T>* cache) {
  return batch_norm_impl(input, state, &state, mode, cache);
}

template <typename T>
Tensor<T> batch_norm_infer(const Tensor<T>& input, const BatchNormState<T>& state) {
  return batch_norm_impl<T>(input, state, nullptr, Mode::Eval, nullptr);
}

template <typename T>
Tensor<T> batch_norm_backward(const BatchNormCache<T>& cache, const Tensor<T>& grad_out) {
  const Shape& s = cache.normalized.shape();
  if (grad_out.shape() != s) {
    throw std::invalid_argument("batch_norm backward: gradient " + grad_out.shape().str() +
                                " does not match cached output " + s.str());
  }
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  const double count = static_cast<double>(hw * s.n);
  Tensor<T> grad_in(s);
  parallel_for(static_cast<std::size_t>(s.c), [&](std::size_t c) {
    const T inv = cache.inv_std[c];
    if (cache.mode == Mode::Eval) {
      for (int n = 0; n < s.n; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) grad_in[off + i] = grad_out[off + i] * inv;
      }
      return;
    }
    // dx = inv/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += grad_out[off + i];
        sum_dy_xhat += static_cast<double>(grad_out[off + i]) * cache.normalized[off + i];
      }
    }
    const T mean_dy = static_cast<T>(sum_dy / count);
    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / count);
    for (int n = 0; n < s.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        grad_in[off + i] = inv * (grad_out[off + i] - mean_dy - cache.normalized[off + i] * mean_dy_xhat);
      }
    }
  });
  return grad_in;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& output, const Tensor<T>& grad_out) {
  if (grad_out.shape() != output.shape()) {
    throw std::invalid_argument("relu backward: gradient " + grad_out.shape().str() + " vs output " +
                                output.shape().str());
  }
  Tensor<T> g(output.shape());
  for (std::size_t i = 0; i < output.size(); ++i) g[i] = output[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& input, double rate, Rng& rng, Mode mode, Tensor<T>* mask) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (mask) *mask = Tensor<T>();
  if (mode == Mode::Eval || rate == 0.0) return input;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> m(input.shape());
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    m[i] = rng.uniform() < rate ? T(0) : keep_scale;
    out[i] = input[i] * m[i];
  }
  if (mask) *mask = std::move(m);
  return out;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& mask, const Tensor<T>& grad_out) {
  if (mask.empty()) return grad_out;
  if (mask.shape() != grad_out.shape()) {
    throw std::invalid_argument("dropout backward: gradient " + grad_out.shape().str() + " vs mask " +
                                mask.shape().str());
  }
  Tensor<T> g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * mask[i];
  return g;
}

template <typename T>
Tensor<T> l2_normalize_rows_forward(const Tensor<T>& input, std::vector<T>* norms) {
  const Shape& s = input.shape();
  const std::size_t d = s.per_item();
  Tensor<T> out(s);
  if (norms) norms->assign(s.n, T(0));
  for (int r = 0; r < s.n; ++r) {
    const T* x = input.data() + r * d;
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(x[j]) * x[j];
    const double norm = std::sqrt(sq);
    if (!(norm > kMinRowNorm)) {
      throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has norm " + std::to_string(norm) +
                         " (degenerate descriptor)");
    }
    const T nt = static_cast<T>(norm);
    T* y = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) y[j] = x[j] / nt;
    if (norms) (*norms)[r] = nt;
  }
  return out;
}

template <typename T>
Tensor<T> l2_normalize_rows_backward(const Tensor<T>& output, std::span<const T> norms, const Tensor<T>& grad_out) {
  const Shape& s = output.shape();
  if (grad_out.shape() != s || norms.size() != static_cast<std::size_t>(s.n)) {
    throw std::invalid_argument("l2_normalize backward: gradient " + grad_out.shape().str() + " vs output " +
                                s.str());
  }
  const std::size_t d = s.per_item();
  Tensor<T> g(s);
  // dx = (g - y (y . g)) / |x|
  for (int r = 0; r < s.n; ++r) {
    const T* y = output.data() + r * d;
    const T* go = grad_out.data() + r * d;
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(y[j]) * go[j];
    const T dt = static_cast<T>(dot);
    T* gi = g.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) gi[j] = (go[j] - y[j] * dt) / norms[r];
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul_abt(const Tensor<T>& a, const Tensor<T>& b) {
  const int n = a.shape().n, m = b.shape().n;
  const int d = static_cast<int>(a.shape().per_item());
  if (static_cast<int>(b.shape().per_item()) != d) {
    throw std::invalid_argument("matmul: inner dimensions differ, A is " + a.shape().str() + " and B is " +
                                b.shape().str());
  }
  Tensor<T> out(matrix_shape(n, m));
  ConstMapRow<T> am(a.data(), n, d), bm(b.data(), m, d);
  MapRow<T> om(out.data(), n, m);
  om.noalias() = am * bm.transpose();
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> matmul_abt_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out) {
  const int n = a.shape().n, m = b.shape().n;
  const int d = static_cast<int>(a.shape().per_item());
  if (static_cast<int>(b.shape().per_item()) != d) {
    throw std::invalid_argument("matmul backward: inner dimensions differ, A is " + a.shape().str() +
                                " and B is " + b.shape().str());
  }
  if (grad_out.shape() != matrix_shape(n, m)) {
    throw std::invalid_argument("matmul backward: gradient " + grad_out.shape().str() + " expected " +
                                matrix_shape(n, m).str());
  }
  Tensor<T> ga(a.shape()), gb(b.shape());
  ConstMapRow<T> am(a.data(), n, d), bm(b.data(), m, d), gm(grad_out.data(), n, m);
  MapRow<T>(ga.data(), n, d).noalias() = gm * bm;
  MapRow<T>(gb.data(), m, d).noalias() = gm.transpose() * am;
  return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------

template <typename T>
void sgd_step(std::span<ParamBuffer<T>* const> params, double lr, double momentum, double weight_decay) {
  if (!(lr >= 0.0)) throw std::invalid_argument("sgd_step: learning rate must be >= 0");
  for (const ParamBuffer<T>* p : params) {
    if (p->grad.shape() != p->value.shape()) {
      throw std::invalid_argument("sgd_step: parameter '" + p->name + "' grad shape " + p->grad.shape().str() +
                                  " differs from value " + p->value.shape().str());
    }
    if (!p->grad.all_finite()) {
      p->grad.require_finite(("gradient of parameter '" + p->name + "'").c_str());
    }
  }
  const T mu = static_cast<T>(momentum);
  const T lr_t = static_cast<T>(lr);
  for (ParamBuffer<T>* p : params) {
    if (p->velocity.shape() != p->value.shape()) p->velocity = Tensor<T>(p->value.shape());
    const T wd = p->decay_exempt ? T(0) : static_cast<T>(weight_decay);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T v = mu * p->velocity[i] + (p->grad[i] + wd * p->value[i]);
      p->velocity[i] = v;
      p->value[i] -= lr_t * v;
    }
  }
}

#define RALNET_INSTANTIATE_LAYERS(T)                                                                       \
  template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&, ConvSpec);                     \
  template Tensor<T> conv2d_backward<T>(const Tensor<T>&, ParamBuffer<T>&, ConvSpec, const Tensor<T>&);   \
  template Tensor<T> batch_norm_forward<T>(const Tensor<T>&, BatchNormState<T>&, Mode, BatchNormCache<T>*); \
  template Tensor<T> batch_norm_infer<T>(const Tensor<T>&, const BatchNormState<T>&);                     \
  template Tensor<T> batch_norm_backward<T>(const BatchNormCache<T>&, const Tensor<T>&);                  \
  template Tensor<T> relu_forward<T>(const Tensor<T>&);                                                    \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> dropout_forward<T>(const Tensor<T>&, double, Rng&, Mode, Tensor<T>*);                 \
  template Tensor<T> dropout_backward<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> l2_normalize_rows_forward<T>(const Tensor<T>&, std::vector<T>*);                      \
  template Tensor<T> l2_normalize_rows_backward<T>(const Tensor<T>&, std::span<const T>, const Tensor<T>&); \
  template Tensor<T> matmul_abt<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template std::pair<Tensor<T>, Tensor<T>> matmul_abt_backward<T>(const Tensor<T>&, const Tensor<T>&,      \
                                                                   const Tensor<T>&);                      \
  template void sgd_step<T>(std::span<ParamBuffer<T>* const>, double, double, double);

RALNET_INSTANTIATE_LAYERS(float)
RALNET_INSTANTIATE_LAYERS(double)

}  // namespace ralnet
