#pragma once

#include <span>
#include <utility>
#include <vector>

#include "ralnet/rng.hpp"
#include "ralnet/tensor.hpp"

namespace ralnet {

enum class Mode { Train, Eval };

// ---------------------------------------------------------------------------
// conv2d: zero-padded cross-correlation, no bias. Weights are
// {out_channels, in_channels, k, k}.

struct ConvSpec {
  int stride = 1;
  int pad = 0;
};

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, ConvSpec spec);

// Accumulates dL/dW into weights.grad and returns dL/dinput.
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& input, ParamBuffer<T>& weights, ConvSpec spec,
                          const Tensor<T>& grad_out);

// Output spatial size; throws if the kernel does not fit the padded input.
int conv_output_extent(int in, int kernel, ConvSpec spec);

// ---------------------------------------------------------------------------
// batch_norm without affine parameters.

template <typename T>
struct BatchNormState {
  int channels = 0;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(int c)
      : channels(c), running_mean(matrix_shape(1, c), T(0)), running_var(matrix_shape(1, c), T(1)) {}
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::Train;
  Tensor<T> normalized;
  std::vector<T> inv_std;
  std::vector<T> batch_mean;
  std::vector<T> batch_var;  // biased
};

// Train mode normalizes by batch statistics and updates the running
// statistics (running_var uses the unbiased estimate). Eval mode uses the
// running statistics. `cache` may be null when no backward pass follows.
template <typename T>
Tensor<T> batch_norm_forward(const Tensor<T>& input, BatchNormState<T>& state, Mode mode,
                             BatchNormCache<T>* cache);

// Eval-mode forward that leaves the state untouched.
template <typename T>
Tensor<T> batch_norm_infer(const Tensor<T>& input, const BatchNormState<T>& state);

template <typename T>
Tensor<T> batch_norm_backward(const BatchNormCache<T>& cache, const Tensor<T>& grad_out);

// ---------------------------------------------------------------------------
// Elementwise and row-wise layers.

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input);

// `output` is the forward result; its sign is the mask.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& output, const Tensor<T>& grad_out);

// Inverted dropout. In train mode `mask` receives the per-element scale
// (0 or 1/(1-rate)); in eval mode, or with rate 0, the input is returned and
// the mask is left empty.
template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& input, double rate, Rng& rng, Mode mode, Tensor<T>* mask);

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& mask, const Tensor<T>& grad_out);

inline constexpr double kMinRowNorm = 1e-10;

// Divides each row of an N x d matrix (any shape is flattened per item) by
// its Euclidean norm. `norms` receives the row norms for backward.
template <typename T>
Tensor<T> l2_normalize_rows_forward(const Tensor<T>& input, std::vector<T>* norms = nullptr);

template <typename T>
Tensor<T> l2_normalize_rows_backward(const Tensor<T>& output, std::span<const T> norms,
                                     const Tensor<T>& grad_out);

// ---------------------------------------------------------------------------
// A * B^T for A: N x d, B: M x d.

template <typename T>
Tensor<T> matmul_abt(const Tensor<T>& a, const Tensor<T>& b);

// Returns (dL/dA, dL/dB) given dL/d(A B^T).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> matmul_abt_backward(const Tensor<T>& a, const Tensor<T>& b,
                                                      const Tensor<T>& grad_out);

// ---------------------------------------------------------------------------
// Classical momentum SGD:
//   v <- momentum * v + (g + weight_decay * w)
//   w <- w - lr * v
// Parameters flagged decay_exempt skip the weight-decay term.
// Throws NumericError naming the parameter if any gradient is non-finite.
template <typename T>
void sgd_step(std::span<ParamBuffer<T>* const> params, double lr, double momentum, double weight_decay);

}  // namespace ralnet
