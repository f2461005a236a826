#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ralnet {

// Raised when a NaN/Inf shows up where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NCHW dimensions. Lower-rank data uses size-1 trailing dims, so an N x d
// matrix is {N, d, 1, 1}.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  constexpr std::size_t count() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t per_item() const {
    return static_cast<std::size_t>(c) * h * w;
  }
  std::string str() const;
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline Shape matrix_shape(int rows, int cols) { return {rows, cols, 1, 1}; }

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.count(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw std::invalid_argument("negative tensor dimension in " + shape.str());
    }
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.count()) {
      throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }
  // Row/column access for matrices.
  T& at(int r, int col) { return data_[static_cast<std::size_t>(r) * shape_.c + col]; }
  const T& at(int r, int col) const { return data_[static_cast<std::size_t>(r) * shape_.c + col]; }

  std::span<T> item(int n) { return std::span<T>(data_).subspan(n * shape_.per_item(), shape_.per_item()); }
  std::span<const T> item(int n) const {
    return std::span<const T>(data_).subspan(n * shape_.per_item(), shape_.per_item());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Same data, new dims; element count must match.
  Tensor reshaped(Shape s) const {
    if (s.count() != shape_.count()) {
      throw std::invalid_argument("cannot reshape " + shape_.str() + " to " + s.str());
    }
    return Tensor(s, data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
  // Throws NumericError naming `where` if any element is NaN/Inf.
  void require_finite(const char* where) const;

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

template <typename T>
void Tensor<T>::require_finite(const char* where) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw NumericError(std::string("non-finite value at element ") + std::to_string(i) + " of " +
                         shape_.str() + " tensor in " + where);
    }
  }
}

// Learnable parameter with its gradient and momentum buffer.
template <typename T>
struct ParamBuffer {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> velocity;
  bool decay_exempt = false;

  ParamBuffer() = default;
  ParamBuffer(std::string n, Tensor<T> v, bool exempt = false)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), velocity(value.shape()),
        decay_exempt(exempt) {}

  void zero_grad() { grad.fill(T(0)); }
};

}  // namespace ralnet
