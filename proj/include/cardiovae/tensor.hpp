#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cardiovae/error.hpp"

namespace cardiovae {

using Dims = std::vector<std::size_t>;

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_string(const Dims& dims) {
  std::string s = "(";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + ")";
}

/// Dense row-major tensor. Float storage is the on-disk and training
/// precision; double instances exist for gradient verification.
template <typename S>
class BasicTensor {
 public:
  using value_type = S;

  BasicTensor() = default;

  explicit BasicTensor(Dims dims) : dims_(std::move(dims)), data_(dims_product(dims_), S(0)) {
    check_dims();
  }

  BasicTensor(Dims dims, std::vector<S> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (dims_product(dims_) != data_.size()) {
      throw ShapeError("size", "tensor data length " + std::to_string(data_.size()) +
                                   " does not match dims " + dims_string(dims_));
    }
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> values() noexcept { return data_; }
  std::span<const S> values() const noexcept { return data_; }
  std::vector<S>& storage() noexcept { return data_; }
  const std::vector<S>& storage() const noexcept { return data_; }

  S& operator[](std::size_t i) noexcept { return data_[i]; }
  const S& operator[](std::size_t i) const noexcept { return data_[i]; }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new dims of identical element count.
  BasicTensor reshaped(Dims dims) const { return BasicTensor(std::move(dims), data_); }

  template <typename T>
  BasicTensor<T> cast() const {
    return BasicTensor<T>(dims_, std::vector<T>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Throws NumericError naming `what` if any element is NaN/Inf.
  void require_finite(const std::string& what) const {
    if (!all_finite()) throw NumericError("non-finite value in " + what);
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : dims_)
      if (d == 0) throw ShapeError("dims", "tensor dims must be positive, got " + dims_string(dims_));
  }

  Dims dims_;
  std::vector<S> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

}  // namespace cardiovae
