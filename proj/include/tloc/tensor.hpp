#pragma once

// Dense row-major float64 tensors. Tensors are plain values: copying copies
// the buffer, and nothing in the library mutates a tensor it did not create.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tloc/error.hpp"

namespace tloc {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  /// Builds a matrix from nested rows; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(d));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  [[nodiscard]] bool empty() const noexcept { return shape_.empty(); }
  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Rows of a matrix; a rank-1 tensor is treated as a single row.
  [[nodiscard]] std::size_t rows() const { return rank() == 1 ? 1 : shape_.at(0); }
  [[nodiscard]] std::size_t cols() const { return rank() == 1 ? shape_.at(0) : shape_.at(1); }

  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  [[nodiscard]] double item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  [[nodiscard]] bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool on = true) noexcept {
    requires_grad_ = on;
    return *this;
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  [[nodiscard]] Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data_);
  }

  [[nodiscard]] std::span<const double> row(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * cols(), cols());
  }
  [[nodiscard]] std::span<double> row(std::size_t i) {
    return std::span<double>(data_).subspan(i * cols(), cols());
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_) {
      throw DimensionError(std::string(what) + ": shape " + shape_str(shape_) + " vs " +
                           shape_str(o.shape_));
    }
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one dim");
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Plain (non-recording) matrix product; the differentiable version lives in autodiff.hpp.
inline Tensor matmul_value(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out.data()[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const double* br = &b.data()[p * n];
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

namespace detail {
constexpr double kClamp = 40.0;
inline double clamp_arg(double x) { return std::clamp(x, -kClamp, kClamp); }
}  // namespace detail

// Scalar nonlinearities with inputs clamped to |x| <= 40 so results stay finite.
inline double safe_exp(double x) { return std::exp(detail::clamp_arg(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-detail::clamp_arg(x))); }
inline double softplus(double x) {
  const double c = detail::clamp_arg(x);
  return c > 0 ? c + std::log1p(std::exp(-c)) : std::log1p(std::exp(c));
}

}  // namespace tloc
