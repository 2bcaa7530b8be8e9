#pragma once

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

#include "ardlab/errors.hpp"

namespace ardlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw ContractError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
  }

  static Tensor vector(std::initializer_list<double> v) {
    return Tensor({v.size()}, std::vector<double>(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Rows and columns of a rank-2 view; a rank-1 tensor is a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : shape_.at(0); }
  std::size_t cols() const { return rank() == 1 ? shape_.at(0) : shape_.at(1); }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

namespace kernels {

// All matrix products in the library go through these loops so that
// identical inputs produce bit-identical outputs on every code path.

/// out[n,m] = a[n,k] * b[k,m]
inline void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t n, std::size_t k, std::size_t m) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data() + i * m;
    const double* ar = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const double* br = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

/// da[n,k] += dc[n,m] * b[k,m]^T
inline void matmul_grad_a(std::span<const double> dc, std::span<const double> b, std::span<double> da,
                          std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* g = dc.data() + i * m;
    double* d = da.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* br = b.data() + p * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += g[j] * br[j];
      d[p] += acc;
    }
  }
}

/// db[k,m] += a[n,k]^T * dc[n,m]
inline void matmul_grad_b(std::span<const double> a, std::span<const double> dc, std::span<double> db,
                          std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.data() + i * k;
    const double* g = dc.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      double* d = db.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) d[j] += av * g[j];
    }
  }
}

/// Row-wise softmax with max subtraction.
inline void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t rows,
                         std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    double mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      s += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= s;
  }
}

}  // namespace kernels

/// Row-wise softmax of a [batch, C] (or [C]) tensor.
inline Tensor softmax(const Tensor& logits) {
  if (logits.cols() < 2) throw ContractError("softmax needs at least 2 classes");
  if (!logits.all_finite()) throw NumericError("softmax: non-finite logits");
  Tensor out(logits.shape());
  kernels::softmax_rows(logits.data(), out.data(), logits.rows(), logits.cols());
  return out;
}

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double linf_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s = std::max(s, std::abs(x));
  return s;
}

/// Copies rows [begin, end) of a rank-2 tensor, or an arbitrary row list.
inline Tensor take_rows(const Tensor& t, std::span<const std::size_t> idx) {
  const std::size_t c = t.cols();
  Tensor out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = t.row(idx[i]);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

inline Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  const std::size_t c = t.cols();
  Tensor out({end - begin, c});
  std::copy(t.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
            t.data().begin() + static_cast<std::ptrdiff_t>(end * c), out.data().begin());
  return out;
}

}  // namespace ardlab
