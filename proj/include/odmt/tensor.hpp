#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace odmt {

/// Every recoverable failure in the library surfaces as this exception type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major float64 tensor. Scalars have an empty shape; everything
/// else used by the library is a vector [n] or a matrix [rows, cols].
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_size(shape) != data.size())
      throw Error("tensor: shape " + shape_str(shape) + " does not match " +
                  std::to_string(data.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor(Shape{rows, cols}, fill);
  }

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() >= 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  bool is_scalar() const { return data.size() == 1 && shape.size() <= 1; }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double item() const { return data.at(0); }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace kernels {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Eigen's product kernel takes a different summation order for the last
// M mod (packet size) rows, so the same input row can round differently
// depending on where it sits in the batch. Padding M to a multiple of 8 sends
// every row through the packet path.
constexpr std::size_t kRowPad = 8;

inline std::size_t padded(std::size_t m) { return (m + kRowPad - 1) / kRowPad * kRowPad; }

// C[M,N] (+)= A[M,K] * B (B given as an Eigen expression over K x N)
template <class Rhs>
inline void gemm_rows(std::size_t m, std::size_t n, std::size_t k, const double* a, const Rhs& b, double* c,
                      bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  MutMap C(c, M, N);
  const std::size_t mp = padded(m);
  if (mp == m) {
    if (accumulate)
      C.noalias() += ConstMap(a, M, K) * b;
    else
      C.noalias() = ConstMap(a, M, K) * b;
    return;
  }
  const auto MP = static_cast<Eigen::Index>(mp);
  RowMat ap = RowMat::Zero(MP, K);
  ap.topRows(M) = ConstMap(a, M, K);
  RowMat cp(MP, N);
  cp.noalias() = ap * b;
  if (accumulate)
    C += cp.topRows(M);
  else
    C = cp.topRows(M);
}

// C[M,N] (+)= A[M,K] * B[K,N]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, bool accumulate) {
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  gemm_rows(m, n, k, a, ConstMap(b, K, N), c, accumulate);
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  if (padded(m) == m) {
    MutMap C(c, M, N);
    if (accumulate)
      C.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
    else
      C.noalias() = ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
    return;
  }
  const RowMat at = ConstMap(a, K, M).transpose();
  gemm_rows(m, n, k, at.data(), ConstMap(b, K, N), c, accumulate);
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, bool accumulate) {
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  gemm_rows(m, n, k, a, ConstMap(b, N, K).transpose(), c, accumulate);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace kernels

}  // namespace odmt
