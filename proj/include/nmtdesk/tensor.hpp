#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "nmtdesk/error.hpp"

namespace nmtdesk {

using Vec = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Vec>;
using ConstVecMap = Eigen::Map<const Vec>;

/// Dense row-major array of doubles. Rank-1 tensors are vectors, rank-2 are
/// matrices with shape {rows, cols}.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims)
      : shape(std::move(dims)),
        data(std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>()), 0.0) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return shape.empty(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  MatrixMap mat() { return MatrixMap(data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())); }
  ConstMatrixMap mat() const {
    return ConstMatrixMap(data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
  }
  VecMap vec() { return VecMap(data.data(), static_cast<Eigen::Index>(data.size())); }
  ConstVecMap vec() const { return ConstVecMap(data.data(), static_cast<Eigen::Index>(data.size())); }

  /// Row r of a rank-2 tensor as a vector view.
  VecMap row(std::size_t r) { return VecMap(data.data() + r * cols(), static_cast<Eigen::Index>(cols())); }
  ConstVecMap row(std::size_t r) const {
    return ConstVecMap(data.data() + r * cols(), static_cast<Eigen::Index>(cols()));
  }

  void set_zero() { std::fill(data.begin(), data.end(), 0.0); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline void require_size(const Vec& v, Eigen::Index n, const char* what) {
  if (v.size() != n) {
    fail(ErrorKind::kShapeMismatch, std::string(what) + " has size " + std::to_string(v.size()) +
                                        ", expected " + std::to_string(n));
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Numerically stable softmax.
inline Vec softmax(const Vec& scores) {
  const double m = scores.maxCoeff();
  Vec e = (scores.array() - m).exp().matrix();
  return e / e.sum();
}

inline Vec log_softmax(const Vec& scores) {
  const double m = scores.maxCoeff();
  const double lse = m + std::log((scores.array() - m).exp().sum());
  return (scores.array() - lse).matrix();
}

}  // namespace nmtdesk
