#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace step {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMajorMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix>;

// Storage allocated through Eigen's aligned allocator.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

// Dense row-major matrix of doubles. Activations and parameters alike.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  AlignedBuffer data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::size_t size() const { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  MatrixMap map() { return MatrixMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)); }
  ConstMatrixMap map() const {
    return ConstMatrixMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

std::string shape_string(const Matrix& m);

// A trainable tensor: value plus an accumulated gradient of the same shape.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, std::size_t rows, std::size_t cols)
      : name(std::move(n)), value(rows, cols), grad(rows, cols) {}

  void zero_grad() { grad.fill(0.0); }
};

}  // namespace step
