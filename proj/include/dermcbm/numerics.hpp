#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace dermcbm {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  Matrix transpose() const;

  // Gather rows by index, in the given order.
  Matrix select_rows(std::span<const std::size_t> indices) const;

  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Standard product. Each output entry is accumulated sequentially over the
// inner index, so results are bit-reproducible.
Matrix matmul(const Matrix& a, const Matrix& b);

// a * b^T without materializing the transpose: out(i, j) = a_i . b_j.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> u);

// u.v / (|u| |v|), clamped to [-1, 1]. Throws NumericalError on a zero vector
// and DimensionError on a length mismatch.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

// out(i, j) = cosine_similarity(a_i, b_j).
Matrix pairwise_cosine(const Matrix& a, const Matrix& b);

// Scale every row to unit Euclidean norm. A zero row is a NumericalError
// naming the row.
Matrix l2_normalize_rows(const Matrix& m);

}  // namespace dermcbm
