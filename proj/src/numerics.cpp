#include "dermcbm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dermcbm/errors.hpp"

namespace dermcbm {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("matrix data has " + std::to_string(data_.size()) +
                         " entries, expected " + std::to_string(rows_ * cols_));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() == 0 ? 0 : rows.begin()->size()) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  }
  return t;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) {
      throw DimensionError("row index " + std::to_string(indices[i]) +
                           " out of range for " + std::to_string(rows_) + " rows");
    }
    std::ranges::copy(row(indices[i]), out.row(i).begin());
  }
  return out;
}

bool Matrix::all_finite() const {
  return std::ranges::all_of(data_, [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " times " +
                         std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  // i-k-j order: every out(i, j) still sums over k = 0..K-1 in sequence.
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: inner dimensions " +
                         std::to_string(a.cols()) + " and " + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  }
  return out;
}

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw DimensionError("dot: lengths " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(u.size()) +
                         " and " + std::to_string(v.size()));
  }
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu == 0.0 || nv == 0.0) {
    throw NumericalError("cosine_similarity: zero vector");
  }
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

Matrix pairwise_cosine(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("pairwise_cosine: dimensions " + std::to_string(a.cols()) +
                         " and " + std::to_string(b.cols()));
  }
  auto norms = [](const Matrix& m, const char* side) {
    std::vector<double> n(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
      n[i] = norm(m.row(i));
      if (n[i] == 0.0) {
        throw NumericalError(std::string("pairwise_cosine: zero row ") +
                             std::to_string(i) + " in " + side);
      }
    }
    return n;
  };
  const auto na = norms(a, "left operand");
  const auto nb = norms(b, "right operand");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      out(i, j) = std::clamp(dot(a.row(i), b.row(j)) / (na[i] * nb[j]), -1.0, 1.0);
    }
  }
  return out;
}

Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double n = norm(m.row(i));
    if (n == 0.0) {
      throw NumericalError("l2_normalize_rows: row " + std::to_string(i) +
                           " is all zeros");
    }
    for (double& v : out.row(i)) v /= n;
  }
  return out;
}

}  // namespace dermcbm
