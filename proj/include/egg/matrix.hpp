#ifndef EGG_MATRIX_HPP
#define EGG_MATRIX_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <stdexcept>
#include <string>
#include <vector>

namespace egg {

// Dense row-major matrix of 64-bit floats. All forward results are checked
// finite; a NaN/Inf is treated as a hard error.
class Matrix {
 public:
  Matrix() : rows_(0), cols_(0) {}
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void check_finite(const char* where) const {
    if (!all_finite())
      throw std::runtime_error(std::string("non-finite value produced in ") + where);
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  double max_abs() const {
    double s = 0.0;
    for (double v : data_) s = std::max(s, std::abs(v));
    return s;
  }

 private:
  std::size_t rows_, cols_;
  std::vector<double> data_;
};

inline void require_shape(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline Matrix matmul_raw(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  require_shape(a.same_shape(b), "add: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  require_shape(a.same_shape(b), "sub: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= s;
  return c;
}

inline Matrix hadamard_raw(const Matrix& a, const Matrix& b) {
  require_shape(a.same_shape(b), "hadamard: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= b.data()[i];
  return c;
}

// Compressed sparse row matrix, used for normalized adjacencies and sparse
// feature inputs. Values are fixed (never differentiated through).
class SparseMatrix {
 public:
  SparseMatrix() : rows_(0), cols_(0) {}
  SparseMatrix(std::size_t rows, std::size_t cols,
               std::vector<std::size_t> row_ptr, std::vector<std::size_t> col_idx,
               std::vector<double> values)
      : rows_(rows), cols_(cols),
        row_ptr_(std::move(row_ptr)), col_idx_(std::move(col_idx)), values_(std::move(values)) {}

  // Build from (row, col, value) triplets; duplicates are summed.
  static SparseMatrix from_triplets(std::size_t rows, std::size_t cols,
                                    std::vector<std::size_t> r, std::vector<std::size_t> c,
                                    std::vector<double> v);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t nnz() const { return values_.size(); }

  // y = this * b (dense).
  Matrix multiply(const Matrix& b) const {
    require_shape(cols_ == b.rows(), "spmm: inner dimensions differ");
    Matrix y(rows_, b.cols());
    for (std::size_t i = 0; i < rows_; ++i) {
      double* yi = y.row(i);
      for (std::size_t e = row_ptr_[i]; e < row_ptr_[i + 1]; ++e) {
        const double w = values_[e];
        const double* bj = b.row(col_idx_[e]);
        for (std::size_t j = 0; j < b.cols(); ++j) yi[j] += w * bj[j];
      }
    }
    return y;
  }

  // y = this^T * b (dense).
  Matrix multiply_transposed(const Matrix& b) const {
    require_shape(rows_ == b.rows(), "spmm^T: inner dimensions differ");
    Matrix y(cols_, b.cols());
    for (std::size_t i = 0; i < rows_; ++i) {
      const double* bi = b.row(i);
      for (std::size_t e = row_ptr_[i]; e < row_ptr_[i + 1]; ++e) {
        const double w = values_[e];
        double* yc = y.row(col_idx_[e]);
        for (std::size_t j = 0; j < b.cols(); ++j) yc[j] += w * bi[j];
      }
    }
    return y;
  }

  Matrix to_dense() const {
    Matrix d(rows_, cols_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t e = row_ptr_[i]; e < row_ptr_[i + 1]; ++e)
        d(i, col_idx_[e]) += values_[e];
    return d;
  }

 private:
  std::size_t rows_, cols_;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::size_t> col_idx_;
  std::vector<double> values_;
};

inline SparseMatrix SparseMatrix::from_triplets(std::size_t rows, std::size_t cols,
                                                std::vector<std::size_t> r,
                                                std::vector<std::size_t> c,
                                                std::vector<double> v) {
  std::vector<std::size_t> count(rows + 1, 0);
  for (std::size_t k = 0; k < r.size(); ++k) {
    if (r[k] >= rows || c[k] >= cols) throw std::invalid_argument("sparse triplet out of range");
    ++count[r[k] + 1];
  }
  for (std::size_t i = 0; i < rows; ++i) count[i + 1] += count[i];
  std::vector<std::size_t> row_ptr = count;
  std::vector<std::size_t> col_idx(r.size());
  std::vector<double> values(r.size());
  std::vector<std::size_t> fill = row_ptr;
  for (std::size_t k = 0; k < r.size(); ++k) {
    std::size_t pos = fill[r[k]]++;
    col_idx[pos] = c[k];
    values[pos] = v[k];
  }
  // Sort columns within each row and merge duplicates.
  std::vector<std::size_t> out_ptr(rows + 1, 0);
  std::vector<std::size_t> out_col;
  std::vector<double> out_val;
  out_col.reserve(r.size());
  out_val.reserve(r.size());
  for (std::size_t i = 0; i < rows; ++i) {
    std::vector<std::pair<std::size_t, double>> row;
    for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e)
      row.emplace_back(col_idx[e], values[e]);
    std::sort(row.begin(), row.end());
    const std::size_t start = out_col.size();
    for (const auto& [cc, vv] : row) {
      if (out_col.size() > start && out_col.back() == cc) {
        out_val.back() += vv;
      } else {
        out_col.push_back(cc);
        out_val.push_back(vv);
      }
    }
    out_ptr[i + 1] = out_col.size();
  }
  return SparseMatrix(rows, cols, std::move(out_ptr), std::move(out_col), std::move(out_val));
}

}  // namespace egg

#endif  // EGG_MATRIX_HPP
