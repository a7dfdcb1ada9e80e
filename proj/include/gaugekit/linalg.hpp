#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gaugekit/rng.hpp"

namespace gauge {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  Matrix transpose() const;

  // Copy of rows [row0, row0+n) / columns [col0, col0+n).
  Matrix row_block(std::size_t row0, std::size_t n) const;
  Matrix col_block(std::size_t col0, std::size_t n) const;
  void set_row_block(std::size_t row0, const Matrix& block);
  void set_col_block(std::size_t col0, const Matrix& block);

  double max_abs() const;
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);

// Standard product. Each output entry accumulates left to right over the
// shared index, so results are reproducible bit for bit.
Matrix matmul(const Matrix& a, const Matrix& b);

// Gauss-Jordan with partial pivoting. Throws SingularMatrixError when a pivot
// falls below kSingularRelTol * max|a|.
Matrix invert(const Matrix& a);

// True when invert(a) would succeed.
bool is_invertible(const Matrix& a);

inline constexpr double kSingularRelTol = 1e-12;

// max |a - b| entrywise; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);

// Frobenius inner product <a, b> = sum a_ij b_ij.
double frobenius_dot(const Matrix& a, const Matrix& b);

// max |M^T M - I| and max |M M^T - I|, whichever is larger.
double orthogonality_residual(const Matrix& m);

class OrthogonalMatrix {
 public:
  // Throws ShapeError if m is not square or its orthogonality residual
  // exceeds kOrthogonalTol.
  explicit OrthogonalMatrix(Matrix m);

  static OrthogonalMatrix identity(std::size_t dim);

  std::size_t dim() const { return inner_.rows(); }
  const Matrix& matrix() const { return inner_; }

  // Inverse of an orthogonal matrix is its transpose.
  OrthogonalMatrix inverse() const;

  static constexpr double kOrthogonalTol = 1e-12;

 private:
  struct Trusted {};
  OrthogonalMatrix(Matrix m, Trusted) : inner_(std::move(m)) {}
  Matrix inner_;
};

OrthogonalMatrix operator*(const OrthogonalMatrix& a, const OrthogonalMatrix& b);

// Permutation with dense form P[perm[j]][j] = 1. Right-multiplying by P
// gathers columns: (W P)[:, j] = W[:, perm[j]]. Left-multiplying by P^-1
// gathers rows: (P^-1 W)[j, :] = W[perm[j], :].
class PermutationMatrix {
 public:
  // Throws ShapeError unless perm is a bijection on [0, perm.size()).
  explicit PermutationMatrix(std::vector<std::size_t> perm);

  static PermutationMatrix identity(std::size_t dim);

  std::size_t dim() const { return perm_.size(); }
  std::span<const std::size_t> indices() const { return perm_; }

  Matrix dense() const;
  PermutationMatrix inverse() const;
  bool is_identity() const;

  // W P
  Matrix permute_columns(const Matrix& w) const;
  // P^-1 W
  Matrix inverse_permute_rows(const Matrix& w) const;
  // W P^-1
  Matrix inverse_permute_columns(const Matrix& w) const;
  // P W
  Matrix permute_rows(const Matrix& w) const;

  friend bool operator==(const PermutationMatrix&, const PermutationMatrix&) = default;

 private:
  std::vector<std::size_t> perm_;
};

// Dense product P_a P_b as a permutation.
PermutationMatrix operator*(const PermutationMatrix& a, const PermutationMatrix& b);

// Haar-distributed orthogonal matrix: Householder QR of an i.i.d. standard
// Gaussian matrix, with column j of Q multiplied by sign(R[j][j]).
OrthogonalMatrix haar_orthogonal(std::size_t dim, Rng& rng);

// Fisher-Yates shuffle of the identity.
PermutationMatrix random_permutation(std::size_t dim, Rng& rng);

// Matrix of i.i.d. N(0, 1) * scale entries, filled row by row.
Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0);

}  // namespace gauge
