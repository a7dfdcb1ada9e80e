#include "gaugekit/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>

#include "gaugekit/error.hpp"

namespace gauge {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged initializer for matrix");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix Matrix::row_block(std::size_t row0, std::size_t n) const {
  if (row0 + n > rows_) throw ShapeError("row block out of range for " + shape_str(*this));
  Matrix out(n, cols_);
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(row0 * cols_), n * cols_, out.data_.begin());
  return out;
}

Matrix Matrix::col_block(std::size_t col0, std::size_t n) const {
  if (col0 + n > cols_) throw ShapeError("column block out of range for " + shape_str(*this));
  Matrix out(rows_, n);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = (*this)(i, col0 + j);
  return out;
}

void Matrix::set_row_block(std::size_t row0, const Matrix& block) {
  if (block.cols() != cols_ || row0 + block.rows() > rows_) {
    throw ShapeError("row block " + shape_str(block) + " does not fit " + shape_str(*this));
  }
  std::copy(block.data_.begin(), block.data_.end(), data_.begin() + static_cast<std::ptrdiff_t>(row0 * cols_));
}

void Matrix::set_col_block(std::size_t col0, const Matrix& block) {
  if (block.rows() != rows_ || col0 + block.cols() > cols_) {
    throw ShapeError("column block " + shape_str(block) + " does not fit " + shape_str(*this));
  }
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < block.cols(); ++j) (*this)(i, col0 + j) = block(i, j);
}

double Matrix::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto d = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += bd[i];
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto d = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] -= bd[i];
  return out;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a) + " * " + shape_str(b));
  }
  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  const std::size_t m = b.cols();
  Matrix out(n, m);
  // i-k-j loop: out(i, j) still accumulates over k in increasing order.
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out.row(i).data();
    const double* arow = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return out;
}

namespace {

// Returns the inverse, or nothing when a pivot is below threshold.
std::optional<Matrix> try_invert(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("invert: matrix is not square (" + shape_str(a) + ")");
  const std::size_t n = a.rows();
  const double threshold = kSingularRelTol * a.max_abs();
  if (n == 0) return Matrix();
  if (threshold == 0.0) return std::nullopt;

  Matrix work = a;
  Matrix inv = Matrix::identity(n);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    double best = std::abs(work(col, col));
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(work(r, col)) > best) {
        best = std::abs(work(r, col));
        pivot = r;
      }
    }
    if (!(best >= threshold)) return std::nullopt;
    if (pivot != col) {
      std::swap_ranges(work.row(col).begin(), work.row(col).end(), work.row(pivot).begin());
      std::swap_ranges(inv.row(col).begin(), inv.row(col).end(), inv.row(pivot).begin());
    }
    const double scale = 1.0 / work(col, col);
    for (double& v : work.row(col)) v *= scale;
    for (double& v : inv.row(col)) v *= scale;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = work(r, col);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        work(r, c) -= f * work(col, c);
        inv(r, c) -= f * inv(col, c);
      }
    }
  }
  return inv;
}

}  // namespace

Matrix invert(const Matrix& a) {
  auto inv = try_invert(a);
  if (!inv) {
    throw SingularMatrixError("invert: matrix " + shape_str(a) + " is singular (pivot below " +
                              "1e-12 * max|entry|)");
  }
  return std::move(*inv);
}

bool is_invertible(const Matrix& a) { return try_invert(a).has_value(); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) m = std::max(m, std::abs(ad[i] - bd[i]));
  return m;
}

double frobenius_dot(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "frobenius_dot");
  auto ad = a.data();
  auto bd = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
  return s;
}

double orthogonality_residual(const Matrix& m) {
  if (m.rows() != m.cols()) throw ShapeError("orthogonality_residual: not square (" + shape_str(m) + ")");
  const Matrix id = Matrix::identity(m.rows());
  const Matrix t = m.transpose();
  return std::max(max_abs_diff(matmul(t, m), id), max_abs_diff(matmul(m, t), id));
}

OrthogonalMatrix::OrthogonalMatrix(Matrix m) : inner_(std::move(m)) {
  const double residual = orthogonality_residual(inner_);
  if (!(residual <= kOrthogonalTol)) {
    throw ShapeError("matrix is not orthogonal: residual " + std::to_string(residual));
  }
}

OrthogonalMatrix OrthogonalMatrix::identity(std::size_t dim) {
  return OrthogonalMatrix(Matrix::identity(dim), Trusted{});
}

OrthogonalMatrix OrthogonalMatrix::inverse() const { return OrthogonalMatrix(inner_.transpose(), Trusted{}); }

OrthogonalMatrix operator*(const OrthogonalMatrix& a, const OrthogonalMatrix& b) {
  return OrthogonalMatrix(matmul(a.matrix(), b.matrix()));
}

PermutationMatrix::PermutationMatrix(std::vector<std::size_t> perm) : perm_(std::move(perm)) {
  std::vector<bool> seen(perm_.size(), false);
  for (std::size_t p : perm_) {
    if (p >= perm_.size() || seen[p]) throw ShapeError("permutation is not a bijection");
    seen[p] = true;
  }
}

PermutationMatrix PermutationMatrix::identity(std::size_t dim) {
  std::vector<std::size_t> perm(dim);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  return PermutationMatrix(std::move(perm));
}

Matrix PermutationMatrix::dense() const {
  Matrix m(dim(), dim());
  for (std::size_t j = 0; j < dim(); ++j) m(perm_[j], j) = 1.0;
  return m;
}

PermutationMatrix PermutationMatrix::inverse() const {
  std::vector<std::size_t> inv(dim());
  for (std::size_t j = 0; j < dim(); ++j) inv[perm_[j]] = j;
  return PermutationMatrix(std::move(inv));
}

bool PermutationMatrix::is_identity() const {
  for (std::size_t j = 0; j < dim(); ++j)
    if (perm_[j] != j) return false;
  return true;
}

Matrix PermutationMatrix::permute_columns(const Matrix& w) const {
  if (w.cols() != dim()) throw ShapeError("permute_columns: " + shape_str(w) + " vs dim " + std::to_string(dim()));
  Matrix out(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    auto src = w.row(i);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < dim(); ++j) dst[j] = src[perm_[j]];
  }
  return out;
}

Matrix PermutationMatrix::inverse_permute_rows(const Matrix& w) const {
  if (w.rows() != dim()) throw ShapeError("permute_rows: " + shape_str(w) + " vs dim " + std::to_string(dim()));
  Matrix out(w.rows(), w.cols());
  for (std::size_t j = 0; j < dim(); ++j) {
    auto src = w.row(perm_[j]);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
  return out;
}

Matrix PermutationMatrix::inverse_permute_columns(const Matrix& w) const {
  return inverse().permute_columns(w);
}

Matrix PermutationMatrix::permute_rows(const Matrix& w) const { return inverse().inverse_permute_rows(w); }

PermutationMatrix operator*(const PermutationMatrix& a, const PermutationMatrix& b) {
  if (a.dim() != b.dim()) throw ShapeError("permutation product: dimension mismatch");
  std::vector<std::size_t> perm(a.dim());
  for (std::size_t j = 0; j < a.dim(); ++j) perm[j] = a.indices()[b.indices()[j]];
  return PermutationMatrix(std::move(perm));
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

OrthogonalMatrix haar_orthogonal(std::size_t dim, Rng& rng) {
  if (dim == 0) throw ShapeError("haar_orthogonal: dim must be positive");
  for (;;) {
    Matrix a = gaussian_matrix(dim, dim, rng);
    std::vector<std::vector<double>> reflectors;
    reflectors.reserve(dim);
    std::vector<double> r_diag(dim);
    bool degenerate = false;

    for (std::size_t k = 0; k < dim; ++k) {
      double norm2 = 0.0;
      for (std::size_t i = k; i < dim; ++i) norm2 += a(i, k) * a(i, k);
      const double norm = std::sqrt(norm2);
      if (!(norm > 1e-150)) {
        degenerate = true;
        break;
      }
      const double alpha = a(k, k) >= 0.0 ? -norm : norm;
      std::vector<double> v(dim - k);
      for (std::size_t i = k; i < dim; ++i) v[i - k] = a(i, k);
      v[0] -= alpha;
      double vnorm2 = 0.0;
      for (double x : v) vnorm2 += x * x;
      const double vnorm = std::sqrt(vnorm2);
      for (double& x : v) x /= vnorm;

      // a[k:, k:] <- (I - 2 v v^T) a[k:, k:]
      for (std::size_t c = k; c < dim; ++c) {
        double dot = 0.0;
        for (std::size_t i = k; i < dim; ++i) dot += v[i - k] * a(i, c);
        for (std::size_t i = k; i < dim; ++i) a(i, c) -= 2.0 * v[i - k] * dot;
      }
      r_diag[k] = a(k, k);
      reflectors.push_back(std::move(v));
    }
    if (degenerate) continue;

    // Q = H_0 H_1 ... H_{n-1}, accumulated right to left onto the identity.
    Matrix q = Matrix::identity(dim);
    for (std::size_t kk = dim; kk-- > 0;) {
      const auto& v = reflectors[kk];
      for (std::size_t c = 0; c < dim; ++c) {
        double dot = 0.0;
        for (std::size_t i = kk; i < dim; ++i) dot += v[i - kk] * q(i, c);
        for (std::size_t i = kk; i < dim; ++i) q(i, c) -= 2.0 * v[i - kk] * dot;
      }
    }
    for (std::size_t j = 0; j < dim; ++j) {
      if (r_diag[j] < 0.0)
        for (std::size_t i = 0; i < dim; ++i) q(i, j) = -q(i, j);
    }
    return OrthogonalMatrix(std::move(q));
  }
}

PermutationMatrix random_permutation(std::size_t dim, Rng& rng) {
  if (dim == 0) throw ShapeError("random_permutation: dim must be positive");
  std::vector<std::size_t> perm(dim);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = dim - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i + 1));
    std::swap(perm[i], perm[j]);
  }
  return PermutationMatrix(std::move(perm));
}

}  // namespace gauge
