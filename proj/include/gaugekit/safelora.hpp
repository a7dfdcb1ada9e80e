#pragma once

#include <cstddef>
#include <vector>

#include "gaugekit/linalg.hpp"
#include "gaugekit/rng.hpp"

namespace gauge {

// Span of k matrices of one shape under the Frobenius inner product.
class SafeSubspace {
 public:
  // Orthonormalizes the basis with two passes of modified Gram-Schmidt.
  // Throws ShapeError if element shapes differ from (rows, cols) and
  // RankDeficientError if an element is (numerically) in the span of the
  // ones before it. An empty basis is the zero subspace.
  SafeSubspace(std::size_t rows, std::size_t cols, std::vector<Matrix> basis);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t dim() const { return orthonormal_.size(); }

  const std::vector<Matrix>& basis() const { return basis_; }
  // Pairwise Frobenius inner products equal delta_ij to within 1e-10.
  const std::vector<Matrix>& orthonormal_basis() const { return orthonormal_; }

  static constexpr double kDependenceTol = 1e-10;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<Matrix> basis_;
  std::vector<Matrix> orthonormal_;
};

// Orthogonal projection of delta onto the subspace.
Matrix project_residual(const Matrix& delta, const SafeSubspace& subspace);

struct EvasionResult {
  Matrix gauge;           // G, square and invertible
  Matrix safe_component;  // s in S
  Matrix residual;        // G * w_tuned - w_base
  double residual_check = 0.0;       // max |residual - s|
  double orthogonal_residual = 0.0;  // max |residual - project(residual)|
  std::size_t attempts = 0;
};

// Picks s in S with w_base + s invertible and sets G = (w_base + s) w_tuned^-1,
// so the submitted weight G * w_tuned differs from w_base by exactly s.
//
// s is a Gaussian combination of the orthonormal basis rescaled to
// max|s| = 0.1 * max|w_base|; up to kMaxEvasionAttempts draws are tried.
// Throws SingularMatrixError if w_tuned is singular and EvasionFailedError
// if every draw leaves w_base + s singular.
EvasionResult construct_evasion_gauge(const Matrix& w_base, const Matrix& w_tuned, const SafeSubspace& subspace,
                                      Rng& rng);

inline constexpr std::size_t kMaxEvasionAttempts = 16;
inline constexpr double kSafeComponentScale = 0.1;

}  // namespace gauge
