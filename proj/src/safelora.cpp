#include "gaugekit/safelora.hpp"

#include <cmath>
#include <string>

#include "gaugekit/error.hpp"

namespace gauge {

namespace {

void axpy(Matrix& y, double a, const Matrix& x) {
  auto yd = y.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += a * xd[i];
}

}  // namespace

SafeSubspace::SafeSubspace(std::size_t rows, std::size_t cols, std::vector<Matrix> basis)
    : rows_(rows), cols_(cols), basis_(std::move(basis)) {
  for (std::size_t i = 0; i < basis_.size(); ++i) {
    const Matrix& b = basis_[i];
    if (b.rows() != rows_ || b.cols() != cols_) {
      throw ShapeError("subspace basis element " + std::to_string(i) + " is " + std::to_string(b.rows()) + "x" +
                       std::to_string(b.cols()) + ", expected " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    const double original = std::sqrt(frobenius_dot(b, b));
    Matrix v = b;
    for (int pass = 0; pass < 2; ++pass)
      for (const Matrix& e : orthonormal_) axpy(v, -frobenius_dot(e, v), e);
    const double norm = std::sqrt(frobenius_dot(v, v));
    if (!(original > 0.0) || !(norm > kDependenceTol * original)) {
      throw RankDeficientError("subspace basis is rank-deficient: element " + std::to_string(i) +
                               " lies in the span of the preceding elements");
    }
    orthonormal_.push_back((1.0 / norm) * v);
  }
}

Matrix project_residual(const Matrix& delta, const SafeSubspace& subspace) {
  if (delta.rows() != subspace.rows() || delta.cols() != subspace.cols()) {
    throw ShapeError("project_residual: delta shape differs from subspace shape");
  }
  Matrix out(delta.rows(), delta.cols());
  for (const Matrix& e : subspace.orthonormal_basis()) axpy(out, frobenius_dot(e, delta), e);
  return out;
}

EvasionResult construct_evasion_gauge(const Matrix& w_base, const Matrix& w_tuned, const SafeSubspace& subspace,
                                      Rng& rng) {
  if (w_base.rows() != w_base.cols()) throw ShapeError("construct_evasion_gauge: base weight is not square");
  if (w_base.rows() != w_tuned.rows() || w_base.cols() != w_tuned.cols()) {
    throw ShapeError("construct_evasion_gauge: base and tuned weights differ in shape");
  }
  if (subspace.rows() != w_base.rows() || subspace.cols() != w_base.cols()) {
    throw ShapeError("construct_evasion_gauge: subspace shape differs from the protected weight");
  }
  Matrix tuned_inv;
  try {
    tuned_inv = invert(w_tuned);
  } catch (const SingularMatrixError&) {
    throw SingularMatrixError("construct_evasion_gauge: tuned weight is singular, so no gauge maps it onto base + s");
  }

  const double target = kSafeComponentScale * w_base.max_abs();
  for (std::size_t attempt = 1; attempt <= kMaxEvasionAttempts; ++attempt) {
    Matrix s(w_base.rows(), w_base.cols());
    for (const Matrix& e : subspace.orthonormal_basis()) axpy(s, rng.normal(), e);
    const double peak = s.max_abs();
    if (peak > 0.0) s = (target / peak) * s;

    const Matrix shifted = w_base + s;
    if (!is_invertible(shifted)) continue;

    EvasionResult r;
    r.gauge = matmul(shifted, tuned_inv);
    r.residual = matmul(r.gauge, w_tuned) - w_base;
    r.residual_check = max_abs_diff(r.residual, s);
    r.orthogonal_residual = max_abs_diff(r.residual, project_residual(r.residual, subspace));
    r.safe_component = std::move(s);
    r.attempts = attempt;
    return r;
  }
  throw EvasionFailedError("construct_evasion_gauge: no invertible base + s found after " +
                           std::to_string(kMaxEvasionAttempts) + " draws");
}

}  // namespace gauge
