#ifndef FEDGP_KERNELS_HPP_
#define FEDGP_KERNELS_HPP_

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>

#include "fedgp/errors.hpp"

namespace fedgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// RBF kernel hyperparameters, stored in log space so that unconstrained
/// gradient steps keep both quantities positive.
struct KernelParams {
  double log_variance = 0.0;
  double log_lengthscale = 0.0;

  double variance() const { return std::exp(log_variance); }
  double lengthscale() const { return std::exp(log_lengthscale); }

  static KernelParams from_natural(double variance, double lengthscale) {
    return {std::log(variance), std::log(lengthscale)};
  }

  bool operator==(const KernelParams &) const = default;
};

/// Inducing locations of one latent function, one row per point.
struct InducingSet {
  Matrix points;

  Eigen::Index size() const { return points.rows(); }
  Eigen::Index dim() const { return points.cols(); }

  /// Throws ConfigError unless there is at least one finite row and rows are
  /// pairwise distinct within `tol`.
  void validate(double tol = 1e-9) const {
    if (points.rows() < 1 || points.cols() < 1) {
      throw ConfigError("inducing set must have at least one point");
    }
    if (!points.allFinite()) {
      throw ConfigError("inducing points must be finite");
    }
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      for (Eigen::Index j = i + 1; j < points.rows(); ++j) {
        if ((points.row(i) - points.row(j)).norm() <= tol) {
          throw ConfigError("duplicate inducing points " + std::to_string(i) +
                            " and " + std::to_string(j));
        }
      }
    }
  }
};

inline double rbf_eval(const Eigen::Ref<const Eigen::RowVectorXd> &x,
                       const Eigen::Ref<const Eigen::RowVectorXd> &x2,
                       const KernelParams &params) {
  const double ell = params.lengthscale();
  const double sq = (x - x2).squaredNorm();
  return params.variance() * std::exp(-sq / (2.0 * ell * ell));
}

/// Squared euclidean distances between the rows of `X` and `X2`.
inline Matrix squared_distances(const Matrix &X, const Matrix &X2) {
  Matrix out(X.rows(), X2.rows());
  for (Eigen::Index j = 0; j < X2.rows(); ++j) {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      out(i, j) = (X.row(i) - X2.row(j)).squaredNorm();
    }
  }
  return out;
}

inline Matrix cov_matrix(const Matrix &X, const Matrix &X2,
                         const KernelParams &params) {
  const double var = params.variance();
  const double ell = params.lengthscale();
  const double scale = -1.0 / (2.0 * ell * ell);
  Matrix out(X.rows(), X2.rows());
  for (Eigen::Index j = 0; j < X2.rows(); ++j) {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      out(i, j) = var * std::exp(scale * (X.row(i) - X2.row(j)).squaredNorm());
    }
  }
  return out;
}

inline Matrix cov_matrix(const Matrix &X, const KernelParams &params) {
  Matrix out = cov_matrix(X, X, params);
  // Exact symmetry regardless of the evaluation order above.
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    for (Eigen::Index i = j + 1; i < out.rows(); ++i) {
      out(j, i) = out(i, j);
    }
  }
  return out;
}

constexpr int kJitterLevels = 7;
constexpr double kRelativeJitter = 1e-6;

struct JitteredCholesky {
  Matrix lower;
  double jitter = 0.0;
  int level = 0; // index into the escalation ladder, -1 for no jitter

  Eigen::Index size() const { return lower.rows(); }

  Matrix solve(const Matrix &rhs) const {
    Matrix out = lower.triangularView<Eigen::Lower>().solve(rhs);
    lower.transpose().triangularView<Eigen::Upper>().solveInPlace(out);
    return out;
  }

  double log_determinant() const {
    return 2.0 * lower.diagonal().array().log().sum();
  }
};

/// Cholesky factor of K + eps*I for the smallest eps in
/// {0, base*10^k : k = 0..6}. With `allow_zero` false the ladder starts at
/// `base_jitter`.
inline JitteredCholesky chol_jittered(const Matrix &K, double base_jitter,
                                      bool allow_zero = true) {
  if (K.rows() != K.cols()) {
    throw DimensionMismatch("chol_jittered: matrix is not square");
  }
  const double scale = std::max(K.cwiseAbs().maxCoeff(), 1e-300);
  if ((K - K.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw ConfigError("chol_jittered: matrix is not symmetric");
  }
  if (!K.allFinite()) {
    throw NotPositiveDefinite("chol_jittered: non-finite matrix entries");
  }
  const Eigen::Index n = K.rows();
  for (int level = allow_zero ? -1 : 0; level < kJitterLevels; ++level) {
    const double eps = level < 0 ? 0.0 : base_jitter * std::pow(10.0, level);
    Matrix shifted = K;
    shifted.diagonal().array() += eps;
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() != Eigen::Success) {
      continue;
    }
    Matrix lower = llt.matrixL();
    if (!lower.allFinite() || (lower.diagonal().array() <= 0.0).any()) {
      continue;
    }
    return {std::move(lower), eps, level};
  }
  throw NotPositiveDefinite("chol_jittered: factorization failed at every "
                            "jitter level for a " +
                            std::to_string(n) + "x" + std::to_string(n) +
                            " matrix");
}

constexpr Eigen::Index kFullResidualLimit = 512;

/// Nystrom projection of a latent GP onto its inducing set.
///
/// `A` solves A * C_zz = C_xz through the jittered factor L L^T and
/// `whitened` is C_xz L^-T, so that A = whitened * L^-1. `residual_diag` holds
/// diag(C_xx - A C_zx) clamped at zero. The full residual matrix is only
/// kept when the input count is at most kFullResidualLimit.
struct ProjectionPair {
  Matrix A;
  Matrix whitened;
  Vector residual_diag;
  std::optional<Matrix> residual_full;

  // Intermediates reused by gradient code.
  Matrix cross;          // C_xz
  JitteredCholesky gram; // factor of C_zz + jitter*I
  Vector residual_raw;   // diagonal before clamping
};

inline double default_base_jitter(const KernelParams &params) {
  return kRelativeJitter * params.variance();
}

/// The gram factor always carries at least the base jitter; escalation
/// proceeds by powers of ten from there.
inline JitteredCholesky inducing_factor(const InducingSet &Z,
                                        const KernelParams &params) {
  return chol_jittered(cov_matrix(Z.points, params),
                       default_base_jitter(params), /*allow_zero=*/false);
}

inline ProjectionPair projection(const Matrix &Xm, const InducingSet &Z,
                                 const KernelParams &params,
                                 bool want_full_residual = true) {
  if (Xm.cols() != Z.dim()) {
    throw DimensionMismatch(
        "projection: input dimension " + std::to_string(Xm.cols()) +
        " does not match inducing dimension " + std::to_string(Z.dim()));
  }
  ProjectionPair out;
  out.gram = inducing_factor(Z, params);
  out.cross = cov_matrix(Xm, Z.points, params);
  out.whitened = out.gram.lower.triangularView<Eigen::Lower>()
                     .solve(out.cross.transpose())
                     .transpose();
  out.A = out.gram.lower.transpose()
              .triangularView<Eigen::Upper>()
              .solve(out.whitened.transpose())
              .transpose();

  const double var = params.variance();
  out.residual_raw =
      Vector::Constant(Xm.rows(), var) - out.whitened.rowwise().squaredNorm();
  out.residual_diag = out.residual_raw.cwiseMax(0.0);

  if (want_full_residual && Xm.rows() <= kFullResidualLimit) {
    Matrix full = cov_matrix(Xm, params) - out.A * out.cross.transpose();
    full = 0.5 * (full + full.transpose()).eval();
    full.diagonal() = out.residual_diag;
    out.residual_full = std::move(full);
  }
  return out;
}

} // namespace fedgp

#endif // FEDGP_KERNELS_HPP_
