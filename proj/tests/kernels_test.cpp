#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedgp/kernels.hpp"

namespace fedgp {
namespace {

Matrix column(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) {
    m(i++, 0) = x;
  }
  return m;
}

TEST(RbfEval, ZeroDistanceGivesVariance) {
  Eigen::RowVectorXd x(2);
  x << 0.3, -1.2;
  EXPECT_DOUBLE_EQ(rbf_eval(x, x, KernelParams::from_natural(2.5, 0.7)), 2.5);
}

TEST(RbfEval, UnitDistance) {
  Eigen::RowVectorXd a(1), b(1);
  a << 0.0;
  b << 1.0;
  EXPECT_NEAR(rbf_eval(a, b, {}), std::exp(-0.5), 1e-15);
}

TEST(RbfEval, LongLengthscaleApproachesVarianceMonotonically) {
  Eigen::RowVectorXd a(1), b(1);
  a << 0.0;
  b << 1.3;
  double prev = 0.0;
  for (double ell : {0.5, 1.0, 10.0, 100.0, 1e4}) {
    const double v = rbf_eval(a, b, KernelParams::from_natural(1.0, ell));
    EXPECT_GT(v, prev);
    prev = v;
  }
  EXPECT_NEAR(prev, 1.0, 1e-8);
}

TEST(RbfEval, Symmetric) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  for (int t = 0; t < 1000; ++t) {
    Eigen::RowVectorXd a(3), b(3);
    for (int j = 0; j < 3; ++j) {
      a(j) = 3 * z(rng);
      b(j) = 3 * z(rng);
    }
    const KernelParams p{z(rng), z(rng)};
    EXPECT_EQ(rbf_eval(a, b, p), rbf_eval(b, a, p));
  }
}

TEST(CovMatrix, SinglePoint) {
  const Matrix K =
      cov_matrix(column({0.4}), KernelParams::from_natural(1.7, 1));
  ASSERT_EQ(K.rows(), 1);
  EXPECT_DOUBLE_EQ(K(0, 0), 1.7);
}

TEST(CovMatrix, ExactlySymmetric) {
  const Matrix X = column({-1.1, 0.2, 0.25, 3.0, -0.7});
  const Matrix K = cov_matrix(X, KernelParams{0.3, -0.4});
  EXPECT_TRUE((K.array() == K.transpose().array()).all());
}

TEST(CovMatrix, MatchesPairwiseLoop) {
  const Matrix X = column({-1.0, 0.0, 1.0});
  const KernelParams p{};
  const Matrix K = cov_matrix(X, p);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      EXPECT_DOUBLE_EQ(K(i, j), rbf_eval(X.row(i), X.row(j), p));
    }
  }
}

TEST(CholJittered, IdentityNeedsNoJitter) {
  const auto c = chol_jittered(Matrix::Identity(3, 3), 1e-6);
  EXPECT_EQ(c.jitter, 0.0);
  EXPECT_TRUE(c.lower.isApprox(Matrix::Identity(3, 3)));
}

TEST(CholJittered, RankOneUsesBaseJitter) {
  const auto c = chol_jittered(Matrix::Ones(2, 2), 1e-6);
  EXPECT_EQ(c.jitter, 1e-6);
  EXPECT_EQ(c.level, 0);
}

TEST(CholJittered, ReconstructsRandomSpd) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z;
  for (int t = 0; t < 50; ++t) {
    Matrix G(6, 6);
    for (auto &x : G.reshaped()) {
      x = z(rng);
    }
    const Matrix K = G * G.transpose() + 0.1 * Matrix::Identity(6, 6);
    const auto c = chol_jittered(K, 1e-6);
    EXPECT_EQ(c.jitter, 0.0);
    EXPECT_LT((c.lower * c.lower.transpose() - K).norm() / K.norm(), 1e-8);
  }
}

TEST(CholJittered, ThrowsWhenEveryLevelFails) {
  Matrix K = Matrix::Identity(2, 2);
  K(0, 0) = -10.0;
  EXPECT_THROW(chol_jittered(K, 1e-6), NotPositiveDefinite);
}

TEST(CholJittered, RejectsAsymmetricInput) {
  Matrix K = Matrix::Identity(2, 2);
  K(0, 1) = 0.5;
  EXPECT_THROW(chol_jittered(K, 1e-6), ConfigError);
}

TEST(Projection, ResidualVanishesAtInducingPoints) {
  const KernelParams p = KernelParams::from_natural(1.3, 0.8);
  const InducingSet Z{column({-1.0, 0.0, 1.5})};
  const auto proj = projection(Z.points, Z, p);
  EXPECT_LE(proj.residual_diag.maxCoeff(), 1e-6 * p.variance());
}

TEST(Projection, ScalarClosedForm) {
  const KernelParams p = KernelParams::from_natural(2.0, 0.9);
  const double x = 0.4, z = -0.3;
  const double kxz = 2.0 * std::exp(-(x - z) * (x - z) / (2 * 0.81));
  const double kzz = 2.0 + default_base_jitter(p);
  const auto proj = projection(column({x}), InducingSet{column({z})}, p);
  EXPECT_NEAR(proj.A(0, 0), kxz / kzz, 1e-14);
  EXPECT_NEAR(proj.residual_diag(0), 2.0 - kxz * kxz / kzz, 1e-14);
}

TEST(Projection, WhitenedFactorsA) {
  const KernelParams p{0.2, -0.1};
  const InducingSet Z{column({-2, -1, 0, 1, 2})};
  const Matrix X = column({-1.7, 0.3, 0.9, 2.4});
  const auto proj = projection(X, Z, p);
  const Matrix back =
      proj.whitened * proj.gram.lower.triangularView<Eigen::Lower>().solve(
                          Matrix::Identity(5, 5));
  EXPECT_LT((back - proj.A).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Projection, ReducesVarianceAndKeepsDiagonalNonnegative) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(-4, 4);
  for (int t = 0; t < 1000; ++t) {
    Matrix X(7, 1), Zp(4, 1);
    for (auto &x : X.reshaped()) {
      x = u(rng);
    }
    for (int q = 0; q < 4; ++q) {
      Zp(q, 0) = -3 + 2 * q + 0.2 * z(rng);
    }
    const KernelParams p{z(rng), 0.5 * z(rng)};
    const auto proj = projection(X, InducingSet{Zp}, p);
    EXPECT_GE(proj.residual_raw.minCoeff(), -1e-8 * p.variance());
    EXPECT_GE(proj.residual_diag.minCoeff(), 0.0);
    EXPECT_TRUE(
        (proj.residual_diag.array() <= p.variance() * (1 + 1e-12)).all());
  }
}

TEST(Projection, PermutingInducingRowsPermutesColumns) {
  const KernelParams p{0.1, 0.2};
  const Matrix Zp = column({-1.5, -0.2, 0.7, 2.0});
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
  perm.indices() << 2, 0, 3, 1;
  const Matrix X = column({-1, 0.1, 1.2});
  const auto a = projection(X, InducingSet{Zp}, p);
  const auto b = projection(X, InducingSet{perm * Zp}, p);
  EXPECT_LT((a.A * perm.transpose() - b.A).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((a.residual_diag - b.residual_diag).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(InducingSet, RejectsDuplicates) {
  EXPECT_THROW(InducingSet{column({0.0, 1.0, 1.0})}.validate(), ConfigError);
  EXPECT_NO_THROW(InducingSet{column({0.0, 1.0})}.validate());
}

} // namespace
} // namespace fedgp
