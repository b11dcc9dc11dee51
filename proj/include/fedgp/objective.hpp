#ifndef FEDGP_OBJECTIVE_HPP_
#define FEDGP_OBJECTIVE_HPP_

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "fedgp/errors.hpp"
#include "fedgp/kernels.hpp"
#include "fedgp/params.hpp"

namespace fedgp {

constexpr double kGammaClamp = 1e-12;

/// First and second moments of the products w_l * alpha_l under q.
struct CoefficientMoments {
  Vector e;
  Vector v;
};

struct ElboBreakdown {
  double expected_loglik = 0.0;
  double kl_coeff = 0.0;
  double kl_latent_weighted = 0.0;
  double total = 0.0;
};

using BatchIndices = std::span<const Eigen::Index>;

/// Inclusion probabilities the objective actually uses: sigmoid of the logits
/// under the spike-and-slab prior, all ones under the Gaussian prior.
inline Vector effective_gamma(const GlobalParams &theta,
                              CoefficientPrior prior) {
  if (prior == CoefficientPrior::gaussian) {
    return Vector::Ones(theta.num_latents());
  }
  return theta.gamma();
}

inline CoefficientMoments coeff_moments(const PersonalParams &psi,
                                        const Vector &gamma) {
  const Vector s2 = (2.0 * psi.log_sigma_w.array()).exp().matrix();
  CoefficientMoments m;
  m.e = gamma.cwiseProduct(psi.mu_w);
  m.v = gamma.cwiseProduct(psi.mu_w.cwiseAbs2() + s2);
  return m;
}

namespace detail {

inline void check_shapes(const UnitDataset &data, const GlobalParams &theta,
                         const PersonalParams &psi) {
  if (psi.num_latents() != theta.num_latents() ||
      psi.log_sigma_w.size() != theta.num_latents()) {
    throw ShapeMismatch("personal parameters do not match the latent count");
  }
  if (data.dim() != theta.dim()) {
    throw DimensionMismatch("data dimension does not match inducing points");
  }
}

inline Matrix select_rows(const Matrix &X, BatchIndices rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
  }
  return out;
}

inline Vector select_rows(const Vector &y, BatchIndices rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out(static_cast<Eigen::Index>(i)) = y(rows[i]);
  }
  return out;
}

// Per-latent quantities on the rows of one batch. B is the whitened
// projection C_xz L^-T, so the latent mean is B m and its covariance B S S^T
// B^T.
struct LatentView {
  ProjectionPair proj;
  Matrix S;         // covariance factor
  Matrix BS;        // B * S
  Vector a;         // B * m
  double asq = 0;   // sum of a^2
  double trace = 0; // sum of residual + rowwise |B S|^2
};

inline LatentView view_latent(const Matrix &X, const LatentComponent &lat) {
  LatentView v;
  v.proj =
      projection(X, lat.inducing, lat.kernel, /*want_full_residual=*/false);
  v.S = lat.q.cov_factor();
  v.BS = v.proj.whitened * v.S;
  v.a = v.proj.whitened * lat.q.mean;
  v.asq = v.a.squaredNorm();
  v.trace = v.proj.residual_diag.sum() + v.BS.squaredNorm();
  return v;
}

struct Batch {
  Matrix X;
  Vector y;
  double scale = 1.0; // N / |batch|
};

inline Batch make_batch(const UnitDataset &data,
                        std::optional<BatchIndices> batch) {
  if (!batch) {
    return {data.inputs, data.outputs, 1.0};
  }
  if (batch->empty()) {
    throw ConfigError("empty minibatch");
  }
  for (Eigen::Index i : *batch) {
    if (i < 0 || i >= data.size()) {
      throw ConfigError("minibatch index out of range");
    }
  }
  return {select_rows(data.inputs, *batch), select_rows(data.outputs, *batch),
          static_cast<double>(data.size()) /
              static_cast<double>(batch->size())};
}

inline double gaussian_kl_scalar(double mu, double s2, double prior_var) {
  return 0.5 * (std::log(prior_var / s2) + (s2 + mu * mu) / prior_var - 1.0);
}

} // namespace detail

/// Closed-form expected log-likelihood of one unit's data (or a minibatch of
/// it, rescaled by N / |batch|) under q(w, alpha) q(f | w, alpha).
inline double
expected_loglik(const UnitDataset &data, const GlobalParams &theta,
                const PersonalParams &psi,
                CoefficientPrior prior = CoefficientPrior::spike_slab,
                std::optional<BatchIndices> batch = std::nullopt) {
  detail::check_shapes(data, theta, psi);
  const detail::Batch b = detail::make_batch(data, batch);
  const CoefficientMoments mom =
      coeff_moments(psi, effective_gamma(theta, prior));
  const double N = static_cast<double>(data.size());
  const double noise_var = std::exp(2.0 * psi.log_noise);

  Vector resid = b.y;
  double bracket = 0.0;
  for (Eigen::Index l = 0; l < theta.num_latents(); ++l) {
    const auto v =
        detail::view_latent(b.X, theta.latents[static_cast<std::size_t>(l)]);
    resid -= mom.e(l) * v.a;
    bracket += (mom.v(l) - mom.e(l) * mom.e(l)) * v.asq + mom.v(l) * v.trace;
  }
  bracket += resid.squaredNorm();
  return -0.5 * N * std::log(2.0 * std::numbers::pi * noise_var) -
         b.scale * bracket / (2.0 * noise_var);
}

/// KL(N(mean, Sigma) || N(0, prior_cov)) between two Q-dimensional Gaussians.
inline double gaussian_kl(const Vector &mean, const Matrix &cov,
                          const Matrix &prior_cov) {
  const Eigen::LLT<Matrix> prior_llt(prior_cov);
  const Eigen::LLT<Matrix> llt(cov);
  if (prior_llt.info() != Eigen::Success || llt.info() != Eigen::Success) {
    throw NotPositiveDefinite(
        "gaussian_kl: covariance is not positive definite");
  }
  const Matrix Lp = prior_llt.matrixL();
  const Matrix Lq = llt.matrixL();
  const auto Lpt = Lp.triangularView<Eigen::Lower>();
  const double trace = Lpt.solve(Lq).squaredNorm();
  const double maha = Lpt.solve(mean).squaredNorm();
  const double logdet_p = 2.0 * Lp.diagonal().array().log().sum();
  const double logdet_q = 2.0 * Lq.diagonal().array().log().sum();
  return 0.5 * (trace + maha - static_cast<double>(mean.size()) + logdet_p -
                logdet_q);
}

/// KL(q(u) || p(u)) for one latent. In whitened coordinates the prior is
/// standard normal, so the kernel drops out.
inline double kl_latent(const LatentVariational &q) {
  const double logdet = 2.0 * q.factor_raw.diagonal().sum();
  return 0.5 * (q.cov_factor().squaredNorm() + q.mean.squaredNorm() -
                static_cast<double>(q.size()) - logdet);
}

/// KL(q(w_m, alpha) || p(w_m, alpha)) for one unit.
inline double kl_spike_slab(const PersonalParams &psi, const Vector &gamma,
                            const PriorHypers &prior) {
  const double sw2 = prior.slab_variance;
  double kl = 0.0;
  for (Eigen::Index l = 0; l < psi.num_latents(); ++l) {
    const double s2 = std::exp(2.0 * psi.log_sigma_w(l));
    const double kg = detail::gaussian_kl_scalar(psi.mu_w(l), s2, sw2);
    if (prior.prior == CoefficientPrior::gaussian) {
      kl += kg;
      continue;
    }
    const double g = std::clamp(gamma(l), kGammaClamp, 1.0 - kGammaClamp);
    kl += g * (std::log(g / prior.pi) + kg) +
          (1.0 - g) * std::log((1.0 - g) / (1.0 - prior.pi));
  }
  return kl;
}

inline ElboBreakdown
unit_objective(const UnitDataset &data, const GlobalParams &theta,
               const PersonalParams &psi, double r_m, const PriorHypers &prior,
               std::optional<BatchIndices> batch = std::nullopt) {
  if (!(r_m > 0.0 && r_m <= 1.0)) {
    throw ConfigError("unit weight r_m must lie in (0, 1]");
  }
  ElboBreakdown out;
  out.expected_loglik = expected_loglik(data, theta, psi, prior.prior, batch);
  out.kl_coeff = kl_spike_slab(psi, effective_gamma(theta, prior.prior), prior);
  double kl_u = 0.0;
  for (const auto &lat : theta.latents) {
    kl_u += kl_latent(lat.q);
  }
  out.kl_latent_weighted = r_m * kl_u;
  out.total = out.expected_loglik - out.kl_coeff - out.kl_latent_weighted;
  return out;
}

/// The ELBO assembled directly over all units: every unit's expected
/// log-likelihood and coefficient KL, and each latent KL counted once.
inline double full_elbo(std::span<const UnitDataset> units,
                        const GlobalParams &theta,
                        std::span<const PersonalParams> personals,
                        const PriorHypers &prior) {
  if (units.size() != personals.size()) {
    throw ShapeMismatch("full_elbo: one personal parameter set per unit");
  }
  double total = 0.0;
  const Vector gamma = effective_gamma(theta, prior.prior);
  for (std::size_t m = 0; m < units.size(); ++m) {
    total += expected_loglik(units[m], theta, personals[m], prior.prior);
    total -= kl_spike_slab(personals[m], gamma, prior);
  }
  for (const auto &lat : theta.latents) {
    total -= kl_latent(lat.q);
  }
  return total;
}

struct UnitGradient {
  Vector global;   // over to_unconstrained(theta)
  Vector personal; // over to_unconstrained(psi)
  ElboBreakdown value;
  int jitter_escalations = 0;
};

struct GradientOptions {
  bool train_inducing = false;
};

/// Objective value and analytic gradient of V_m with respect to every
/// unconstrained coordinate of theta and psi_m.
inline UnitGradient
unit_gradient(const UnitDataset &data, const GlobalParams &theta,
              const PersonalParams &psi, double r_m, const PriorHypers &prior,
              std::optional<BatchIndices> batch = std::nullopt,
              GradientOptions options = {}) {
  detail::check_shapes(data, theta, psi);
  if (!(r_m > 0.0 && r_m <= 1.0)) {
    throw ConfigError("unit weight r_m must lie in (0, 1]");
  }
  const detail::Batch b = detail::make_batch(data, batch);
  const bool spike_slab = prior.prior == CoefficientPrior::spike_slab;
  const Vector gamma = effective_gamma(theta, prior.prior);
  const CoefficientMoments mom = coeff_moments(psi, gamma);
  const GlobalLayout layout = GlobalLayout::of(theta);
  const Eigen::Index L = layout.latents;
  const Eigen::Index Q = layout.inducing;
  const Eigen::Index d = layout.dim;
  const double N = static_cast<double>(data.size());
  const double noise_var = std::exp(2.0 * psi.log_noise);
  const double c = b.scale;
  const double k = -1.0 / (2.0 * noise_var);

  UnitGradient out;
  out.global = Vector::Zero(layout.size());
  out.personal = Vector::Zero(2 * L + 1);

  std::vector<detail::LatentView> views;
  views.reserve(static_cast<std::size_t>(L));
  Vector resid = b.y;
  double bracket = 0.0;
  for (Eigen::Index l = 0; l < L; ++l) {
    views.push_back(
        detail::view_latent(b.X, theta.latents[static_cast<std::size_t>(l)]));
    const auto &v = views.back();
    if (v.proj.gram.level > 0) {
      ++out.jitter_escalations;
    }
    resid -= mom.e(l) * v.a;
    bracket += (mom.v(l) - mom.e(l) * mom.e(l)) * v.asq + mom.v(l) * v.trace;
  }
  bracket += resid.squaredNorm();
  const double ell =
      -0.5 * N * std::log(2.0 * std::numbers::pi * noise_var) + k * c * bracket;

  // Moments of the coefficient products.
  Vector e_bar(L), v_bar(L);
  double kl_u_total = 0.0;
  for (Eigen::Index l = 0; l < L; ++l) {
    const auto &lat = theta.latents[static_cast<std::size_t>(l)];
    const auto &v = views[static_cast<std::size_t>(l)];
    const Matrix &B = v.proj.whitened;
    const Matrix &Kxz = v.proj.cross;
    const JitteredCholesky &gram = v.proj.gram;
    const auto Lg = gram.lower.triangularView<Eigen::Lower>();
    const double el = mom.e(l);
    const double vl = mom.v(l);

    e_bar(l) = k * c * (-2.0 * resid.dot(v.a) - 2.0 * el * v.asq);
    v_bar(l) = k * c * (v.asq + v.trace);

    const Vector ga = k * c * (-2.0 * el * resid + 2.0 * (vl - el * el) * v.a);
    const double gt = k * c * vl;
    kl_u_total += kl_latent(lat.q);

    // mean
    out.global.segment(layout.latent_offset(l), Q) =
        B.transpose() * ga - r_m * lat.q.mean;

    // covariance factor
    Matrix S_bar = 2.0 * gt * (B.transpose() * v.BS) - r_m * v.S;
    for (Eigen::Index i = 0; i < Q; ++i) {
      S_bar(i, i) += r_m / v.S(i, i);
    }
    {
      Eigen::Index idx = layout.factor_offset(l);
      for (Eigen::Index i = 0; i < Q; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
          out.global(idx++) = i == j ? S_bar(i, i) * v.S(i, i) : S_bar(i, j);
        }
      }
    }

    // Adjoint of B, then of C_xz and of the gram through its factor.
    const Vector mask =
        (v.proj.residual_raw.array() > 0.0).cast<double>().matrix();
    const Matrix B_bar = ga * lat.q.mean.transpose() +
                         2.0 * gt * (v.BS * v.S.transpose()) -
                         2.0 * gt * (mask.asDiagonal() * B);
    const Matrix Kxz_bar = Lg.transpose().solve(B_bar.transpose()).transpose();
    Matrix P =
        gram.lower.transpose() *
        Matrix((-(Kxz_bar.transpose() * B)).triangularView<Eigen::Lower>());
    P = P.triangularView<Eigen::Lower>();
    P.diagonal() *= 0.5;
    P = Lg.transpose().solve(P);
    P = Lg.transpose().solve(P.transpose()).transpose();
    const Matrix G_bar = 0.5 * (P + P.transpose());

    const double var = lat.kernel.variance();
    const double ell2 = std::pow(lat.kernel.lengthscale(), 2);
    const Matrix &Zp = lat.inducing.points;
    const Matrix Kzz = cov_matrix(Zp, lat.kernel);
    const Matrix G = Kzz + Matrix::Identity(Q, Q) * gram.jitter;
    const Matrix Dxz = squared_distances(b.X, Zp);
    const Matrix Dzz = squared_distances(Zp, Zp);

    const double d_logvar = (Kxz_bar.array() * Kxz.array()).sum() +
                            (G_bar.array() * G.array()).sum() +
                            gt * mask.sum() * var;
    const double d_loglen =
        ((Kxz_bar.array() * Kxz.array() * Dxz.array()).sum() +
         (G_bar.array() * Kzz.array() * Dzz.array()).sum()) /
        ell2;
    out.global(layout.kernel_offset(l)) = d_logvar;
    out.global(layout.kernel_offset(l) + 1) = d_loglen;

    if (options.train_inducing) {
      const Matrix Wxz = (Kxz_bar.array() * Kxz.array()).matrix();
      const Matrix Wzz = (G_bar.array() * Kzz.array()).matrix();
      Eigen::Index idx = layout.inducing_offset(l);
      for (Eigen::Index q = 0; q < Q; ++q) {
        for (Eigen::Index j = 0; j < d; ++j) {
          double g = 0.0;
          for (Eigen::Index n = 0; n < b.X.rows(); ++n) {
            g += Wxz(n, q) * (b.X(n, j) - Zp(q, j));
          }
          for (Eigen::Index r = 0; r < Q; ++r) {
            g += 2.0 * Wzz(q, r) * (Zp(r, j) - Zp(q, j));
          }
          out.global(idx++) = g / ell2;
        }
      }
    }
  }

  // Coefficient KL and chain rule into personal coordinates and gamma.
  const double sw2 = prior.slab_variance;
  double kl_coeff = 0.0;
  for (Eigen::Index l = 0; l < L; ++l) {
    const double mu = psi.mu_w(l);
    const double s2 = std::exp(2.0 * psi.log_sigma_w(l));
    const double kg = detail::gaussian_kl_scalar(mu, s2, sw2);
    const double g = gamma(l);

    double dkl_dmu = mu / sw2;
    double dkl_dlogs = s2 / sw2 - 1.0;
    double dkl_dgamma = 0.0;
    if (spike_slab) {
      const double gc = std::clamp(g, kGammaClamp, 1.0 - kGammaClamp);
      kl_coeff += gc * (std::log(gc / prior.pi) + kg) +
                  (1.0 - gc) * std::log((1.0 - gc) / (1.0 - prior.pi));
      dkl_dmu *= gc;
      dkl_dlogs *= gc;
      if (g == gc) {
        dkl_dgamma = std::log(gc / prior.pi) -
                     std::log((1.0 - gc) / (1.0 - prior.pi)) + kg;
      }
    } else {
      kl_coeff += kg;
    }

    out.personal(l) = e_bar(l) * g + v_bar(l) * 2.0 * g * mu - dkl_dmu;
    out.personal(L + l) = v_bar(l) * 2.0 * g * s2 - dkl_dlogs;
    if (spike_slab) {
      const double d_gamma =
          e_bar(l) * mu + v_bar(l) * (mu * mu + s2) - dkl_dgamma;
      out.global(layout.gamma_offset() + l) = d_gamma * g * (1.0 - g);
    }
  }
  out.personal(2 * L) = -N - 2.0 * k * c * bracket;

  out.value.expected_loglik = ell;
  out.value.kl_coeff = kl_coeff;
  out.value.kl_latent_weighted = r_m * kl_u_total;
  out.value.total = ell - kl_coeff - r_m * kl_u_total;
  return out;
}

} // namespace fedgp

#endif // FEDGP_OBJECTIVE_HPP_
