#ifndef FEDGP_PREDICT_HPP_
#define FEDGP_PREDICT_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "fedgp/adam.hpp"
#include "fedgp/errors.hpp"
#include "fedgp/fedrun.hpp"
#include "fedgp/kernels.hpp"
#include "fedgp/objective.hpp"
#include "fedgp/params.hpp"

namespace fedgp {

/// Marginal predictive mean and variance per test point.
struct PredictiveMoments {
  Vector mean;
  Vector variance;
};

enum class VarianceEstimator {
  // Average conditional variance plus the spread of the conditional means.
  total_variance,
  // The literal 1/S^2-scaled sum of conditional variances.
  literal,
};

namespace detail {

// Mean and marginal variance of one latent at the test inputs given q(u).
struct LatentPrediction {
  Vector mean;
  Vector var;
};

inline LatentPrediction predict_latent(const LatentComponent &lat,
                                       const Matrix &Xs) {
  const ProjectionPair p = projection(Xs, lat.inducing, lat.kernel, false);
  const Matrix AS = p.whitened * lat.q.cov_factor();
  return {p.whitened * lat.q.mean,
          p.residual_diag + AS.rowwise().squaredNorm()};
}

} // namespace detail

/// Monte Carlo predictive moments for an existing unit: coefficient products
/// are drawn from q(w, alpha) and the Gaussian conditional of f given them is
/// integrated analytically.
inline PredictiveMoments
mc_predict(const GlobalParams &theta, const PersonalParams &psi,
           const Matrix &Xs, int samples, std::uint64_t seed,
           const PriorHypers &prior,
           VarianceEstimator estimator = VarianceEstimator::total_variance) {
  if (samples < 1) {
    throw ConfigError("mc_predict needs at least one sample");
  }
  if (Xs.cols() != theta.dim()) {
    throw DimensionMismatch("test inputs have the wrong dimension");
  }
  const Eigen::Index L = theta.num_latents();
  const Eigen::Index Ns = Xs.rows();
  std::vector<detail::LatentPrediction> lat;
  lat.reserve(static_cast<std::size_t>(L));
  for (const auto &c : theta.latents) {
    lat.push_back(detail::predict_latent(c, Xs));
  }
  const Vector gamma = effective_gamma(theta, prior.prior);
  const Vector sw = psi.sigma_w();
  const double slab_sd = std::sqrt(prior.slab_variance);
  const double noise_var = std::exp(2.0 * psi.log_noise);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  Vector mean_acc = Vector::Zero(Ns);
  Vector mean_sq_acc = Vector::Zero(Ns);
  Vector cond_var_acc = Vector::Zero(Ns);
  Vector sample_mean(Ns);
  Vector coeff(L);
  for (int s = 0; s < samples; ++s) {
    for (Eigen::Index l = 0; l < L; ++l) {
      const bool on = unif(rng) < gamma(l);
      const double z = normal(rng);
      const double w = on ? psi.mu_w(l) + sw(l) * z : slab_sd * z;
      coeff(l) = on ? w : 0.0;
    }
    sample_mean.setZero();
    for (Eigen::Index l = 0; l < L; ++l) {
      if (coeff(l) != 0.0) {
        sample_mean += coeff(l) * lat[static_cast<std::size_t>(l)].mean;
        cond_var_acc +=
            coeff(l) * coeff(l) * lat[static_cast<std::size_t>(l)].var;
      }
    }
    mean_acc += sample_mean;
    mean_sq_acc += sample_mean.cwiseAbs2();
  }
  const double S = static_cast<double>(samples);
  PredictiveMoments out;
  out.mean = mean_acc / S;
  if (estimator == VarianceEstimator::literal) {
    out.variance = cond_var_acc / (S * S);
  } else {
    const Vector spread =
        (mean_sq_acc / S - out.mean.cwiseAbs2()).cwiseMax(0.0);
    out.variance = cond_var_acc / S + spread;
  }
  out.variance.array() += noise_var;
  return out;
}

struct SelectionResult {
  std::vector<int> selected;
  Vector gamma_snapshot;
  Vector coeff_energy;
  bool empty_warning = false;
};

/// Latent l is kept when its inclusion probability exceeds `gamma_threshold`
/// and its coefficient energy sum_m (gamma_l mu_{w,m,l})^2 exceeds
/// `energy_threshold`.
inline SelectionResult select_latents(const GlobalParams &theta,
                                      std::span<const PersonalParams> personals,
                                      const PriorHypers &prior,
                                      double gamma_threshold = 0.5,
                                      double energy_threshold = 1e-10) {
  SelectionResult out;
  out.gamma_snapshot = effective_gamma(theta, prior.prior);
  out.coeff_energy = Vector::Zero(theta.num_latents());
  for (const auto &psi : personals) {
    if (psi.num_latents() != theta.num_latents()) {
      throw ShapeMismatch("select_latents: personal parameter length");
    }
    out.coeff_energy += out.gamma_snapshot.cwiseProduct(psi.mu_w).cwiseAbs2();
  }
  for (Eigen::Index l = 0; l < theta.num_latents(); ++l) {
    if (out.gamma_snapshot(l) > gamma_threshold &&
        out.coeff_energy(l) > energy_threshold) {
      out.selected.push_back(static_cast<int>(l));
    }
  }
  out.empty_warning = out.selected.empty();
  return out;
}

/// The `count` latents with the largest coefficient energy, in index order.
inline std::vector<int> top_latents_by_energy(const Vector &energy,
                                              std::size_t count) {
  std::vector<int> idx(static_cast<std::size_t>(energy.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return energy(a) > energy(b); });
  idx.resize(std::min(count, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---------------------------------------------------------------------------
// New units.

struct NewUnitConfig {
  int iterations = 2000;
  AdamSettings adam;
};

struct NewUnitFit {
  std::vector<int> latents;
  Vector weights;
  double log_noise = 0.0;
  int iterations = 0;
  double seconds = 0.0;

  double noise() const { return std::exp(log_noise); }
  double seconds_per_iteration() const {
    return iterations > 0 ? seconds / iterations : 0.0;
  }
};

namespace detail {

inline void check_latent_subset(const GlobalParams &theta,
                                std::span<const int> latents) {
  if (latents.empty()) {
    throw ConfigError("new-unit learning needs at least one selected latent");
  }
  for (int l : latents) {
    if (l < 0 || l >= theta.num_latents()) {
      throw ConfigError("selected latent index out of range");
    }
  }
}

// Mean and trace features of the selected latents on the unit's inputs.
struct NewUnitFeatures {
  Matrix means;  // N x |S|, column l is A_l mu_l
  Vector traces; // |S|, tr(K_l + A_l Sigma_l A_l^T)
};

inline NewUnitFeatures new_unit_features(const GlobalParams &theta,
                                         std::span<const int> latents,
                                         const Matrix &X) {
  NewUnitFeatures f;
  f.means.resize(X.rows(), static_cast<Eigen::Index>(latents.size()));
  f.traces.resize(static_cast<Eigen::Index>(latents.size()));
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const auto p =
        predict_latent(theta.latents[static_cast<std::size_t>(latents[i])], X);
    f.means.col(static_cast<Eigen::Index>(i)) = p.mean;
    f.traces(static_cast<Eigen::Index>(i)) = p.var.sum();
  }
  return f;
}

} // namespace detail

/// E_q(f_p)[log p(y_p | f_p)] with deterministic coefficients and the gradient
/// with respect to (weights, log_noise).
inline std::pair<double, Vector>
new_unit_objective(const detail::NewUnitFeatures &f, const Vector &y,
                   const Vector &weights, double log_noise) {
  const double N = static_cast<double>(y.size());
  const double noise_var = std::exp(2.0 * log_noise);
  const Vector resid = y - f.means * weights;
  const double bracket =
      resid.squaredNorm() + f.traces.dot(weights.cwiseAbs2());
  const double value = -0.5 * N * std::log(2.0 * std::numbers::pi * noise_var) -
                       bracket / (2.0 * noise_var);
  Vector grad(weights.size() + 1);
  grad.head(weights.size()) =
      (f.means.transpose() * resid - f.traces.cwiseProduct(weights)) /
      noise_var;
  grad(weights.size()) = -N + bracket / noise_var;
  return {value, grad};
}

/// Fits a joining unit's coefficients and noise against frozen global
/// parameters restricted to `latents`. Only `data` is read.
inline NewUnitFit new_unit_fit(const GlobalParams &theta,
                               std::span<const int> latents,
                               const UnitDataset &data,
                               const NewUnitConfig &config) {
  data.validate();
  detail::check_latent_subset(theta, latents);
  if (config.iterations < 0) {
    throw ConfigError("iterations must be >= 0");
  }
  const auto start = std::chrono::steady_clock::now();
  const detail::NewUnitFeatures f =
      detail::new_unit_features(theta, latents, data.inputs);
  const Eigen::Index k = static_cast<Eigen::Index>(latents.size());

  Vector x = Vector::Zero(k + 1);
  const double n = static_cast<double>(data.size());
  const double mean = data.outputs.mean();
  const double sd =
      n > 1 ? std::sqrt((data.outputs.array() - mean).square().sum() / (n - 1))
            : 0.0;
  x(k) = std::log(std::max(sd / 2.0, kNoiseFloor));

  AdamState opt(k + 1);
  for (int it = 0; it < config.iterations; ++it) {
    auto [value, grad] = new_unit_objective(f, data.outputs, x.head(k), x(k));
    if (!grad.allFinite() || !std::isfinite(value)) {
      throw NonFiniteGradient("new unit '" + data.unit_id +
                              "': non-finite gradient");
    }
    opt.ascend(x, grad, config.adam);
  }
  NewUnitFit out;
  out.latents.assign(latents.begin(), latents.end());
  out.weights = x.head(k);
  out.log_noise = x(k);
  out.iterations = config.iterations;
  out.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return out;
}

inline PredictiveMoments new_unit_predict(const GlobalParams &theta,
                                          const NewUnitFit &fit,
                                          const Matrix &Xs) {
  detail::check_latent_subset(theta, fit.latents);
  const auto f = detail::new_unit_features(theta, fit.latents, Xs);
  PredictiveMoments out;
  out.mean = f.means * fit.weights;
  out.variance = Vector::Constant(Xs.rows(), std::exp(2.0 * fit.log_noise));
  for (std::size_t i = 0; i < fit.latents.size(); ++i) {
    const auto p = detail::predict_latent(
        theta.latents[static_cast<std::size_t>(fit.latents[i])], Xs);
    const double w = fit.weights(static_cast<Eigen::Index>(i));
    out.variance += w * w * p.var;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Independent single-output GP baseline.

struct IgpParams {
  KernelParams kernel;
  double log_noise = 0.0;
};

struct IgpConfig {
  int iterations = 300;
  AdamSettings adam{0.05, 0.9, 0.999, 1e-8};
};

/// Exact log marginal likelihood and its gradient over
/// (log_variance, log_lengthscale, log_noise).
inline std::pair<double, Eigen::Vector3d>
igp_log_marginal(const UnitDataset &data, const IgpParams &p) {
  const Eigen::Index N = data.size();
  const Matrix Kf = cov_matrix(data.inputs, p.kernel);
  const double noise_var = std::exp(2.0 * p.log_noise);
  Matrix K = Kf;
  K.diagonal().array() += noise_var;
  const JitteredCholesky chol = chol_jittered(K, 1e-10 * K.diagonal().mean());
  const Vector alpha = chol.solve(data.outputs);
  const double value =
      -0.5 * data.outputs.dot(alpha) - 0.5 * chol.log_determinant() -
      0.5 * static_cast<double>(N) * std::log(2.0 * std::numbers::pi);
  const Matrix W =
      alpha * alpha.transpose() - chol.solve(Matrix::Identity(N, N));
  const Matrix D = squared_distances(data.inputs, data.inputs);
  const double ell2 = std::pow(p.kernel.lengthscale(), 2);
  Eigen::Vector3d grad;
  grad(0) = 0.5 * (W.array() * Kf.array()).sum();
  grad(1) = 0.5 * (W.array() * Kf.array() * D.array()).sum() / ell2;
  grad(2) = 0.5 * W.trace() * 2.0 * noise_var;
  return {value, grad};
}

inline IgpParams igp_fit(const UnitDataset &data, const IgpConfig &config) {
  data.validate();
  if (data.size() < 2) {
    throw ConfigError("the independent GP needs at least two observations");
  }
  const double n = static_cast<double>(data.size());
  const double mean = data.outputs.mean();
  const double var =
      std::max((data.outputs.array() - mean).square().sum() / (n - 1), 1e-6);
  const double range = std::max(
      (data.inputs.colwise().maxCoeff() - data.inputs.colwise().minCoeff())
          .maxCoeff(),
      1e-3);
  IgpParams p{KernelParams::from_natural(var, range / 10.0),
              std::log(std::sqrt(var) / 2.0)};
  Vector x(3);
  x << p.kernel.log_variance, p.kernel.log_lengthscale, p.log_noise;
  AdamState opt(3);
  for (int it = 0; it < config.iterations; ++it) {
    const IgpParams cur{{x(0), x(1)}, x(2)};
    auto [value, grad] = igp_log_marginal(data, cur);
    if (!grad.allFinite() || !std::isfinite(value)) {
      throw NonFiniteGradient("independent GP: non-finite gradient");
    }
    opt.ascend(x, grad, config.adam);
    // Keep the noise away from zero; the likelihood is unbounded there for
    // interpolating fits.
    x(2) = std::max(x(2), std::log(kNoiseFloor));
  }
  return {{x(0), x(1)}, x(2)};
}

inline PredictiveMoments igp_predict(const UnitDataset &data,
                                     const IgpParams &p, const Matrix &Xs) {
  const double noise_var = std::exp(2.0 * p.log_noise);
  Matrix K = cov_matrix(data.inputs, p.kernel);
  K.diagonal().array() += noise_var;
  const JitteredCholesky chol = chol_jittered(K, 1e-10 * K.diagonal().mean());
  const Matrix Ks = cov_matrix(Xs, data.inputs, p.kernel);
  PredictiveMoments out;
  out.mean = Ks * chol.solve(data.outputs);
  const Matrix V =
      chol.lower.triangularView<Eigen::Lower>().solve(Ks.transpose());
  out.variance = (Vector::Constant(Xs.rows(), p.kernel.variance()) -
                  V.colwise().squaredNorm().transpose())
                     .cwiseMax(0.0);
  out.variance.array() += noise_var;
  return out;
}

inline PredictiveMoments igp_fit_predict(const UnitDataset &data,
                                         const Matrix &Xs,
                                         const IgpConfig &config = {}) {
  return igp_predict(data, igp_fit(data, config), Xs);
}

} // namespace fedgp

#endif // FEDGP_PREDICT_HPP_
