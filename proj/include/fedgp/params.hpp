#ifndef FEDGP_PARAMS_HPP_
#define FEDGP_PARAMS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedgp/errors.hpp"
#include "fedgp/kernels.hpp"

namespace fedgp {

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// One unit's observations. Never leaves the unit.
struct UnitDataset {
  Matrix inputs;
  Vector outputs;
  std::string unit_id;

  Eigen::Index size() const { return outputs.size(); }
  Eigen::Index dim() const { return inputs.cols(); }

  void validate() const {
    if (outputs.size() < 1) {
      throw EmptyDataset("unit '" + unit_id + "' has no observations");
    }
    if (inputs.rows() != outputs.size()) {
      throw DimensionMismatch(
          "unit '" + unit_id + "': " + std::to_string(inputs.rows()) +
          " inputs vs " + std::to_string(outputs.size()) + " outputs");
    }
    if (!inputs.allFinite() || !outputs.allFinite()) {
      throw ConfigError("unit '" + unit_id + "' has non-finite values");
    }
  }
};

/// Gaussian surrogate over one latent's inducing values, in coordinates
/// whitened by the prior: with L the jittered factor of C_zz, the inducing
/// values are L (mean + F eps), eps ~ N(0, I). Zero mean and F = I is the
/// prior itself.
///
/// The factor is held in raw form: strictly-lower entries as they are and the
/// log of each diagonal entry on the diagonal. That makes the unconstrained
/// coordinates a plain copy of the stored values.
struct LatentVariational {
  Vector mean;
  Matrix factor_raw;

  Eigen::Index size() const { return mean.size(); }

  Matrix cov_factor() const {
    Matrix out = factor_raw.triangularView<Eigen::StrictlyLower>();
    out.diagonal() = factor_raw.diagonal().array().exp().matrix();
    return out;
  }

  Matrix covariance() const {
    const Matrix F = cov_factor();
    return F * F.transpose();
  }

  static LatentVariational from_factor(Vector mean, const Matrix &factor) {
    Matrix raw = factor.triangularView<Eigen::StrictlyLower>();
    raw.diagonal() = factor.diagonal().array().log().matrix();
    return {std::move(mean), std::move(raw)};
  }
};

/// Everything shared about one latent function.
struct LatentComponent {
  LatentVariational q;
  KernelParams kernel;
  InducingSet inducing;

  /// Mean and covariance of the inducing values themselves.
  Vector inducing_mean() const {
    return inducing_factor(inducing, kernel).lower * q.mean;
  }
  Matrix inducing_covariance() const {
    const Matrix F = inducing_factor(inducing, kernel).lower * q.cov_factor();
    return F * F.transpose();
  }
};

/// Global parameters: the only payload exchanged with the central server.
struct GlobalParams {
  std::vector<LatentComponent> latents;
  Vector gamma_logit;

  Eigen::Index num_latents() const {
    return static_cast<Eigen::Index>(latents.size());
  }
  Eigen::Index num_inducing() const {
    return latents.empty() ? 0 : latents.front().q.size();
  }
  Eigen::Index dim() const {
    return latents.empty() ? 0 : latents.front().inducing.dim();
  }

  Vector gamma() const {
    return gamma_logit.unaryExpr([](double x) { return sigmoid(x); });
  }

  void validate() const {
    if (latents.empty()) {
      throw ConfigError("global parameters need at least one latent");
    }
    const Eigen::Index Q = num_inducing();
    const Eigen::Index d = dim();
    if (gamma_logit.size() != num_latents()) {
      throw ShapeMismatch("gamma_logit length does not match latent count");
    }
    for (const auto &lat : latents) {
      if (lat.q.mean.size() != Q || lat.q.factor_raw.rows() != Q ||
          lat.q.factor_raw.cols() != Q || lat.inducing.size() != Q ||
          lat.inducing.dim() != d) {
        throw ShapeMismatch("latent components disagree on Q or d");
      }
    }
  }
};

/// Per-unit parameters. Never transmitted.
struct PersonalParams {
  Vector mu_w;
  Vector log_sigma_w;
  double log_noise = 0.0;

  Eigen::Index num_latents() const { return mu_w.size(); }
  Vector sigma_w() const { return log_sigma_w.array().exp().matrix(); }
  double noise() const { return std::exp(log_noise); }
};

enum class CoefficientPrior : std::uint8_t {
  // Spike-and-slab prior with learned inclusion probabilities.
  spike_slab = 0,
  // Plain Gaussian prior; inclusion probabilities pinned to one.
  gaussian = 1,
};

struct PriorHypers {
  double pi = 0.5;
  double slab_variance = 1.0;
  int num_latents = 10;
  int num_inducing = 20;
  CoefficientPrior prior = CoefficientPrior::spike_slab;

  void validate() const {
    if (!(pi > 0.0 && pi < 1.0)) {
      throw ConfigError("pi must lie in (0, 1)");
    }
    if (!(slab_variance > 0.0) || !std::isfinite(slab_variance)) {
      throw ConfigError("slab variance must be positive");
    }
    if (num_latents < 1) {
      throw ConfigError("need at least one latent function");
    }
    if (num_inducing < 1) {
      throw ConfigError("need at least one inducing point");
    }
  }

  bool operator==(const PriorHypers &) const = default;
};

/// One message of the round protocol. `payload` is a serialized
/// GlobalParams; `weight` is N_m on the uplink.
struct RoundMessage {
  std::uint64_t round_index = 0;
  std::vector<std::uint8_t> payload;
  double weight = 0.0;

  bool operator==(const RoundMessage &) const = default;
};

// ---------------------------------------------------------------------------
// Unconstrained coordinates.
//
// Global layout, latent by latent: mean (Q), factor_raw lower triangle row by
// row (Q(Q+1)/2), log_variance, log_lengthscale, inducing points row-major
// (Q*d). The L gamma logits follow the last latent.

struct GlobalLayout {
  Eigen::Index latents = 0;
  Eigen::Index inducing = 0;
  Eigen::Index dim = 0;

  static GlobalLayout of(const GlobalParams &theta) {
    return {theta.num_latents(), theta.num_inducing(), theta.dim()};
  }

  Eigen::Index tri() const { return inducing * (inducing + 1) / 2; }
  Eigen::Index per_latent() const {
    return inducing + tri() + 2 + inducing * dim;
  }
  Eigen::Index latent_offset(Eigen::Index l) const { return l * per_latent(); }
  Eigen::Index factor_offset(Eigen::Index l) const {
    return latent_offset(l) + inducing;
  }
  Eigen::Index kernel_offset(Eigen::Index l) const {
    return factor_offset(l) + tri();
  }
  Eigen::Index inducing_offset(Eigen::Index l) const {
    return kernel_offset(l) + 2;
  }
  Eigen::Index gamma_offset() const { return latents * per_latent(); }
  Eigen::Index size() const { return gamma_offset() + latents; }

  bool operator==(const GlobalLayout &) const = default;
};

inline Vector to_unconstrained(const GlobalParams &theta) {
  const GlobalLayout layout = GlobalLayout::of(theta);
  Vector out(layout.size());
  for (Eigen::Index l = 0; l < layout.latents; ++l) {
    const auto &lat = theta.latents[static_cast<std::size_t>(l)];
    out.segment(layout.latent_offset(l), layout.inducing) = lat.q.mean;
    Eigen::Index k = layout.factor_offset(l);
    for (Eigen::Index i = 0; i < layout.inducing; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        out(k++) = lat.q.factor_raw(i, j);
      }
    }
    out(layout.kernel_offset(l)) = lat.kernel.log_variance;
    out(layout.kernel_offset(l) + 1) = lat.kernel.log_lengthscale;
    k = layout.inducing_offset(l);
    for (Eigen::Index i = 0; i < layout.inducing; ++i) {
      for (Eigen::Index j = 0; j < layout.dim; ++j) {
        out(k++) = lat.inducing.points(i, j);
      }
    }
  }
  out.tail(layout.latents) = theta.gamma_logit;
  return out;
}

inline GlobalParams from_unconstrained(const Vector &flat,
                                       const GlobalLayout &layout) {
  if (flat.size() != layout.size()) {
    throw DimensionMismatch("global vector has " + std::to_string(flat.size()) +
                            " coordinates, layout expects " +
                            std::to_string(layout.size()));
  }
  GlobalParams theta;
  theta.latents.resize(static_cast<std::size_t>(layout.latents));
  const Eigen::Index Q = layout.inducing;
  for (Eigen::Index l = 0; l < layout.latents; ++l) {
    auto &lat = theta.latents[static_cast<std::size_t>(l)];
    lat.q.mean = flat.segment(layout.latent_offset(l), Q);
    lat.q.factor_raw = Matrix::Zero(Q, Q);
    Eigen::Index k = layout.factor_offset(l);
    for (Eigen::Index i = 0; i < Q; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        lat.q.factor_raw(i, j) = flat(k++);
      }
    }
    lat.kernel.log_variance = flat(layout.kernel_offset(l));
    lat.kernel.log_lengthscale = flat(layout.kernel_offset(l) + 1);
    lat.inducing.points.resize(Q, layout.dim);
    k = layout.inducing_offset(l);
    for (Eigen::Index i = 0; i < Q; ++i) {
      for (Eigen::Index j = 0; j < layout.dim; ++j) {
        lat.inducing.points(i, j) = flat(k++);
      }
    }
  }
  theta.gamma_logit = flat.tail(layout.latents);
  return theta;
}

// Personal layout: mu_w (L), log_sigma_w (L), log_noise.

inline Vector to_unconstrained(const PersonalParams &psi) {
  const Eigen::Index L = psi.num_latents();
  if (psi.log_sigma_w.size() != L) {
    throw ShapeMismatch("personal parameters: mu_w and sigma_w lengths differ");
  }
  Vector out(2 * L + 1);
  out.head(L) = psi.mu_w;
  out.segment(L, L) = psi.log_sigma_w;
  out(2 * L) = psi.log_noise;
  return out;
}

inline PersonalParams personal_from_unconstrained(const Vector &flat,
                                                  Eigen::Index num_latents) {
  if (flat.size() != 2 * num_latents + 1) {
    throw DimensionMismatch(
        "personal vector has " + std::to_string(flat.size()) +
        " coordinates, expected " + std::to_string(2 * num_latents + 1));
  }
  return {flat.head(num_latents), flat.segment(num_latents, num_latents),
          flat(2 * num_latents)};
}

/// Weighted average of global parameters in unconstrained space.
///
/// Inputs are put into a canonical order first (by weight, then by
/// coordinates) and the mean is accumulated as offsets from the first entry,
/// so the result is exactly permutation invariant and exactly idempotent on
/// identical inputs.
inline GlobalParams
average_globals(std::span<const std::pair<GlobalParams, double>> items) {
  if (items.empty()) {
    throw ShapeMismatch("average_globals: nothing to average");
  }
  const GlobalLayout layout = GlobalLayout::of(items.front().first);
  std::vector<std::pair<Vector, double>> flat;
  flat.reserve(items.size());
  double total = 0.0;
  for (const auto &[theta, weight] : items) {
    if (!(GlobalLayout::of(theta) == layout)) {
      throw ShapeMismatch("average_globals: inputs differ in L, Q or d");
    }
    if (!(weight >= 0.0) || !std::isfinite(weight)) {
      throw ConfigError("average_globals: weights must be finite and >= 0");
    }
    flat.emplace_back(to_unconstrained(theta), weight);
    total += weight;
  }
  if (!(total > 0.0)) {
    throw ConfigError("average_globals: total weight must be positive");
  }
  std::sort(flat.begin(), flat.end(), [](const auto &a, const auto &b) {
    if (a.second != b.second) {
      return a.second < b.second;
    }
    return std::lexicographical_compare(a.first.begin(), a.first.end(),
                                        b.first.begin(), b.first.end());
  });
  const Vector &ref = flat.front().first;
  Vector acc = Vector::Zero(ref.size());
  for (const auto &[vec, weight] : flat) {
    acc += (weight / total) * (vec - ref);
  }
  return from_unconstrained(ref + acc, layout);
}

inline GlobalParams
average_globals(const std::vector<std::pair<GlobalParams, double>> &items) {
  return average_globals(
      std::span<const std::pair<GlobalParams, double>>(items));
}

} // namespace fedgp

#endif // FEDGP_PARAMS_HPP_
