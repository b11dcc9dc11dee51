#ifndef FEDGP_FEDRUN_HPP_
#define FEDGP_FEDRUN_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedgp/adam.hpp"
#include "fedgp/errors.hpp"
#include "fedgp/kernels.hpp"
#include "fedgp/objective.hpp"
#include "fedgp/params.hpp"
#include "fedgp/serialization.hpp"

namespace fedgp {

struct FedConfig {
  int rounds = 200;
  int local_steps = 25;
  double learning_rate = 0.01;
  std::optional<int> batch_size; // empty means full batch
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Optimizer settings for the global coordinates; unset means the same as
  // for the personal ones.
  std::optional<double> global_learning_rate;
  std::optional<double> global_adam_eps;
  // Rounds at the start during which kernel hyperparameters and inclusion
  // logits are held at their initial values.
  int warmup_rounds = 0;
  // Initial surrogate covariance is factor_scale^2 * C_zz.
  double initial_factor_scale = 1.0;
  bool train_inducing = false;
  bool parallel_units = false;
  // Write a checkpoint every `checkpoint_every` rounds when positive.
  int checkpoint_every = 0;
  std::string checkpoint_path;

  AdamSettings adam() const { return {learning_rate, beta1, beta2, adam_eps}; }

  AdamSettings global_adam() const {
    return {global_learning_rate.value_or(learning_rate), beta1, beta2,
            global_adam_eps.value_or(adam_eps)};
  }

  /// Settings used by the benchmark. A large epsilon on the global
  /// coordinates turns their local steps into plain gradient steps once
  /// gradients are small, so the average of the units' steps vanishes where
  /// the summed gradient does. With a per-unit normalized step it vanishes at
  /// a vote between units instead.
  static FedConfig tuned() {
    FedConfig c;
    c.rounds = 1000;
    c.local_steps = 1;
    c.learning_rate = 0.02;
    c.global_learning_rate = 1.0;
    c.global_adam_eps = 100.0;
    c.warmup_rounds = 300;
    c.initial_factor_scale = 0.1;
    return c;
  }

  void validate(bool allow_zero_rounds = false) const {
    if (rounds < (allow_zero_rounds ? 0 : 1)) {
      throw ConfigError("rounds must be >= 1");
    }
    if (local_steps < 1) {
      throw ConfigError("local_steps must be >= 1");
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("learning_rate must be finite and >= 0");
    }
    if (batch_size && *batch_size < 1) {
      throw ConfigError("batch_size must be >= 1");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0) || (global_adam_eps && !(*global_adam_eps > 0.0))) {
      throw ConfigError("Adam epsilon must be positive");
    }
    if (global_learning_rate && (!(*global_learning_rate >= 0.0) ||
                                 !std::isfinite(*global_learning_rate))) {
      throw ConfigError("global learning rate must be finite and >= 0");
    }
    if (warmup_rounds < 0) {
      throw ConfigError("warmup_rounds must be >= 0");
    }
    if (!(initial_factor_scale > 0.0) || !std::isfinite(initial_factor_scale)) {
      throw ConfigError("initial_factor_scale must be positive");
    }
    if (checkpoint_every > 0 && checkpoint_path.empty()) {
      throw ConfigError("checkpoint_every needs a checkpoint path");
    }
  }
};

struct RoundRecord {
  std::uint64_t round = 0;
  std::vector<double> unit_objectives;
  double aggregate_objective = 0.0;
  double wall_seconds = 0.0;
  int jitter_events = 0;
  int failed_units = 0;
};

struct TrainLog {
  std::vector<RoundRecord> rounds;

  std::vector<double> objective_trace() const {
    std::vector<double> out;
    out.reserve(rounds.size());
    for (const auto &r : rounds) {
      out.push_back(r.aggregate_objective);
    }
    return out;
  }

  /// One JSON object per line.
  std::string to_jsonl() const {
    std::ostringstream os;
    os.precision(17);
    for (const auto &r : rounds) {
      os << "{\"round\":" << r.round
         << ",\"aggregate_objective\":" << r.aggregate_objective
         << ",\"unit_objectives\":[";
      for (std::size_t i = 0; i < r.unit_objectives.size(); ++i) {
        os << (i ? "," : "") << r.unit_objectives[i];
      }
      os << "],\"wall_seconds\":" << r.wall_seconds
         << ",\"jitter_events\":" << r.jitter_events
         << ",\"failed_units\":" << r.failed_units << "}\n";
    }
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Initialization.

namespace detail {

inline double radical_inverse(std::uint64_t i, std::uint64_t base) {
  double inv = 1.0 / static_cast<double>(base);
  double f = inv;
  double out = 0.0;
  while (i > 0) {
    out += f * static_cast<double>(i % base);
    i /= base;
    f *= inv;
  }
  return out;
}

inline std::uint64_t nth_prime(int k) {
  static constexpr std::uint64_t primes[] = {2,  3,  5,  7,  11, 13, 17, 19,
                                             23, 29, 31, 37, 41, 43, 47, 53};
  return primes[static_cast<std::size_t>(k) % 16];
}

} // namespace detail

/// Inducing locations spanning the box [lo, hi]. One-dimensional inputs get an
/// even grid. In higher dimensions the corners lo and hi are the first and
/// last rows and the interior is filled with a Halton sequence, so the box can
/// be recovered from the points.
inline Matrix inducing_grid(const Vector &lo, const Vector &hi,
                            Eigen::Index Q) {
  const Eigen::Index d = lo.size();
  Matrix Z(Q, d);
  if (Q == 1) {
    Z.row(0) = (0.5 * (lo + hi)).transpose();
    return Z;
  }
  if (d == 1) {
    for (Eigen::Index q = 0; q < Q; ++q) {
      Z(q, 0) = lo(0) + (hi(0) - lo(0)) * static_cast<double>(q) /
                            static_cast<double>(Q - 1);
    }
    return Z;
  }
  Z.row(0) = lo.transpose();
  Z.row(Q - 1) = hi.transpose();
  for (Eigen::Index q = 1; q + 1 < Q; ++q) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const double u =
          detail::radical_inverse(static_cast<std::uint64_t>(q),
                                  detail::nth_prime(static_cast<int>(j)));
      Z(q, j) = lo(j) + (hi(j) - lo(j)) * u;
    }
  }
  return Z;
}

/// Global parameters for a given input box: every latent shares one inducing
/// grid, length-scales are log-spaced over [range/20, range/2], the surrogate
/// has mean zero and covariance factor_scale^2 * C_zz, and gamma starts at pi.
inline GlobalParams initial_globals(Vector lo, Vector hi,
                                    const PriorHypers &prior,
                                    double factor_scale = 1.0) {
  prior.validate();
  if (!(factor_scale > 0.0) || !std::isfinite(factor_scale)) {
    throw ConfigError("initial factor scale must be positive");
  }
  if (lo.size() != hi.size() || lo.size() < 1) {
    throw DimensionMismatch("initial_globals: bad input box");
  }
  for (Eigen::Index j = 0; j < lo.size(); ++j) {
    if (!(hi(j) - lo(j) > 1e-9)) {
      const double mid = 0.5 * (lo(j) + hi(j));
      lo(j) = mid - 0.5;
      hi(j) = mid + 0.5;
    }
  }
  const Eigen::Index L = prior.num_latents;
  const Eigen::Index Q = prior.num_inducing;
  const double range = (hi - lo).maxCoeff();
  const double lo_ell = std::log(range / 20.0);
  const double hi_ell = std::log(range / 2.0);

  GlobalParams theta;
  theta.latents.resize(static_cast<std::size_t>(L));
  const Matrix Z = inducing_grid(lo, hi, Q);
  for (Eigen::Index l = 0; l < L; ++l) {
    auto &lat = theta.latents[static_cast<std::size_t>(l)];
    const double frac =
        L == 1 ? 0.5 : static_cast<double>(l) / static_cast<double>(L - 1);
    lat.kernel = {0.0, lo_ell + frac * (hi_ell - lo_ell)};
    lat.inducing.points = Z;
    lat.q = LatentVariational::from_factor(
        Vector::Zero(Q), factor_scale * Matrix::Identity(Q, Q));
  }
  theta.gamma_logit = Vector::Constant(L, logit(prior.pi));
  return theta;
}

inline std::pair<Vector, Vector> input_box(const UnitDataset &data) {
  data.validate();
  return {data.inputs.colwise().minCoeff().transpose(),
          data.inputs.colwise().maxCoeff().transpose()};
}

/// A unit's contribution to pre-processing: global parameters built from its
/// own input range only. Only the extremes of the inducing grid are read back.
inline GlobalParams unit_proposal(const UnitDataset &data,
                                  const PriorHypers &prior) {
  auto [lo, hi] = input_box(data);
  return initial_globals(lo, hi, prior);
}

/// Server side of pre-processing: the union of the proposals' input boxes
/// becomes the box of the starting global parameters.
inline GlobalParams merge_proposals(std::span<const GlobalParams> proposals,
                                    const PriorHypers &prior,
                                    double factor_scale = 1.0) {
  if (proposals.empty()) {
    throw EmptyDataset("pre-processing needs at least one unit");
  }
  const Eigen::Index d = proposals.front().dim();
  Vector lo = Vector::Constant(d, std::numeric_limits<double>::infinity());
  Vector hi = -lo;
  for (const auto &p : proposals) {
    if (p.dim() != d) {
      throw InconsistentDimension("units disagree on input dimension");
    }
    for (const auto &lat : p.latents) {
      lo = lo.cwiseMin(lat.inducing.points.colwise().minCoeff().transpose());
      hi = hi.cwiseMax(lat.inducing.points.colwise().maxCoeff().transpose());
    }
  }
  return initial_globals(lo, hi, prior, factor_scale);
}

inline std::seed_seq unit_seed(std::uint64_t seed, std::uint64_t unit_index,
                               std::uint64_t stream) {
  return std::seed_seq{static_cast<std::uint32_t>(seed),
                       static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(unit_index),
                       static_cast<std::uint32_t>(stream)};
}

constexpr double kNoiseFloor = 1e-3;

/// Personal parameters computed from the unit's own data and seeded stream.
inline PersonalParams initial_personal(const UnitDataset &data,
                                       const PriorHypers &prior,
                                       std::uint64_t seed,
                                       std::uint64_t unit_index) {
  data.validate();
  const Eigen::Index L = prior.num_latents;
  auto seq = unit_seed(seed, unit_index, 1);
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 0.5);
  PersonalParams psi;
  psi.mu_w.resize(L);
  for (Eigen::Index l = 0; l < L; ++l) {
    psi.mu_w(l) = normal(rng);
  }
  psi.log_sigma_w =
      Vector::Constant(L, std::log(0.5 * std::sqrt(prior.slab_variance)));
  const double n = static_cast<double>(data.size());
  const double mean = data.outputs.mean();
  const double sd =
      n > 1 ? std::sqrt((data.outputs.array() - mean).square().sum() / (n - 1))
            : 0.0;
  psi.log_noise = std::log(std::max(sd / 2.0, kNoiseFloor));
  return psi;
}

struct Initialization {
  GlobalParams theta;
  std::vector<PersonalParams> personals;
};

inline Initialization pre_processing(std::span<const UnitDataset> datasets,
                                     const PriorHypers &prior,
                                     const FedConfig &config) {
  if (datasets.empty()) {
    throw EmptyDataset("pre-processing needs at least one unit");
  }
  std::vector<GlobalParams> proposals;
  Initialization init;
  for (std::size_t m = 0; m < datasets.size(); ++m) {
    proposals.push_back(unit_proposal(datasets[m], prior));
    init.personals.push_back(
        initial_personal(datasets[m], prior, config.seed, m));
  }
  init.theta = merge_proposals(proposals, prior, config.initial_factor_scale);
  return init;
}

// ---------------------------------------------------------------------------
// Units.

struct UnitState {
  UnitDataset dataset;
  PersonalParams personal;
  AdamState theta_optimizer;
  AdamState personal_optimizer;
  std::mt19937_64 batch_rng;
  std::uint64_t unit_index = 0;
  int rounds_done = 0;
};

inline UnitState make_unit_state(UnitDataset dataset, PersonalParams personal,
                                 const GlobalLayout &layout, std::uint64_t seed,
                                 std::uint64_t unit_index) {
  UnitState s;
  s.dataset = std::move(dataset);
  s.personal = std::move(personal);
  s.theta_optimizer = AdamState(layout.size());
  s.personal_optimizer = AdamState(2 * layout.latents + 1);
  auto seq = unit_seed(seed, unit_index, 2);
  s.batch_rng.seed(seq);
  s.unit_index = unit_index;
  return s;
}

/// Uniform sample of `size` distinct row indices, sorted.
inline std::vector<Eigen::Index> sample_batch(std::mt19937_64 &rng,
                                              Eigen::Index n, int size) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  const auto k = static_cast<std::size_t>(std::min<Eigen::Index>(size, n));
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct LocalResult {
  GlobalParams theta;
  double weight = 0.0;
  double objective = 0.0; // V_m at the broadcast theta, before the update
  int jitter_events = 0;
  bool failed = false;
};

/// Marks the kernel hyperparameters and inclusion logits.
inline Mask hyperparameter_mask(const GlobalLayout &layout) {
  Mask hold = Mask::Constant(layout.size(), false);
  for (Eigen::Index l = 0; l < layout.latents; ++l) {
    hold.segment(layout.kernel_offset(l), 2) = true;
    hold(layout.gamma_offset() + l) = true;
  }
  return hold;
}

/// `local_steps` Adam ascent steps on V_m over both theta and psi_m. On a
/// numerical failure the unit keeps its previous state and reports the
/// broadcast theta with weight zero.
inline LocalResult local_update(const GlobalParams &broadcast, UnitState &state,
                                const FedConfig &config,
                                const PriorHypers &prior, double total_count) {
  const UnitDataset &data = state.dataset;
  const double r_m = static_cast<double>(data.size()) / total_count;
  const GlobalLayout layout = GlobalLayout::of(broadcast);
  const AdamSettings adam = config.adam();
  const AdamSettings global_adam = config.global_adam();
  const bool warming_up = state.rounds_done < config.warmup_rounds;

  Vector theta = to_unconstrained(broadcast);
  Vector psi = to_unconstrained(state.personal);
  AdamState theta_opt = state.theta_optimizer;
  AdamState psi_opt = state.personal_optimizer;
  std::mt19937_64 rng = state.batch_rng;

  LocalResult out;
  const bool minibatch = config.batch_size && *config.batch_size < data.size();
  try {
    for (int step = 0; step < config.local_steps; ++step) {
      std::vector<Eigen::Index> rows;
      std::optional<BatchIndices> batch;
      if (minibatch) {
        rows = sample_batch(rng, data.size(), *config.batch_size);
        batch = BatchIndices(rows);
      }
      const GlobalParams current = from_unconstrained(theta, layout);
      const PersonalParams current_psi =
          personal_from_unconstrained(psi, layout.latents);
      UnitGradient g = unit_gradient(data, current, current_psi, r_m, prior,
                                     batch, {config.train_inducing});
      if (!g.global.allFinite() || !g.personal.allFinite() ||
          !std::isfinite(g.value.total)) {
        throw NonFiniteGradient("unit '" + data.unit_id +
                                "': non-finite gradient");
      }
      out.jitter_events += g.jitter_escalations;
      if (step == 0) {
        out.objective = g.value.total;
      }
      if (warming_up) {
        theta_opt.ascend(theta, g.global, global_adam,
                         hyperparameter_mask(layout));
      } else {
        theta_opt.ascend(theta, g.global, global_adam);
      }
      psi_opt.ascend(psi, g.personal, adam);
    }
    out.theta = from_unconstrained(theta, layout);
    const PersonalParams new_psi =
        personal_from_unconstrained(psi, layout.latents);
    out.weight = static_cast<double>(data.size());
    state.personal = new_psi;
    state.theta_optimizer = std::move(theta_opt);
    state.personal_optimizer = std::move(psi_opt);
    state.batch_rng = rng;
    ++state.rounds_done;
  } catch (const NumericalError &) {
    out = LocalResult{};
    out.theta = broadcast;
    out.weight = 0.0;
    out.failed = true;
    out.objective = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

/// Weighted average of the positive-weight uplinks.
inline GlobalParams central_update(std::span<const RoundMessage> messages) {
  std::vector<std::pair<GlobalParams, double>> items;
  for (const auto &msg : messages) {
    if (msg.weight > 0.0) {
      items.emplace_back(deserialize_global(msg.payload), msg.weight);
    }
  }
  if (items.empty()) {
    throw AllUnitsFailed("no unit reported a positive weight this round");
  }
  return average_globals(items);
}

struct FederatedResult {
  GlobalParams theta;
  std::vector<PersonalParams> personals;
  TrainLog log;
};

inline void maybe_checkpoint(const FedConfig &config, const PriorHypers &prior,
                             std::uint64_t round, const GlobalParams &theta) {
  if (config.checkpoint_every > 0 &&
      round % static_cast<std::uint64_t>(config.checkpoint_every) == 0) {
    write_bytes(config.checkpoint_path,
                serialize_checkpoint({round, prior, theta}));
  }
}

/// Algorithm loop with every unit in this process. Units only see the
/// broadcast bytes and the server only sees uplink messages.
inline FederatedResult run_in_process(std::span<const UnitDataset> datasets,
                                      const PriorHypers &prior,
                                      const FedConfig &config) {
  prior.validate();
  config.validate();
  for (const auto &d : datasets) {
    d.validate();
  }
  Initialization init = pre_processing(datasets, prior, config);
  const GlobalLayout layout = GlobalLayout::of(init.theta);

  std::vector<UnitState> units;
  double total = 0.0;
  for (std::size_t m = 0; m < datasets.size(); ++m) {
    units.push_back(make_unit_state(datasets[m], init.personals[m], layout,
                                    config.seed, m));
    total += static_cast<double>(datasets[m].size());
  }

  GlobalParams theta = std::move(init.theta);
  TrainLog log;
  for (int h = 1; h <= config.rounds; ++h) {
    const auto start = std::chrono::steady_clock::now();
    const auto round = static_cast<std::uint64_t>(h);
    const Bytes downlink = serialize_global(theta);

    std::vector<LocalResult> results(units.size());
    auto work = [&](std::size_t m) {
      const GlobalParams received = deserialize_global(downlink);
      results[m] = local_update(received, units[m], config, prior, total);
    };
    if (config.parallel_units && units.size() > 1) {
      std::vector<std::future<void>> jobs;
      for (std::size_t m = 0; m < units.size(); ++m) {
        jobs.push_back(std::async(std::launch::async, work, m));
      }
      for (auto &j : jobs) {
        j.get();
      }
    } else {
      for (std::size_t m = 0; m < units.size(); ++m) {
        work(m);
      }
    }

    std::vector<RoundMessage> uplinks;
    RoundRecord rec;
    rec.round = round;
    for (const auto &r : results) {
      uplinks.push_back(make_round_message(round, r.theta, r.weight));
      rec.unit_objectives.push_back(r.objective);
      rec.jitter_events += r.jitter_events;
      rec.failed_units += r.failed ? 1 : 0;
      if (!r.failed) {
        rec.aggregate_objective += r.objective;
      }
    }
    theta = central_update(uplinks);
    maybe_checkpoint(config, prior, round, theta);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    log.rounds.push_back(std::move(rec));
  }

  FederatedResult out;
  out.theta = std::move(theta);
  for (auto &u : units) {
    out.personals.push_back(std::move(u.personal));
  }
  out.log = std::move(log);
  return out;
}

} // namespace fedgp

#endif // FEDGP_FEDRUN_HPP_
