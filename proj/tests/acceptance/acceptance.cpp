// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// With arguments, only the listed criterion numbers run.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "fedgp/fedgp.hpp"
#include "support/oracles.hpp"

namespace {

using namespace fedgp;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char *f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// Criteria 1 to 3 share one benchmark run.

struct BenchRun {
  std::vector<MetricsRecord> ss, lmc, igp, fresh;
  double seconds = 0.0;
};

const BenchRun &bench() {
  static const BenchRun run = [] {
    BenchRun b;
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig cfg;
    std::vector<TrainedRun> ss_runs, lmc_runs;
    cfg.model = ModelKind::fedlmc_ss;
    b.ss = run_experiment(cfg, &ss_runs);
    cfg.model = ModelKind::fedlmc;
    b.lmc = run_experiment(cfg, &lmc_runs);
    cfg.model = ModelKind::igp;
    b.igp = run_experiment(cfg);
    b.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    b.fresh = run_new_unit_experiment(cfg, ss_runs, lmc_runs);
    return b;
  }();
  return run;
}

double mean_mse(const std::vector<MetricsRecord> &recs) {
  double total = 0.0;
  int n = 0;
  for (const auto &r : recs) {
    if (!r.failed) {
      total += r.mean_mse;
      ++n;
    }
  }
  return n ? total / n : std::numeric_limits<double>::infinity();
}

Outcome criterion1() {
  const auto &b = bench();
  const double ss = mean_mse(b.ss), lmc = mean_mse(b.lmc),
               igp = mean_mse(b.igp);
  const bool a = ss <= 0.20;
  const bool c = igp >= 1.5 * ss;
  const bool d = ss <= lmc;
  const bool t = b.seconds <= 15 * 60;
  return {a && c && d && t,
          fmt("fedlmc_ss %.4f (<= 0.20: %s), igp %.4f (>= 1.5x: %s), fedlmc "
              "%.4f (ss <= fedlmc: %s), %.0f s (<= 900 s: %s)",
              ss, a ? "yes" : "no", igp, c ? "yes" : "no", lmc,
              d ? "yes" : "no", b.seconds, t ? "yes" : "no")};
}

Outcome criterion2() {
  const auto &b = bench();
  int ss_ok = 0, lmc_ok = 0;
  std::ostringstream counts;
  for (const auto &r : b.ss) {
    ss_ok += !r.failed && r.selected >= 5 && r.selected <= 9 ? 1 : 0;
    counts << r.selected << ' ';
  }
  for (const auto &r : b.lmc) {
    lmc_ok += !r.failed && r.selected == 10 ? 1 : 0;
  }
  return {ss_ok >= 7 && lmc_ok == 10,
          fmt("fedlmc_ss |S| in [5,9] in %d/10 (%s), fedlmc |S| = 10 in "
              "%d/10",
              ss_ok, counts.str().c_str(), lmc_ok)};
}

Outcome criterion3() {
  const auto &b = bench();
  std::map<int, double> ss, sel;
  double ss_time = 0.0, sel_time = 0.0;
  int ss_n = 0, sel_n = 0;
  for (const auto &r : b.fresh) {
    if (r.failed) {
      continue;
    }
    if (r.regime == kRegimeSsSelected) {
      ss[r.run] = r.mean_mse;
      ss_time += r.round_seconds;
      ++ss_n;
    } else if (r.regime == kRegimeSelected) {
      sel[r.run] = r.mean_mse;
      sel_time += r.round_seconds;
      ++sel_n;
    }
  }
  int wins = 0;
  for (const auto &[run, e] : ss) {
    if (sel.contains(run) && e < sel.at(run)) {
      ++wins;
    }
  }
  const double a = ss_n ? ss_time / ss_n : 0.0;
  const double c = sel_n ? sel_time / sel_n : 0.0;
  const double ratio = std::max(a, c) / std::max(std::min(a, c), 1e-300);
  const bool mse_ok = wins >= 7;
  const bool time_ok = ss_n > 0 && sel_n > 0 && ratio <= 1.25;
  return {mse_ok && time_ok,
          fmt("ss-selected beats fedlmc-selected in %d/10 (need 7); "
              "per-iteration %.3g s vs %.3g s, ratio %.3f (<= 1.25: %s)",
              wins, a, c, ratio, time_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------

Outcome criterion4() {
  std::mt19937_64 rng(4004);
  int bad = 0;
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    auto shape = oracle::random_shape(rng, 8, 3, 4);
    shape.prior =
        t % 4 == 3 ? CoefficientPrior::gaussian : CoefficientPrior::spike_slab;
    const auto in = oracle::random_instance(rng, shape);
    const auto check = [&](double closed, oracle::McEstimate mc) {
      const double z = std::abs(closed - mc.mean) / mc.se;
      worst = std::max(worst, z);
      bad += z <= 3.0 ? 0 : 1;
    };
    const std::uint64_t seed = 10000 + 10 * t;
    check(expected_loglik(in.data, in.theta, in.psi, in.prior.prior),
          oracle::mc_expected_loglik(in, 100000, seed));
    check(kl_spike_slab(in.psi, in.theta.gamma(), in.prior),
          oracle::mc_kl_spike_slab(in, 100000, seed + 1));
    for (std::size_t l = 0; l < in.theta.latents.size(); ++l) {
      const auto &lat = in.theta.latents[l];
      check(kl_latent(lat.q), oracle::mc_kl_latent(lat, 100000, seed + 2 + l));
    }
  }
  return {bad == 0,
          fmt("%d comparisons outside 3 SE over 20 instances, largest "
              "deviation %.2f SE",
              bad, worst)};
}

Outcome criterion5() {
  std::mt19937_64 rng(5005);
  double worst = 0.0;
  long coords = 0;
  for (int t = 0; t < 20; ++t) {
    auto shape = oracle::random_shape(rng, 10, 3, 5);
    shape.d = 1 + t % 2;
    shape.prior =
        t % 3 == 2 ? CoefficientPrior::gaussian : CoefficientPrior::spike_slab;
    const auto in = oracle::random_instance(rng, shape);
    const auto rep = oracle::fd_check(in, 0.25 + 0.05 * (t % 10));
    worst = std::max(worst, rep.max_rel_error);
    coords += rep.coordinates;
  }
  return {worst < 1e-4,
          fmt("max relative error %.2e over %ld coordinates", worst, coords)};
}

Outcome criterion6() {
  // (a) One unit against the plain local ascent.
  double diff_a = 0.0;
  for (int t = 0; t < 5; ++t) {
    const auto units = oracle::small_federation(1, 20 + t, 600 + t);
    const PriorHypers prior = oracle::small_prior();
    FedConfig c;
    c.rounds = 5;
    c.local_steps = 3;
    c.seed = t;
    const auto fed = run_in_process(units, prior, c);
    Initialization init = pre_processing(units, prior, c);
    UnitState s = make_unit_state(units[0], init.personals[0],
                                  GlobalLayout::of(init.theta), c.seed, 0);
    GlobalParams theta = init.theta;
    for (int h = 0; h < c.rounds; ++h) {
      theta = local_update(theta, s, c, prior, double(units[0].size())).theta;
    }
    diff_a =
        std::max(diff_a, (to_unconstrained(fed.theta) - to_unconstrained(theta))
                             .cwiseAbs()
                             .maxCoeff());
  }

  // (b) Socket against in-process, M = 3 and H = 5.
  const auto units = oracle::small_federation(3, 20, 610);
  const PriorHypers prior = oracle::small_prior();
  FedConfig c;
  c.rounds = 5;
  c.local_steps = 3;
  c.seed = 11;
  const auto local = run_in_process(units, prior, c);
  Transport socket;
  socket.kind = Transport::Kind::socket;
  const auto remote = run_federated(units, prior, c, socket);
  const auto ta = local.log.objective_trace();
  const auto tb = remote.log.objective_trace();
  double diff_b = ta.size() == tb.size() && ta.size() == 5
                      ? 0.0
                      : std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < std::min(ta.size(), tb.size()); ++i) {
    diff_b = std::max(diff_b, std::abs(ta[i] - tb[i]));
  }

  // (c) Bitwise reproducibility.
  const auto again = run_in_process(units, prior, c);
  const bool same =
      serialize_global(again.theta) == serialize_global(local.theta);

  const bool ok = diff_a <= 1e-12 && diff_b <= 1e-12 && same;
  return {ok, fmt("(a) max diff %.1e, (b) trace diff %.1e, (c) %s", diff_a,
                  diff_b, same ? "bitwise equal" : "differs")};
}

std::string slurp(const std::string &path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string between(const std::string &text, const std::string &begin,
                    const std::string &end) {
  const auto a = text.find(begin);
  const auto b = text.find(end, a);
  return a == std::string::npos || b == std::string::npos
             ? std::string()
             : text.substr(a, b - a);
}

Outcome criterion7() {
  const std::string dir = std::string(FEDGP_SOURCE_DIR) + "/include/fedgp/";
  const std::string transport = slurp(dir + "transport.hpp");
  const std::string fedrun = slurp(dir + "fedrun.hpp");
  const std::string params = slurp(dir + "params.hpp");
  const std::string serial = slurp(dir + "serialization.hpp");
  const std::vector<std::pair<std::string, std::string>> scopes{
      {"server", between(transport, "class Server {", "inline Server serve(")},
      {"central_update", between(fedrun, "inline GlobalParams central_update(",
                                 "struct FederatedResult")},
      {"average_globals",
       between(params, "average_globals(std::span", "} // namespace fedgp")},
      {"frame encoding",
       between(transport, "inline Bytes encode_frame(", "class Socket")},
      {"round message",
       between(serial, "inline RoundMessage make_round_message(", "\n}\n")}};
  std::vector<std::string> leaks;
  for (const auto &[name, code] : scopes) {
    if (code.empty()) {
      leaks.push_back(name + " not found");
      continue;
    }
    for (const char *token :
         {"UnitDataset", "PersonalParams", "outputs", "mu_w", "log_noise"}) {
      if (code.find(token) != std::string::npos) {
        leaks.push_back(name + " mentions " + token);
      }
    }
  }
  // Frames refuse payloads that are not global parameters.
  RoundMessage forged;
  forged.weight = 1.0;
  std::mt19937_64 rng(7007);
  const auto in = oracle::random_instance(rng, {4, 2, 3});
  forged.payload = serialize_global(in.theta);
  forged.payload.resize(forged.payload.size() - 1);
  try {
    (void)encode_frame(FrameKind::uplink, forged);
    leaks.push_back("encoder accepted a non-global payload");
  } catch (const Error &) {
  }
  std::string detail = leaks.empty() ? "server-side scopes and frame grammar "
                                       "carry global parameters only"
                                     : leaks.front();
  return {leaks.empty(), detail};
}

Outcome criterion8() {
  std::mt19937_64 rng(8008);
  int violations = 0, instances = 0;
  for (int t = 0; t < 1000; ++t) {
    auto shape = oracle::random_shape(rng, 8, 3, 6);
    shape.d = 1 + t % 3;
    const auto in = oracle::random_instance(rng, shape);
    ++instances;
    try {
      bool ok = kl_spike_slab(in.psi, in.theta.gamma(), in.prior) >= 0.0;
      for (const auto &lat : in.theta.latents) {
        ok = ok && kl_latent(lat.q) >= 0.0;
        const auto p = projection(in.data.inputs, lat.inducing, lat.kernel);
        ok = ok && (p.residual_diag.array() >= 0.0).all();
        // Nearly coincident inducing points must still factor.
        InducingSet close = lat.inducing;
        close.points.row(0) = close.points.row(close.size() - 1).array() + 1e-9;
        ok = ok && inducing_factor(close, lat.kernel).lower.allFinite();
      }
      const auto pred =
          mc_predict(in.theta, in.psi, in.data.inputs, 20, t, in.prior);
      ok =
          ok && (pred.variance.array() >= std::exp(2 * in.psi.log_noise)).all();
      ok = ok &&
           std::isfinite(
               unit_objective(in.data, in.theta, in.psi, 1.0, in.prior).total);
      violations += ok ? 0 : 1;
    } catch (const std::exception &) {
      ++violations;
    }
  }
  return {violations == 0,
          fmt("%d violations over %d instances", violations, instances)};
}

} // namespace

int main(int argc, char **argv) {
  const std::vector<std::pair<const char *, std::function<Outcome()>>> all{
      {"synthetic MSE trend", criterion1},
      {"latent-count recovery", criterion2},
      {"new-unit trend", criterion3},
      {"Monte Carlo oracle equivalence", criterion4},
      {"gradient correctness", criterion5},
      {"federation invariants", criterion6},
      {"structural privacy", criterion7},
      {"KL nonnegativity and PSD robustness", criterion8}};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    only.insert(std::atoi(argv[i]));
  }
  int failed = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(n)) {
      continue;
    }
    Outcome o;
    try {
      o = all[i].second();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " ("
              << all[i].first << "): " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
