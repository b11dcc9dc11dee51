#ifndef FEDGP_BENCH_HPP_
#define FEDGP_BENCH_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fedgp/data.hpp"
#include "fedgp/errors.hpp"
#include "fedgp/federation.hpp"
#include "fedgp/fedrun.hpp"
#include "fedgp/params.hpp"
#include "fedgp/predict.hpp"

namespace fedgp {

enum class ModelKind { fedlmc_ss, fedlmc, igp };

inline std::string_view model_name(ModelKind k) {
  switch (k) {
  case ModelKind::fedlmc_ss:
    return "fedlmc_ss";
  case ModelKind::fedlmc:
    return "fedlmc";
  case ModelKind::igp:
    return "igp";
  }
  return "unknown";
}

inline ModelKind parse_model(std::string_view s) {
  for (ModelKind k :
       {ModelKind::fedlmc_ss, ModelKind::fedlmc, ModelKind::igp}) {
    if (s == model_name(k)) {
      return k;
    }
  }
  throw ConfigError("unknown model '" + std::string(s) + "'");
}

/// Prior hyperparameters with the coefficient prior that matches `model`.
inline PriorHypers prior_for(ModelKind model, PriorHypers prior) {
  prior.prior = model == ModelKind::fedlmc ? CoefficientPrior::gaussian
                                           : CoefficientPrior::spike_slab;
  return prior;
}

struct ExperimentConfig {
  SyntheticSpec scenario;
  // When both are set, data comes from these files instead of the generator
  // and every repeat reuses it with a different training seed.
  std::optional<std::string> train_csv;
  std::optional<std::string> held_out_csv;
  ModelKind model = ModelKind::fedlmc_ss;
  PriorHypers prior;
  FedConfig fed = FedConfig::tuned();
  IgpConfig igp;
  int repeats = 10;
  int mc_samples = 2000;
  std::uint64_t seed = 0;
  Transport transport;
  std::string output_dir = "out";

  void validate() const {
    if (repeats < 1) {
      throw ConfigError("repeats must be >= 1");
    }
    if (mc_samples < 1) {
      throw ConfigError("mc_samples must be >= 1");
    }
    if (train_csv.has_value() != held_out_csv.has_value()) {
      throw ConfigError("train and held-out CSV paths go together");
    }
    if (!train_csv) {
      scenario.validate();
    }
    if (model != ModelKind::igp) {
      prior.validate();
      fed.validate();
    }
  }

  std::uint64_t repeat_seed(int run) const {
    return seed + static_cast<std::uint64_t>(run);
  }
};

struct UnitPrediction {
  std::string unit_id;
  Matrix inputs;
  PredictiveMoments moments;
  Vector truth;
};

struct MetricsRecord {
  int run = 0;
  std::string model;
  // Empty for the main experiment; the regime name for new-unit records.
  std::string regime;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  std::vector<std::pair<std::string, double>> unit_mse;
  double mean_mse = 0.0;
  int selected = -1; // -1 where selection does not apply
  double train_seconds = 0.0;
  double round_seconds = 0.0; // per round, or per iteration for new units
  std::vector<UnitPrediction> predictions;
};

/// Trained parameters of one repeat, kept for the new-unit experiment.
struct TrainedRun {
  int run = 0;
  std::uint64_t seed = 0;
  PriorHypers prior;
  GlobalParams theta;
  std::vector<PersonalParams> personals;
  SelectionResult selection;
};

inline double mse(const Vector &a, const Vector &b) {
  return a.size() == 0 ? 0.0
                       : (a - b).squaredNorm() / static_cast<double>(a.size());
}

namespace detail {

inline Scenario load_scenario(const ExperimentConfig &cfg, int run) {
  if (cfg.train_csv) {
    Scenario s;
    s.train = load_csv(*cfg.train_csv);
    s.held_out = units_as_held_out(load_csv(*cfg.held_out_csv));
    return s;
  }
  SyntheticSpec spec = cfg.scenario;
  spec.seed = cfg.repeat_seed(run);
  return gen_scenario(spec);
}

inline std::size_t unit_index(const Scenario &s, const std::string &id) {
  for (std::size_t m = 0; m < s.train.size(); ++m) {
    if (s.train[m].unit_id == id) {
      return m;
    }
  }
  throw ConfigError("held-out unit '" + id + "' has no training data");
}

inline void finish_record(MetricsRecord &rec) {
  double total = 0.0;
  for (const auto &p : rec.predictions) {
    const double e = mse(p.moments.mean, p.truth);
    rec.unit_mse.emplace_back(p.unit_id, e);
    total += e;
  }
  rec.mean_mse = rec.predictions.empty()
                     ? 0.0
                     : total / static_cast<double>(rec.predictions.size());
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

} // namespace detail

/// Trains `cfg.model` once per repeat on a fresh scenario and scores held-out
/// predictions against the noiseless truth. A repeat that fails is recorded
/// with `failed` set. Trained parameters are appended to `artifacts` when
/// given.
inline std::vector<MetricsRecord>
run_experiment(const ExperimentConfig &cfg,
               std::vector<TrainedRun> *artifacts = nullptr) {
  cfg.validate();
  std::vector<MetricsRecord> records;
  for (int run = 0; run < cfg.repeats; ++run) {
    MetricsRecord rec;
    rec.run = run;
    rec.model = model_name(cfg.model);
    rec.seed = cfg.repeat_seed(run);
    try {
      const Scenario sc = detail::load_scenario(cfg, run);
      const auto t0 = std::chrono::steady_clock::now();
      if (cfg.model == ModelKind::igp) {
        for (const auto &h : sc.held_out) {
          const auto &unit = sc.train[detail::unit_index(sc, h.unit_id)];
          rec.predictions.push_back({h.unit_id, h.inputs,
                                     igp_fit_predict(unit, h.inputs, cfg.igp),
                                     h.truth});
        }
        rec.train_seconds = detail::seconds_since(t0);
      } else {
        const PriorHypers prior = prior_for(cfg.model, cfg.prior);
        FedConfig fed = cfg.fed;
        fed.seed = rec.seed;
        FederatedResult res =
            run_federated(sc.train, prior, fed, cfg.transport);
        rec.train_seconds = detail::seconds_since(t0);
        rec.round_seconds = rec.train_seconds / std::max(fed.rounds, 1);
        SelectionResult sel = select_latents(res.theta, res.personals, prior);
        rec.selected = static_cast<int>(sel.selected.size());
        for (const auto &h : sc.held_out) {
          const std::size_t m = detail::unit_index(sc, h.unit_id);
          rec.predictions.push_back(
              {h.unit_id, h.inputs,
               mc_predict(res.theta, res.personals[m], h.inputs, cfg.mc_samples,
                          rec.seed, prior),
               h.truth});
        }
        if (artifacts) {
          artifacts->push_back({run, rec.seed, prior, std::move(res.theta),
                                std::move(res.personals), std::move(sel)});
        }
      }
      detail::finish_record(rec);
    } catch (const NumericalError &e) {
      rec.failed = true;
      rec.error = e.what();
      rec.predictions.clear();
      rec.unit_mse.clear();
      std::cerr << "warning: " << rec.model << " run " << run
                << " failed and is excluded: " << e.what() << '\n';
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline constexpr std::string_view kRegimeSsSelected = "fedlmc_ss-selected";
inline constexpr std::string_view kRegimeAll = "fedlmc-all";
inline constexpr std::string_view kRegimeSelected = "fedlmc-selected";

struct NewUnitExperiment {
  int num_units = 10;
  double mask_length = 2.0;
  NewUnitConfig fit;
};

/// Joins freshly generated units to trained fedlmc_ss and fedlmc runs with
/// matching run indices. Three latent sets per run: the fedlmc_ss selection,
/// every fedlmc latent, and the fedlmc latents with the largest coefficient
/// energy, as many as fedlmc_ss selected.
inline std::vector<MetricsRecord> run_new_unit_experiment(
    const ExperimentConfig &cfg, std::span<const TrainedRun> ss_runs,
    std::span<const TrainedRun> lmc_runs, const NewUnitExperiment &exp = {}) {
  std::vector<MetricsRecord> records;
  if (exp.num_units == 0) {
    return records;
  }
  if (exp.num_units < 0) {
    throw ConfigError("number of new units must be >= 0");
  }
  for (const auto &ss : ss_runs) {
    const auto lmc =
        std::find_if(lmc_runs.begin(), lmc_runs.end(),
                     [&](const TrainedRun &r) { return r.run == ss.run; });
    if (lmc == lmc_runs.end()) {
      continue;
    }
    SyntheticSpec spec = cfg.scenario;
    spec.num_units = exp.num_units;
    spec.id_prefix = "new";
    spec.seed = ss.seed ^ 0x9e3779b97f4a7c15ULL;
    spec.missing.clear();
    for (int m = 0; m < exp.num_units; ++m) {
      spec.missing.push_back({m, exp.mask_length});
    }
    const Scenario sc = gen_scenario(spec);

    const std::vector<int> all = [&] {
      std::vector<int> v(static_cast<std::size_t>(lmc->theta.num_latents()));
      std::iota(v.begin(), v.end(), 0);
      return v;
    }();
    const std::vector<int> top = top_latents_by_energy(
        lmc->selection.coeff_energy, ss.selection.selected.size());
    const struct {
      std::string_view name;
      const TrainedRun *trained;
      const std::vector<int> *latents;
    } regimes[] = {{kRegimeSsSelected, &ss, &ss.selection.selected},
                   {kRegimeAll, &*lmc, &all},
                   {kRegimeSelected, &*lmc, &top}};

    for (const auto &regime : regimes) {
      MetricsRecord rec;
      rec.run = ss.run;
      rec.model = regime.trained == &ss ? "fedlmc_ss" : "fedlmc";
      rec.regime = regime.name;
      rec.seed = spec.seed;
      rec.selected = static_cast<int>(regime.latents->size());
      try {
        double seconds = 0.0;
        int iterations = 0;
        for (std::size_t m = 0; m < sc.train.size(); ++m) {
          const NewUnitFit fit = new_unit_fit(
              regime.trained->theta, *regime.latents, sc.train[m], exp.fit);
          seconds += fit.seconds;
          iterations += fit.iterations;
          const HeldOut &h = sc.held_out[m];
          rec.predictions.push_back(
              {h.unit_id, h.inputs,
               new_unit_predict(regime.trained->theta, fit, h.inputs),
               h.truth});
        }
        rec.train_seconds = seconds;
        rec.round_seconds = iterations > 0 ? seconds / iterations : 0.0;
        detail::finish_record(rec);
      } catch (const Error &e) {
        rec.failed = true;
        rec.error = e.what();
        rec.predictions.clear();
        std::cerr << "warning: new-unit regime " << rec.regime << " run "
                  << rec.run << " failed and is excluded: " << e.what() << '\n';
      }
      records.push_back(std::move(rec));
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Reports.

inline nlohmann::json record_to_json(const MetricsRecord &r) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto &[id, e] : r.unit_mse) {
    units.push_back({{"unit_id", id}, {"mse", e}});
  }
  nlohmann::json j = {{"run", r.run},
                      {"model", r.model},
                      {"seed", r.seed},
                      {"failed", r.failed},
                      {"unit_mse", units},
                      {"mean_mse", r.mean_mse},
                      {"selected", r.selected},
                      {"train_seconds", r.train_seconds},
                      {"round_seconds", r.round_seconds}};
  if (!r.regime.empty()) {
    j["regime"] = r.regime;
  }
  if (r.failed) {
    j["error"] = r.error;
  }
  return j;
}

struct Summary {
  std::size_t runs = 0;
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sample standard deviation.
inline Summary summarize(const std::vector<double> &v) {
  Summary s;
  s.runs = v.size();
  if (v.empty()) {
    return s;
  }
  for (double x : v) {
    s.mean += x;
  }
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) {
      ss += (x - s.mean) * (x - s.mean);
    }
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

namespace detail {

inline std::string pm(const Summary &s, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << s.mean << " (+-" << s.std
     << ")";
  return os.str();
}

inline void write_text(const std::filesystem::path &path,
                       const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text) || !out.flush()) {
    throw IoError("cannot write '" + path.string() + "'");
  }
}

} // namespace detail

/// Human-readable tables. Wall-clock times are left out so equal records give
/// equal text.
inline std::string summary_text(const std::vector<MetricsRecord> &records) {
  std::ostringstream os;
  std::vector<std::string> groups;
  for (const auto &r : records) {
    const std::string key = r.regime.empty() ? r.model : r.regime;
    if (std::find(groups.begin(), groups.end(), key) == groups.end()) {
      groups.push_back(key);
    }
  }
  const auto row = [&](const std::string &a, const std::string &b,
                       const std::string &c, const std::string &d) {
    os << std::left << std::setw(22) << a << std::setw(28) << b << std::setw(22)
       << c << d << '\n';
  };
  row("model", "mean MSE", "# latents", "runs");
  for (const auto &g : groups) {
    std::vector<double> mses, counts;
    std::size_t failed = 0;
    for (const auto &r : records) {
      if ((r.regime.empty() ? r.model : r.regime) != g) {
        continue;
      }
      if (r.failed) {
        ++failed;
        continue;
      }
      mses.push_back(r.mean_mse);
      if (r.selected >= 0) {
        counts.push_back(r.selected);
      }
    }
    std::string runs = std::to_string(mses.size());
    if (failed > 0) {
      runs += " (" + std::to_string(failed) + " excluded)";
    }
    row(g, mses.empty() ? "-" : detail::pm(summarize(mses), 4),
        counts.empty() ? "-" : detail::pm(summarize(counts), 1), runs);
  }
  const bool main_table =
      std::any_of(records.begin(), records.end(),
                  [](const MetricsRecord &r) { return r.regime.empty(); });
  if (main_table || records.empty()) {
    row("lmc", "not reproduced", "-", "-");
    row("lmc_ss", "not reproduced", "-", "-");
  }
  return os.str();
}

/// Prediction file name for one record and unit.
inline std::string prediction_file(const MetricsRecord &r,
                                   const std::string &unit_id) {
  return (r.regime.empty() ? r.model : r.regime) + "_run" +
         std::to_string(r.run) + "_" + unit_id + ".csv";
}

/// Writes metrics.jsonl, summary.txt and predictions/<file>.csv with columns
/// x1..xd, mean, variance, y_true.
inline void emit_report(const std::vector<MetricsRecord> &records,
                        const std::string &output_dir) {
  namespace fs = std::filesystem;
  const fs::path base(output_dir);
  std::error_code ec;
  fs::create_directories(base / "predictions", ec);
  if (ec) {
    throw IoError("cannot create '" + output_dir + "': " + ec.message());
  }
  std::ostringstream metrics;
  for (const auto &r : records) {
    metrics << record_to_json(r).dump() << '\n';
  }
  detail::write_text(base / "metrics.jsonl", metrics.str());
  detail::write_text(base / "summary.txt", summary_text(records));
  for (const auto &r : records) {
    for (const auto &p : r.predictions) {
      std::ostringstream os;
      for (Eigen::Index j = 0; j < p.inputs.cols(); ++j) {
        os << 'x' << j + 1 << ',';
      }
      os << "mean,variance,y_true\n";
      for (Eigen::Index i = 0; i < p.inputs.rows(); ++i) {
        for (Eigen::Index j = 0; j < p.inputs.cols(); ++j) {
          os << format_double(p.inputs(i, j)) << ',';
        }
        os << format_double(p.moments.mean(i)) << ','
           << format_double(p.moments.variance(i)) << ','
           << format_double(p.truth(i)) << '\n';
      }
      detail::write_text(base / "predictions" / prediction_file(r, p.unit_id),
                         os.str());
    }
  }
}

} // namespace fedgp

#endif // FEDGP_BENCH_HPP_
