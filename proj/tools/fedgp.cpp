// Command-line front end: data generation, training, prediction, new-unit
// learning, benchmarks and the two sides of the socket protocol.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedgp/fedgp.hpp"

namespace fs = std::filesystem;
using fedgp::Matrix;
using fedgp::Vector;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::string transport = "inproc";
  std::string bind = "127.0.0.1:0";
};

void add_common(CLI::App *app, Common &c) {
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app->add_option("--output-dir", c.output_dir, "Directory for outputs")
      ->capture_default_str();
  app->add_option("--transport", c.transport, "Federation transport")
      ->check(CLI::IsMember({"inproc", "socket"}))
      ->capture_default_str();
  app->add_option("--bind", c.bind,
                  "Loopback address for --transport socket (port 0 = any)")
      ->capture_default_str();
}

fedgp::Transport make_transport(const Common &c) {
  return c.transport == "socket" ? fedgp::Transport::socket(c.bind)
                                 : fedgp::Transport::in_proc();
}

void add_prior(CLI::App *app, fedgp::PriorHypers &p) {
  app->add_option("--latents", p.num_latents, "Number of latent functions L")
      ->capture_default_str();
  app->add_option("--inducing", p.num_inducing, "Inducing points per latent")
      ->capture_default_str();
  app->add_option("--pi", p.pi, "Prior inclusion probability")
      ->capture_default_str();
  app->add_option("--slab-variance", p.slab_variance, "Slab variance")
      ->capture_default_str();
}

struct FedOptions {
  fedgp::FedConfig config = fedgp::FedConfig::tuned();
  std::optional<int> batch;
};

void add_fed(CLI::App *app, FedOptions &o) {
  auto &c = o.config;
  app->add_option("--rounds", c.rounds, "Communication rounds H")
      ->capture_default_str();
  app->add_option("--local-steps", c.local_steps, "Local Adam steps per round")
      ->capture_default_str();
  app->add_option("--learning-rate", c.learning_rate,
                  "Adam step size for personal parameters")
      ->capture_default_str();
  app->add_option("--global-learning-rate", c.global_learning_rate,
                  "Adam step size for global parameters");
  app->add_option("--global-adam-eps", c.global_adam_eps,
                  "Adam epsilon for global parameters");
  app->add_option("--warmup-rounds", c.warmup_rounds,
                  "Rounds with kernel and inclusion parameters held")
      ->capture_default_str();
  app->add_option("--initial-factor-scale", c.initial_factor_scale,
                  "Initial surrogate covariance scale")
      ->capture_default_str();
  app->add_option("--batch-size", o.batch, "Minibatch size (default: full)");
  app->add_flag("--train-inducing", c.train_inducing,
                "Optimize inducing locations");
  app->add_flag("--parallel-units", c.parallel_units,
                "Run in-process units on threads");
  app->add_option("--checkpoint-every", c.checkpoint_every,
                  "Checkpoint period in rounds (0 = final only)")
      ->capture_default_str();
}

fedgp::FedConfig finish_fed(const FedOptions &o, const Common &common,
                            const fs::path &dir) {
  fedgp::FedConfig c = o.config;
  c.batch_size = o.batch;
  c.seed = common.seed;
  if (c.checkpoint_every > 0) {
    c.checkpoint_path = (dir / "checkpoint.bin").string();
  }
  return c;
}

fs::path ensure_dir(const std::string &dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw fedgp::IoError("cannot create '" + dir + "': " + ec.message());
  }
  return fs::path(dir);
}

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text) || !out.flush()) {
    throw fedgp::IoError("cannot write '" + path.string() + "'");
  }
}

// Personal parameters stay with the unit that owns them; the CLI keeps the
// ones it trained in a JSON file next to the checkpoint.
json personal_to_json(const std::string &id, const fedgp::PersonalParams &p) {
  return {{"unit_id", id},
          {"mu_w", std::vector<double>(p.mu_w.begin(), p.mu_w.end())},
          {"log_sigma_w",
           std::vector<double>(p.log_sigma_w.begin(), p.log_sigma_w.end())},
          {"log_noise", p.log_noise}};
}

Vector to_vector(const json &j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(),
                                  static_cast<Eigen::Index>(v.size()));
}

std::map<std::string, fedgp::PersonalParams>
read_personals(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw fedgp::IoError("cannot open '" + path + "'");
  }
  std::map<std::string, fedgp::PersonalParams> out;
  try {
    const json doc = json::parse(in);
    for (const auto &u : doc.at("units")) {
      fedgp::PersonalParams p;
      p.mu_w = to_vector(u.at("mu_w"));
      p.log_sigma_w = to_vector(u.at("log_sigma_w"));
      p.log_noise = u.at("log_noise").get<double>();
      out.emplace(u.at("unit_id").get<std::string>(), std::move(p));
    }
  } catch (const json::exception &e) {
    throw fedgp::ConfigError("'" + path + "': " + e.what());
  }
  return out;
}

std::string selection_table(const fedgp::SelectionResult &sel) {
  std::ostringstream os;
  os << "latent,gamma,energy,selected\n";
  for (Eigen::Index l = 0; l < sel.gamma_snapshot.size(); ++l) {
    const bool on = std::find(sel.selected.begin(), sel.selected.end(),
                              static_cast<int>(l)) != sel.selected.end();
    os << l << ',' << fedgp::format_double(sel.gamma_snapshot(l)) << ','
       << fedgp::format_double(sel.coeff_energy(l)) << ',' << (on ? 1 : 0)
       << '\n';
  }
  return os.str();
}

std::string prediction_csv(const Matrix &X, const fedgp::PredictiveMoments &p,
                           const Vector &truth) {
  std::ostringstream os;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    os << 'x' << j + 1 << ',';
  }
  os << "mean,variance,y_true\n";
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      os << fedgp::format_double(X(i, j)) << ',';
    }
    os << fedgp::format_double(p.mean(i)) << ','
       << fedgp::format_double(p.variance(i)) << ','
       << fedgp::format_double(truth(i)) << '\n';
  }
  return os.str();
}

// Writes the artifacts of a finished training run.
void write_training(const fs::path &dir, const fedgp::PriorHypers &prior,
                    std::span<const fedgp::UnitDataset> data,
                    const fedgp::FederatedResult &res) {
  fedgp::write_bytes(
      (dir / "checkpoint.bin").string(),
      fedgp::serialize_checkpoint({res.log.rounds.size(), prior, res.theta}));
  json units = json::array();
  for (std::size_t m = 0; m < data.size(); ++m) {
    units.push_back(personal_to_json(data[m].unit_id, res.personals[m]));
  }
  write_text(dir / "personal.json", json{{"units", units}}.dump(2) + "\n");
  write_text(dir / "train_log.jsonl", res.log.to_jsonl());
  const auto sel = fedgp::select_latents(res.theta, res.personals, prior);
  const std::string table = selection_table(sel);
  write_text(dir / "selection.csv", table);
  std::cout << table;
  if (sel.empty_warning) {
    std::cerr << "warning: no latent function was selected\n";
  }
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Federated multi-output GP regression with latent selection"};
  app.require_subcommand(1);

  // gen
  Common gen_common;
  fedgp::SyntheticSpec spec;
  std::vector<std::string> masks{"0:3"};
  auto *gen = app.add_subcommand("gen", "Generate a synthetic scenario");
  add_common(gen, gen_common);
  gen->add_option("--units", spec.num_units)->capture_default_str();
  gen->add_option("--points", spec.points_per_unit)->capture_default_str();
  gen->add_option("--lo", spec.lo)->capture_default_str();
  gen->add_option("--hi", spec.hi)->capture_default_str();
  gen->add_option("--noise", spec.noise_std)->capture_default_str();
  gen->add_option("--mask", masks, "Masked interval as unit:length")
      ->capture_default_str();
  gen->add_option("--prefix", spec.id_prefix, "Unit id prefix")
      ->capture_default_str();

  // train
  Common train_common;
  fedgp::PriorHypers train_prior;
  FedOptions train_fed;
  std::string train_csv;
  std::string train_model = "fedlmc_ss";
  auto *train = app.add_subcommand("train", "Run federated training");
  add_common(train, train_common);
  add_prior(train, train_prior);
  add_fed(train, train_fed);
  train->add_option("--data", train_csv, "Training CSV")->required();
  train->add_option("--model", train_model)
      ->check(CLI::IsMember({"fedlmc_ss", "fedlmc"}))
      ->capture_default_str();

  // predict
  Common predict_common;
  std::string predict_ckpt, predict_personal, predict_inputs;
  int predict_samples = 2000;
  auto *predict =
      app.add_subcommand("predict", "Predictive moments for trained units");
  add_common(predict, predict_common);
  predict->add_option("--checkpoint", predict_ckpt)->required();
  predict->add_option("--personal", predict_personal)->required();
  predict
      ->add_option("--inputs", predict_inputs,
                   "CSV of test points; y is taken as the truth")
      ->required();
  predict->add_option("--samples", predict_samples, "Monte Carlo samples")
      ->capture_default_str();

  // newunit
  Common newunit_common;
  std::string nu_ckpt, nu_personal, nu_train, nu_test;
  std::vector<int> nu_latents;
  int nu_top = 0;
  fedgp::NewUnitConfig nu_config;
  auto *newunit =
      app.add_subcommand("newunit", "Fit and predict units that join later");
  add_common(newunit, newunit_common);
  newunit->add_option("--checkpoint", nu_ckpt)->required();
  newunit->add_option("--personal", nu_personal,
                      "Trained personal parameters, used for selection");
  newunit->add_option("--latents", nu_latents, "Explicit latent indices");
  newunit->add_option("--top", nu_top,
                      "Use the N latents with the largest coefficient energy");
  newunit->add_option("--data", nu_train, "New units' training CSV")
      ->required();
  newunit->add_option("--test", nu_test, "New units' test CSV");
  newunit->add_option("--iterations", nu_config.iterations)
      ->capture_default_str();
  newunit->add_option("--learning-rate", nu_config.adam.learning_rate)
      ->capture_default_str();

  // bench
  Common bench_common;
  fedgp::ExperimentConfig bench_cfg;
  FedOptions bench_fed;
  std::vector<std::string> bench_models{"fedlmc_ss", "fedlmc", "igp"};
  std::vector<std::string> bench_masks{"0:3"};
  std::string bench_train, bench_held;
  int bench_new_units = 10;
  auto *bench = app.add_subcommand("bench", "Run the benchmark experiments");
  add_common(bench, bench_common);
  add_prior(bench, bench_cfg.prior);
  add_fed(bench, bench_fed);
  bench->add_option("--models", bench_models, "Comma-separated list")
      ->delimiter(',')
      ->check(CLI::IsMember({"fedlmc_ss", "fedlmc", "igp"}))
      ->capture_default_str();
  bench->add_option("--repeats", bench_cfg.repeats)->capture_default_str();
  bench->add_option("--samples", bench_cfg.mc_samples, "Monte Carlo samples")
      ->capture_default_str();
  bench->add_option("--units", bench_cfg.scenario.num_units)
      ->capture_default_str();
  bench->add_option("--points", bench_cfg.scenario.points_per_unit)
      ->capture_default_str();
  bench->add_option("--noise", bench_cfg.scenario.noise_std)
      ->capture_default_str();
  bench->add_option("--mask", bench_masks, "Masked interval as unit:length")
      ->capture_default_str();
  bench->add_option("--train-csv", bench_train, "Use external training data");
  bench->add_option("--held-out-csv", bench_held, "Held-out data for CSV mode");
  bench
      ->add_option("--new-units", bench_new_units,
                   "New units per repeat (needs fedlmc_ss and fedlmc)")
      ->capture_default_str();

  // serve
  Common serve_common;
  fedgp::PriorHypers serve_prior;
  FedOptions serve_fed;
  std::size_t serve_units = 1;
  std::string serve_addr = "0.0.0.0:7373";
  auto *serve = app.add_subcommand("serve", "Run the central server");
  add_common(serve, serve_common);
  add_prior(serve, serve_prior);
  add_fed(serve, serve_fed);
  serve->add_option("--listen", serve_addr)->capture_default_str();
  serve->add_option("--units", serve_units, "Units to wait for")
      ->capture_default_str();
  serve->add_option("--model", train_model)
      ->check(CLI::IsMember({"fedlmc_ss", "fedlmc"}))
      ->capture_default_str();

  // join
  Common join_common;
  fedgp::PriorHypers join_prior;
  FedOptions join_fed;
  std::string join_server = "127.0.0.1:7373";
  std::string join_csv, join_unit;
  std::uint64_t join_index = 0;
  auto *joinc = app.add_subcommand("join", "Run one unit against a server");
  add_common(joinc, join_common);
  add_prior(joinc, join_prior);
  add_fed(joinc, join_fed);
  joinc->add_option("--server", join_server)->capture_default_str();
  joinc->add_option("--data", join_csv, "CSV holding this unit's rows")
      ->required();
  joinc->add_option("--unit-id", join_unit, "Unit to take from the CSV");
  joinc
      ->add_option("--unit-index", join_index,
                   "Index of this unit, used to seed its streams")
      ->capture_default_str();
  joinc->add_option("--model", train_model)
      ->check(CLI::IsMember({"fedlmc_ss", "fedlmc"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  const auto parse_masks = [](const std::vector<std::string> &in) {
    std::vector<fedgp::MaskSpec> out;
    for (const auto &m : in) {
      const auto colon = m.find(':');
      if (colon == std::string::npos) {
        throw fedgp::ConfigError("mask '" + m + "' is not unit:length");
      }
      try {
        out.push_back(
            {std::stoi(m.substr(0, colon)), std::stod(m.substr(colon + 1))});
      } catch (const std::exception &) {
        throw fedgp::ConfigError("mask '" + m + "' is not unit:length");
      }
    }
    return out;
  };

  try {
    if (*gen) {
      spec.missing = parse_masks(masks);
      spec.seed = gen_common.seed;
      const fedgp::Scenario s = fedgp::gen_scenario(spec);
      fedgp::save_scenario(s, spec, gen_common.output_dir);
      std::cout << "wrote " << s.train.size() << " units to "
                << gen_common.output_dir << '\n';
    } else if (*train) {
      const fs::path dir = ensure_dir(train_common.output_dir);
      const auto prior =
          fedgp::prior_for(fedgp::parse_model(train_model), train_prior);
      const auto config = finish_fed(train_fed, train_common, dir);
      const auto data = fedgp::load_csv(train_csv);
      const auto res = fedgp::run_federated(data, prior, config,
                                            make_transport(train_common));
      write_training(dir, prior, data, res);
    } else if (*predict) {
      const fs::path dir = ensure_dir(predict_common.output_dir);
      const auto ckpt =
          fedgp::deserialize_checkpoint(fedgp::read_bytes(predict_ckpt));
      const auto personals = read_personals(predict_personal);
      ensure_dir((dir / "predictions").string());
      for (const auto &u : fedgp::load_csv(predict_inputs)) {
        const auto it = personals.find(u.unit_id);
        if (it == personals.end()) {
          throw fedgp::ConfigError("no personal parameters for unit '" +
                                   u.unit_id + "'");
        }
        const auto p =
            fedgp::mc_predict(ckpt.theta, it->second, u.inputs, predict_samples,
                              predict_common.seed, ckpt.prior);
        write_text(dir / "predictions" / (u.unit_id + ".csv"),
                   prediction_csv(u.inputs, p, u.outputs));
        std::cout << u.unit_id << " mse " << fedgp::mse(p.mean, u.outputs)
                  << '\n';
      }
    } else if (*newunit) {
      const fs::path dir = ensure_dir(newunit_common.output_dir);
      const auto ckpt =
          fedgp::deserialize_checkpoint(fedgp::read_bytes(nu_ckpt));
      std::vector<int> latents = nu_latents;
      if (latents.empty()) {
        if (nu_personal.empty()) {
          throw fedgp::ConfigError("give --latents or --personal");
        }
        std::vector<fedgp::PersonalParams> ps;
        for (auto &[id, p] : read_personals(nu_personal)) {
          ps.push_back(p);
        }
        const auto sel = fedgp::select_latents(ckpt.theta, ps, ckpt.prior);
        latents = nu_top > 0
                      ? fedgp::top_latents_by_energy(
                            sel.coeff_energy, static_cast<std::size_t>(nu_top))
                      : sel.selected;
        std::cout << selection_table(sel);
      }
      std::map<std::string, fedgp::UnitDataset> tests;
      if (!nu_test.empty()) {
        for (auto &u : fedgp::load_csv(nu_test)) {
          tests.emplace(u.unit_id, std::move(u));
        }
      }
      ensure_dir((dir / "predictions").string());
      json fits = json::array();
      for (const auto &u : fedgp::load_csv(nu_train)) {
        const auto fit = fedgp::new_unit_fit(ckpt.theta, latents, u, nu_config);
        fits.push_back(
            {{"unit_id", u.unit_id},
             {"latents", fit.latents},
             {"weights",
              std::vector<double>(fit.weights.begin(), fit.weights.end())},
             {"log_noise", fit.log_noise},
             {"seconds_per_iteration", fit.seconds_per_iteration()}});
        const auto t = tests.find(u.unit_id);
        if (t != tests.end()) {
          const auto p =
              fedgp::new_unit_predict(ckpt.theta, fit, t->second.inputs);
          write_text(dir / "predictions" / (u.unit_id + ".csv"),
                     prediction_csv(t->second.inputs, p, t->second.outputs));
          std::cout << u.unit_id << " mse "
                    << fedgp::mse(p.mean, t->second.outputs) << '\n';
        }
      }
      write_text(dir / "new_units.json", fits.dump(2) + "\n");
    } else if (*bench) {
      const fs::path dir = ensure_dir(bench_common.output_dir);
      bench_cfg.scenario.missing = parse_masks(bench_masks);
      bench_cfg.seed = bench_common.seed;
      bench_cfg.output_dir = bench_common.output_dir;
      bench_cfg.transport = make_transport(bench_common);
      bench_cfg.fed = finish_fed(bench_fed, bench_common, dir);
      bench_cfg.fed.checkpoint_every = 0;
      if (!bench_train.empty() || !bench_held.empty()) {
        bench_cfg.train_csv = bench_train;
        bench_cfg.held_out_csv = bench_held;
      }
      std::vector<fedgp::MetricsRecord> records;
      std::map<fedgp::ModelKind, std::vector<fedgp::TrainedRun>> trained;
      for (const auto &name : bench_models) {
        bench_cfg.model = fedgp::parse_model(name);
        auto &keep = trained[bench_cfg.model];
        auto r = fedgp::run_experiment(bench_cfg, &keep);
        records.insert(records.end(), r.begin(), r.end());
      }
      fedgp::emit_report(records, bench_common.output_dir);
      std::cout << fedgp::summary_text(records);
      if (bench_new_units > 0 && !bench_cfg.train_csv &&
          trained.count(fedgp::ModelKind::fedlmc_ss) &&
          trained.count(fedgp::ModelKind::fedlmc)) {
        const auto nu = fedgp::run_new_unit_experiment(
            bench_cfg, trained[fedgp::ModelKind::fedlmc_ss],
            trained[fedgp::ModelKind::fedlmc], {bench_new_units, 2.0, {}});
        fedgp::emit_report(nu, (dir / "new_units").string());
        std::cout << '\n' << fedgp::summary_text(nu);
      }
    } else if (*serve) {
      const fs::path dir = ensure_dir(serve_common.output_dir);
      const auto prior =
          fedgp::prior_for(fedgp::parse_model(train_model), serve_prior);
      const auto config = finish_fed(serve_fed, serve_common, dir);
      fedgp::Server server =
          fedgp::serve(serve_addr, prior, config, serve_units);
      std::cout << "listening on port " << server.port() << std::endl;
      const auto res = server.run();
      fedgp::write_bytes((dir / "checkpoint.bin").string(),
                         fedgp::serialize_checkpoint(
                             {res.rounds_completed, prior, res.theta}));
      std::cout << "completed " << res.rounds_completed << " rounds\n";
    } else if (*joinc) {
      const fs::path dir = ensure_dir(join_common.output_dir);
      const auto prior =
          fedgp::prior_for(fedgp::parse_model(train_model), join_prior);
      const auto config = finish_fed(join_fed, join_common, dir);
      auto units = fedgp::load_csv(join_csv);
      const auto it = std::find_if(
          units.begin(), units.end(), [&](const fedgp::UnitDataset &u) {
            return join_unit.empty() || u.unit_id == join_unit;
          });
      if (it == units.end()) {
        throw fedgp::ConfigError("unit '" + join_unit + "' not in " + join_csv);
      }
      const std::string id = it->unit_id;
      const auto res = fedgp::join(join_server, *it, join_index, prior, config);
      write_text(
          dir / ("personal_" + id + ".json"),
          json{{"units", json::array({personal_to_json(id, res.personal)})}}
                  .dump(2) +
              "\n");
      std::cout << id << " finished " << res.rounds.size() << " rounds\n";
    }
  } catch (const fedgp::NumericalError &e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const fedgp::ConfigError &e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const fedgp::IoError &e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const fedgp::FormatError &e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}
