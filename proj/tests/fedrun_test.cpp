#include <gtest/gtest.h>

#include <fstream>
#include <future>
#include <random>
#include <sstream>
#include <string>

#include "fedgp/federation.hpp"
#include "support/oracles.hpp"

namespace fedgp {
namespace {

using oracle::Instance;

UnitState state_for(const Instance &in, std::uint64_t seed = 1) {
  return make_unit_state(in.data, in.psi, GlobalLayout::of(in.theta), seed, 0);
}

FedConfig plain(int steps, double lr) {
  FedConfig c;
  c.local_steps = steps;
  c.learning_rate = lr;
  return c;
}

TEST(LocalUpdate, ZeroLearningRateChangesNothing) {
  std::mt19937_64 rng(40);
  const Instance in = oracle::random_instance(rng, {7, 2, 3});
  UnitState s = state_for(in);
  const auto r = local_update(in.theta, s, plain(5, 0.0), in.prior, 7.0);
  EXPECT_FALSE(r.failed);
  EXPECT_EQ(to_unconstrained(r.theta), to_unconstrained(in.theta));
  EXPECT_EQ(to_unconstrained(s.personal), to_unconstrained(in.psi));
}

TEST(LocalUpdate, FirstStepIsSignScaledGradient) {
  std::mt19937_64 rng(41);
  const Instance in = oracle::random_instance(rng, {6, 2, 3});
  UnitState s = state_for(in);
  const double lr = 0.01, eps = 1e-8;
  const auto g = unit_gradient(in.data, in.theta, in.psi, 0.5, in.prior);
  const auto r = local_update(in.theta, s, plain(1, lr), in.prior, 12.0);

  // After one Adam step m_hat = g and v_hat = g^2.
  const Vector x = to_unconstrained(in.theta);
  const Vector want =
      x + (lr * g.global.array() / (g.global.array().abs() + eps)).matrix();
  EXPECT_LT((to_unconstrained(r.theta) - want).cwiseAbs().maxCoeff(), 1e-12);
  const Vector p = to_unconstrained(in.psi);
  const Vector want_p =
      p + (lr * g.personal.array() / (g.personal.array().abs() + eps)).matrix();
  EXPECT_LT((to_unconstrained(s.personal) - want_p).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_DOUBLE_EQ(r.objective, g.value.total);
  EXPECT_EQ(r.weight, 6.0);
}

TEST(LocalUpdate, SmallStepIncreasesObjective) {
  std::mt19937_64 rng(42);
  int ascended = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const Instance in =
        oracle::random_instance(rng, oracle::random_shape(rng, 8, 3, 4));
    UnitState s = state_for(in);
    const double n = static_cast<double>(in.data.size());
    const double before =
        unit_objective(in.data, in.theta, in.psi, 1.0, in.prior).total;
    const auto r = local_update(in.theta, s, plain(1, 1e-4), in.prior, n);
    const double after =
        unit_objective(in.data, r.theta, s.personal, 1.0, in.prior).total;
    ascended += after > before ? 1 : 0;
  }
  EXPECT_GE(ascended, 95);
}

TEST(LocalUpdate, WarmupHoldsHyperparameters) {
  std::mt19937_64 rng(43);
  const Instance in = oracle::random_instance(rng, {8, 2, 3});
  UnitState s = state_for(in);
  FedConfig c = plain(3, 0.05);
  c.warmup_rounds = 1;
  const auto r = local_update(in.theta, s, c, in.prior, 8.0);
  const GlobalLayout layout = GlobalLayout::of(in.theta);
  const Mask hold = hyperparameter_mask(layout);
  const Vector before = to_unconstrained(in.theta);
  const Vector after = to_unconstrained(r.theta);
  for (Eigen::Index i = 0; i < before.size(); ++i) {
    if (hold(i)) {
      EXPECT_EQ(after(i), before(i));
    }
  }
  EXPECT_NE(after, before);
}

TEST(LocalUpdate, NumericalFailureReportsZeroWeight) {
  std::mt19937_64 rng(44);
  Instance in = oracle::random_instance(rng, {5, 2, 3});
  in.data.outputs(0) = std::numeric_limits<double>::infinity();
  UnitState s = state_for(in);
  const auto r = local_update(in.theta, s, plain(1, 0.01), in.prior, 5.0);
  EXPECT_TRUE(r.failed);
  EXPECT_EQ(r.weight, 0.0);
  EXPECT_EQ(to_unconstrained(r.theta), to_unconstrained(in.theta));
  EXPECT_EQ(s.rounds_done, 0);
}

TEST(CentralUpdate, ZeroWeightUplinksAreIgnored) {
  std::mt19937_64 rng(45);
  const Instance a = oracle::random_instance(rng, {4, 2, 3});
  const Instance b = oracle::random_instance(rng, {4, 2, 3});
  const std::vector<RoundMessage> msgs{make_round_message(1, a.theta, 2.0),
                                       make_round_message(1, b.theta, 0.0)};
  EXPECT_EQ(to_unconstrained(central_update(msgs)), to_unconstrained(a.theta));
}

TEST(CentralUpdate, WeightedMean) {
  std::mt19937_64 rng(46);
  const Instance a = oracle::random_instance(rng, {4, 2, 3});
  const Instance b = oracle::random_instance(rng, {4, 2, 3});
  const std::vector<RoundMessage> msgs{make_round_message(1, a.theta, 1.0),
                                       make_round_message(1, b.theta, 3.0)};
  const Vector want =
      0.25 * to_unconstrained(a.theta) + 0.75 * to_unconstrained(b.theta);
  EXPECT_LT(
      (to_unconstrained(central_update(msgs)) - want).cwiseAbs().maxCoeff(),
      1e-12);
}

TEST(CentralUpdate, AllUnitsFailed) {
  std::mt19937_64 rng(47);
  const Instance a = oracle::random_instance(rng, {4, 2, 3});
  const std::vector<RoundMessage> msgs{make_round_message(1, a.theta, 0.0),
                                       make_round_message(1, a.theta, 0.0)};
  EXPECT_THROW(central_update(msgs), AllUnitsFailed);
}

TEST(PreProcessing, ConstantOutputsHitNoiseFloor) {
  UnitDataset d{Matrix::Random(5, 1), Vector::Constant(5, 3.0), "flat"};
  const std::vector<UnitDataset> units{d};
  const auto init = pre_processing(units, oracle::small_prior(), FedConfig{});
  EXPECT_DOUBLE_EQ(init.personals[0].log_noise, std::log(kNoiseFloor));
}

TEST(PreProcessing, InducingPointsCoverUnionOfRanges) {
  UnitDataset a{Vector::LinSpaced(6, 0.0, 1.0), Vector::Random(6), "a"};
  UnitDataset b{Vector::LinSpaced(6, 2.0, 5.0), Vector::Random(6), "b"};
  const std::vector<UnitDataset> units{a, b};
  const auto init = pre_processing(units, oracle::small_prior(2, 6), {});
  for (const auto &lat : init.theta.latents) {
    EXPECT_GE(lat.inducing.points.minCoeff(), 0.0);
    EXPECT_LE(lat.inducing.points.maxCoeff(), 5.0);
    EXPECT_LT(lat.inducing.points.minCoeff(), 1.0);
    EXPECT_GT(lat.inducing.points.maxCoeff(), 2.0);
  }
}

TEST(Federation, ZeroRoundsIsConfigError) {
  const auto units = oracle::small_federation(2, 10, 1);
  FedConfig c;
  c.rounds = 0;
  EXPECT_THROW(run_in_process(units, oracle::small_prior(), c), ConfigError);
}

TEST(Federation, SingleUnitIsCentralizedTraining) {
  for (int t = 0; t < 20; ++t) {
    const auto units = oracle::small_federation(1, 8 + t, 100 + t);
    const PriorHypers prior = oracle::small_prior(2 + t % 2, 3 + t % 3);
    FedConfig c = plain(1 + t % 3, 0.02);
    c.rounds = 3;
    c.seed = t;
    if (t % 4 == 0) {
      c.batch_size = 4;
    }
    const auto fed = run_in_process(units, prior, c);

    Initialization init = pre_processing(units, prior, c);
    UnitState s = make_unit_state(units[0], init.personals[0],
                                  GlobalLayout::of(init.theta), c.seed, 0);
    GlobalParams theta = init.theta;
    for (int h = 0; h < c.rounds; ++h) {
      theta =
          local_update(theta, s, c, prior, static_cast<double>(units[0].size()))
              .theta;
    }
    EXPECT_EQ(to_unconstrained(fed.theta), to_unconstrained(theta))
        << "config " << t;
    EXPECT_EQ(to_unconstrained(fed.personals[0]), to_unconstrained(s.personal));
  }
}

TEST(Federation, Deterministic) {
  const auto units = oracle::small_federation(3, 12, 7);
  FedConfig c = plain(2, 0.02);
  c.rounds = 4;
  c.batch_size = 5;
  c.seed = 9;
  const auto a = run_in_process(units, oracle::small_prior(), c);
  const auto b = run_in_process(units, oracle::small_prior(), c);
  EXPECT_EQ(serialize_global(a.theta), serialize_global(b.theta));
  EXPECT_EQ(a.log.objective_trace(), b.log.objective_trace());
}

TEST(Federation, SocketMatchesInProcess) {
  const auto units = oracle::small_federation(3, 12, 8);
  FedConfig c = plain(2, 0.02);
  c.rounds = 5;
  c.seed = 3;
  const auto local = run_in_process(units, oracle::small_prior(), c);
  Transport t;
  t.kind = Transport::Kind::socket;
  const auto remote = run_federated(units, oracle::small_prior(), c, t);
  EXPECT_EQ(serialize_global(local.theta), serialize_global(remote.theta));
  ASSERT_EQ(remote.personals.size(), 3u);
  for (std::size_t m = 0; m < 3; ++m) {
    EXPECT_EQ(to_unconstrained(local.personals[m]),
              to_unconstrained(remote.personals[m]));
  }
  EXPECT_EQ(local.log.objective_trace(), remote.log.objective_trace());
}

TEST(Federation, ZeroRoundsOverSocketsIsHelloThenDone) {
  const auto units = oracle::small_federation(1, 10, 9);
  FedConfig c;
  c.rounds = 0;
  Server server("127.0.0.1:0", oracle::small_prior(), c, 1);
  const std::string addr = "127.0.0.1:" + std::to_string(server.port());
  auto srv = std::async(std::launch::async, [&] { return server.run(); });
  const auto unit = join(addr, units[0], 0, oracle::small_prior(), c);
  const auto result = srv.get();
  EXPECT_EQ(result.rounds_completed, 0u);
  EXPECT_TRUE(unit.rounds.empty());
  EXPECT_EQ(serialize_global(unit.theta), serialize_global(result.theta));
  const auto init = pre_processing(units, oracle::small_prior(), c);
  EXPECT_EQ(serialize_global(result.theta), serialize_global(init.theta));
}

TEST(Frames, RoundTrip) {
  std::mt19937_64 rng(48);
  const Instance in = oracle::random_instance(rng, {4, 2, 3});
  const RoundMessage msg = make_round_message(7, in.theta, 12.0);
  const Bytes bytes = encode_frame(FrameKind::uplink, msg);
  const Frame f = decode_frame(bytes);
  EXPECT_EQ(f.kind, FrameKind::uplink);
  EXPECT_EQ(f.message, msg);
}

TEST(Frames, TruncationIsProtocolViolation) {
  std::mt19937_64 rng(49);
  const Instance in = oracle::random_instance(rng, {4, 2, 3});
  const Bytes bytes =
      encode_frame(FrameKind::broadcast, make_round_message(1, in.theta, 1.0));
  for (std::size_t cut : {std::size_t{3}, kFrameHeaderSize, bytes.size() - 1}) {
    EXPECT_THROW(decode_frame(std::span(bytes).first(cut)), ProtocolViolation);
  }
}

TEST(Frames, NonGlobalPayloadIsRejected) {
  RoundMessage msg;
  msg.round_index = 1;
  msg.weight = 1.0;
  msg.payload = {1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_ANY_THROW(encode_frame(FrameKind::uplink, msg));
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
  if (a == std::string::npos || b == std::string::npos) {
    return {};
  }
  return text.substr(a, b - a);
}

TEST(Privacy, ServerCodeNeverTouchesUnitData) {
  const std::string dir = std::string(FEDGP_SOURCE_DIR) + "/include/fedgp/";
  const std::string transport = slurp(dir + "transport.hpp");
  const std::string fedrun = slurp(dir + "fedrun.hpp");
  const std::string params = slurp(dir + "params.hpp");
  const std::vector<std::string> server_side{
      between(transport, "class Server {", "inline Server serve("),
      between(fedrun, "inline GlobalParams central_update(",
              "struct FederatedResult"),
      between(params, "average_globals(std::span", "} // namespace fedgp")};
  for (const auto &code : server_side) {
    ASSERT_FALSE(code.empty());
    for (const char *token :
         {"UnitDataset", "PersonalParams", "outputs", "mu_w", "log_noise"}) {
      EXPECT_EQ(code.find(token), std::string::npos) << token;
    }
  }
}

TEST(Privacy, EveryFrameCarriesOnlyGlobals) {
  std::mt19937_64 rng(50);
  const Instance in = oracle::random_instance(rng, {4, 2, 3});
  const Bytes frame =
      encode_frame(FrameKind::uplink, make_round_message(1, in.theta, 4.0));
  const Frame f = decode_frame(frame);
  const GlobalParams back = deserialize_global(f.message.payload);
  EXPECT_EQ(serialize_global(back), f.message.payload);
  // Header, round index, weight and the global payload account for every
  // byte.
  EXPECT_EQ(f.message.payload, serialize_global(in.theta));
}

} // namespace
} // namespace fedgp
