#ifndef FEDGP_FEDERATION_HPP_
#define FEDGP_FEDERATION_HPP_

#include <future>
#include <string>
#include <vector>

#include "fedgp/fedrun.hpp"
#include "fedgp/transport.hpp"

namespace fedgp {

struct Transport {
  enum class Kind { in_proc, socket };
  Kind kind = Kind::in_proc;
  // Bind address for the socket transport; port 0 picks a free port.
  std::string address = "127.0.0.1:0";
  TransportOptions options;

  static Transport in_proc() { return {}; }
  static Transport socket(std::string address = "127.0.0.1:0") {
    return {Kind::socket, std::move(address), {}};
  }
};

/// Server and units on loopback, each unit on its own thread. Produces the
/// same parameters and objective trace as the in-process run.
inline FederatedResult run_over_sockets(std::span<const UnitDataset> datasets,
                                        const PriorHypers &prior,
                                        const FedConfig &config,
                                        const Transport &transport) {
  prior.validate();
  config.validate();
  if (datasets.empty()) {
    throw EmptyDataset("federation needs at least one unit");
  }
  Server server = serve(transport.address, prior, config, datasets.size(),
                        transport.options);
  const std::string host = Endpoint::parse(transport.address).host;
  const std::string addr = (host.empty() ? std::string("127.0.0.1") : host) +
                           ":" + std::to_string(server.port());

  auto server_job =
      std::async(std::launch::async, [&server] { return server.run(); });
  std::vector<std::future<UnitRunResult>> unit_jobs;
  for (std::size_t m = 0; m < datasets.size(); ++m) {
    unit_jobs.push_back(std::async(std::launch::async, [&, m] {
      return join(addr, datasets[m], m, prior, config, transport.options);
    }));
  }
  std::vector<UnitRunResult> units;
  std::exception_ptr failure;
  for (auto &j : unit_jobs) {
    try {
      units.push_back(j.get());
    } catch (...) {
      if (!failure) {
        failure = std::current_exception();
      }
    }
  }
  ServerResult srv;
  try {
    srv = server_job.get();
  } catch (...) {
    if (!failure) {
      failure = std::current_exception();
    }
  }
  if (failure) {
    std::rethrow_exception(failure);
  }

  FederatedResult out;
  out.theta = std::move(srv.theta);
  for (std::uint64_t h = 0; h < srv.rounds_completed; ++h) {
    RoundRecord rec;
    rec.round = h + 1;
    for (const auto &u : units) {
      const LocalResult &r = u.rounds.at(h);
      rec.unit_objectives.push_back(r.objective);
      rec.jitter_events += r.jitter_events;
      rec.failed_units += r.failed ? 1 : 0;
      if (!r.failed) {
        rec.aggregate_objective += r.objective;
      }
    }
    rec.wall_seconds = srv.round_seconds.at(h);
    out.log.rounds.push_back(std::move(rec));
  }
  for (auto &u : units) {
    out.personals.push_back(std::move(u.personal));
  }
  return out;
}

inline FederatedResult run_federated(std::span<const UnitDataset> datasets,
                                     const PriorHypers &prior,
                                     const FedConfig &config,
                                     const Transport &transport = {}) {
  if (transport.kind == Transport::Kind::socket) {
    return run_over_sockets(datasets, prior, config, transport);
  }
  return run_in_process(datasets, prior, config);
}

} // namespace fedgp

#endif // FEDGP_FEDERATION_HPP_
