// Ten units share latent structure; one of them is missing an interval,
// which the federated model fills in from the others.

#include <iostream>

#include "fedgp/fedgp.hpp"

int main() {
  fedgp::SyntheticSpec spec;
  spec.seed = 4;
  const fedgp::Scenario scenario = fedgp::gen_scenario(spec);

  const fedgp::PriorHypers prior;
  const fedgp::FedConfig config = fedgp::FedConfig::tuned();

  const auto result = fedgp::run_federated(scenario.train, prior, config);
  const auto selection =
      fedgp::select_latents(result.theta, result.personals, prior);
  std::cout << "selected " << selection.selected.size() << " of "
            << prior.num_latents << " latent functions\n";

  const fedgp::HeldOut &gap = scenario.held_out.front();
  const auto pred = fedgp::mc_predict(result.theta, result.personals[0],
                                      gap.inputs, 1000, 1, prior);
  const auto igp = fedgp::igp_fit_predict(scenario.train[0], gap.inputs);
  std::cout << "MSE in the gap: federated " << fedgp::mse(pred.mean, gap.truth)
            << ", single-output GP " << fedgp::mse(igp.mean, gap.truth) << '\n';
}
