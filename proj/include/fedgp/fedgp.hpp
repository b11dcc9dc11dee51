#ifndef FEDGP_FEDGP_HPP_
#define FEDGP_FEDGP_HPP_

#include "fedgp/adam.hpp"
#include "fedgp/bench.hpp"
#include "fedgp/data.hpp"
#include "fedgp/errors.hpp"
#include "fedgp/federation.hpp"
#include "fedgp/fedrun.hpp"
#include "fedgp/kernels.hpp"
#include "fedgp/objective.hpp"
#include "fedgp/params.hpp"
#include "fedgp/predict.hpp"
#include "fedgp/serialization.hpp"
#include "fedgp/transport.hpp"

#endif // FEDGP_FEDGP_HPP_
