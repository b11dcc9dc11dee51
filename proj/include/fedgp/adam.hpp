#ifndef FEDGP_ADAM_HPP_
#define FEDGP_ADAM_HPP_

#include <cmath>
#include <cstdint>

#include "fedgp/kernels.hpp"

namespace fedgp {

struct AdamSettings {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

/// Adam moment accumulators for one parameter vector. `ascend` moves along
/// the gradient (maximization). Coordinates can be held for a step, which
/// leaves both the coordinate and its accumulators untouched; bias correction
/// then counts only the steps a coordinate actually took.
class AdamState {
public:
  AdamState() = default;
  explicit AdamState(Eigen::Index n)
      : m_(Vector::Zero(n)), v_(Vector::Zero(n)),
        held_(Eigen::ArrayXi::Zero(n)) {}

  Eigen::Index size() const { return m_.size(); }
  std::int64_t steps() const { return t_; }
  const Vector &first_moment() const { return m_; }
  const Vector &second_moment() const { return v_; }

  void ascend(Vector &x, const Vector &grad, const AdamSettings &s) {
    ++t_;
    m_ = s.beta1 * m_ + (1.0 - s.beta1) * grad;
    v_ = s.beta2 * v_ + (1.0 - s.beta2) * grad.cwiseAbs2();
    apply(x, s);
  }

  /// As `ascend`, but coordinates where `hold` is true do not move.
  void ascend(Vector &x, const Vector &grad, const AdamSettings &s,
              const Mask &hold) {
    ++t_;
    for (Eigen::Index i = 0; i < size(); ++i) {
      if (hold(i)) {
        ++held_(i);
        continue;
      }
      m_(i) = s.beta1 * m_(i) + (1.0 - s.beta1) * grad(i);
      v_(i) = s.beta2 * v_(i) + (1.0 - s.beta2) * grad(i) * grad(i);
    }
    const Vector before = x;
    apply(x, s);
    x = hold.select(before, x);
  }

private:
  void apply(Vector &x, const AdamSettings &s) const {
    const auto correction = [](double beta, std::int64_t t) {
      return 1.0 - std::pow(beta, static_cast<double>(t));
    };
    const double c1 = correction(s.beta1, t_);
    const double c2 = correction(s.beta2, t_);
    for (Eigen::Index i = 0; i < size(); ++i) {
      double d1 = c1;
      double d2 = c2;
      if (held_(i) > 0) {
        const std::int64_t t = t_ - held_(i);
        if (t == 0) {
          continue;
        }
        d1 = correction(s.beta1, t);
        d2 = correction(s.beta2, t);
      }
      x(i) += s.learning_rate * (m_(i) / d1) / (std::sqrt(v_(i) / d2) + s.eps);
    }
  }

  Vector m_;
  Vector v_;
  Eigen::ArrayXi held_;
  std::int64_t t_ = 0;
};

} // namespace fedgp

#endif // FEDGP_ADAM_HPP_
