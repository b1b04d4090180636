#include "safed/tube.hpp"

#include <algorithm>
#include <cmath>

#include "safed/controller.hpp"

namespace safed::tube {

namespace {

constexpr double kDenFloor = 1e-6;      // difference-quotient denominator floor
constexpr double kPairSpread = 0.05;    // local pair offset, per-dim halfwidth
constexpr double kEtaOverflow = 1e50;   // treat the bound as diverged past this

}  // namespace

double TubeConstants::gain() const {
  return l_theta_w.value *
         (1.0 +
          delta_u.value / conversion_factor(lambda_min_m.value, conversion));
}

double TubeConstants::effective_rate() const { return lambda - gain(); }

double disturbance_term(const ccm::Metric& metric,
                        const dynamics::DisturbanceNet& wnet, double phi,
                        const Eigen::VectorXd& x_star,
                        const Eigen::VectorXd& u_star) {
  if (phi < 0.0) throw Error("disturbance_term: phi must be non-negative");
  const ccm::MetricEval ev = ccm::metric_at(metric, x_star);
  const Eigen::VectorXd bound =
      wnet.w(x_star, u_star).array() + phi;
  return (ev.theta * bound).norm();
}

std::vector<double> propagate(const TubeState& tube, const ccm::Metric& metric,
                              const dynamics::DisturbanceNet& wnet,
                              const NominalSegment& segment) {
  if (segment.states.empty()) {
    throw Error("propagate: segment has no samples");
  }
  if (tube.eta_bar < 0.0) {
    throw Error("propagate: the error bound must be non-negative");
  }
  std::vector<double> out;
  out.reserve(segment.states.size());
  double eta = tube.eta_bar;
  out.push_back(eta);
  if (segment.states.size() == 1) return out;
  if (!(segment.dt > 0.0)) {
    throw Error("propagate: segment step must be positive");
  }

  const double rate = tube.constants.effective_rate();
  const double dt = segment.dt;
  double forcing_here = disturbance_term(metric, wnet, tube.constants.phi.value,
                                         segment.states.front(), segment.u_star);
  for (size_t i = 0; i + 1 < segment.states.size(); ++i) {
    const Eigen::VectorXd& a = segment.states[i];
    const Eigen::VectorXd& b = segment.states[i + 1];
    const double forcing_mid = disturbance_term(
        metric, wnet, tube.constants.phi.value, 0.5 * (a + b), segment.u_star);
    const double forcing_next = disturbance_term(
        metric, wnet, tube.constants.phi.value, b, segment.u_star);

    const double k1 = -rate * eta + forcing_here;
    const double k2 = -rate * (eta + 0.5 * dt * k1) + forcing_mid;
    const double k3 = -rate * (eta + 0.5 * dt * k2) + forcing_mid;
    const double k4 = -rate * (eta + dt * k3) + forcing_next;
    eta += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    eta = std::max(eta, 0.0);
    if (!std::isfinite(eta) || eta > kEtaOverflow) {
      throw NonFinite("propagate: tracking-error bound diverged (effective "
                      "rate is likely non-positive)");
    }
    out.push_back(eta);
    forcing_here = forcing_next;
  }
  return out;
}

double euclidean_radius(const TubeState& tube) {
  return tube.eta_bar / conversion_factor(tube.constants.lambda_min_m.value,
                                          tube.constants.conversion);
}

evt::VerifiedConstant estimate_l_theta_w(const ccm::Metric& metric,
                                         const dynamics::DisturbanceNet& wnet,
                                         const domain::TrustedDomain& dom,
                                         evt::EstimateConfig cfg,
                                         uint64_t seed) {
  cfg.kind = evt::BoundKind::UpperBound;
  cfg.name = "l_theta_w";

  Rng rng(splitmix64(seed ^ 0x17e7a0b5ULL));
  const Eigen::VectorXd x_spread = kPairSpread * dom.x.halfwidth();
  const Eigen::VectorXd u_spread = kPairSpread * dom.u.halfwidth();
  auto value_at = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    return (ccm::metric_at(metric, x).theta * wnet.w(x, u)).eval();
  };
  auto sampler = [&]() {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const Eigen::VectorXd x = dom.x.sample(rng);
      const Eigen::VectorXd u = dom.u.sample(rng);
      // Nearby partner: secant slopes over short separations approach the
      // local Lipschitz constant, whose supremum dominates every quotient.
      Eigen::VectorXd x2 = x;
      for (int d = 0; d < x.size(); ++d) {
        x2(d) += rng.uniform(-x_spread(d), x_spread(d));
      }
      x2 = dom.x.clamp(x2);
      Eigen::VectorXd u2 = u;
      for (int d = 0; d < u.size(); ++d) {
        u2(d) += rng.uniform(-u_spread(d), u_spread(d));
      }
      u2 = dom.u.clamp(u2);
      if ((x2 - x).norm() == 0.0 && (u2 - u).norm() == 0.0) continue;
      const double num = (value_at(x, u) - value_at(x2, u2)).norm();
      const double den = controller::geodesic_distance(metric, x2, x, 1) +
                         (u2 - u).norm();
      return num / std::max(den, kDenFloor);
    }
    throw Error("estimate_l_theta_w: could not draw distinct sample pairs; "
                "the trusted domain appears to have zero width");
  };
  return evt::estimate_constant(sampler, cfg);
}

}  // namespace safed::tube
