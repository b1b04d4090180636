#pragma once

#include <Eigen/Dense>
#include <vector>

#include "safed/ccm.hpp"
#include "safed/common.hpp"
#include "safed/domain.hpp"
#include "safed/dynamics.hpp"
#include "safed/evt.hpp"

namespace safed::tube {

// The tracking-error bound diverged: the disturbance gain exceeds the
// contraction rate (effective rate <= 0) or the integration overflowed.
struct NonFinite : Error {
  using Error::Error;
};

// Certified constants the tube dynamics depend on. Metric radii are turned
// into Euclidean ones by dividing with conversion_factor(floor, conversion).
struct TubeConstants {
  double lambda = 0.0;                 // certified contraction rate
  evt::VerifiedConstant l_theta_w;     // Lipschitz bound of |Theta(x) w(x,u)|
  evt::VerifiedConstant delta_u;       // feedback-gain bound
  evt::VerifiedConstant lambda_min_m;  // lower bound of lambda_min(M(x))
  evt::VerifiedConstant phi;           // residual-tail bound added to w
  RadiusConversion conversion = RadiusConversion::Sqrt;

  // Disturbance amplification: L_Theta_w * (1 + delta_u / factor(floor)).
  double gain() const;
  // lambda - gain(); must be positive for the error bound to stay bounded.
  double effective_rate() const;
};

// Worst-case tracking-error bound (metric distance) at a point in time.
struct TubeState {
  double eta_bar = 0.0;
  TubeConstants constants;
};

// A nominal plan segment: states sampled every dt under the constant control
// u_star (the planner's own integration samples).
struct NominalSegment {
  std::vector<Eigen::VectorXd> states;  // x*(0), x*(dt), ..., x*(n dt)
  Eigen::VectorXd u_star;
  double dt = 0.0;
};

// |Theta(x*) (w(x*,u*) + phi)| — the disturbance forcing evaluated at the
// nominal point.
double disturbance_term(const ccm::Metric& metric,
                        const dynamics::DisturbanceNet& wnet, double phi,
                        const Eigen::VectorXd& x_star,
                        const Eigen::VectorXd& u_star);

// Integrate the scalar error-bound dynamics
//   eta' = -lambda * eta + disturbance_term(x*(t), u*) + gain * eta
// along the segment by RK4 at the segment's own step, starting from
// tube.eta_bar. Returns the bound at every sample (size == states.size()).
// Throws NonFinite if the bound overflows (an effective rate <= 0 blow-up).
std::vector<double> propagate(const TubeState& tube, const ccm::Metric& metric,
                              const dynamics::DisturbanceNet& wnet,
                              const NominalSegment& segment);

// Radius of the Euclidean ball that contains every executed state:
// eta_bar / factor(certified floor of lambda_min(M)).
double euclidean_radius(const TubeState& tube);

// Bound the Lipschitz constant of |Theta(x) w(x,u)| (metric distance in x,
// Euclidean distance in u) from difference quotients over nearby domain
// sample pairs. cfg's kind and name are forced to upper_bound / "l_theta_w".
evt::VerifiedConstant estimate_l_theta_w(const ccm::Metric& metric,
                                         const dynamics::DisturbanceNet& wnet,
                                         const domain::TrustedDomain& dom,
                                         evt::EstimateConfig cfg,
                                         uint64_t seed);

}  // namespace safed::tube
