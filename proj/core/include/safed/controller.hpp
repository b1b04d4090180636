#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "safed/ccm.hpp"
#include "safed/common.hpp"
#include "safed/domain.hpp"
#include "safed/dynamics.hpp"
#include "safed/evt.hpp"

namespace safed::controller {

// Per-call event counters. Callers that care pass one in; the controller
// itself stays immutable and shareable across threads.
struct ControllerLog {
  long infeasible = 0;  // constraint active but its gradient vanished
  long saturated = 0;   // command clamped to the control box
};

// Tracking controller: certified metric + learned model + the domain the
// certificates are valid on. delta_u is filled by estimate_delta_u.
struct TrackingController {
  ccm::Metric metric;
  dynamics::LearnedDynamics model;
  domain::TrustedDomain dom;
  evt::VerifiedConstant delta_u;  // upper bound of |u_fb| / |x - x*|
  int geodesic_segments = 8;

  bool has_delta_u() const { return !delta_u.name.empty(); }
};

// Validates that the metric is certified and dimensions agree.
TrackingController make_controller(ccm::Metric metric,
                                   dynamics::LearnedDynamics model,
                                   domain::TrustedDomain dom,
                                   int geodesic_segments = 8);

// Piecewise-linear geodesic approximation: `segments` chords whose interior
// waypoints start on the straight line and are improved by coordinate
// descent (each accepted move strictly decreases the length, so the sweep
// trace is monotone non-increasing). The returned length is an upper bound
// on the true geodesic distance. Constant metrics are exact in one chord.
struct GeodesicResult {
  std::vector<Eigen::VectorXd> waypoints;  // size segments + 1, ends included
  double length = 0.0;
  std::vector<double> sweep_lengths;  // length after init and after each sweep
};
GeodesicResult geodesic_path(const ccm::Metric& metric,
                             const Eigen::VectorXd& from,
                             const Eigen::VectorXd& to, int segments);

// Metric distance |x - x*|_M: exact for constant metrics, the optimized
// piecewise-linear upper bound for neural ones.
double geodesic_distance(const ccm::Metric& metric, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& x_star, int segments = 8);

// Closed form of min |u| s.t. a + b^T u <= 0: zero when the constraint is
// already satisfied, otherwise -(a/|b|^2) b (the constraint lands tight).
Eigen::VectorXd min_norm_step(double a, const Eigen::VectorXd& b);

// The contraction constraint pieces at the worse of the two chord endpoints,
// and the resulting unsaturated feedback. The scalar constraint enforces
// d/dt |x - x*|_M^2 <= -2 lambda |x - x*|_M^2 at the certified rate.
struct FeedbackTerms {
  double a = 0.0;
  Eigen::VectorXd b;
  Eigen::VectorXd u_fb;
  bool infeasible = false;  // constraint active with vanishing gradient
};
FeedbackTerms feedback_terms(const TrackingController& ctrl,
                             const Eigen::VectorXd& x,
                             const Eigen::VectorXd& x_star,
                             const Eigen::VectorXd& u_star);

// Tracking command u* + u_fb, clamped to the control box. Infeasible and
// saturation events are counted in `log` when provided.
Eigen::VectorXd feedback(const TrackingController& ctrl,
                         const Eigen::VectorXd& x,
                         const Eigen::VectorXd& x_star,
                         const Eigen::VectorXd& u_star,
                         ControllerLog* log = nullptr);

// One draw of the feedback-gain statistic |u_fb| / |x - x*| (unsaturated).
double delta_u_sample(const TrackingController& ctrl, const Eigen::VectorXd& x,
                      const Eigen::VectorXd& x_star,
                      const Eigen::VectorXd& u_star);

// Bound the feedback gain over random tracking configurations: x* uniform in
// the state box, x uniform in a metric ball of radius ball_radius around x*
// (rejected back into the box), u* uniform in the control box. cfg's kind and
// name are forced to upper_bound / "delta_u". Fills ctrl.delta_u.
evt::VerifiedConstant estimate_delta_u(TrackingController& ctrl,
                                       double ball_radius,
                                       evt::EstimateConfig cfg, uint64_t seed);

}  // namespace safed::controller
