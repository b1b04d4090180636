#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "safed/common.hpp"
#include "safed/controller.hpp"
#include "safed/domain.hpp"
#include "safed/dynamics.hpp"
#include "safed/planner.hpp"

namespace safed::sim {

// Ground-truth stochastic systems used for data collection and execution.
enum class Variant { Unicycle5D, Quadrotor10D, LinearTest };
Variant parse_variant(const std::string& name);
std::string variant_name(Variant variant);

// Rectangle in the position plane where the noise amplitude is multiplied.
struct RoughPatch {
  domain::Box area;         // 2-dimensional, positions (x, y)
  double multiplier = 5.0;
};

// A true system the toolkit never sees in closed form: deterministic drift
// plus one bounded uniform noise draw per integration step.
struct TrueSystem {
  Variant variant = Variant::LinearTest;

  // Unicycle5D: lateral slip coefficient (unknown to the learner) and an
  // optional rough patch that scales the noise amplitude inside its area.
  double slip = 0.1;
  std::optional<RoughPatch> patch;

  // Unicycle5D / LinearTest: per-state noise amplitudes.
  Eigen::VectorXd noise_base;

  // Quadrotor10D: attitude-to-acceleration coupling gain.
  double tilt_gain = 9.8;

  // LinearTest drift.
  Eigen::MatrixXd a;
  Eigen::MatrixXd b;

  int n_x() const;
  int n_u() const;

  // Drift part of the dynamics (no noise).
  Eigen::VectorXd deterministic(const Eigen::VectorXd& x,
                                const Eigen::VectorXd& u) const;

  // Per-state amplitude of the uniform noise on xdot at this state.
  Eigen::VectorXd noise_bound(const Eigen::VectorXd& x) const;
};

// Planar unicycle: states (x, y, heading, speed, turn rate), acceleration
// controls, heading-dependent slip, and a default rough patch.
TrueSystem unicycle_system();

// 10-state quadrotor stand-in: position, velocity, roll/pitch, and their
// rates; controls are vertical acceleration and the two angular torques.
// State-dependent noise on the last nine states.
TrueSystem quadrotor_system();

// Known linear drift with constant noise amplitudes, for oracles.
TrueSystem linear_system(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                         const Eigen::VectorXd& noise_amplitude);

// State and control box the stock unicycle scenarios collect over.
domain::TrustedDomain unicycle_domain();

// One step: RK4 on the drift plus dt times one uniform noise draw, bounded
// by noise_bound at the pre-step state. Deterministic given the rng state.
Eigen::VectorXd true_step(const TrueSystem& sys, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& u, double dt, Rng& rng);

struct CollectConfig {
  int rollout_length = 12;   // steps per rollout (one constant control each)
  double dt = 0.05;          // simulation and finite-difference step
  int split_ratio = 10;      // training records per validation record
  bool exact_derivatives = false;  // label with the drift instead of
                                   // central differences (oracle use)
};

struct CollectedData {
  dynamics::Dataset train;  // role "S"
  dynamics::Dataset val;    // role "V"
};

// Short random rollouts with uniform controls: xdot labels from central
// differences at the rollout step; records whose neighborhood leaves the
// domain are dropped. Collects until n_points records, split S:V.
CollectedData collect_random(const TrueSystem& sys, int n_points,
                             const domain::TrustedDomain& dom,
                             const CollectConfig& cfg, uint64_t seed);

// One execution sample: planned versus true state under feedback.
struct ExecSample {
  double time = 0.0;
  Eigen::VectorXd x;       // true state
  Eigen::VectorXd x_star;  // planned state
  Eigen::VectorXd u;       // commanded control (feedback-corrected)
  double eta_bar = 0.0;    // planned tracking-error bound
  double err_euclid = 0.0;
  double err_metric = 0.0;
  bool contained = false;  // err_metric <= eta_bar
  bool collided = false;   // true position inside an obstacle
  bool dx_exit = false;    // true state left the trusted domain
};

struct Execution {
  std::vector<ExecSample> samples;
  double mean_tracking_error = 0.0;  // euclidean, over all samples
  double max_tracking_error = 0.0;
  double goal_error = 0.0;           // terminal distance to the goal
  double containment_fraction = 0.0;
  long collisions = 0;
  long dx_exits = 0;
  controller::ControllerLog control_log;
};

// Roll the true system along the plan under the tracking controller,
// starting at the plan's first state. Violations are recorded, not raised.
Execution execute(const TrueSystem& sys, const planner::Plan& plan,
                  const controller::TrackingController& ctrl,
                  const planner::Scenario& scenario,
                  const domain::Region& d_x, uint64_t seed);

void write_execution(std::ostream& out, const Execution& exec);
Execution read_execution(std::istream& in);

}  // namespace safed::sim
