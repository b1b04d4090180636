#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

#include "safed/ccm.hpp"
#include "safed/common.hpp"
#include "safed/domain.hpp"
#include "safed/dynamics.hpp"
#include "safed/tube.hpp"

namespace safed::planner {

// Planning ran out of iterations before a tube-safe path reached the goal.
struct IterationCapReached;
// An audited plan violated a containment, domain, or consistency check.
struct AuditFailed;

// Obstacles live in the leading `position_dims` coordinates of the state.
struct SphereObstacle {
  Eigen::VectorXd center;
  double radius = 0.0;
};
struct BoxObstacle {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

// One planning query: start, goal, obstacles, and sampling parameters.
struct Scenario {
  int position_dims = 2;  // leading state dims checked against obstacles
  std::vector<SphereObstacle> spheres;
  std::vector<BoxObstacle> boxes;
  Eigen::VectorXd x_init;
  Eigen::VectorXd x_goal;
  double goal_tolerance = 0.1;  // goal ball radius around x_goal
  bool goal_position_only = false;
  double eta_init = 0.0;  // tracking-error bound at the start state
  double dt = 0.1;        // dwell time of each piecewise-constant control
  int substeps = 10;      // integration sub-samples per edge
  domain::Box control_range;  // candidate-control sampling box
  uint64_t seed = 0;
  int max_iterations = 10000;
};

void write_scenario(std::ostream& out, const Scenario& scenario);
Scenario read_scenario(std::istream& in);

// How much of the safety machinery the planner applies.
//   Safed: tube-inflated collision checks plus both domain checks.
//   Naive: no tube (bound pinned at zero) and no domain checks.
//   Unsafe: tube propagated and domain-checked, but collision checks use the
//           nominal point only.
enum class Mode { Safed, Naive, Unsafe };
Mode parse_mode(const std::string& name);  // "safed" | "naive" | "unsafe"
std::string mode_name(Mode mode);

// Everything the planner needs about the learned system.
struct PlanningProblem {
  dynamics::LearnedDynamics model;
  dynamics::DisturbanceNet wnet;
  ccm::Metric metric;
  tube::TubeConstants constants;
  domain::Region d_x;
  domain::Region d_u;
  Mode mode = Mode::Safed;
};

// Search-tree node: state, accumulated bound, and the incoming edge.
struct PlanNode {
  Eigen::VectorXd x;
  double eta_bar = 0.0;
  int parent = -1;             // index into the tree; -1 for the root
  Eigen::VectorXd u_in;        // control of the incoming edge (root: empty)
  double time = 0.0;
};

struct Tree {
  std::vector<PlanNode> nodes;
};

// Per-iteration rejection accounting.
struct PlanStats {
  long iterations = 0;
  long accepted = 0;
  long rejected_collision = 0;
  long rejected_du = 0;
  long rejected_dx = 0;
  long rejected_nearer = 0;
  long rejected_diverged = 0;  // tube bound blew up along the candidate edge
  size_t tree_size = 0;
};

// One dense sample of a plan: the control is held constant from this sample
// until the next one.
struct PlanSample {
  double time = 0.0;
  Eigen::VectorXd x_star;
  Eigen::VectorXd u_star;
  double eta_bar = 0.0;
  double radius = 0.0;  // euclidean tube radius at this sample
};

// A goal-reaching chain of piecewise-constant control edges, densely sampled
// at dt / substeps. The final sample is the first one inside the goal ball;
// its euclidean radius is `terminal_radius`.
struct Plan {
  std::vector<PlanSample> samples;
  std::vector<Eigen::VectorXd> controls;  // one per edge, in order
  double dt = 0.0;
  int substeps = 0;
  double goal_tolerance = 0.0;
  double terminal_radius = 0.0;
  double eta_init = 0.0;

  // Edge k covers samples [k*substeps, min((k+1)*substeps, last)].
  size_t edges() const { return controls.size(); }
};

void write_plan(std::ostream& out, const Plan& plan);
Plan read_plan(std::istream& in);

struct PlanResult {
  Plan plan;
  PlanStats stats;
};

struct IterationCapReached : Error {
  explicit IterationCapReached(const std::string& what, PlanStats s)
      : Error(what), stats(s) {}
  PlanStats stats;
};

// True iff any sampled tube ball intersects any obstacle. Positions are the
// leading scenario.position_dims coordinates; radii pair with the samples.
bool in_collision(const Scenario& scenario,
                  const std::vector<Eigen::VectorXd>& x_star_samples,
                  const std::vector<double>& radius_samples);

// Whether the control ball B(u_star, delta_u * eta_bar / factor) fits in D_u.
bool in_du(const domain::Region& d_u, const Eigen::VectorXd& u_star,
           double eta_bar, const tube::TubeConstants& constants);

// Whether the state tube ball B(x_star, eta_bar / factor) fits in D_x.
bool in_dx(const domain::Region& d_x, const Eigen::VectorXd& x_star,
           double eta_bar, const tube::TubeConstants& constants);

// One tree-growth iteration: sample a state, extend the nearest node with a
// random control, keep the edge only if every sub-sample passes the mode's
// checks and the edge makes progress toward the sampled state. Returns the
// new node's index, or -1 if the candidate was rejected.
int extend(Tree& tree, const Scenario& scenario, const PlanningProblem& problem,
           Rng& rng, PlanStats& stats);

// Grow a tree from x_init until an accepted edge enters the goal ball, then
// backtrack it into a Plan. Throws IterationCapReached (with statistics) when
// the cap is hit, and Error when the scenario start/goal are invalid.
PlanResult plan(const Scenario& scenario, const PlanningProblem& problem);

struct AuditReport {
  size_t fine_samples = 0;
  double max_eta_understatement = 0.0;  // recorded vs recomputed bound
  double min_obstacle_clearance = 0.0;
};

struct AuditFailed : Error {
  using Error::Error;
};

// Independently re-integrate the plan's edges at 10x finer sampling,
// re-propagate the error bound from eta_init, and re-run the collision and
// domain checks everywhere. Throws AuditFailed listing the violations; the
// recorded per-sample bound may overstate but never understate the recomputed
// one. The audit always applies the full checks regardless of planner mode.
AuditReport audit_plan(const Plan& plan, const Scenario& scenario,
                       const PlanningProblem& problem);

}  // namespace safed::planner
