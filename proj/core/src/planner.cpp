#include "safed/planner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include "safed/config.hpp"
#include "safed/textio.hpp"

namespace safed::planner {

namespace {

constexpr int kAuditRefinement = 10;     // fine sub-samples per plan interval
constexpr double kEtaSlackRel = 1e-3;    // allowed bound understatement
constexpr double kEtaSlackAbs = 1e-7;
constexpr double kStateTolAbs = 1e-6;    // recorded vs re-integrated states

double goal_distance(const Scenario& scenario, const Eigen::VectorXd& x) {
  if (scenario.goal_position_only) {
    return (x.head(scenario.position_dims) -
            scenario.x_goal.head(scenario.position_dims))
        .norm();
  }
  return (x - scenario.x_goal).norm();
}

// RK4 states of the learned dynamics under a constant control: x(0), x(h),
// ..., x(steps * h).
std::vector<Eigen::VectorXd> integrate_edge(
    const dynamics::LearnedDynamics& model, const Eigen::VectorXd& x0,
    const Eigen::VectorXd& u, double h, int steps) {
  std::vector<Eigen::VectorXd> states;
  states.reserve(static_cast<size_t>(steps) + 1);
  states.push_back(x0);
  Eigen::VectorXd x = x0;
  for (int i = 0; i < steps; ++i) {
    const Eigen::VectorXd k1 = model.eval(x, u);
    const Eigen::VectorXd k2 = model.eval(x + 0.5 * h * k1, u);
    const Eigen::VectorXd k3 = model.eval(x + 0.5 * h * k2, u);
    const Eigen::VectorXd k4 = model.eval(x + h * k3, u);
    x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    states.push_back(x);
  }
  return states;
}

// Error bounds along an edge for the mode: zero everywhere for Naive,
// tube propagation otherwise. Returns false if the bound diverged.
bool edge_bounds(const PlanningProblem& problem, double eta_from,
                 const std::vector<Eigen::VectorXd>& states,
                 const Eigen::VectorXd& u, double h,
                 std::vector<double>& etas) {
  if (problem.mode == Mode::Naive) {
    etas.assign(states.size(), 0.0);
    return true;
  }
  tube::TubeState from;
  from.eta_bar = eta_from;
  from.constants = problem.constants;
  tube::NominalSegment segment;
  segment.states = states;
  segment.u_star = u;
  segment.dt = h;
  try {
    etas = tube::propagate(from, problem.metric, problem.wnet, segment);
  } catch (const tube::NonFinite&) {
    return false;
  }
  return true;
}

std::vector<double> edge_radii(const PlanningProblem& problem,
                               const std::vector<double>& etas) {
  std::vector<double> radii(etas.size(), 0.0);
  if (problem.mode == Mode::Naive) return radii;
  tube::TubeState state;
  state.constants = problem.constants;
  for (size_t i = 0; i < etas.size(); ++i) {
    state.eta_bar = etas[i];
    radii[i] = tube::euclidean_radius(state);
  }
  return radii;
}

void check_positions(const Scenario& scenario) {
  for (const auto& s : scenario.spheres) {
    if (s.center.size() != scenario.position_dims) {
      throw Error("scenario: sphere obstacle dimension mismatch");
    }
    if (s.radius < 0.0) throw Error("scenario: negative obstacle radius");
  }
  for (const auto& b : scenario.boxes) {
    if (b.lower.size() != scenario.position_dims ||
        b.upper.size() != scenario.position_dims) {
      throw Error("scenario: box obstacle dimension mismatch");
    }
  }
}

// Distance from a position to the closest obstacle surface, minus the tube
// radius; negative means intersection.
double obstacle_clearance(const Scenario& scenario, const Eigen::VectorXd& pos,
                          double radius) {
  double clearance = std::numeric_limits<double>::infinity();
  for (const auto& s : scenario.spheres) {
    clearance = std::min(clearance, (pos - s.center).norm() - s.radius - radius);
  }
  for (const auto& b : scenario.boxes) {
    const Eigen::VectorXd clamped = pos.cwiseMax(b.lower).cwiseMin(b.upper);
    const double dist = (pos - clamped).norm();
    if (dist == 0.0) {
      // Inside the box: negative clearance by the depth to the nearest face.
      double depth = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < pos.size(); ++i) {
        depth = std::min(depth, std::min(pos[i] - b.lower[i],
                                         b.upper[i] - pos[i]));
      }
      clearance = std::min(clearance, -depth - radius);
    } else {
      clearance = std::min(clearance, dist - radius);
    }
  }
  return clearance;
}

struct EdgeSpan {
  size_t first_sample = 0;  // index of the edge's start sample
  int intervals = 0;        // number of dt/substeps intervals in the edge
};

// Per-edge sample spans of a dense plan; validates the sample count.
std::vector<EdgeSpan> edge_spans(const Plan& plan) {
  if (plan.samples.empty()) throw Error("plan: no samples");
  const long total = static_cast<long>(plan.samples.size()) - 1;
  const long edges = static_cast<long>(plan.controls.size());
  if (edges == 0) {
    if (total != 0) throw Error("plan: samples without controls");
    return {};
  }
  if (plan.substeps < 1) throw Error("plan: substeps must be >= 1");
  const long last = total - (edges - 1) * plan.substeps;
  if (last < 1 || last > plan.substeps) {
    throw Error("plan: sample count inconsistent with edges and substeps");
  }
  std::vector<EdgeSpan> spans;
  spans.reserve(static_cast<size_t>(edges));
  for (long e = 0; e < edges; ++e) {
    EdgeSpan span;
    span.first_sample = static_cast<size_t>(e * plan.substeps);
    span.intervals = static_cast<int>(e + 1 == edges ? last : plan.substeps);
    spans.push_back(span);
  }
  return spans;
}

}  // namespace

Mode parse_mode(const std::string& name) {
  if (name == "safed") return Mode::Safed;
  if (name == "naive") return Mode::Naive;
  if (name == "unsafe") return Mode::Unsafe;
  throw Error("unknown planner mode '" + name +
              "' (expected safed, naive, or unsafe)");
}

std::string mode_name(Mode mode) {
  switch (mode) {
    case Mode::Safed: return "safed";
    case Mode::Naive: return "naive";
    case Mode::Unsafe: return "unsafe";
  }
  throw Error("mode_name: invalid mode");
}

bool in_collision(const Scenario& scenario,
                  const std::vector<Eigen::VectorXd>& x_star_samples,
                  const std::vector<double>& radius_samples) {
  if (x_star_samples.size() != radius_samples.size()) {
    throw Error("in_collision: samples and radii sizes differ");
  }
  check_positions(scenario);
  for (size_t i = 0; i < x_star_samples.size(); ++i) {
    if (x_star_samples[i].size() < scenario.position_dims) {
      throw Error("in_collision: state smaller than position_dims");
    }
    const Eigen::VectorXd pos =
        x_star_samples[i].head(scenario.position_dims);
    const double radius = radius_samples[i];
    if (radius < 0.0) throw Error("in_collision: negative tube radius");
    for (const auto& s : scenario.spheres) {
      if ((pos - s.center).norm() < s.radius + radius) return true;
    }
    for (const auto& b : scenario.boxes) {
      const Eigen::VectorXd clamped = pos.cwiseMax(b.lower).cwiseMin(b.upper);
      const double dist = (pos - clamped).norm();
      if (dist == 0.0 || dist < radius) return true;
    }
  }
  return false;
}

bool in_du(const domain::Region& d_u, const Eigen::VectorXd& u_star,
           double eta_bar, const tube::TubeConstants& constants) {
  const double factor =
      conversion_factor(constants.lambda_min_m.value, constants.conversion);
  return domain::ball_in_domain(d_u, u_star,
                                constants.delta_u.value * eta_bar / factor);
}

bool in_dx(const domain::Region& d_x, const Eigen::VectorXd& x_star,
           double eta_bar, const tube::TubeConstants& constants) {
  const double factor =
      conversion_factor(constants.lambda_min_m.value, constants.conversion);
  return domain::ball_in_domain(d_x, x_star, eta_bar / factor);
}

int extend(Tree& tree, const Scenario& scenario,
           const PlanningProblem& problem, Rng& rng, PlanStats& stats) {
  if (tree.nodes.empty()) throw Error("extend: tree has no root");
  ++stats.iterations;

  const Eigen::VectorXd x_d = problem.d_x.sample(rng);
  int nearest = 0;
  double best = (tree.nodes[0].x - x_d).norm();
  for (int i = 1; i < static_cast<int>(tree.nodes.size()); ++i) {
    const double d = (tree.nodes[i].x - x_d).norm();
    if (d < best) {
      best = d;
      nearest = i;
    }
  }
  const PlanNode& from = tree.nodes[static_cast<size_t>(nearest)];

  const Eigen::VectorXd u_c = scenario.control_range.sample(rng);
  const double h = scenario.dt / scenario.substeps;
  const auto states =
      integrate_edge(problem.model, from.x, u_c, h, scenario.substeps);

  std::vector<double> etas;
  if (!edge_bounds(problem, from.eta_bar, states, u_c, h, etas)) {
    ++stats.rejected_diverged;
    return -1;
  }
  const auto radii = edge_radii(problem, etas);

  const bool tube_collision = problem.mode == Mode::Safed;
  std::vector<double> collision_radii =
      tube_collision ? radii : std::vector<double>(states.size(), 0.0);
  if (in_collision(scenario, states, collision_radii)) {
    ++stats.rejected_collision;
    return -1;
  }
  if (problem.mode != Mode::Naive) {
    for (size_t i = 0; i < states.size(); ++i) {
      if (!in_du(problem.d_u, u_c, etas[i], problem.constants)) {
        ++stats.rejected_du;
        return -1;
      }
    }
    for (size_t i = 0; i < states.size(); ++i) {
      if (!in_dx(problem.d_x, states[i], etas[i], problem.constants)) {
        ++stats.rejected_dx;
        return -1;
      }
    }
  }
  if (!((states.back() - x_d).norm() < best)) {
    ++stats.rejected_nearer;
    return -1;
  }

  PlanNode node;
  node.x = states.back();
  node.eta_bar = etas.back();
  node.parent = nearest;
  node.u_in = u_c;
  node.time = from.time + scenario.dt;
  tree.nodes.push_back(std::move(node));
  ++stats.accepted;
  stats.tree_size = tree.nodes.size();
  return static_cast<int>(tree.nodes.size()) - 1;
}

namespace {

// Dense samples of the chain ending at `leaf`, truncated `last_intervals`
// sub-samples into the final edge.
Plan build_plan(const Tree& tree, int leaf, int last_intervals,
                const Scenario& scenario, const PlanningProblem& problem) {
  std::vector<int> chain;
  for (int i = leaf; i >= 0; i = tree.nodes[static_cast<size_t>(i)].parent) {
    chain.push_back(i);
  }
  std::reverse(chain.begin(), chain.end());

  Plan plan;
  plan.dt = scenario.dt;
  plan.substeps = scenario.substeps;
  plan.goal_tolerance = scenario.goal_tolerance;
  plan.eta_init = tree.nodes[static_cast<size_t>(chain.front())].eta_bar;

  const double h = scenario.dt / scenario.substeps;
  const auto& root = tree.nodes[static_cast<size_t>(chain.front())];

  std::vector<double> root_eta{root.eta_bar};
  const auto root_radius = edge_radii(problem, root_eta);
  PlanSample start;
  start.time = 0.0;
  start.x_star = root.x;
  start.u_star = Eigen::VectorXd::Zero(problem.model.n_u);
  start.eta_bar = root.eta_bar;
  start.radius = root_radius[0];
  plan.samples.push_back(start);

  for (size_t e = 1; e < chain.size(); ++e) {
    const auto& node = tree.nodes[static_cast<size_t>(chain[e])];
    const bool last_edge = e + 1 == chain.size();
    const int intervals = last_edge ? last_intervals : scenario.substeps;
    const Eigen::VectorXd& x_from = plan.samples.back().x_star;
    const double eta_from = plan.samples.back().eta_bar;
    const double t_from = plan.samples.back().time;

    const auto states = integrate_edge(problem.model, x_from, node.u_in, h,
                                       scenario.substeps);
    std::vector<double> etas;
    if (!edge_bounds(problem, eta_from, states, node.u_in, h, etas)) {
      throw Error("build_plan: accepted edge no longer propagates");
    }
    const auto radii = edge_radii(problem, etas);

    plan.controls.push_back(node.u_in);
    plan.samples.back().u_star = node.u_in;
    for (int k = 1; k <= intervals; ++k) {
      PlanSample s;
      s.time = t_from + k * h;
      s.x_star = states[static_cast<size_t>(k)];
      s.u_star = node.u_in;
      s.eta_bar = etas[static_cast<size_t>(k)];
      s.radius = radii[static_cast<size_t>(k)];
      plan.samples.push_back(std::move(s));
    }
  }
  plan.terminal_radius = plan.samples.back().radius;
  return plan;
}

}  // namespace

PlanResult plan(const Scenario& scenario, const PlanningProblem& problem) {
  if (scenario.substeps < 1) throw Error("plan: substeps must be >= 1");
  if (!(scenario.dt > 0.0)) throw Error("plan: dt must be positive");
  if (scenario.max_iterations < 1) {
    throw Error("plan: max_iterations must be >= 1");
  }
  if (scenario.goal_tolerance < 0.0) {
    throw Error("plan: goal tolerance must be >= 0");
  }
  if (scenario.eta_init < 0.0) throw Error("plan: eta_init must be >= 0");
  if (scenario.x_init.size() != problem.model.n_x ||
      scenario.x_goal.size() != problem.model.n_x ||
      problem.d_x.dim() != problem.model.n_x) {
    throw Error("plan: state dimension mismatch");
  }
  if (scenario.control_range.dim() != problem.model.n_u ||
      problem.d_u.dim() != problem.model.n_u) {
    throw Error("plan: control dimension mismatch");
  }
  if (scenario.position_dims < 1 ||
      scenario.position_dims > problem.model.n_x) {
    throw Error("plan: position_dims out of range");
  }
  check_positions(scenario);

  Tree tree;
  PlanNode root;
  root.x = scenario.x_init;
  root.eta_bar = problem.mode == Mode::Naive ? 0.0 : scenario.eta_init;
  tree.nodes.push_back(root);

  std::vector<double> root_eta{root.eta_bar};
  const auto root_radius = edge_radii(problem, root_eta);
  if (problem.mode != Mode::Naive && !problem.d_x.contains(scenario.x_init)) {
    throw Error("plan: start state outside the trusted domain");
  }
  if (problem.mode != Mode::Naive &&
      !in_dx(problem.d_x, scenario.x_init, root.eta_bar, problem.constants)) {
    throw Error("plan: start tube exits the trusted domain");
  }
  const double start_check_radius =
      problem.mode == Mode::Safed ? root_radius[0] : 0.0;
  if (in_collision(scenario, {scenario.x_init}, {start_check_radius})) {
    throw Error("plan: start state in collision");
  }

  PlanStats stats;
  stats.tree_size = 1;

  if (goal_distance(scenario, scenario.x_init) <= scenario.goal_tolerance) {
    PlanResult result;
    result.plan = build_plan(tree, 0, 0, scenario, problem);
    result.stats = stats;
    return result;
  }

  Rng rng(splitmix64(scenario.seed ^ 0x5afed91aULL));
  const double h = scenario.dt / scenario.substeps;
  while (stats.iterations < scenario.max_iterations) {
    const int idx = extend(tree, scenario, problem, rng, stats);
    if (idx < 0) continue;
    // Scan the accepted edge for the first sample inside the goal ball.
    const auto& node = tree.nodes[static_cast<size_t>(idx)];
    const auto& from = tree.nodes[static_cast<size_t>(node.parent)];
    const auto states =
        integrate_edge(problem.model, from.x, node.u_in, h, scenario.substeps);
    for (int k = 1; k <= scenario.substeps; ++k) {
      if (goal_distance(scenario, states[static_cast<size_t>(k)]) <=
          scenario.goal_tolerance) {
        PlanResult result;
        result.plan = build_plan(tree, idx, k, scenario, problem);
        result.stats = stats;
        return result;
      }
    }
  }
  std::ostringstream msg;
  msg << "plan: iteration cap " << scenario.max_iterations
      << " reached (tree size " << tree.nodes.size() << ", accepted "
      << stats.accepted << ", rejected collision " << stats.rejected_collision
      << ", control-domain " << stats.rejected_du << ", state-domain "
      << stats.rejected_dx << ", no-progress " << stats.rejected_nearer
      << ", diverged " << stats.rejected_diverged << ")";
  throw IterationCapReached(msg.str(), stats);
}

AuditReport audit_plan(const Plan& plan, const Scenario& scenario,
                       const PlanningProblem& problem) {
  check_positions(scenario);
  const auto spans = edge_spans(plan);
  const double h = plan.substeps > 0 ? plan.dt / plan.substeps : 0.0;
  const double h_fine = h / kAuditRefinement;

  tube::TubeConstants constants = problem.constants;
  AuditReport report;
  std::ostringstream violations;
  long violation_count = 0;
  auto violation = [&](size_t edge, int fine_index, const std::string& what) {
    ++violation_count;
    if (violation_count <= 8) {
      violations << "\n  edge " << edge << " fine sample " << fine_index
                 << ": " << what;
    }
  };

  // The start sample: the scenario is ground truth for the initial state and
  // bound, so the audit propagates from it rather than the recorded values.
  if (plan.eta_init < scenario.eta_init - kEtaSlackAbs) {
    violation(0, 0, "recorded initial bound understates the scenario's");
  }
  if ((plan.samples.front().x_star - scenario.x_init).norm() >
      kStateTolAbs * (1.0 + scenario.x_init.norm())) {
    violation(0, 0, "plan does not start at the scenario's start state");
  }
  tube::TubeState state;
  state.constants = constants;
  state.eta_bar = scenario.eta_init;
  double radius0 = tube::euclidean_radius(state);
  report.min_obstacle_clearance = obstacle_clearance(
      scenario, scenario.x_init.head(scenario.position_dims), radius0);
  if (in_collision(scenario, {scenario.x_init}, {radius0})) {
    violation(0, 0, "start tube collides");
  }
  if (!in_dx(problem.d_x, scenario.x_init, scenario.eta_init, constants)) {
    violation(0, 0, "start tube exits the state domain");
  }
  report.fine_samples = 1;

  Eigen::VectorXd x = scenario.x_init;
  double eta = scenario.eta_init;
  double max_understatement = 0.0;

  for (size_t e = 0; e < spans.size(); ++e) {
    const EdgeSpan& span = spans[e];
    const Eigen::VectorXd& u = plan.controls[e];
    const int fine_steps = span.intervals * kAuditRefinement;
    const auto states = integrate_edge(problem.model, x, u, h_fine, fine_steps);

    std::vector<double> etas;
    tube::TubeState from;
    from.eta_bar = eta;
    from.constants = constants;
    tube::NominalSegment segment;
    segment.states = states;
    segment.u_star = u;
    segment.dt = h_fine;
    try {
      etas = tube::propagate(from, problem.metric, problem.wnet, segment);
    } catch (const tube::NonFinite&) {
      throw AuditFailed("audit: tracking bound diverges along edge " +
                        std::to_string(e));
    }

    for (int k = 1; k <= fine_steps; ++k) {
      state.eta_bar = etas[static_cast<size_t>(k)];
      const double radius = tube::euclidean_radius(state);
      const Eigen::VectorXd pos =
          states[static_cast<size_t>(k)].head(scenario.position_dims);
      report.min_obstacle_clearance = std::min(
          report.min_obstacle_clearance,
          obstacle_clearance(scenario, pos, radius));
      if (in_collision(scenario, {states[static_cast<size_t>(k)]}, {radius})) {
        violation(e, k, "tube collides with an obstacle");
      }
      if (!in_du(problem.d_u, u, etas[static_cast<size_t>(k)], constants)) {
        violation(e, k, "control tube exits the control domain");
      }
      if (!in_dx(problem.d_x, states[static_cast<size_t>(k)],
                 etas[static_cast<size_t>(k)], constants)) {
        violation(e, k, "state tube exits the state domain");
      }
      ++report.fine_samples;

      // Compare against the recorded sample at matching coarse indices.
      if (k % kAuditRefinement == 0) {
        const size_t coarse = span.first_sample +
                              static_cast<size_t>(k / kAuditRefinement);
        const PlanSample& rec = plan.samples[coarse];
        const double drift =
            (rec.x_star - states[static_cast<size_t>(k)]).norm();
        if (drift > kStateTolAbs * (1.0 + rec.x_star.norm())) {
          violation(e, k, "recorded state drifts from re-integration by " +
                              std::to_string(drift));
        }
        const double recomputed = etas[static_cast<size_t>(k)];
        const double understatement = recomputed - rec.eta_bar;
        max_understatement = std::max(max_understatement, understatement);
        if (understatement > kEtaSlackAbs + kEtaSlackRel * recomputed) {
          violation(e, k, "recorded bound understates the recomputed one (" +
                              std::to_string(rec.eta_bar) + " < " +
                              std::to_string(recomputed) + ")");
        }
      }
    }
    x = states.back();
    eta = etas.back();
  }
  report.max_eta_understatement = std::max(max_understatement, 0.0);

  if (goal_distance(scenario, plan.samples.back().x_star) >
      plan.goal_tolerance) {
    ++violation_count;
    violations << "\n  terminal sample misses the goal ball";
  }

  if (violation_count > 0) {
    std::ostringstream msg;
    msg << "audit: " << violation_count << " violation(s)"
        << violations.str();
    if (violation_count > 8) msg << "\n  ... and more";
    throw AuditFailed(msg.str());
  }
  return report;
}

void write_scenario(std::ostream& out, const Scenario& scenario) {
  Config cfg;
  auto vec_str = [](const Eigen::VectorXd& v) {
    std::ostringstream os;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (i) os << " ";
      os << textio::fmt(v[i]);
    }
    return os.str();
  };
  cfg.set("version", "1");
  cfg.set("position_dims", std::to_string(scenario.position_dims));
  cfg.set("x_init", vec_str(scenario.x_init));
  cfg.set("x_goal", vec_str(scenario.x_goal));
  cfg.set("goal_tolerance", textio::fmt(scenario.goal_tolerance));
  cfg.set("goal_position_only", scenario.goal_position_only ? "true" : "false");
  cfg.set("eta_init", textio::fmt(scenario.eta_init));
  cfg.set("dt", textio::fmt(scenario.dt));
  cfg.set("substeps", std::to_string(scenario.substeps));
  cfg.set("control_lower", vec_str(scenario.control_range.lower));
  cfg.set("control_upper", vec_str(scenario.control_range.upper));
  cfg.set("seed", std::to_string(scenario.seed));
  cfg.set("max_iterations", std::to_string(scenario.max_iterations));
  cfg.set("n_spheres", std::to_string(scenario.spheres.size()));
  for (size_t i = 0; i < scenario.spheres.size(); ++i) {
    Eigen::VectorXd row(scenario.spheres[i].center.size() + 1);
    row << scenario.spheres[i].center, scenario.spheres[i].radius;
    cfg.set("sphere_" + std::to_string(i), vec_str(row));
  }
  cfg.set("n_boxes", std::to_string(scenario.boxes.size()));
  for (size_t i = 0; i < scenario.boxes.size(); ++i) {
    Eigen::VectorXd row(scenario.boxes[i].lower.size() * 2);
    row << scenario.boxes[i].lower, scenario.boxes[i].upper;
    cfg.set("box_" + std::to_string(i), vec_str(row));
  }
  cfg.write(out);
}

Scenario read_scenario(std::istream& in) {
  const Config cfg = Config::from_stream(in);
  if (cfg.get_long("version") != 1) {
    throw FormatError("scenario: unsupported version");
  }
  Scenario s;
  s.position_dims = static_cast<int>(cfg.get_long("position_dims"));
  s.x_init = cfg.get_vector("x_init");
  s.x_goal = cfg.get_vector("x_goal");
  s.goal_tolerance = cfg.get_double("goal_tolerance");
  s.goal_position_only = cfg.get_bool("goal_position_only", false);
  s.eta_init = cfg.get_double("eta_init");
  s.dt = cfg.get_double("dt");
  s.substeps = static_cast<int>(cfg.get_long("substeps"));
  s.control_range = domain::Box(cfg.get_vector("control_lower"),
                                cfg.get_vector("control_upper"));
  s.seed = static_cast<uint64_t>(cfg.get_long("seed"));
  s.max_iterations = static_cast<int>(cfg.get_long("max_iterations"));
  const long n_spheres = cfg.get_long("n_spheres");
  for (long i = 0; i < n_spheres; ++i) {
    const Eigen::VectorXd row = cfg.get_vector("sphere_" + std::to_string(i));
    if (row.size() != s.position_dims + 1) {
      throw FormatError("scenario: sphere row has wrong width");
    }
    SphereObstacle sphere;
    sphere.center = row.head(s.position_dims);
    sphere.radius = row[s.position_dims];
    s.spheres.push_back(std::move(sphere));
  }
  const long n_boxes = cfg.get_long("n_boxes");
  for (long i = 0; i < n_boxes; ++i) {
    const Eigen::VectorXd row = cfg.get_vector("box_" + std::to_string(i));
    if (row.size() != 2 * s.position_dims) {
      throw FormatError("scenario: box row has wrong width");
    }
    BoxObstacle box;
    box.lower = row.head(s.position_dims);
    box.upper = row.tail(s.position_dims);
    s.boxes.push_back(std::move(box));
  }
  return s;
}

void write_plan(std::ostream& out, const Plan& plan) {
  if (plan.samples.empty()) throw Error("write_plan: no samples");
  const Eigen::Index n_x = plan.samples.front().x_star.size();
  const Eigen::Index n_u = plan.samples.front().u_star.size();
  out << "safed-plan-v1\n";
  out << n_x << " " << n_u << " " << plan.substeps << "\n";
  out << textio::fmt(plan.dt) << " " << textio::fmt(plan.goal_tolerance)
      << " " << textio::fmt(plan.terminal_radius) << " "
      << textio::fmt(plan.eta_init) << "\n";
  out << plan.controls.size() << "\n";
  for (const auto& u : plan.controls) textio::write_vector(out, u);
  out << plan.samples.size() << "\n";
  for (const auto& s : plan.samples) {
    out << textio::fmt(s.time);
    for (Eigen::Index i = 0; i < n_x; ++i) {
      out << " " << textio::fmt(s.x_star[i]);
    }
    for (Eigen::Index i = 0; i < n_u; ++i) {
      out << " " << textio::fmt(s.u_star[i]);
    }
    out << " " << textio::fmt(s.eta_bar) << " " << textio::fmt(s.radius)
        << "\n";
  }
}

Plan read_plan(std::istream& in) {
  textio::require_header(in, "safed-plan-v1");
  const auto dims = textio::split_ws(textio::read_line(in, "plan dims"));
  if (dims.size() != 3) throw FormatError("plan: bad dims line");
  const long n_x = textio::to_long(dims[0]);
  const long n_u = textio::to_long(dims[1]);
  Plan plan;
  plan.substeps = static_cast<int>(textio::to_long(dims[2]));
  const auto header = textio::split_ws(textio::read_line(in, "plan header"));
  if (header.size() != 4) throw FormatError("plan: bad header line");
  plan.dt = textio::to_double(header[0]);
  plan.goal_tolerance = textio::to_double(header[1]);
  plan.terminal_radius = textio::to_double(header[2]);
  plan.eta_init = textio::to_double(header[3]);
  const long n_controls =
      textio::to_long(textio::read_line(in, "plan control count"));
  for (long i = 0; i < n_controls; ++i) {
    plan.controls.push_back(textio::read_vector(in, "plan control"));
  }
  const long n_samples =
      textio::to_long(textio::read_line(in, "plan sample count"));
  for (long i = 0; i < n_samples; ++i) {
    const auto fields = textio::split_ws(textio::read_line(in, "plan sample"));
    if (static_cast<long>(fields.size()) != 1 + n_x + n_u + 2) {
      throw FormatError("plan: sample row has wrong width");
    }
    PlanSample s;
    s.time = textio::to_double(fields[0]);
    s.x_star.resize(n_x);
    for (long d = 0; d < n_x; ++d) {
      s.x_star[d] = textio::to_double(fields[static_cast<size_t>(1 + d)]);
    }
    s.u_star.resize(n_u);
    for (long d = 0; d < n_u; ++d) {
      s.u_star[d] =
          textio::to_double(fields[static_cast<size_t>(1 + n_x + d)]);
    }
    s.eta_bar = textio::to_double(fields[static_cast<size_t>(1 + n_x + n_u)]);
    s.radius =
        textio::to_double(fields[static_cast<size_t>(1 + n_x + n_u + 1)]);
    plan.samples.push_back(std::move(s));
  }
  return plan;
}

}  // namespace safed::planner
