#include "safed/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <sstream>

#include "safed/textio.hpp"

namespace safed::sim {

namespace {

constexpr uint64_t kCollectSalt = 0xc011ec7ULL;
constexpr uint64_t kExecuteSalt = 0xe8ec57a7eULL;

void check_finite(const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
  if (!x.allFinite() || !u.allFinite()) {
    throw Error("true system: non-finite state or control");
  }
}

Eigen::VectorXd rk4_drift(const TrueSystem& sys, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& u, double dt) {
  const Eigen::VectorXd k1 = sys.deterministic(x, u);
  const Eigen::VectorXd k2 = sys.deterministic(x + 0.5 * dt * k1, u);
  const Eigen::VectorXd k3 = sys.deterministic(x + 0.5 * dt * k2, u);
  const Eigen::VectorXd k4 = sys.deterministic(x + dt * k3, u);
  return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace

Variant parse_variant(const std::string& name) {
  if (name == "unicycle") return Variant::Unicycle5D;
  if (name == "quadrotor") return Variant::Quadrotor10D;
  if (name == "linear") return Variant::LinearTest;
  throw Error("unknown system variant '" + name +
              "' (expected unicycle, quadrotor, or linear)");
}

std::string variant_name(Variant variant) {
  switch (variant) {
    case Variant::Unicycle5D: return "unicycle";
    case Variant::Quadrotor10D: return "quadrotor";
    case Variant::LinearTest: return "linear";
  }
  throw Error("variant_name: invalid variant");
}

int TrueSystem::n_x() const {
  switch (variant) {
    case Variant::Unicycle5D: return 5;
    case Variant::Quadrotor10D: return 10;
    case Variant::LinearTest: return static_cast<int>(a.rows());
  }
  throw Error("n_x: invalid variant");
}

int TrueSystem::n_u() const {
  switch (variant) {
    case Variant::Unicycle5D: return 2;
    case Variant::Quadrotor10D: return 3;
    case Variant::LinearTest: return static_cast<int>(b.cols());
  }
  throw Error("n_u: invalid variant");
}

Eigen::VectorXd TrueSystem::deterministic(const Eigen::VectorXd& x,
                                          const Eigen::VectorXd& u) const {
  check_finite(x, u);
  if (x.size() != n_x() || u.size() != n_u()) {
    throw Error("true system: state or control dimension mismatch");
  }
  Eigen::VectorXd dx(x.size());
  switch (variant) {
    case Variant::Unicycle5D: {
      // States: position (x, y), heading, speed, turn rate. The slip term
      // drags the velocity sideways in proportion to speed times turn rate.
      const double c = std::cos(x[2]);
      const double s = std::sin(x[2]);
      const double lateral = slip * x[3] * x[4];
      dx[0] = x[3] * c - lateral * s;
      dx[1] = x[3] * s + lateral * c;
      dx[2] = x[4];
      dx[3] = u[0];
      dx[4] = u[1];
      break;
    }
    case Variant::Quadrotor10D: {
      // States: position (3), velocity (3), roll, pitch, roll rate,
      // pitch rate. Controls: vertical acceleration, two angular torques.
      dx.segment(0, 3) = x.segment(3, 3);
      dx[3] = tilt_gain * std::sin(x[7]);
      dx[4] = -tilt_gain * std::sin(x[6]);
      dx[5] = u[0];
      dx[6] = x[8];
      dx[7] = x[9];
      dx[8] = u[1];
      dx[9] = u[2];
      break;
    }
    case Variant::LinearTest:
      dx = a * x + b * u;
      break;
  }
  return dx;
}

Eigen::VectorXd TrueSystem::noise_bound(const Eigen::VectorXd& x) const {
  switch (variant) {
    case Variant::Unicycle5D: {
      if (noise_base.size() != 5) {
        throw Error("unicycle: noise_base must have 5 entries");
      }
      Eigen::VectorXd bound = noise_base;
      if (patch && patch->area.contains(x.head(2))) {
        bound *= patch->multiplier;
      }
      return bound;
    }
    case Variant::Quadrotor10D: {
      Eigen::VectorXd bound = Eigen::VectorXd::Zero(10);
      bound[1] = 0.01;
      bound[2] = 0.01;
      bound[3] = 0.01;
      bound[4] = std::abs(0.05 * std::sin(x[0]));
      bound[5] = std::abs(0.05 * std::cos(x[1]));
      bound[6] = std::abs(0.05 * std::sin(x[2]));
      bound[7] = std::abs(0.07 * std::sin(x[6]));
      bound[8] = std::abs(0.07 * std::cos(x[7]));
      bound[9] = std::abs(0.07 * std::sin(x[8]));
      return bound;
    }
    case Variant::LinearTest:
      if (noise_base.size() != a.rows()) {
        throw Error("linear system: noise_base size mismatch");
      }
      return noise_base;
  }
  throw Error("noise_bound: invalid variant");
}

TrueSystem unicycle_system() {
  TrueSystem sys;
  sys.variant = Variant::Unicycle5D;
  sys.slip = 0.1;
  sys.noise_base = Eigen::VectorXd(5);
  sys.noise_base << 0.005, 0.005, 0.01, 0.02, 0.02;
  RoughPatch patch;
  Eigen::VectorXd lo(2), hi(2);
  lo << -2.5, -2.1;
  hi << -1.25, 0.3;
  patch.area = domain::Box(lo, hi);
  patch.multiplier = 5.0;
  sys.patch = patch;
  return sys;
}

TrueSystem quadrotor_system() {
  TrueSystem sys;
  sys.variant = Variant::Quadrotor10D;
  sys.tilt_gain = 9.8;
  return sys;
}

TrueSystem linear_system(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                         const Eigen::VectorXd& noise_amplitude) {
  if (a.rows() != a.cols()) throw Error("linear system: A must be square");
  if (b.rows() != a.rows()) throw Error("linear system: B row mismatch");
  if (noise_amplitude.size() != a.rows()) {
    throw Error("linear system: noise amplitude size mismatch");
  }
  if ((noise_amplitude.array() < 0.0).any()) {
    throw Error("linear system: noise amplitude must be non-negative");
  }
  TrueSystem sys;
  sys.variant = Variant::LinearTest;
  sys.a = a;
  sys.b = b;
  sys.noise_base = noise_amplitude;
  return sys;
}

domain::TrustedDomain unicycle_domain() {
  const double pi = std::numbers::pi;
  Eigen::VectorXd xlo(5), xhi(5), ulo(2), uhi(2);
  xlo << -4.2, -3.1, -pi, 0.3, -1.25;
  xhi << 3.2, 3.1, pi, 1.2, 1.25;
  ulo << -0.6, -0.8;
  uhi << 0.6, 0.8;
  domain::TrustedDomain dom;
  dom.x = domain::Box(xlo, xhi);
  dom.u = domain::Box(ulo, uhi);
  return dom;
}

Eigen::VectorXd true_step(const TrueSystem& sys, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& u, double dt, Rng& rng) {
  check_finite(x, u);
  if (!(dt > 0.0)) throw Error("true_step: dt must be positive");
  Eigen::VectorXd next = rk4_drift(sys, x, u, dt);
  const Eigen::VectorXd bound = sys.noise_bound(x);
  for (Eigen::Index i = 0; i < next.size(); ++i) {
    next[i] += dt * rng.uniform(-bound[i], bound[i]);
  }
  return next;
}

CollectedData collect_random(const TrueSystem& sys, int n_points,
                             const domain::TrustedDomain& dom,
                             const CollectConfig& cfg, uint64_t seed) {
  if (cfg.rollout_length < 2) {
    throw Error("collect_random: rollouts need at least 2 steps");
  }
  if (!(cfg.dt > 0.0)) throw Error("collect_random: dt must be positive");
  if (cfg.split_ratio < 1) {
    throw Error("collect_random: split_ratio must be >= 1");
  }
  if (dom.x.dim() != sys.n_x() || dom.u.dim() != sys.n_u()) {
    throw Error("collect_random: domain dimension mismatch");
  }

  CollectedData out;
  out.train.n_x = out.val.n_x = sys.n_x();
  out.train.n_u = out.val.n_u = sys.n_u();
  out.train.role = "S";
  out.val.role = "V";
  if (n_points <= 0) return out;

  Rng rng(splitmix64(seed ^ kCollectSalt));
  long total = 0;
  long empty_rollouts = 0;
  while (total < n_points) {
    const Eigen::VectorXd u = dom.u.sample(rng);
    std::vector<Eigen::VectorXd> traj;
    traj.push_back(dom.x.sample(rng));
    for (int k = 0; k < cfg.rollout_length; ++k) {
      traj.push_back(true_step(sys, traj.back(), u, cfg.dt, rng));
    }
    const long before = total;
    for (size_t k = 1; k + 1 < traj.size() && total < n_points; ++k) {
      // Keep the derivative label honest: the whole central-difference
      // stencil must lie inside the trusted domain.
      if (!dom.x.contains(traj[k - 1]) || !dom.x.contains(traj[k]) ||
          !dom.x.contains(traj[k + 1])) {
        continue;
      }
      dynamics::Record record;
      record.x = traj[k];
      record.u = u;
      record.xdot = cfg.exact_derivatives
                        ? sys.deterministic(traj[k], u)
                        : ((traj[k + 1] - traj[k - 1]) / (2.0 * cfg.dt)).eval();
      const bool to_val =
          total % (cfg.split_ratio + 1) == cfg.split_ratio;
      (to_val ? out.val : out.train).records.push_back(std::move(record));
      ++total;
    }
    empty_rollouts = total == before ? empty_rollouts + 1 : 0;
    if (empty_rollouts > 10000) {
      throw Error("collect_random: rollouts keep leaving the domain");
    }
  }
  return out;
}

Execution execute(const TrueSystem& sys, const planner::Plan& plan,
                  const controller::TrackingController& ctrl,
                  const planner::Scenario& scenario,
                  const domain::Region& d_x, uint64_t seed) {
  if (plan.samples.empty()) throw Error("execute: plan has no samples");
  if (sys.n_x() != ctrl.model.n_x || sys.n_u() != ctrl.model.n_u) {
    throw Error("execute: system and controller dimensions differ");
  }
  if (plan.samples.front().x_star.size() != sys.n_x()) {
    throw Error("execute: plan state dimension mismatch");
  }
  const double h = plan.substeps > 0 ? plan.dt / plan.substeps : 0.0;
  if (plan.samples.size() > 1 && !(h > 0.0)) {
    throw Error("execute: plan step must be positive");
  }

  Rng rng(splitmix64(seed ^ kExecuteSalt));
  Execution out;
  Eigen::VectorXd x = plan.samples.front().x_star;
  double err_sum = 0.0;
  long contained = 0;

  for (size_t k = 0; k < plan.samples.size(); ++k) {
    const planner::PlanSample& ps = plan.samples[k];
    ExecSample s;
    s.time = ps.time;
    s.x = x;
    s.x_star = ps.x_star;
    s.eta_bar = ps.eta_bar;
    s.err_euclid = (x - ps.x_star).norm();
    s.err_metric = controller::geodesic_distance(ctrl.metric, x, ps.x_star,
                                                 ctrl.geodesic_segments);
    s.contained = s.err_metric <= ps.eta_bar + 1e-12;
    s.collided = planner::in_collision(scenario, {x}, {0.0});
    s.dx_exit = !d_x.contains(x);
    s.u = controller::feedback(ctrl, x, ps.x_star, ps.u_star,
                               &out.control_log);

    err_sum += s.err_euclid;
    out.max_tracking_error = std::max(out.max_tracking_error, s.err_euclid);
    contained += s.contained ? 1 : 0;
    out.collisions += s.collided ? 1 : 0;
    out.dx_exits += s.dx_exit ? 1 : 0;

    if (k + 1 < plan.samples.size()) {
      x = true_step(sys, x, s.u, h, rng);
    }
    out.samples.push_back(std::move(s));
  }

  const double n = static_cast<double>(out.samples.size());
  out.mean_tracking_error = err_sum / n;
  out.containment_fraction = static_cast<double>(contained) / n;
  if (scenario.goal_position_only) {
    out.goal_error = (x.head(scenario.position_dims) -
                      scenario.x_goal.head(scenario.position_dims))
                         .norm();
  } else {
    out.goal_error = (x - scenario.x_goal).norm();
  }
  return out;
}

void write_execution(std::ostream& out, const Execution& exec) {
  if (exec.samples.empty()) throw Error("write_execution: no samples");
  const Eigen::Index n_x = exec.samples.front().x.size();
  const Eigen::Index n_u = exec.samples.front().u.size();
  out << "safed-execution-v1\n";
  out << n_x << " " << n_u << " " << exec.samples.size() << "\n";
  out << textio::fmt(exec.mean_tracking_error) << " "
      << textio::fmt(exec.max_tracking_error) << " "
      << textio::fmt(exec.goal_error) << " "
      << textio::fmt(exec.containment_fraction) << " " << exec.collisions
      << " " << exec.dx_exits << " " << exec.control_log.infeasible << " "
      << exec.control_log.saturated << "\n";
  for (const auto& s : exec.samples) {
    out << textio::fmt(s.time);
    for (Eigen::Index i = 0; i < n_x; ++i) out << " " << textio::fmt(s.x[i]);
    for (Eigen::Index i = 0; i < n_x; ++i) {
      out << " " << textio::fmt(s.x_star[i]);
    }
    for (Eigen::Index i = 0; i < n_u; ++i) out << " " << textio::fmt(s.u[i]);
    out << " " << textio::fmt(s.eta_bar) << " " << textio::fmt(s.err_euclid)
        << " " << textio::fmt(s.err_metric) << " " << (s.contained ? 1 : 0)
        << " " << (s.collided ? 1 : 0) << " " << (s.dx_exit ? 1 : 0) << "\n";
  }
}

Execution read_execution(std::istream& in) {
  textio::require_header(in, "safed-execution-v1");
  const auto dims = textio::split_ws(textio::read_line(in, "execution dims"));
  if (dims.size() != 3) throw FormatError("execution: bad dims line");
  const long n_x = textio::to_long(dims[0]);
  const long n_u = textio::to_long(dims[1]);
  const long n_samples = textio::to_long(dims[2]);
  Execution exec;
  const auto head =
      textio::split_ws(textio::read_line(in, "execution metrics"));
  if (head.size() != 8) throw FormatError("execution: bad metrics line");
  exec.mean_tracking_error = textio::to_double(head[0]);
  exec.max_tracking_error = textio::to_double(head[1]);
  exec.goal_error = textio::to_double(head[2]);
  exec.containment_fraction = textio::to_double(head[3]);
  exec.collisions = textio::to_long(head[4]);
  exec.dx_exits = textio::to_long(head[5]);
  exec.control_log.infeasible = textio::to_long(head[6]);
  exec.control_log.saturated = textio::to_long(head[7]);
  for (long i = 0; i < n_samples; ++i) {
    const auto f =
        textio::split_ws(textio::read_line(in, "execution sample"));
    if (static_cast<long>(f.size()) != 1 + 2 * n_x + n_u + 6) {
      throw FormatError("execution: sample row has wrong width");
    }
    ExecSample s;
    size_t at = 0;
    s.time = textio::to_double(f[at++]);
    s.x.resize(n_x);
    for (long d = 0; d < n_x; ++d) s.x[d] = textio::to_double(f[at++]);
    s.x_star.resize(n_x);
    for (long d = 0; d < n_x; ++d) s.x_star[d] = textio::to_double(f[at++]);
    s.u.resize(n_u);
    for (long d = 0; d < n_u; ++d) s.u[d] = textio::to_double(f[at++]);
    s.eta_bar = textio::to_double(f[at++]);
    s.err_euclid = textio::to_double(f[at++]);
    s.err_metric = textio::to_double(f[at++]);
    s.contained = textio::to_long(f[at++]) != 0;
    s.collided = textio::to_long(f[at++]) != 0;
    s.dx_exit = textio::to_long(f[at++]) != 0;
    exec.samples.push_back(std::move(s));
  }
  return exec;
}

}  // namespace safed::sim
