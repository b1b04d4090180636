#include "safed/controller.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "safed/ccm.hpp"
#include "safed/common.hpp"
#include "safed/domain.hpp"
#include "safed/dynamics.hpp"
#include "safed/evt.hpp"

using namespace safed;
namespace ctl = safed::controller;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Linear model f = A x with g = [0; I] (controls drive the last derivatives).
dynamics::LearnedDynamics linear_tail_model(const MatrixXd& a, int n_u) {
  dynamics::LearnedDynamics m;
  m.n_x = static_cast<int>(a.rows());
  m.n_u = n_u;
  m.f_net = nets::Mlp({m.n_x, m.n_x}, {nets::Activation::Identity}, 1);
  VectorXd p = VectorXd::Zero(m.f_net.parameter_count());
  for (int r = 0; r < m.n_x; ++r) {
    for (int c = 0; c < m.n_x; ++c) p[r * m.n_x + c] = a(r, c);
  }
  m.f_net.set_parameters(p);
  m.g.kind = dynamics::GKind::InputTail;
  return m;
}

// Linear model f = A x with a constant control matrix B.
dynamics::LearnedDynamics linear_model(const MatrixXd& a, const MatrixXd& b) {
  dynamics::LearnedDynamics m =
      linear_tail_model(a, static_cast<int>(b.cols()));
  m.g.kind = dynamics::GKind::ConstantMatrix;
  m.g.constant = b;
  return m;
}

domain::Box box_of(int dim, double half) {
  return domain::Box(VectorXd::Constant(dim, -half),
                     VectorXd::Constant(dim, half));
}

// Double integrator with a solved-and-certified constant metric at rate 0.5.
ctl::TrackingController double_integrator_controller(double x_half,
                                                     double u_half) {
  MatrixXd a(2, 2);
  a << 0.0, 1.0, 0.0, 0.0;
  MatrixXd b(2, 1);
  b << 0.0, 1.0;
  auto model = linear_model(a, b);
  ccm::Metric metric = ccm::solve_constant_metric(model, 0.5);
  ccm::CertifyConfig cfg;
  cfg.seed = 7;
  ccm::certify(metric, model, box_of(2, 1.0), cfg);
  domain::TrustedDomain dom{box_of(2, x_half), box_of(1, u_half)};
  return ctl::make_controller(std::move(metric), std::move(model),
                              std::move(dom));
}

VectorXd random_state(Rng& rng, int dim, double half = 1.0) {
  VectorXd x(dim);
  for (int i = 0; i < dim; ++i) x[i] = rng.uniform(-half, half);
  return x;
}

}  // namespace

TEST_CASE("make_controller validates certification and dimensions") {
  MatrixXd a(2, 2);
  a << 0.0, 1.0, 0.0, 0.0;
  MatrixXd b(2, 1);
  b << 0.0, 1.0;
  auto model = linear_model(a, b);
  domain::TrustedDomain dom{box_of(2, 1.0), box_of(1, 1.0)};

  ccm::Metric uncertified = ccm::solve_constant_metric(model, 0.5);
  CHECK_THROWS_AS(ctl::make_controller(uncertified, model, dom), Error);

  ccm::Metric metric = ccm::solve_constant_metric(model, 0.5);
  ccm::CertifyConfig cfg;
  ccm::certify(metric, model, box_of(2, 1.0), cfg);

  domain::TrustedDomain bad_u{box_of(2, 1.0), box_of(3, 1.0)};
  CHECK_THROWS_AS(ctl::make_controller(metric, model, bad_u), Error);
  domain::TrustedDomain bad_x{box_of(4, 1.0), box_of(1, 1.0)};
  CHECK_THROWS_AS(ctl::make_controller(metric, model, bad_x), Error);
  CHECK_THROWS_AS(ctl::make_controller(metric, model, dom, 0), Error);

  const auto ctrl = ctl::make_controller(metric, model, dom);
  CHECK(ctrl.geodesic_segments == 8);
  CHECK_FALSE(ctrl.has_delta_u());
}

TEST_CASE("constant-metric geodesic distance is the metric norm") {
  // M = diag(4, 1) means W = M^{-1} = diag(0.25, 1).
  MatrixXd w(2, 2);
  w << 0.25, 0.0, 0.0, 1.0;
  const ccm::Metric metric = ccm::Metric::constant(w, 1.0);

  VectorXd x_star(2), x(2);
  x_star << 0.3, -0.2;
  x = x_star + Eigen::Vector2d(1.0, 0.0);
  CHECK(ctl::geodesic_distance(metric, x, x_star) == doctest::Approx(2.0));
  CHECK(ctl::geodesic_distance(metric, x_star, x_star) == 0.0);

  const auto path = ctl::geodesic_path(metric, x_star, x, 8);
  CHECK(path.waypoints.size() == 2);  // flat metric: one exact chord
  CHECK(path.sweep_lengths.size() == 1);
}

TEST_CASE("geodesic optimization never lengthens the path and refines "
          "monotonically") {
  const ccm::Metric metric = ccm::Metric::neural(2, {0, 1}, {8}, 7);
  Rng rng(501);
  for (int trial = 0; trial < 5; ++trial) {
    const VectorXd from = random_state(rng, 2);
    const VectorXd to = random_state(rng, 2);

    const auto coarse = ctl::geodesic_path(metric, from, to, 8);
    REQUIRE(coarse.waypoints.size() == 9);
    CHECK((coarse.waypoints.front() - from).norm() == 0.0);
    CHECK((coarse.waypoints.back() - to).norm() == 0.0);
    // Coordinate descent only ever accepts improving moves.
    for (size_t i = 1; i < coarse.sweep_lengths.size(); ++i) {
      CHECK(coarse.sweep_lengths[i] <= coarse.sweep_lengths[i - 1] + 1e-12);
    }
    CHECK(coarse.length <= coarse.sweep_lengths.front() + 1e-12);

    // Refinement: doubling the waypoint count cannot lengthen the result.
    const auto fine = ctl::geodesic_path(metric, from, to, 16);
    CHECK(fine.length <= coarse.length * (1.0 + 1e-6));
  }

  // Input validation.
  CHECK_THROWS_AS(
      ctl::geodesic_path(metric, VectorXd::Zero(3), VectorXd::Zero(2), 8),
      Error);
  CHECK_THROWS_AS(
      ctl::geodesic_path(metric, VectorXd::Zero(2), VectorXd::Zero(2), 0),
      Error);
}

TEST_CASE("min-norm step closed form") {
  VectorXd b(2);
  b << 0.0, 2.0;
  const VectorXd step = ctl::min_norm_step(1.0, b);
  CHECK(step(0) == doctest::Approx(0.0));
  CHECK(step(1) == doctest::Approx(-0.5));
  CHECK(1.0 + b.dot(step) == doctest::Approx(0.0));  // constraint tight

  CHECK(ctl::min_norm_step(-1.0, b).norm() == 0.0);
  CHECK(ctl::min_norm_step(0.0, b).norm() == 0.0);
  CHECK_THROWS_AS(ctl::min_norm_step(1.0, VectorXd::Zero(2)), Error);
}

TEST_CASE("min-norm step beats every feasible alternative") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const double a = rng.uniform(0.1, 3.0);
    VectorXd b(3);
    for (int i = 0; i < 3; ++i) b(i) = rng.normal();
    if (b.norm() < 1e-3) continue;
    const VectorXd u_fb = ctl::min_norm_step(a, b);
    CHECK(a + b.dot(u_fb) == doctest::Approx(0.0).epsilon(1e-9));
    for (int k = 0; k < 20; ++k) {
      VectorXd u(3);
      for (int i = 0; i < 3; ++i) u(i) = rng.normal();
      // Project the draw onto the feasible half-space a + b^T u <= 0.
      const double excess = a + b.dot(u);
      if (excess > 0.0) u -= (excess / b.squaredNorm()) * b;
      CHECK(u.norm() >= u_fb.norm() - 1e-12);
    }
  }
}

TEST_CASE("feedback returns the nominal command when contraction already "
          "holds") {
  const auto ctrl = double_integrator_controller(10.0, 100.0);
  Rng rng(11);

  // Zero tracking error never triggers a correction.
  const VectorXd x0 = random_state(rng, 2);
  const VectorXd u0 = random_state(rng, 1);
  CHECK((ctl::feedback(ctrl, x0, x0, u0) - u0).norm() == 0.0);

  int inactive = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const VectorXd x_star = random_state(rng, 2);
    const VectorXd x = random_state(rng, 2);
    const VectorXd u_star = random_state(rng, 1);
    const auto terms = ctl::feedback_terms(ctrl, x, x_star, u_star);
    if (terms.a <= 0.0) {
      ++inactive;
      CHECK(terms.u_fb.norm() == 0.0);
      CHECK((ctl::feedback(ctrl, x, x_star, u_star) - u_star).norm() == 0.0);
    } else {
      // Active constraint lands exactly tight under the closed form.
      CHECK(terms.a + terms.b.dot(terms.u_fb) ==
            doctest::Approx(0.0).epsilon(1e-9));
    }
  }
  CHECK(inactive > 0);
  CHECK(inactive < 200);  // both regimes exercised
}

TEST_CASE("closed-loop tracking contracts at the certified rate") {
  const auto ctrl = double_integrator_controller(10.0, 100.0);
  const double lambda = ctrl.metric.certified().lambda_rate;
  REQUIRE(lambda == doctest::Approx(0.5));

  MatrixXd a(2, 2);
  a << 0.0, 1.0, 0.0, 0.0;
  MatrixXd b(2, 1);
  b << 0.0, 1.0;
  const VectorXd u_star = VectorXd::Zero(1);

  VectorXd x_star(2), x(2);
  x_star << 0.5, -0.3;
  x = x_star + Eigen::Vector2d(0.8, 0.6);

  // Coupled flow of the tracker and the nominal trajectory.
  auto flow = [&](const VectorXd& xs, const VectorXd& xss) {
    const VectorXd u = ctl::feedback(ctrl, xs, xss, u_star);
    VectorXd out(4);
    out.head(2) = a * xs + b * u;
    out.tail(2) = a * xss;
    return out;
  };

  const double d0 = ctl::geodesic_distance(ctrl.metric, x, x_star);
  const double dt = 1e-3;
  const int steps = 2000;
  for (int s = 1; s <= steps; ++s) {
    const VectorXd k1 = flow(x, x_star);
    const VectorXd k2 =
        flow(x + 0.5 * dt * k1.head(2), x_star + 0.5 * dt * k1.tail(2));
    const VectorXd k3 =
        flow(x + 0.5 * dt * k2.head(2), x_star + 0.5 * dt * k2.tail(2));
    const VectorXd k4 = flow(x + dt * k3.head(2), x_star + dt * k3.tail(2));
    const VectorXd inc = (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    x += inc.head(2);
    x_star += inc.tail(2);

    const double d = ctl::geodesic_distance(ctrl.metric, x, x_star);
    const double envelope = d0 * std::exp(-lambda * s * dt) * (1.0 + 1e-3);
    CHECK(d <= envelope);
  }
  CHECK(ctl::geodesic_distance(ctrl.metric, x, x_star) <
        0.5 * d0);  // two time constants gone
}

TEST_CASE("feedback gain samples are invariant to the tracking-error scale") {
  const auto ctrl = double_integrator_controller(10.0, 100.0);
  Rng rng(31);
  VectorXd u_star(1);
  u_star << 0.7;
  const VectorXd x_star = Eigen::Vector2d(0.2, -0.4);

  // Find a direction with an active constraint and one with an inactive one.
  VectorXd active_dir, inactive_dir;
  for (int k = 0; k < 200 && (!active_dir.size() || !inactive_dir.size());
       ++k) {
    const VectorXd v = random_state(rng, 2);
    if (v.norm() < 1e-6) continue;
    const auto terms = ctl::feedback_terms(ctrl, x_star + v, x_star, u_star);
    if (terms.a > 0.0 && !active_dir.size()) active_dir = v;
    if (terms.a <= 0.0 && !inactive_dir.size()) inactive_dir = v;
  }
  REQUIRE(active_dir.size() == 2);
  REQUIRE(inactive_dir.size() == 2);

  // Active case: a is quadratic and b linear in the error, so the gain
  // sample depends only on the error direction.
  const double base =
      ctl::delta_u_sample(ctrl, x_star + active_dir, x_star, u_star);
  CHECK(base > 0.0);
  for (const double c : {0.2, 3.0, 11.0}) {
    const double scaled =
        ctl::delta_u_sample(ctrl, x_star + c * active_dir, x_star, u_star);
    CHECK(scaled == doctest::Approx(base).epsilon(1e-9));
  }

  // Inactive case: zero correction, zero sample.
  CHECK(ctl::delta_u_sample(ctrl, x_star + inactive_dir, x_star, u_star) ==
        0.0);

  CHECK_THROWS_AS(ctl::delta_u_sample(ctrl, x_star, x_star, u_star), Error);
}

TEST_CASE("vanishing constraint gradient falls back to the nominal command") {
  // A model the controls cannot influence (g identically zero) with a
  // hand-attached over-optimistic rate: the constraint activates but its
  // gradient is exactly zero, which is the logged fallback path.
  auto model = linear_model(-MatrixXd::Identity(2, 2), MatrixXd::Zero(2, 1));
  ccm::Metric metric = ccm::Metric::constant(MatrixXd::Identity(2, 2), 0.5);
  ccm::CertifiedConstants cc;
  cc.lambda_rate_bound = evt::exact_constant(
      1.5, evt::BoundKind::LowerBound, "lambda_rate", "manual");
  cc.lambda_rate = 1.5;
  cc.c1_bar = evt::exact_constant(-0.1, evt::BoundKind::UpperBound, "c1_bar",
                                  "manual");
  cc.lambda_min_m = evt::exact_constant(1.0, evt::BoundKind::LowerBound,
                                        "lambda_min_m", "manual");
  cc.m_upper_alpha = evt::exact_constant(1.0, evt::BoundKind::UpperBound,
                                         "m_upper_alpha", "manual");
  cc.m_upper = MatrixXd::Identity(2, 2);
  metric.set_certified(std::move(cc));

  domain::TrustedDomain dom{box_of(2, 2.0), box_of(1, 1.0)};
  const auto ctrl = ctl::make_controller(metric, model, dom);

  const VectorXd x_star = VectorXd::Zero(2);
  const VectorXd x = Eigen::Vector2d(1.0, 0.0);
  VectorXd u_star(1);
  u_star << 0.3;

  const auto terms = ctl::feedback_terms(ctrl, x, x_star, u_star);
  CHECK(terms.a > 0.0);
  CHECK(terms.b.norm() == 0.0);
  CHECK(terms.infeasible);
  CHECK(terms.u_fb.norm() == 0.0);

  ctl::ControllerLog log;
  CHECK((ctl::feedback(ctrl, x, x_star, u_star, &log) - u_star).norm() == 0.0);
  CHECK(log.infeasible == 1);
  CHECK(log.saturated == 0);
}

TEST_CASE("saturated commands are clamped to the control box and logged") {
  const auto ctrl = double_integrator_controller(10.0, 0.01);
  Rng rng(13);
  ctl::ControllerLog log;
  bool clamped_once = false;
  for (int trial = 0; trial < 100; ++trial) {
    const VectorXd x_star = random_state(rng, 2, 2.0);
    const VectorXd x = random_state(rng, 2, 2.0);
    const VectorXd u_star = random_state(rng, 1, 0.01);
    const VectorXd u = ctl::feedback(ctrl, x, x_star, u_star, &log);
    CHECK(ctrl.dom.u.contains(u));
    const auto terms = ctl::feedback_terms(ctrl, x, x_star, u_star);
    if ((u_star + terms.u_fb - u).norm() > 0.0) clamped_once = true;
  }
  CHECK(clamped_once);
  CHECK(log.saturated > 0);
}

TEST_CASE("estimated feedback gain bounds fresh samples") {
  auto ctrl = double_integrator_controller(1.0, 2.0);
  evt::EstimateConfig cfg;
  cfg.source = "controller-test";
  const auto bound = ctl::estimate_delta_u(ctrl, 0.5, cfg, 1);

  CHECK(bound.kind == evt::BoundKind::UpperBound);
  CHECK(bound.name == "delta_u");
  CHECK_FALSE(bound.exact);
  CHECK(bound.valid());
  CHECK(bound.value > 0.0);
  REQUIRE(ctrl.has_delta_u());
  CHECK(ctrl.delta_u.value == bound.value);

  // Fresh draws from the same tracking-configuration distribution: the bound
  // may be exceeded on at most about 1 - psi of them.
  Rng rng(123);
  const Eigen::MatrixXd theta =
      ccm::metric_at(ctrl.metric, VectorXd::Zero(2)).theta;
  const int n = 100000;
  int violations = 0;
  int drawn = 0;
  while (drawn < n) {
    const VectorXd x_star = ctrl.dom.x.sample(rng);
    VectorXd z(2);
    z << rng.normal(), rng.normal();
    if (z.norm() == 0.0) continue;
    const double r = 0.5 * std::sqrt(rng.uniform()) / z.norm();
    const VectorXd x =
        x_star + theta.triangularView<Eigen::Lower>().solve(r * z);
    if (!ctrl.dom.x.contains(x) || (x - x_star).norm() == 0.0) continue;
    const VectorXd u_star = ctrl.dom.u.sample(rng);
    ++drawn;
    if (ctl::delta_u_sample(ctrl, x, x_star, u_star) > bound.value)
      ++violations;
  }
  CHECK(violations <= (1.0 - cfg.psi + 0.02) * n);
}

TEST_CASE("neural-metric controller tracks a contracting nominal") {
  const auto model = linear_tail_model(-2.0 * MatrixXd::Identity(2, 2), 1);
  ccm::Metric metric = ccm::Metric::neural(2, {0}, {8}, 6);
  ccm::CertifyConfig cfg;
  cfg.seed = 404;
  ccm::certify(metric, model, box_of(2, 1.0), cfg);

  domain::TrustedDomain dom{box_of(2, 1.0), box_of(1, 5.0)};
  const auto ctrl = ctl::make_controller(metric, model, dom);

  const VectorXd u_star = VectorXd::Zero(1);
  VectorXd x_star = Eigen::Vector2d(0.3, -0.2);
  VectorXd x = x_star + Eigen::Vector2d(0.4, 0.3);

  // Zero error keeps the nominal command, neural metric included.
  CHECK((ctl::feedback(ctrl, x_star, x_star, u_star) - u_star).norm() == 0.0);

  auto flow = [&](const VectorXd& xs, const VectorXd& xss) {
    const VectorXd u = ctl::feedback(ctrl, xs, xss, u_star);
    VectorXd out(4);
    out.head(2) = ctrl.model.eval(xs, u);
    out.tail(2) = ctrl.model.eval(xss, u_star);
    return out;
  };

  const double d0 = ctl::geodesic_distance(ctrl.metric, x, x_star);
  REQUIRE(d0 > 0.0);
  const double dt = 1e-3;
  for (int s = 0; s < 500; ++s) {
    const VectorXd k1 = flow(x, x_star);
    const VectorXd k2 =
        flow(x + 0.5 * dt * k1.head(2), x_star + 0.5 * dt * k1.tail(2));
    const VectorXd k3 =
        flow(x + 0.5 * dt * k2.head(2), x_star + 0.5 * dt * k2.tail(2));
    const VectorXd k4 = flow(x + dt * k3.head(2), x_star + dt * k3.tail(2));
    const VectorXd inc = (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    x += inc.head(2);
    x_star += inc.tail(2);
  }
  // The plant contracts at Euclidean rate 2; half a second must shrink the
  // metric distance well below half.
  CHECK(ctl::geodesic_distance(ctrl.metric, x, x_star) < 0.5 * d0);
}
