#include "safed/ccm.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "safed/common.hpp"
#include "safed/domain.hpp"
#include "safed/dynamics.hpp"

using namespace safed;
using namespace safed::ccm;
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
  dynamics::LearnedDynamics m = linear_tail_model(a, static_cast<int>(b.cols()));
  m.g.kind = dynamics::GKind::ConstantMatrix;
  m.g.constant = b;
  return m;
}

// Nonlinear gradient-flow model f = -2 W1^T softplus(W1 x): its Jacobian
// -2 W1^T diag(sigmoid(W1 x)) W1 is negative definite everywhere, so a
// contracting metric exists, but the rate varies over the state space.
dynamics::LearnedDynamics gradient_flow_model() {
  MatrixXd w1(2, 2);
  w1 << 1.0, 0.3, -0.2, 1.0;
  dynamics::LearnedDynamics m;
  m.n_x = 2;
  m.n_u = 1;
  m.f_net = nets::Mlp({2, 2, 2},
                      {nets::Activation::SoftPlus, nets::Activation::Identity},
                      1);
  const MatrixXd w2 = -2.0 * w1.transpose();
  VectorXd p = VectorXd::Zero(m.f_net.parameter_count());
  int k = 0;
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) p[k++] = w1(r, c);
  k += 2;  // first-layer bias stays zero
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) p[k++] = w2(r, c);
  m.f_net.set_parameters(p);
  m.g.kind = dynamics::GKind::InputTail;
  return m;
}

domain::Box unit_box(int dim) {
  return domain::Box(VectorXd::Constant(dim, -1.0),
                     VectorXd::Constant(dim, 1.0));
}

VectorXd random_state(Rng& rng, int dim, double half = 1.0) {
  VectorXd x(dim);
  for (int i = 0; i < dim; ++i) x[i] = rng.uniform(-half, half);
  return x;
}

double top_eig(const MatrixXd& sym) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
  return es.eigenvalues()(es.eigenvalues().size() - 1);
}

double bottom_eig(const MatrixXd& sym) {
  return Eigen::SelfAdjointEigenSolver<MatrixXd>(sym).eigenvalues()(0);
}

}  // namespace

// ---------------------------------------------------------------------------
// metric_at

TEST_CASE("identity constant metric evaluates to identity factors") {
  const Metric m = Metric::constant(MatrixXd::Identity(3, 3), 0.5);
  const MetricEval ev = metric_at(m, VectorXd::Zero(3));
  CHECK((ev.m - MatrixXd::Identity(3, 3)).norm() == doctest::Approx(0.0));
  CHECK((ev.w - MatrixXd::Identity(3, 3)).norm() == doctest::Approx(0.0));
  CHECK((ev.theta - MatrixXd::Identity(3, 3)).norm() == doctest::Approx(0.0));
}

TEST_CASE("diagonal constant metric inverts and factors componentwise") {
  MatrixXd w(2, 2);
  w << 4.0, 0.0, 0.0, 1.0;
  const MetricEval ev = metric_at(Metric::constant(w, 1.0), VectorXd::Zero(2));
  CHECK(ev.m(0, 0) == doctest::Approx(0.25));
  CHECK(ev.m(1, 1) == doctest::Approx(1.0));
  CHECK(ev.m(0, 1) == doctest::Approx(0.0));
  CHECK(ev.theta(0, 0) == doctest::Approx(0.5));
  CHECK(ev.theta(1, 1) == doctest::Approx(1.0));
  CHECK(ev.theta(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("neural metric factors reconstruct M and stay positive definite") {
  const Metric m = Metric::neural(3, {0, 1}, {8}, 42);
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const VectorXd x = random_state(rng, 3);
    const MetricEval ev = metric_at(m, x);
    CHECK((ev.theta.transpose() * ev.theta - ev.m).cwiseAbs().maxCoeff() <
          1e-10);
    CHECK((ev.m - ev.m.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(bottom_eig(ev.m) > 0.0);
    CHECK((ev.w * ev.m - MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() <
          1e-9);
    // Theta is lower triangular by construction.
    for (int r = 0; r < 3; ++r) {
      for (int c = r + 1; c < 3; ++c) CHECK(ev.theta(r, c) == 0.0);
    }
  }
}

TEST_CASE("near-singular metrics are rejected as ill-conditioned") {
  MatrixXd w(2, 2);
  w << 1e11, 0.0, 0.0, 1.0;
  const Metric m = Metric::constant(w, 0.5);
  CHECK_THROWS_AS(metric_at(m, VectorXd::Zero(2)), IllConditioned);
}

TEST_CASE("constant metric construction validates its inputs") {
  CHECK_THROWS_AS(Metric::constant(MatrixXd::Identity(2, 2), 0.0), Error);
  CHECK_THROWS_AS(Metric::constant(-MatrixXd::Identity(2, 2), 0.5), Error);
  MatrixXd asym(2, 2);
  asym << 1.0, 0.5, -0.5, 1.0;
  CHECK_THROWS_AS(Metric::constant(asym, 0.5), Error);
}

// ---------------------------------------------------------------------------
// null_basis

TEST_CASE("null basis is orthonormal and annihilates the control matrix") {
  Rng rng(11);
  MatrixXd b(4, 2);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 2; ++c) b(r, c) = rng.normal();
  const MatrixXd gp = null_basis(b);
  REQUIRE(gp.cols() == 2);
  CHECK((gp.transpose() * b).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((gp.transpose() * gp - MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() <
        1e-12);

  // Rank-deficient control matrix leaves a larger null space.
  MatrixXd rank1(4, 2);
  rank1.col(0) = b.col(0);
  rank1.col(1) = 2.0 * b.col(0);
  CHECK(null_basis(rank1).cols() == 3);

  // Full row rank leaves nothing.
  CHECK(null_basis(MatrixXd::Identity(3, 3)).cols() == 0);
}

// ---------------------------------------------------------------------------
// c1_matrix

TEST_CASE("contraction matrix of f=-x with identity metric is -I shifted by "
          "twice the rate") {
  const auto model = linear_tail_model(-MatrixXd::Identity(2, 2), 1);
  const VectorXd x = VectorXd::Zero(2);

  // Rate 0.5: inner = -2I + 1I restricted to the single unactuated direction.
  const MatrixXd c_half =
      c1_matrix(Metric::constant(MatrixXd::Identity(2, 2), 0.5), model, x);
  REQUIRE(c_half.rows() == 1);
  CHECK(top_eig(c_half) == doctest::Approx(-1.0));

  // Rate 1 is the marginal boundary: the stability and rate terms cancel.
  const MatrixXd c_one =
      c1_matrix(Metric::constant(MatrixXd::Identity(2, 2), 1.0), model, x);
  CHECK(top_eig(c_one) == 0.0);

  // Beyond the boundary the matrix goes positive.
  const MatrixXd c_two =
      c1_matrix(Metric::constant(MatrixXd::Identity(2, 2), 2.0), model, x);
  CHECK(top_eig(c_two) == doctest::Approx(2.0));
}

TEST_CASE("constant-metric contraction matrix does not depend on the state") {
  MatrixXd a(3, 3);
  a << -1.0, 0.4, 0.0, -0.3, -2.0, 0.2, 0.1, 0.0, -1.5;
  const auto model = linear_tail_model(a, 1);
  MatrixXd w(3, 3);
  w << 2.0, 0.3, 0.0, 0.3, 1.5, -0.2, 0.0, -0.2, 1.0;
  const Metric metric = Metric::constant(w, 0.3);
  Rng rng(23);
  const MatrixXd ref = c1_matrix(metric, model, random_state(rng, 3));
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixXd other = c1_matrix(metric, model, random_state(rng, 3));
    CHECK((ref - other).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("solved metrics make random stable linear systems contract on a "
          "grid of states") {
  Rng rng(31);
  for (int sys = 0; sys < 5; ++sys) {
    MatrixXd a(3, 3);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a(r, c) = 0.5 * rng.uniform(-1.0, 1.0);
    a -= 2.0 * MatrixXd::Identity(3, 3);
    MatrixXd b(3, 1);
    for (int r = 0; r < 3; ++r) b(r, 0) = rng.normal();
    const auto model = linear_model(a, b);
    const Metric metric = solve_constant_metric(model, 0.3);
    for (int trial = 0; trial < 20; ++trial) {
      const MatrixXd c1 = c1_matrix(metric, model, random_state(rng, 3, 2.0));
      CHECK(top_eig(c1) < 0.0);
    }
  }
}

// ---------------------------------------------------------------------------
// orthogonality_residual

TEST_CASE("constant metric and constant control matrix have zero "
          "orthogonality residual") {
  const auto model = linear_tail_model(-MatrixXd::Identity(3, 3), 1);
  const Metric metric = Metric::constant(MatrixXd::Identity(3, 3), 0.5);
  Rng rng(5);
  CHECK(orthogonality_residual(metric, model, random_state(rng, 3)) == 0.0);
}

TEST_CASE("metrics reading only unactuated coordinates satisfy the input "
          "orthogonality condition") {
  const auto model = linear_tail_model(-MatrixXd::Identity(3, 3), 1);
  const Metric restricted = Metric::neural(3, {0, 1}, {8}, 9);
  const Metric unrestricted = Metric::neural(3, {0, 1, 2}, {8}, 9);
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd x = random_state(rng, 3);
    CHECK(orthogonality_residual(restricted, model, x) < 1e-8);
    CHECK(orthogonality_residual(unrestricted, model, x) > 1e-4);
  }
}

// ---------------------------------------------------------------------------
// ccm_losses

TEST_CASE("loss terms take their closed-form values on a uniformly "
          "contracting constant metric") {
  const auto model = linear_tail_model(-MatrixXd::Identity(2, 2), 1);
  const Metric metric = Metric::constant(MatrixXd::Identity(2, 2), 0.5);
  Rng rng(3);
  std::vector<VectorXd> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(random_state(rng, 2));

  const LossTerms t = ccm_losses(batch, metric, model);
  // Every lambda_max(C1) = -1 clamps at tau = -0.01.
  CHECK(t.l1 == doctest::Approx(-std::exp(-0.01)).epsilon(1e-12));
  // cond(M) = 1.
  CHECK(t.l2 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.l3 == doctest::Approx(-0.5).epsilon(1e-12));

  const LossTerms scaled = ccm_losses(batch, metric, model, -0.01, 2.0, 3.0,
                                      4.0);
  CHECK(scaled.l1 == doctest::Approx(-2.0 * std::exp(-0.01)));
  CHECK(scaled.l2 == doctest::Approx(3.0));
  CHECK(scaled.l3 == doctest::Approx(-4.0 * 0.5));
}

// ---------------------------------------------------------------------------
// gradients

TEST_CASE("dual-metric parameter gradients match finite differences") {
  // Checks the chain rule through W = L L^T for a scalar tr(G W(x)).
  const Metric metric = Metric::neural(3, {0, 1}, {6}, 77);
  Rng rng(19);
  const VectorXd x = random_state(rng, 3);
  MatrixXd g_sens(3, 3);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) g_sens(r, c) = rng.normal();
  g_sens = 0.5 * (g_sens + g_sens.transpose()).eval();

  VectorXd grad = VectorXd::Zero(metric.parameter_count());
  metric.backprop_w(x, g_sens, grad);

  Metric probe = metric;
  const VectorXd p0 = metric.parameters();
  const double h = 1e-6;
  Rng dir_rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    VectorXd d(p0.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = dir_rng.normal();
    d.normalize();
    probe.set_parameters(p0 + h * d);
    const double up = (g_sens * probe.w_at(x)).trace();
    probe.set_parameters(p0 - h * d);
    const double dn = (g_sens * probe.w_at(x)).trace();
    const double fd = (up - dn) / (2.0 * h);
    CHECK(grad.dot(d) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("training objective gradient matches finite differences through "
          "the eigenvalue terms") {
  // Weakly stable model keeps lambda_max(C1) above tau so the contraction
  // term contributes live gradients.
  const auto model = linear_tail_model(-0.1 * MatrixXd::Identity(3, 3), 1);
  Metric metric = Metric::neural(3, {0, 1}, {6}, 4);
  MetricTrainConfig cfg;
  cfg.alpha3 = 0.0;  // batch-min term checked separately (subgradient)

  Rng rng(41);
  std::vector<VectorXd> states;
  // Pick states where both eigen problems are comfortably non-degenerate so
  // the finite-difference probe stays on one eigenvalue branch.
  while (states.size() < 4) {
    const VectorXd x = random_state(rng, 3);
    Eigen::SelfAdjointEigenSolver<MatrixXd> ew(metric.w_at(x));
    const auto& wev = ew.eigenvalues();
    if (wev(2) - wev(1) < 1e-4 || wev(1) - wev(0) < 1e-4) continue;
    Eigen::SelfAdjointEigenSolver<MatrixXd> ec(c1_matrix(metric, model, x));
    const auto& cev = ec.eigenvalues();
    if (cev(1) - cev(0) < 1e-4) continue;
    states.push_back(x);
  }
  const std::vector<int> batch = {0, 1, 2, 3};

  const VectorXd p0 = metric.parameters();
  VectorXd grad = VectorXd::Zero(p0.size());
  const double j0 = metric_objective(metric, p0, states, batch, model, cfg,
                                     grad);
  CHECK(std::isfinite(j0));

  const double h = 1e-6;
  Rng dir_rng(43);
  for (int trial = 0; trial < 5; ++trial) {
    VectorXd d(p0.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = dir_rng.normal();
    d.normalize();
    VectorXd scratch = VectorXd::Zero(p0.size());
    const double up =
        metric_objective(metric, p0 + h * d, states, batch, model, cfg,
                         scratch);
    scratch.setZero();
    const double dn =
        metric_objective(metric, p0 - h * d, states, batch, model, cfg,
                         scratch);
    const double fd = (up - dn) / (2.0 * h);
    CHECK(grad.dot(d) == doctest::Approx(fd).epsilon(1e-3));
  }
}

TEST_CASE("rate-term subgradient matches finite differences on a single "
          "sample") {
  const auto model = linear_tail_model(-MatrixXd::Identity(2, 2), 1);
  Metric metric = Metric::neural(2, {0}, {6}, 15);
  MetricTrainConfig cfg;
  cfg.alpha1 = 0.0;
  cfg.alpha2 = 0.0;
  cfg.alpha3 = 1.0;

  Rng rng(51);
  const std::vector<VectorXd> states = {random_state(rng, 2)};
  const std::vector<int> batch = {0};
  const VectorXd p0 = metric.parameters();
  VectorXd grad = VectorXd::Zero(p0.size());
  metric_objective(metric, p0, states, batch, model, cfg, grad);

  const double h = 1e-6;
  Rng dir_rng(53);
  for (int trial = 0; trial < 3; ++trial) {
    VectorXd d(p0.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = dir_rng.normal();
    d.normalize();
    VectorXd scratch = VectorXd::Zero(p0.size());
    const double up =
        metric_objective(metric, p0 + h * d, states, batch, model, cfg,
                         scratch);
    scratch.setZero();
    const double dn =
        metric_objective(metric, p0 - h * d, states, batch, model, cfg,
                         scratch);
    CHECK(grad.dot(d) == doctest::Approx((up - dn) / (2.0 * h)).epsilon(1e-6));
  }
}

// ---------------------------------------------------------------------------
// solve_constant_metric

TEST_CASE("fully actuated systems admit the identity metric") {
  const auto model =
      linear_model(-MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2));
  const Metric metric = solve_constant_metric(model, 0.5);
  CHECK(metric.is_constant());
  CHECK((metric.w_at(VectorXd::Zero(2)) - MatrixXd::Identity(2, 2)).norm() ==
        doctest::Approx(0.0));
}

TEST_CASE("double integrator metric satisfies the restricted inequality") {
  MatrixXd a(2, 2);
  a << 0.0, 1.0, 0.0, 0.0;
  MatrixXd b(2, 1);
  b << 0.0, 1.0;
  const auto model = linear_model(a, b);
  const Metric metric = solve_constant_metric(model, 0.5);

  // Verify by direct substitution, independently of c1_matrix.
  const MatrixXd w = metric.w_at(VectorXd::Zero(2));
  const MatrixXd gp = null_basis(b);
  const MatrixXd c =
      gp.transpose() * (a * w + w * a.transpose() + 2.0 * 0.5 * w) * gp;
  CHECK(top_eig(0.5 * (c + c.transpose())) < 0.0);
  CHECK(bottom_eig(w) > 0.0);
}

TEST_CASE("unstabilizable systems are reported infeasible") {
  // The second mode is unstable and unreachable from the input.
  MatrixXd b(2, 1);
  b << 1.0, 0.0;
  const auto model = linear_model(MatrixXd::Identity(2, 2), b);
  CHECK_THROWS_AS(solve_constant_metric(model, 0.5), Infeasible);
}

// ---------------------------------------------------------------------------
// certify

TEST_CASE("constant metric with a linear model certifies in closed form") {
  MatrixXd a(2, 2);
  a << 0.0, 1.0, 0.0, 0.0;
  MatrixXd b(2, 1);
  b << 0.0, 1.0;
  const auto model = linear_model(a, b);
  Metric metric = solve_constant_metric(model, 0.5);

  CertifyConfig cfg;
  cfg.seed = 99;
  certify(metric, model, unit_box(2), cfg);

  REQUIRE(metric.has_certified());
  const CertifiedConstants& c = metric.certified();
  CHECK(c.c1_bar.exact);
  CHECK(c.c1_bar.valid());
  CHECK(c.c1_bar.value ==
        doctest::Approx(top_eig(c1_matrix(metric, model, VectorXd::Zero(2)))));
  CHECK(c.c1_bar.value < 0.0);
  CHECK(c.lambda_rate == doctest::Approx(0.5));
  CHECK(c.lambda_rate_bound.exact);

  const MatrixXd w = metric.w_at(VectorXd::Zero(2));
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(w);
  CHECK(c.lambda_min_m.value == doctest::Approx(1.0 / es.eigenvalues()(1)));
  CHECK(c.m_upper_alpha.value == doctest::Approx(1.0 / es.eigenvalues()(0)));
  CHECK((c.m_upper - c.m_upper_alpha.value * MatrixXd::Identity(2, 2))
            .norm() == doctest::Approx(0.0));
}

TEST_CASE("neural metric certification bounds hold on fresh samples") {
  const auto model = linear_tail_model(-2.0 * MatrixXd::Identity(2, 2), 1);
  Metric metric = Metric::neural(2, {0}, {8}, 6);
  const domain::Box box = unit_box(2);

  CertifyConfig cfg;
  cfg.seed = 404;
  certify(metric, model, box, cfg);

  REQUIRE(metric.has_certified());
  const CertifiedConstants& c = metric.certified();
  CHECK(c.c1_bar.value < 0.0);
  CHECK_FALSE(c.c1_bar.exact);
  CHECK(c.c1_bar.valid());
  CHECK(c.lambda_min_m.valid());
  CHECK(c.m_upper_alpha.valid());
  CHECK(c.lambda_rate > 0.0);

  // Coverage of the metric floor on fresh draws: the certified lower bound of
  // lambda_min(M(x)) may be beaten by at most about 1 - psi of the domain.
  Rng rng(2024);
  const int n = 100000;
  int below_floor = 0;
  int above_ceiling = 0;
  int rate_below = 0;
  for (int i = 0; i < n; ++i) {
    const VectorXd x = box.sample(rng);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(metric.w_at(x));
    if (1.0 / es.eigenvalues()(1) < c.lambda_min_m.value) ++below_floor;
    if (1.0 / es.eigenvalues()(0) > c.m_upper_alpha.value) ++above_ceiling;
    if (metric.lambda_at(x) < c.lambda_rate) ++rate_below;
  }
  const double budget = (1.0 - cfg.psi + 0.02) * n;
  CHECK(below_floor <= budget);
  CHECK(above_ceiling <= budget);
  CHECK(rate_below <= budget);

  // The contraction bound evaluated at the certified rate holds with the
  // same coverage on fresh draws.
  int c1_above = 0;
  const int n_c1 = 10000;
  for (int i = 0; i < n_c1; ++i) {
    const MatrixXd c1 =
        c1_matrix(metric, model, box.sample(rng), c.lambda_rate);
    if (top_eig(c1) > c.c1_bar.value) ++c1_above;
  }
  CHECK(c1_above <= (1.0 - cfg.psi + 0.02) * n_c1);
}

TEST_CASE("metrics trained against the contraction objective certify "
          "end-to-end") {
  const auto model = gradient_flow_model();
  Metric metric = Metric::neural(2, {0}, {8}, 12);
  const domain::Box box = unit_box(2);

  Rng rng(88);
  std::vector<VectorXd> states;
  for (int i = 0; i < 256; ++i) states.push_back(box.sample(rng));

  const LossTerms before = ccm_losses(states, metric, model);
  MetricTrainConfig cfg;
  // Modest weight on the rate reward: the rate term is unbounded, so a large
  // weight walks the rate past what the dynamics can support.
  cfg.alpha3 = 0.2;
  cfg.base.epochs = 60;
  cfg.base.batch_size = 32;
  cfg.base.learning_rate = 1e-3;
  cfg.base.seed = 1;
  train_metric(metric, states, model, cfg);
  const LossTerms after = ccm_losses(states, metric, model);

  // Training must improve the contraction and conditioning terms.
  CHECK(after.l1 >= before.l1 - 1e-6);
  CHECK(after.l2 <= before.l2 + 1e-6);

  CertifyConfig ccfg;
  ccfg.seed = 31;
  certify(metric, model, box, ccfg);
  const CertifiedConstants& c = metric.certified();
  CHECK(c.c1_bar.value < 0.0);
  CHECK(c.lambda_rate > 0.0);
  CHECK(c.lambda_min_m.value > 0.0);
  CHECK(c.m_upper_alpha.value >= c.lambda_min_m.value);

  // The certified claim holds on fresh states: at the certified rate, the
  // contraction matrix stays at or below the certified bound except on a
  // sliver of the domain.
  int positive = 0;
  int above_bar = 0;
  const int n_fresh = 2000;
  for (int i = 0; i < n_fresh; ++i) {
    const double lmax =
        top_eig(c1_matrix(metric, model, box.sample(rng), c.lambda_rate));
    if (lmax > 0.0) ++positive;
    if (lmax > c.c1_bar.value) ++above_bar;
  }
  CHECK(positive <= 0.01 * n_fresh);
  CHECK(above_bar <= (1.0 - ccfg.psi + 0.02) * n_fresh);
}

TEST_CASE("metrics trained with an inverted contraction term fail "
          "certification") {
  // Flipping the sign of the contraction weight rewards violation, so the
  // trained metric cannot certify a negative contraction bound.
  const auto model = linear_tail_model(-0.1 * MatrixXd::Identity(2, 2), 1);
  Metric metric = Metric::neural(2, {0}, {8}, 3);
  const domain::Box box = unit_box(2);

  Rng rng(14);
  std::vector<VectorXd> states;
  for (int i = 0; i < 64; ++i) states.push_back(box.sample(rng));
  MetricTrainConfig cfg;
  cfg.alpha1 = -1.0;  // wrong sign: drives the contraction bound upward
  cfg.base.epochs = 10;
  cfg.base.batch_size = 32;
  cfg.base.seed = 2;
  train_metric(metric, states, model, cfg);

  CertifyConfig ccfg;
  ccfg.seed = 77;
  CHECK_THROWS_AS(certify(metric, model, box, ccfg), CertificationFailed);
}

// ---------------------------------------------------------------------------
// serialization

TEST_CASE("certified constant metrics survive a save/load round trip") {
  MatrixXd a(2, 2);
  a << 0.0, 1.0, 0.0, 0.0;
  MatrixXd b(2, 1);
  b << 0.0, 1.0;
  const auto model = linear_model(a, b);
  Metric metric = solve_constant_metric(model, 0.5);
  CertifyConfig cfg;
  cfg.seed = 5;
  certify(metric, model, unit_box(2), cfg);

  std::stringstream buf;
  metric.save(buf);
  const Metric back = Metric::load(buf);

  CHECK(back.is_constant());
  CHECK((back.w_at(VectorXd::Zero(2)) - metric.w_at(VectorXd::Zero(2)))
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK(back.lambda_at(VectorXd::Zero(2)) ==
        metric.lambda_at(VectorXd::Zero(2)));
  REQUIRE(back.has_certified());
  CHECK(back.certified().c1_bar.value == metric.certified().c1_bar.value);
  CHECK(back.certified().lambda_min_m.value ==
        metric.certified().lambda_min_m.value);
  CHECK(back.certified().m_upper_alpha.value ==
        metric.certified().m_upper_alpha.value);
  CHECK(back.certified().lambda_rate == metric.certified().lambda_rate);
  CHECK(back.certified().c1_bar.exact);
}

TEST_CASE("neural metrics reproduce their evaluations after a round trip") {
  const Metric metric = Metric::neural(3, {0, 1}, {8, 8}, 2718);
  std::stringstream buf;
  metric.save(buf);
  const Metric back = Metric::load(buf);

  CHECK_FALSE(back.is_constant());
  CHECK(back.input_dims() == metric.input_dims());
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd x = random_state(rng, 3);
    CHECK((back.w_at(x) - metric.w_at(x)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(back.lambda_at(x) == metric.lambda_at(x));
  }
}
