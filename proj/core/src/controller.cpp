#include "safed/controller.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace safed::controller {

namespace {

constexpr double kFlowStep = 1e-5;     // directional finite-difference step
constexpr int kMaxSweeps = 400;        // geodesic sweep cap per level
constexpr double kSweepTol = 1e-11;    // relative improvement stop
constexpr double kGradStep = 1e-6;     // waypoint gradient probe
constexpr int kBallRetries = 100;      // metric-ball rejection budget

// Metric speed |d|_{M(p)} via one linear solve against W(p).
double metric_speed(const ccm::Metric& metric, const Eigen::VectorXd& p,
                    const Eigen::VectorXd& d) {
  Eigen::LLT<Eigen::MatrixXd> llt(metric.w_at(p));
  if (llt.info() != Eigen::Success) {
    throw ccm::IllConditioned("geodesic: dual metric is not positive definite");
  }
  return std::sqrt(std::max(d.dot(llt.solve(d)), 0.0));
}

// Chord length under the metric, Simpson quadrature of the speed along the
// chord. Exact for constant metrics; faithful enough on varying ones that
// coarse polylines do not under-bill expensive regions.
double chord_length(const ccm::Metric& metric, const Eigen::VectorXd& from,
                    const Eigen::VectorXd& to) {
  const Eigen::VectorXd d = to - from;
  if (metric.is_constant()) return metric_speed(metric, from, d);
  return (metric_speed(metric, from, d) +
          4.0 * metric_speed(metric, 0.5 * (from + to), d) +
          metric_speed(metric, to, d)) /
         6.0;
}

double path_length(const ccm::Metric& metric,
                   const std::vector<Eigen::VectorXd>& pts) {
  double total = 0.0;
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    total += chord_length(metric, pts[i], pts[i + 1]);
  }
  return total;
}

// Respace waypoints to uniform metric arclength along the current polyline,
// onto k_out segments. This counters waypoint bunching (sliding along the
// path is a flat direction of the length objective) and moves solutions
// between refinement levels.
std::vector<Eigen::VectorXd> resample_count(
    const ccm::Metric& metric, const std::vector<Eigen::VectorXd>& pts,
    int k_out) {
  const size_t k_in = pts.size() - 1;
  std::vector<double> cum(pts.size(), 0.0);
  for (size_t i = 0; i < k_in; ++i) {
    cum[i + 1] = cum[i] + chord_length(metric, pts[i], pts[i + 1]);
  }
  const double total = cum.back();
  std::vector<Eigen::VectorXd> out(static_cast<size_t>(k_out) + 1);
  out.front() = pts.front();
  out.back() = pts.back();
  if (total <= 0.0) {
    for (int j = 1; j < k_out; ++j) {
      const double t = static_cast<double>(j) / k_out;
      out[static_cast<size_t>(j)] = (1.0 - t) * pts.front() + t * pts.back();
    }
    return out;
  }
  size_t seg = 0;
  for (int j = 1; j < k_out; ++j) {
    const double target = total * static_cast<double>(j) / k_out;
    while (seg + 1 < k_in && cum[seg + 1] < target) ++seg;
    const double span = cum[seg + 1] - cum[seg];
    const double t = span > 0.0 ? (target - cum[seg]) / span : 0.0;
    out[static_cast<size_t>(j)] = (1.0 - t) * pts[seg] + t * pts[seg + 1];
  }
  return out;
}

// M(x) and M(x +/- eps v) contracted with fixed vectors, via LLT solves.
Eigen::MatrixXd metric_m(const ccm::Metric& metric, const Eigen::VectorXd& x) {
  const Eigen::MatrixXd w = metric.w_at(x);
  Eigen::LLT<Eigen::MatrixXd> llt(w);
  if (llt.info() != Eigen::Success) {
    throw ccm::IllConditioned("controller: dual metric is not positive definite");
  }
  const int n = static_cast<int>(w.rows());
  return llt.solve(Eigen::MatrixXd::Identity(n, n));
}

// One level of geodesic optimization: repeated Gauss-Seidel sweeps over the
// interior waypoints. Every accepted move strictly reduces the local length,
// and the between-sweep re-spacing is kept only when it does not lengthen
// the path, so the recorded trace is monotone non-increasing.
void relax_waypoints(const ccm::Metric& metric,
                     std::vector<Eigen::VectorXd>& pts, int max_sweeps,
                     std::vector<double>* trace) {
  const int segments = static_cast<int>(pts.size()) - 1;
  const int n = static_cast<int>(pts.front().size());
  double total = path_length(metric, pts);
  if (trace != nullptr) trace->push_back(total);

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    for (int i = 1; i < segments; ++i) {
      Eigen::VectorXd& p = pts[static_cast<size_t>(i)];
      const Eigen::VectorXd& prev = pts[static_cast<size_t>(i - 1)];
      const Eigen::VectorXd& next = pts[static_cast<size_t>(i + 1)];
      auto local = [&](const Eigen::VectorXd& q) {
        return chord_length(metric, prev, q) + chord_length(metric, q, next);
      };

      // Relaxation step: with the two midpoint metrics frozen, the local
      // energy minimizer is a metric-weighted average of the neighbors. A
      // gradient probe handles what the relaxation direction cannot improve.
      for (int inner = 0; inner < 3; ++inner) {
        const double here = local(p);
        const Eigen::MatrixXd m1 = metric_m(metric, 0.5 * (prev + p));
        const Eigen::MatrixXd m2 = metric_m(metric, 0.5 * (p + next));
        const Eigen::VectorXd cand =
            Eigen::LLT<Eigen::MatrixXd>(m1 + m2).solve(m1 * prev + m2 * next);
        bool moved = false;
        if ((cand - p).norm() > 1e-14 * (1.0 + p.norm())) {
          double lam = 1.0;
          for (int t = 0; t < 6; ++t) {
            const Eigen::VectorXd q = p + lam * (cand - p);
            if (local(q) < here - 1e-15) {
              p = q;
              moved = true;
              break;
            }
            lam *= 0.5;
          }
        }
        if (!moved) {
          Eigen::VectorXd grad(n);
          for (int d = 0; d < n; ++d) {
            const double h = kGradStep * (1.0 + std::abs(p(d)));
            Eigen::VectorXd q = p;
            q(d) = p(d) + h;
            const double up = local(q);
            q(d) = p(d) - h;
            const double dn = local(q);
            grad(d) = (up - dn) / (2.0 * h);
          }
          const double gnorm = grad.norm();
          if (gnorm < 1e-12) break;
          const Eigen::VectorXd dir = grad / gnorm;
          double step = 0.5 * (0.5 * (next - prev).norm() + 1e-9);
          for (int t = 0; t < 10; ++t) {
            const Eigen::VectorXd q = p - step * dir;
            if (local(q) < here - 1e-15) {
              p = q;
              moved = true;
              break;
            }
            step *= 0.5;
          }
        }
        if (!moved) break;
      }
    }
    double after = path_length(metric, pts);
    if (segments > 2) {
      auto respaced = resample_count(metric, pts, segments);
      const double respaced_len = path_length(metric, respaced);
      if (respaced_len <= after) {
        pts = std::move(respaced);
        after = respaced_len;
      }
    }
    if (trace != nullptr) trace->push_back(after);
    if (total - after < kSweepTol * std::max(1.0, total)) {
      total = after;
      break;
    }
    total = after;
  }
}

}  // namespace

TrackingController make_controller(ccm::Metric metric,
                                   dynamics::LearnedDynamics model,
                                   domain::TrustedDomain dom,
                                   int geodesic_segments) {
  if (!metric.has_certified()) {
    throw Error("make_controller: metric must be certified");
  }
  if (metric.dim() != model.n_x || dom.x.dim() != model.n_x ||
      dom.u.dim() != model.n_u) {
    throw Error("make_controller: metric, model, and domain dimensions "
                "disagree");
  }
  if (geodesic_segments < 1) {
    throw Error("make_controller: need at least one geodesic segment");
  }
  TrackingController ctrl;
  ctrl.metric = std::move(metric);
  ctrl.model = std::move(model);
  ctrl.dom = std::move(dom);
  ctrl.geodesic_segments = geodesic_segments;
  return ctrl;
}

GeodesicResult geodesic_path(const ccm::Metric& metric,
                             const Eigen::VectorXd& from,
                             const Eigen::VectorXd& to, int segments) {
  if (from.size() != metric.dim() || to.size() != metric.dim()) {
    throw Error("geodesic_path: endpoint dimension does not match the metric");
  }
  if (segments < 1) throw Error("geodesic_path: need at least one segment");

  GeodesicResult res;
  if (metric.is_constant()) {
    // The metric is flat: the straight chord is the exact geodesic.
    res.waypoints = {from, to};
    const Eigen::VectorXd d = to - from;
    res.length = std::sqrt(std::max(
        d.dot(metric_m(metric, from) * d), 0.0));
    res.sweep_lengths = {res.length};
    return res;
  }

  // Coarse-to-fine: start from the straight line at two segments, relax,
  // and double the resolution until `segments` is reached. Fine polylines
  // relaxed directly from the straight line stall (a single waypoint moved
  // sideways makes a kink that locally lengthens the path), while coarse
  // solutions carry the geometry up the levels.
  std::vector<Eigen::VectorXd> pts;
  int k = std::min(segments, 2);
  pts.resize(static_cast<size_t>(k) + 1);
  for (int i = 0; i <= k; ++i) {
    const double t = static_cast<double>(i) / k;
    pts[static_cast<size_t>(i)] = (1.0 - t) * from + t * to;
  }
  while (true) {
    const bool final_level = k == segments;
    relax_waypoints(metric, pts, kMaxSweeps,
                    final_level ? &res.sweep_lengths : nullptr);
    if (final_level) break;
    k = std::min(2 * k, segments);
    pts = resample_count(metric, pts, k);
  }
  res.waypoints = std::move(pts);
  res.length = res.sweep_lengths.back();
  return res;
}

double geodesic_distance(const ccm::Metric& metric, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& x_star, int segments) {
  return geodesic_path(metric, x_star, x, segments).length;
}

Eigen::VectorXd min_norm_step(double a, const Eigen::VectorXd& b) {
  if (a <= 0.0) return Eigen::VectorXd::Zero(b.size());
  const double bb = b.squaredNorm();
  if (bb <= 0.0) {
    throw Error("min_norm_step: active constraint with zero gradient");
  }
  return -(a / bb) * b;
}

FeedbackTerms feedback_terms(const TrackingController& ctrl,
                             const Eigen::VectorXd& x,
                             const Eigen::VectorXd& x_star,
                             const Eigen::VectorXd& u_star) {
  const int n_x = ctrl.model.n_x;
  const int n_u = ctrl.model.n_u;
  if (x.size() != n_x || x_star.size() != n_x || u_star.size() != n_u) {
    throw Error("feedback_terms: dimension mismatch");
  }
  const double lambda = ctrl.metric.certified().lambda_rate;
  const Eigen::VectorXd delta = x - x_star;
  const Eigen::MatrixXd g_x = ctrl.model.g_at(x);

  FeedbackTerms out;
  out.b = Eigen::VectorXd::Zero(n_u);
  out.u_fb = Eigen::VectorXd::Zero(n_u);
  if (delta.norm() == 0.0) return out;

  const Eigen::VectorXd drift =
      ctrl.model.eval(x, u_star) - ctrl.model.eval(x_star, u_star);

  // Differential contraction constraint evaluated at each chord endpoint;
  // the endpoint with the larger violation is enforced.
  out.a = -std::numeric_limits<double>::infinity();
  for (const Eigen::VectorXd* anchor : {&x, &x_star}) {
    const Eigen::MatrixXd m = metric_m(ctrl.metric, *anchor);
    double rate_term = 0.0;
    if (!ctrl.metric.is_constant()) {
      // d/dt M along the nominal flow at the anchor.
      const Eigen::VectorXd v = ctrl.model.eval(*anchor, u_star);
      const Eigen::MatrixXd m_plus =
          metric_m(ctrl.metric, *anchor + kFlowStep * v);
      const Eigen::MatrixXd m_minus =
          metric_m(ctrl.metric, *anchor - kFlowStep * v);
      rate_term = delta.dot(((m_plus - m_minus) / (2.0 * kFlowStep)) * delta);
    }
    const double a_here = 2.0 * delta.dot(m * drift) + rate_term +
                          2.0 * lambda * delta.dot(m * delta);
    if (a_here > out.a) {
      out.a = a_here;
      out.b = 2.0 * g_x.transpose() * (m * delta);
    }
  }

  if (out.a > 0.0 && out.b.squaredNorm() <= 1e-24) {
    out.infeasible = true;
    return out;
  }
  out.u_fb = min_norm_step(out.a, out.b);
  return out;
}

Eigen::VectorXd feedback(const TrackingController& ctrl,
                         const Eigen::VectorXd& x,
                         const Eigen::VectorXd& x_star,
                         const Eigen::VectorXd& u_star, ControllerLog* log) {
  const FeedbackTerms terms = feedback_terms(ctrl, x, x_star, u_star);
  if (terms.infeasible && log != nullptr) ++log->infeasible;
  Eigen::VectorXd u = u_star + terms.u_fb;
  const Eigen::VectorXd clamped = ctrl.dom.u.clamp(u);
  if ((clamped - u).norm() > 0.0 && log != nullptr) ++log->saturated;
  return clamped;
}

double delta_u_sample(const TrackingController& ctrl, const Eigen::VectorXd& x,
                      const Eigen::VectorXd& x_star,
                      const Eigen::VectorXd& u_star) {
  const double dist = (x - x_star).norm();
  if (dist == 0.0) {
    throw Error("delta_u_sample: x and x_star must differ");
  }
  return feedback_terms(ctrl, x, x_star, u_star).u_fb.norm() / dist;
}

evt::VerifiedConstant estimate_delta_u(TrackingController& ctrl,
                                       double ball_radius,
                                       evt::EstimateConfig cfg, uint64_t seed) {
  if (ball_radius <= 0.0) {
    throw Error("estimate_delta_u: ball radius must be positive");
  }
  cfg.kind = evt::BoundKind::UpperBound;
  cfg.name = "delta_u";

  Rng rng(splitmix64(seed ^ 0xde17a5edULL));
  const int n_x = ctrl.model.n_x;
  auto sampler = [&]() {
    Eigen::VectorXd x_star, x;
    for (int attempt = 0; attempt < kBallRetries; ++attempt) {
      x_star = ctrl.dom.x.sample(rng);
      // Uniform draw from the metric ball around x*: Theta maps the metric
      // ball to a Euclidean ball, so pull a Euclidean draw back through it.
      Eigen::VectorXd z(n_x);
      for (int i = 0; i < n_x; ++i) z(i) = rng.normal();
      const double norm = z.norm();
      if (norm == 0.0) continue;
      const double r =
          ball_radius * std::pow(rng.uniform(), 1.0 / n_x) / norm;
      const ccm::MetricEval ev = ccm::metric_at(ctrl.metric, x_star);
      x = x_star + ev.theta.triangularView<Eigen::Lower>().solve(r * z);
      if (ctrl.dom.x.contains(x) && (x - x_star).norm() > 0.0) {
        return delta_u_sample(ctrl, x, x_star, ctrl.dom.u.sample(rng));
      }
    }
    // Rejection budget exhausted (the ball dwarfs the box in some
    // direction): clamp the last draw back onto the box instead.
    x = ctrl.dom.x.clamp(x);
    if ((x - x_star).norm() == 0.0) {
      throw Error("estimate_delta_u: degenerate tracking configuration; the "
                  "state box appears to have zero width");
    }
    return delta_u_sample(ctrl, x, x_star, ctrl.dom.u.sample(rng));
  };
  ctrl.delta_u = evt::estimate_constant(sampler, cfg);
  return ctrl.delta_u;
}

}  // namespace safed::controller
