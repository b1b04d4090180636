#include "safed/ccm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "safed/textio.hpp"

namespace safed::ccm {

namespace {

constexpr double kDiagFloor = 1e-6;   // keeps the Cholesky diagonal positive
constexpr double kLieStep = 1e-5;     // finite-difference step along f
constexpr double kCondLimit = 1e10;   // metric_at ill-conditioning threshold

int offdiag_count(int n) { return n * (n - 1) / 2; }

// Strictly-lower entries enumerated row-major: (1,0), (2,0), (2,1), ...
Eigen::MatrixXd lower_from_entries(int n, const Eigen::VectorXd& diag,
                                   const Eigen::VectorXd& off) {
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  int k = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < i; ++j) l(i, j) = off(k++);
    l(i, i) = diag(i) + kDiagFloor;
  }
  return l;
}

Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& a) {
  return 0.5 * (a + a.transpose());
}

// lambda_max and its eigenvector for a symmetric matrix.
std::pair<double, Eigen::VectorXd> top_eigenpair(const Eigen::MatrixXd& sym) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) {
    throw Error("ccm: eigen decomposition failed");
  }
  const int last = static_cast<int>(sym.rows()) - 1;
  return {es.eigenvalues()(last), es.eigenvectors().col(last)};
}

Eigen::MatrixXd c1_with_basis(const Metric& metric,
                              const dynamics::LearnedDynamics& model,
                              const Eigen::VectorXd& x,
                              std::optional<double> lambda_override,
                              const Eigen::MatrixXd& gperp) {
  const Eigen::MatrixXd a = model.f_jacobian(x);
  const Eigen::MatrixXd w = metric.w_at(x);
  Eigen::MatrixXd inner = a * w + w * a.transpose();
  if (!metric.is_constant()) {
    const Eigen::VectorXd f = model.f(x);
    inner -= (metric.w_at(x + kLieStep * f) - metric.w_at(x - kLieStep * f)) /
             (2.0 * kLieStep);
  }
  const double lam =
      lambda_override ? *lambda_override : metric.lambda_at(x);
  inner += 2.0 * lam * w;
  return symmetrized(gperp.transpose() * inner * gperp);
}

}  // namespace

// ---------------------------------------------------------------------------
// Metric

Metric Metric::constant(const Eigen::MatrixXd& w, double lambda) {
  if (w.rows() != w.cols() || w.rows() < 1) {
    throw Error("Metric::constant: W must be square and non-empty");
  }
  if ((w - w.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + w.norm())) {
    throw Error("Metric::constant: W must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrized(w));
  if (es.eigenvalues()(0) <= 0.0) {
    throw Error("Metric::constant: W must be positive definite");
  }
  if (lambda <= 0.0) {
    throw Error("Metric::constant: contraction rate must be positive");
  }
  Metric m;
  m.constant_ = true;
  m.n_x_ = static_cast<int>(w.rows());
  m.w_const_ = symmetrized(w);
  m.lambda_const_ = lambda;
  return m;
}

Metric Metric::neural(int n_x, const std::vector<int>& input_dims,
                      const std::vector<int>& hidden, uint64_t seed) {
  if (n_x < 2) throw Error("Metric::neural: need state dimension >= 2");
  if (input_dims.empty()) {
    throw Error("Metric::neural: need at least one metric input dimension");
  }
  for (int d : input_dims) {
    if (d < 0 || d >= n_x) {
      throw Error("Metric::neural: input dimension " + std::to_string(d) +
                  " out of range for state dimension " + std::to_string(n_x));
    }
  }
  if (hidden.empty()) throw Error("Metric::neural: need a hidden layer");

  // Smooth activations throughout: the contraction matrix takes directional
  // finite differences of W, which kinked activations would corrupt.
  auto widths = [&](int in, int out) {
    std::vector<int> ws;
    ws.push_back(in);
    ws.insert(ws.end(), hidden.begin(), hidden.end());
    ws.push_back(out);
    return ws;
  };
  auto acts = [&](nets::Activation final_act) {
    std::vector<nets::Activation> as(hidden.size(), nets::Activation::SoftPlus);
    as.push_back(final_act);
    return as;
  };

  const int d_in = static_cast<int>(input_dims.size());
  Metric m;
  m.constant_ = false;
  m.n_x_ = n_x;
  m.input_dims_ = input_dims;
  m.chol_diag_ = nets::Mlp(widths(d_in, n_x), acts(nets::Activation::SoftPlus),
                           splitmix64(seed ^ 0x9d1cu));
  m.chol_offdiag_ =
      nets::Mlp(widths(d_in, offdiag_count(n_x)),
                acts(nets::Activation::Identity), splitmix64(seed ^ 0x0ffdu));
  m.lambda_net_ = nets::Mlp(widths(n_x, 1), acts(nets::Activation::SoftPlus),
                            splitmix64(seed ^ 0x1a3bu));
  return m;
}

Eigen::VectorXd Metric::restrict_input(const Eigen::VectorXd& x) const {
  Eigen::VectorXd xr(static_cast<int>(input_dims_.size()));
  for (int i = 0; i < xr.size(); ++i) xr(i) = x(input_dims_[i]);
  return xr;
}

Eigen::MatrixXd Metric::cholesky_factor(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd xr = restrict_input(x);
  return lower_from_entries(n_x_, chol_diag_.forward(xr),
                            chol_offdiag_.forward(xr));
}

Eigen::MatrixXd Metric::w_at(const Eigen::VectorXd& x) const {
  if (x.size() != n_x_) {
    throw Error("Metric::w_at: state has dimension " +
                std::to_string(x.size()) + ", metric expects " +
                std::to_string(n_x_));
  }
  if (constant_) return w_const_;
  const Eigen::MatrixXd l = cholesky_factor(x);
  return l * l.transpose();
}

double Metric::lambda_at(const Eigen::VectorXd& x) const {
  if (constant_) return lambda_const_;
  return lambda_net_.forward(x)(0);
}

int Metric::parameter_count() const {
  if (constant_) return 0;
  return chol_diag_.parameter_count() + chol_offdiag_.parameter_count() +
         lambda_net_.parameter_count();
}

Eigen::VectorXd Metric::parameters() const {
  Eigen::VectorXd p(parameter_count());
  if (!constant_) {
    const int nd = chol_diag_.parameter_count();
    const int no = chol_offdiag_.parameter_count();
    p.segment(0, nd) = chol_diag_.parameters();
    p.segment(nd, no) = chol_offdiag_.parameters();
    p.segment(nd + no, lambda_net_.parameter_count()) =
        lambda_net_.parameters();
  }
  return p;
}

void Metric::set_parameters(const Eigen::VectorXd& p) {
  if (constant_) {
    if (p.size() != 0) {
      throw Error("Metric::set_parameters: constant metric has no parameters");
    }
    return;
  }
  if (p.size() != parameter_count()) {
    throw Error("Metric::set_parameters: expected " +
                std::to_string(parameter_count()) + " parameters, got " +
                std::to_string(p.size()));
  }
  const int nd = chol_diag_.parameter_count();
  const int no = chol_offdiag_.parameter_count();
  chol_diag_.set_parameters(p.segment(0, nd));
  chol_offdiag_.set_parameters(p.segment(nd, no));
  lambda_net_.set_parameters(p.segment(nd + no, lambda_net_.parameter_count()));
}

void Metric::backprop_w(const Eigen::VectorXd& x, const Eigen::MatrixXd& w_grad,
                        Eigen::VectorXd& grad) const {
  if (constant_) {
    throw Error("Metric::backprop_w: constant metric has no parameters");
  }
  if (grad.size() != parameter_count()) {
    throw Error("Metric::backprop_w: gradient buffer has wrong size");
  }
  const Eigen::VectorXd xr = restrict_input(x);
  nets::Mlp::Trace dtrace, otrace;
  const Eigen::VectorXd diag = chol_diag_.forward(xr, dtrace);
  const Eigen::VectorXd off = chol_offdiag_.forward(xr, otrace);
  const Eigen::MatrixXd l = lower_from_entries(n_x_, diag, off);

  // W = L L^T, so dLoss/dL = (G + G^T) L restricted to the lower triangle.
  const Eigen::MatrixXd dl = (w_grad + w_grad.transpose()) * l;
  Eigen::VectorXd dg_diag(n_x_);
  Eigen::VectorXd dg_off(offdiag_count(n_x_));
  int k = 0;
  for (int i = 0; i < n_x_; ++i) {
    for (int j = 0; j < i; ++j) dg_off(k++) = dl(i, j);
    dg_diag(i) = dl(i, i);
  }

  const int nd = chol_diag_.parameter_count();
  const int no = chol_offdiag_.parameter_count();
  Eigen::VectorXd sub = Eigen::VectorXd::Zero(nd);
  chol_diag_.backprop(dtrace, dg_diag, sub);
  grad.segment(0, nd) += sub;
  sub = Eigen::VectorXd::Zero(no);
  chol_offdiag_.backprop(otrace, dg_off, sub);
  grad.segment(nd, no) += sub;
}

void Metric::backprop_lambda(const Eigen::VectorXd& x, double lambda_grad,
                             Eigen::VectorXd& grad) const {
  if (constant_) {
    throw Error("Metric::backprop_lambda: constant metric has no parameters");
  }
  if (grad.size() != parameter_count()) {
    throw Error("Metric::backprop_lambda: gradient buffer has wrong size");
  }
  nets::Mlp::Trace trace;
  lambda_net_.forward(x, trace);
  Eigen::VectorXd out_grad(1);
  out_grad(0) = lambda_grad;
  const int nl = lambda_net_.parameter_count();
  Eigen::VectorXd sub = Eigen::VectorXd::Zero(nl);
  lambda_net_.backprop(trace, out_grad, sub);
  grad.segment(parameter_count() - nl, nl) += sub;
}

const CertifiedConstants& Metric::certified() const {
  if (!certified_) {
    throw Error("Metric::certified: metric has not been certified");
  }
  return *certified_;
}

void Metric::save(std::ostream& out) const {
  out << "safed-metric v1\n";
  out << "dim " << n_x_ << "\n";
  out << "variant " << (constant_ ? "constant" : "neural") << "\n";
  if (constant_) {
    out << "lambda " << textio::fmt(lambda_const_) << "\n";
    textio::write_matrix(out, w_const_);
  } else {
    out << "input_dims " << input_dims_.size();
    for (int d : input_dims_) out << " " << d;
    out << "\n";
    chol_diag_.save(out);
    chol_offdiag_.save(out);
    lambda_net_.save(out);
  }
  out << "certified " << (certified_ ? 1 : 0) << "\n";
  if (certified_) {
    const CertifiedConstants& c = *certified_;
    out << "lambda_rate " << textio::fmt(c.lambda_rate) << "\n";
    out << evt::constant_line(c.c1_bar) << "\n";
    out << evt::constant_line(c.lambda_min_m) << "\n";
    out << evt::constant_line(c.m_upper_alpha) << "\n";
    out << evt::constant_line(c.lambda_rate_bound) << "\n";
    textio::write_matrix(out, c.m_upper);
    out << "report_ref " << (c.report_ref.empty() ? "-" : c.report_ref) << "\n";
  }
}

Metric Metric::load(std::istream& in) {
  textio::require_header(in, "safed-metric v1");
  Metric m;
  {
    const auto toks = textio::split_ws(textio::read_line(in, "metric dim"));
    if (toks.size() != 2 || toks[0] != "dim") {
      throw FormatError("metric file: expected 'dim <n>'");
    }
    m.n_x_ = static_cast<int>(textio::to_long(toks[1]));
  }
  const auto vtoks = textio::split_ws(textio::read_line(in, "metric variant"));
  if (vtoks.size() != 2 || vtoks[0] != "variant") {
    throw FormatError("metric file: expected 'variant <kind>'");
  }
  if (vtoks[1] == "constant") {
    m.constant_ = true;
    const auto ltoks =
        textio::split_ws(textio::read_line(in, "metric lambda"));
    if (ltoks.size() != 2 || ltoks[0] != "lambda") {
      throw FormatError("metric file: expected 'lambda <v>'");
    }
    m.lambda_const_ = textio::to_double(ltoks[1]);
    m.w_const_ = textio::read_matrix(in, "metric W");
  } else if (vtoks[1] == "neural") {
    m.constant_ = false;
    const auto dtoks =
        textio::split_ws(textio::read_line(in, "metric input_dims"));
    if (dtoks.size() < 2 || dtoks[0] != "input_dims") {
      throw FormatError("metric file: expected 'input_dims k ...'");
    }
    const long k = textio::to_long(dtoks[1]);
    if (static_cast<long>(dtoks.size()) != 2 + k) {
      throw FormatError("metric file: input_dims count mismatch");
    }
    for (long i = 0; i < k; ++i) {
      m.input_dims_.push_back(static_cast<int>(
          textio::to_long(dtoks[2 + static_cast<size_t>(i)])));
    }
    m.chol_diag_ = nets::Mlp::load(in);
    m.chol_offdiag_ = nets::Mlp::load(in);
    m.lambda_net_ = nets::Mlp::load(in);
  } else {
    throw FormatError("metric file: unknown variant '" + vtoks[1] +
                              "'");
  }
  const auto ctoks =
      textio::split_ws(textio::read_line(in, "metric certified flag"));
  if (ctoks.size() != 2 || ctoks[0] != "certified") {
    throw FormatError("metric file: expected 'certified <0|1>'");
  }
  if (textio::to_long(ctoks[1]) != 0) {
    CertifiedConstants c;
    const auto rtoks =
        textio::split_ws(textio::read_line(in, "metric lambda_rate"));
    if (rtoks.size() != 2 || rtoks[0] != "lambda_rate") {
      throw FormatError("metric file: expected 'lambda_rate <v>'");
    }
    c.lambda_rate = textio::to_double(rtoks[1]);
    c.c1_bar = evt::parse_constant_line(textio::read_line(in, "c1_bar"));
    c.lambda_min_m =
        evt::parse_constant_line(textio::read_line(in, "lambda_min_m"));
    c.m_upper_alpha =
        evt::parse_constant_line(textio::read_line(in, "m_upper_alpha"));
    c.lambda_rate_bound =
        evt::parse_constant_line(textio::read_line(in, "lambda_rate_bound"));
    c.m_upper = textio::read_matrix(in, "m_upper");
    const auto ftoks =
        textio::split_ws(textio::read_line(in, "metric report_ref"));
    if (ftoks.size() != 2 || ftoks[0] != "report_ref") {
      throw FormatError("metric file: expected 'report_ref <path>'");
    }
    c.report_ref = (ftoks[1] == "-") ? "" : ftoks[1];
    m.certified_ = std::move(c);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation

MetricEval metric_at(const Metric& metric, const Eigen::VectorXd& x) {
  MetricEval ev;
  ev.w = metric.w_at(x);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ev.w);
  if (es.info() != Eigen::Success) {
    throw IllConditioned("metric_at: eigen decomposition of W failed");
  }
  const double wmin = es.eigenvalues()(0);
  const double wmax = es.eigenvalues()(es.eigenvalues().size() - 1);
  if (!(wmin > 0.0) || wmax / wmin > kCondLimit) {
    throw IllConditioned("metric_at: W condition number " +
                         std::to_string(wmax / std::max(wmin, 0.0)) +
                         " exceeds " + std::to_string(kCondLimit));
  }
  Eigen::LLT<Eigen::MatrixXd> llt(ev.w);
  if (llt.info() != Eigen::Success) {
    throw IllConditioned("metric_at: Cholesky factorization of W failed");
  }
  const int n = metric.dim();
  const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(n, n);
  ev.m = symmetrized(llt.solve(identity));
  // Theta = L_W^{-1} is lower triangular and satisfies Theta^T Theta = W^{-1}.
  const Eigen::MatrixXd l = llt.matrixL();
  ev.theta = l.triangularView<Eigen::Lower>().solve(identity);
  return ev;
}

Eigen::MatrixXd null_basis(const Eigen::MatrixXd& g) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(g, Eigen::ComputeFullU);
  const double tol =
      1e-12 * std::max(1.0, svd.singularValues().size() > 0
                                ? svd.singularValues()(0)
                                : 0.0);
  int rank = 0;
  for (int i = 0; i < svd.singularValues().size(); ++i) {
    if (svd.singularValues()(i) > tol) ++rank;
  }
  return svd.matrixU().rightCols(static_cast<int>(g.rows()) - rank);
}

Eigen::MatrixXd c1_matrix(const Metric& metric,
                          const dynamics::LearnedDynamics& model,
                          const Eigen::VectorXd& x,
                          std::optional<double> lambda_override) {
  if (model.n_x != metric.dim()) {
    throw Error("c1_matrix: model state dimension " + std::to_string(model.n_x) +
                " does not match metric dimension " +
                std::to_string(metric.dim()));
  }
  return c1_with_basis(metric, model, x, lambda_override,
                       null_basis(model.g_at(x)));
}

double orthogonality_residual(const Metric& metric,
                              const dynamics::LearnedDynamics& model,
                              const Eigen::VectorXd& x) {
  const Eigen::MatrixXd g = model.g_at(x);
  const Eigen::MatrixXd gperp = null_basis(g);
  if (gperp.cols() == 0) return 0.0;
  const Eigen::MatrixXd w = metric.w_at(x);
  double res = 0.0;
  for (int j = 0; j < model.n_u; ++j) {
    const Eigen::VectorXd gj = g.col(j);
    Eigen::MatrixXd term = Eigen::MatrixXd::Zero(model.n_x, model.n_x);
    if (!metric.is_constant()) {
      term += (metric.w_at(x + kLieStep * gj) -
               metric.w_at(x - kLieStep * gj)) /
              (2.0 * kLieStep);
    }
    if (model.g.state_dependent()) {
      // Jacobian of column j: flat net output index i*n_u + j for entry (i,j).
      const Eigen::MatrixXd jac = model.g.net.input_jacobian(x);
      Eigen::MatrixXd dgj(model.n_x, model.n_x);
      for (int i = 0; i < model.n_x; ++i) {
        dgj.row(i) = jac.row(i * model.n_u + j);
      }
      term += dgj * w + w * dgj.transpose();
    }
    res = std::max(res,
                   (gperp.transpose() * term * gperp).norm());
  }
  return res;
}

// ---------------------------------------------------------------------------
// Losses and training

LossTerms ccm_losses(const std::vector<Eigen::VectorXd>& batch,
                     const Metric& metric,
                     const dynamics::LearnedDynamics& model, double tau,
                     double alpha1, double alpha2, double alpha3) {
  if (batch.empty()) throw Error("ccm_losses: empty batch");
  if (tau >= 0.0) throw Error("ccm_losses: tau must be negative");
  const bool const_g = !model.g.state_dependent();
  Eigen::MatrixXd gperp_cached;
  if (const_g) gperp_cached = null_basis(model.g_at(batch.front()));

  double exp_sum = 0.0;
  double cond_sum = 0.0;
  double min_lambda = std::numeric_limits<double>::infinity();
  for (const Eigen::VectorXd& x : batch) {
    const Eigen::MatrixXd gperp =
        const_g ? gperp_cached : null_basis(model.g_at(x));
    double lmax = -std::numeric_limits<double>::infinity();
    if (gperp.cols() > 0) {
      lmax = top_eigenpair(c1_with_basis(metric, model, x, std::nullopt, gperp))
                 .first;
    }
    exp_sum += std::exp(std::max(lmax, tau));

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(metric.w_at(x));
    const double wmin = es.eigenvalues()(0);
    const double wmax = es.eigenvalues()(es.eigenvalues().size() - 1);
    // cond(M) = cond(W) since eigenvalues of M = W^-1 are reciprocals.
    cond_sum += std::sqrt(wmax / wmin);

    min_lambda = std::min(min_lambda, metric.lambda_at(x));
  }
  const double b = static_cast<double>(batch.size());
  LossTerms terms;
  terms.l1 = -alpha1 * exp_sum / b;
  terms.l2 = alpha2 * cond_sum / b;
  terms.l3 = -alpha3 * min_lambda;
  return terms;
}

double metric_objective(Metric& metric, const Eigen::VectorXd& params,
                        const std::vector<Eigen::VectorXd>& states,
                        const std::vector<int>& batch,
                        const dynamics::LearnedDynamics& model,
                        const MetricTrainConfig& cfg, Eigen::VectorXd& grad) {
  if (metric.is_constant()) {
    throw Error("metric_objective: constant metric has no parameters");
  }
  if (batch.empty()) throw Error("metric_objective: empty batch");
  if (cfg.tau >= 0.0) throw Error("metric_objective: tau must be negative");
  metric.set_parameters(params);

  const bool const_g = !model.g.state_dependent();
  Eigen::MatrixXd gperp_cached;
  if (const_g) {
    gperp_cached =
        null_basis(model.g_at(states[static_cast<size_t>(batch.front())]));
  }

  const double b = static_cast<double>(batch.size());
  double objective = 0.0;
  double min_lambda = std::numeric_limits<double>::infinity();
  int argmin = batch.front();

  for (int idx : batch) {
    const Eigen::VectorXd& x = states[static_cast<size_t>(idx)];
    const Eigen::MatrixXd gperp =
        const_g ? gperp_cached : null_basis(model.g_at(x));
    const Eigen::MatrixXd w0 = metric.w_at(x);
    const double lam = metric.lambda_at(x);

    Eigen::MatrixXd w_grad_here = Eigen::MatrixXd::Zero(metric.dim(),
                                                        metric.dim());

    // Contraction term a1 * exp(max(lambda_max(C1), tau)).
    if (gperp.cols() > 0) {
      const Eigen::MatrixXd a = model.f_jacobian(x);
      const Eigen::VectorXd f = model.f(x);
      const Eigen::VectorXd xp = x + kLieStep * f;
      const Eigen::VectorXd xm = x - kLieStep * f;
      Eigen::MatrixXd inner = a * w0 + w0 * a.transpose() + 2.0 * lam * w0;
      inner -= (metric.w_at(xp) - metric.w_at(xm)) / (2.0 * kLieStep);
      const auto [lmax, v] =
          top_eigenpair(symmetrized(gperp.transpose() * inner * gperp));
      objective += cfg.alpha1 * std::exp(std::max(lmax, cfg.tau)) / b;
      if (lmax > cfg.tau) {
        // d lambda_max = p^T d(inner) p with p the extremal direction.
        const double s1 = cfg.alpha1 * std::exp(lmax) / b;
        const Eigen::VectorXd p = gperp * v;
        const Eigen::VectorXd ap = a.transpose() * p;
        const Eigen::MatrixXd ppt = p * p.transpose();
        w_grad_here += s1 * (ap * p.transpose() + p * ap.transpose() +
                             2.0 * lam * ppt);
        metric.backprop_w(xp, (-s1 / (2.0 * kLieStep)) * ppt, grad);
        metric.backprop_w(xm, (s1 / (2.0 * kLieStep)) * ppt, grad);
        metric.backprop_lambda(x, s1 * 2.0 * p.dot(w0 * p), grad);
      }
    } else {
      objective += cfg.alpha1 * std::exp(cfg.tau) / b;
    }

    // Conditioning term a2 * sqrt(lambda_max(W)/lambda_min(W)).
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w0);
    if (es.info() != Eigen::Success) {
      throw Error("metric_objective: eigen decomposition of W failed");
    }
    const int last = static_cast<int>(w0.rows()) - 1;
    const double wmin = es.eigenvalues()(0);
    const double wmax = es.eigenvalues()(last);
    const double cond_sqrt = std::sqrt(wmax / wmin);
    objective += cfg.alpha2 * cond_sqrt / b;
    if (cfg.alpha2 != 0.0) {
      const Eigen::VectorXd vmin = es.eigenvectors().col(0);
      const Eigen::VectorXd vmax = es.eigenvectors().col(last);
      w_grad_here += (cfg.alpha2 / (b * 2.0 * cond_sqrt)) *
                     ((1.0 / wmin) * (vmax * vmax.transpose()) -
                      (wmax / (wmin * wmin)) * (vmin * vmin.transpose()));
    }

    if (!w_grad_here.isZero(0.0)) metric.backprop_w(x, w_grad_here, grad);

    if (lam < min_lambda) {
      min_lambda = lam;
      argmin = idx;
    }
  }

  // Rate term -a3 * min lambda (subgradient at the batch argmin).
  objective -= cfg.alpha3 * min_lambda;
  if (cfg.alpha3 != 0.0) {
    metric.backprop_lambda(states[static_cast<size_t>(argmin)], -cfg.alpha3,
                           grad);
  }
  return objective;
}

nets::TrainLog train_metric(Metric& metric,
                            const std::vector<Eigen::VectorXd>& states,
                            const dynamics::LearnedDynamics& model,
                            const MetricTrainConfig& cfg) {
  if (metric.is_constant()) {
    throw Error("train_metric: constant metric has no parameters");
  }
  if (states.empty()) throw Error("train_metric: no states");
  Eigen::VectorXd params = metric.parameters();
  auto log = nets::train_custom(
      params, static_cast<int>(states.size()), cfg.base,
      [&](const std::vector<int>& batch, const Eigen::VectorXd& p,
          Eigen::VectorXd& grad) {
        return metric_objective(metric, p, states, batch, model, cfg, grad);
      });
  metric.set_parameters(params);
  return log;
}

// ---------------------------------------------------------------------------
// Constant-metric synthesis

Metric solve_constant_metric(const dynamics::LearnedDynamics& model,
                             double lambda) {
  if (!model.is_linear()) {
    throw Error(
        "solve_constant_metric: model must be linear (affine f, constant g)");
  }
  if (lambda <= 0.0) {
    throw Error("solve_constant_metric: contraction rate must be positive");
  }
  const int n = model.n_x;
  const Eigen::VectorXd origin = Eigen::VectorXd::Zero(n);
  const Eigen::MatrixXd a = model.f_jacobian(origin);
  const Eigen::MatrixXd gperp = null_basis(model.g_at(origin));
  if (gperp.cols() == 0) {
    // Fully actuated: the restricted condition is vacuous, any PD W works.
    return Metric::constant(Eigen::MatrixXd::Identity(n, n), lambda);
  }

  constexpr int kMaxIters = 5000;
  constexpr double kLearningRate = 0.05;
  constexpr double kEigFloor = 1e-6;
  constexpr double kTargetMargin = -1e-3;

  Eigen::MatrixXd w = Eigen::MatrixXd::Identity(n, n);
  for (int it = 0; it < kMaxIters; ++it) {
    const Eigen::MatrixXd c = symmetrized(
        gperp.transpose() *
        (a * w + w * a.transpose() + 2.0 * lambda * w) * gperp);
    const auto [lmax, v] = top_eigenpair(c);
    if (lmax < kTargetMargin) return Metric::constant(w, lambda);

    const Eigen::VectorXd p = gperp * v;
    const Eigen::VectorXd ap = a.transpose() * p;
    const Eigen::MatrixXd step =
        ap * p.transpose() + p * ap.transpose() +
        2.0 * lambda * (p * p.transpose());
    w = symmetrized(w - kLearningRate * step);

    // Project back onto the PD cone and renormalize the scale.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(kEigFloor);
    w = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    w *= static_cast<double>(n) / w.trace();
  }
  std::ostringstream msg;
  msg << "solve_constant_metric: no constant metric found at rate "
      << lambda << "; try a lower rate";
  throw Infeasible(msg.str());
}

// ---------------------------------------------------------------------------
// Certification

void certify(Metric& metric, const dynamics::LearnedDynamics& model,
             const domain::Box& d_x, const CertifyConfig& cfg) {
  if (d_x.dim() != metric.dim() || model.n_x != metric.dim()) {
    throw Error("certify: domain, model, and metric dimensions disagree");
  }
  const Rng root(cfg.seed);
  CertifiedConstants out;

  // Rate lower bound first: the contraction bound is evaluated at this rate.
  if (metric.is_constant()) {
    out.lambda_rate_bound =
        evt::exact_constant(metric.lambda_at(d_x.center()),
                            evt::BoundKind::LowerBound, "lambda_rate",
                            cfg.source);
  } else {
    Rng rng = root.fork(1);
    evt::EstimateConfig ec;
    ec.batch_size = cfg.batch_size;
    ec.n_batches = cfg.n_batches;
    ec.psi = cfg.psi;
    ec.kind = evt::BoundKind::LowerBound;
    ec.name = "lambda_rate";
    ec.source = cfg.source;
    out.lambda_rate_bound = evt::estimate_constant(
        [&] { return metric.lambda_at(d_x.sample(rng)); }, ec);
  }
  out.lambda_rate = out.lambda_rate_bound.value;

  // Contraction bound: closed form for a constant metric with a linear model
  // (the matrix does not depend on x), estimated over the domain otherwise.
  if (metric.is_constant() && model.is_linear()) {
    const Eigen::MatrixXd c1 = c1_matrix(metric, model, d_x.center());
    if (c1.rows() == 0) {
      throw Error(
          "certify: control matrix has full row rank; the restricted "
          "contraction condition is empty");
    }
    out.c1_bar = evt::exact_constant(top_eigenpair(c1).first,
                                     evt::BoundKind::UpperBound, "c1_bar",
                                     cfg.source);
  } else {
    const bool const_g = !model.g.state_dependent();
    Eigen::MatrixXd gperp_cached;
    if (const_g) gperp_cached = null_basis(model.g_at(d_x.center()));
    Rng rng = root.fork(2);
    evt::EstimateConfig ec;
    ec.batch_size = cfg.batch_size;
    ec.n_batches = cfg.n_batches;
    ec.psi = cfg.psi;
    ec.kind = evt::BoundKind::UpperBound;
    ec.name = "c1_bar";
    ec.source = cfg.source;
    out.c1_bar = evt::estimate_constant(
        [&] {
          const Eigen::VectorXd x = d_x.sample(rng);
          const Eigen::MatrixXd gperp =
              const_g ? gperp_cached : null_basis(model.g_at(x));
          if (gperp.cols() == 0) {
            throw Error(
                "certify: control matrix has full row rank; the restricted "
                "contraction condition is empty");
          }
          return top_eigenpair(
                     c1_with_basis(metric, model, x, out.lambda_rate, gperp))
              .first;
        },
        ec);
  }
  if (!(out.c1_bar.value < 0.0)) {
    std::ostringstream msg;
    msg << "certify: c1_bar = " << out.c1_bar.value
        << " is not negative; the metric does not certify contraction at rate "
        << out.lambda_rate;
    throw CertificationFailed(msg.str());
  }

  // Metric eigenvalue bounds: lambda_min(M) = 1/lambda_max(W) and vice versa.
  if (metric.is_constant()) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
        metric.w_at(d_x.center()));
    const double wmin = es.eigenvalues()(0);
    const double wmax = es.eigenvalues()(es.eigenvalues().size() - 1);
    out.lambda_min_m =
        evt::exact_constant(1.0 / wmax, evt::BoundKind::LowerBound,
                            "lambda_min_m", cfg.source);
    out.m_upper_alpha =
        evt::exact_constant(1.0 / wmin, evt::BoundKind::UpperBound,
                            "m_upper_alpha", cfg.source);
  } else {
    auto eig_range = [&](Rng& rng) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
          metric.w_at(d_x.sample(rng)));
      return std::make_pair(es.eigenvalues()(0),
                            es.eigenvalues()(es.eigenvalues().size() - 1));
    };
    {
      Rng rng = root.fork(3);
      evt::EstimateConfig ec;
      ec.batch_size = cfg.batch_size;
      ec.n_batches = cfg.n_batches;
      ec.psi = cfg.psi;
      ec.kind = evt::BoundKind::LowerBound;
      ec.name = "lambda_min_m";
      ec.source = cfg.source;
      out.lambda_min_m = evt::estimate_constant(
          [&] { return 1.0 / eig_range(rng).second; }, ec);
    }
    {
      Rng rng = root.fork(4);
      evt::EstimateConfig ec;
      ec.batch_size = cfg.batch_size;
      ec.n_batches = cfg.n_batches;
      ec.psi = cfg.psi;
      ec.kind = evt::BoundKind::UpperBound;
      ec.name = "m_upper_alpha";
      ec.source = cfg.source;
      out.m_upper_alpha = evt::estimate_constant(
          [&] { return 1.0 / eig_range(rng).first; }, ec);
    }
  }
  if (!(out.lambda_min_m.value > 0.0)) {
    throw CertificationFailed(
        "certify: certified lambda_min(M) is not positive");
  }
  out.m_upper = out.m_upper_alpha.value *
                Eigen::MatrixXd::Identity(metric.dim(), metric.dim());
  metric.set_certified(std::move(out));
}

}  // namespace safed::ccm
