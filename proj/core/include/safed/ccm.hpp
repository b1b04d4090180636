#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "safed/common.hpp"
#include "safed/domain.hpp"
#include "safed/dynamics.hpp"
#include "safed/evt.hpp"
#include "safed/nets.hpp"

namespace safed::ccm {

using evt::CertificationFailed;

// Metric evaluation failed because W(x) is numerically singular.
struct IllConditioned : Error {
  using Error::Error;
};

// No constant metric exists at the requested contraction rate.
struct Infeasible : Error {
  using Error::Error;
};

// One metric evaluation: M(x) positive definite, W(x) = M(x)^-1, and Theta(x)
// lower triangular with Theta^T Theta = M (so |Theta v| is the metric norm).
struct MetricEval {
  Eigen::MatrixXd m;
  Eigen::MatrixXd w;
  Eigen::MatrixXd theta;
};

// High-confidence bounds attached to a metric by `certify`.
struct CertifiedConstants {
  evt::VerifiedConstant c1_bar;         // upper bound of lambda_max(C1(x)); < 0
  evt::VerifiedConstant lambda_min_m;   // lower bound of lambda_min(M(x))
  evt::VerifiedConstant m_upper_alpha;  // upper bound of lambda_max(M(x))
  evt::VerifiedConstant lambda_rate_bound;  // lower bound of lambda(x)
  double lambda_rate = 0.0;   // convenience copy of lambda_rate_bound.value
  Eigen::MatrixXd m_upper;    // m_upper_alpha.value * I
  std::string report_ref;     // path of the certification report; "" if none
};

// Contraction metric M(x): either a constant PD matrix with a constant rate,
// or neural, where two nets emit the lower Cholesky factor L(x) of the dual
// metric W(x) = L L^T (SoftPlus-floored diagonal keeps it PD) and a third net
// emits the pointwise rate lambda(x) > 0. The Cholesky nets read only the
// state coordinates in `input_dims`; keeping those to the non-actuated
// coordinates makes the input-direction derivative terms vanish.
class Metric {
 public:
  Metric() = default;

  static Metric constant(const Eigen::MatrixXd& w, double lambda);
  static Metric neural(int n_x, const std::vector<int>& input_dims,
                       const std::vector<int>& hidden, uint64_t seed);

  bool is_constant() const { return constant_; }
  int dim() const { return n_x_; }
  const std::vector<int>& input_dims() const { return input_dims_; }

  // Dual metric W(x); for the constant variant this ignores x.
  Eigen::MatrixXd w_at(const Eigen::VectorXd& x) const;
  // Pointwise contraction rate lambda(x).
  double lambda_at(const Eigen::VectorXd& x) const;

  // Flat parameter vector [chol_diag | chol_offdiag | lambda_net].
  // The constant variant has no parameters.
  int parameter_count() const;
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& p);

  // Reverse-mode accumulation for the neural variant: given the sensitivity
  // dLoss/dW(x) (any square matrix; used symmetrically) or dLoss/dlambda(x),
  // add dLoss/dParams into `grad` (same layout as parameters()).
  void backprop_w(const Eigen::VectorXd& x, const Eigen::MatrixXd& w_grad,
                  Eigen::VectorXd& grad) const;
  void backprop_lambda(const Eigen::VectorXd& x, double lambda_grad,
                       Eigen::VectorXd& grad) const;

  bool has_certified() const { return certified_.has_value(); }
  const CertifiedConstants& certified() const;
  void set_certified(CertifiedConstants c) { certified_ = std::move(c); }

  void save(std::ostream& out) const;
  static Metric load(std::istream& in);

 private:
  Eigen::MatrixXd cholesky_factor(const Eigen::VectorXd& x) const;
  Eigen::VectorXd restrict_input(const Eigen::VectorXd& x) const;

  bool constant_ = true;
  int n_x_ = 0;
  Eigen::MatrixXd w_const_;
  double lambda_const_ = 0.0;
  std::vector<int> input_dims_;
  nets::Mlp chol_diag_;     // restricted x -> n_x diagonal entries (SoftPlus)
  nets::Mlp chol_offdiag_;  // restricted x -> strictly-lower entries, row-major
  nets::Mlp lambda_net_;    // full x -> rate (SoftPlus)
  std::optional<CertifiedConstants> certified_;
};

// M = W^-1 and its triangular factor at x.
MetricEval metric_at(const Metric& metric, const Eigen::VectorXd& x);

// Orthonormal basis of the left null space of g (columns span {v : v^T g = 0}).
// May have zero columns when g has full row rank.
Eigen::MatrixXd null_basis(const Eigen::MatrixXd& g);

// Restricted contraction matrix
//   C1(x) = gp^T (-D_f W + A W + W A^T + 2 lambda W) gp,   A = df/dx, gp = g-perp,
// where D_f W is the directional derivative of W along f (central finite
// differences with step 1e-5; exactly zero for a constant metric). Negative
// semidefiniteness of C1 over the domain is the contraction condition the
// losses train for and `certify` bounds. `lambda_override` substitutes a
// fixed rate for the pointwise lambda(x) (used during certification with the
// certified lower bound).
Eigen::MatrixXd c1_matrix(const Metric& metric,
                          const dynamics::LearnedDynamics& model,
                          const Eigen::VectorXd& x,
                          std::optional<double> lambda_override = std::nullopt);

// Max over control columns j of |gp^T (D_{g_j} W + J_{g_j} W + W J_{g_j}^T) gp|_F,
// the residual of the input-direction metric condition. Zero by construction
// when W is constant (or reads only non-actuated coordinates) and g is [0; I].
double orthogonality_residual(const Metric& metric,
                              const dynamics::LearnedDynamics& model,
                              const Eigen::VectorXd& x);

// The three training loss terms, reported with their published signs:
//   l1 = -a1 * mean(exp(max(lambda_max(C1(x)), tau)))
//   l2 =  a2 * mean(sqrt(lambda_max(M)/lambda_min(M)))
//   l3 = -a3 * min over batch of lambda(x)
struct LossTerms {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
};
LossTerms ccm_losses(const std::vector<Eigen::VectorXd>& batch,
                     const Metric& metric,
                     const dynamics::LearnedDynamics& model, double tau = -0.01,
                     double alpha1 = 1.0, double alpha2 = 1.0,
                     double alpha3 = 1.0);

struct MetricTrainConfig {
  nets::TrainConfig base;
  double tau = -0.01;
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double alpha3 = 1.0;
};

// Batch objective minimized by train_metric:
//   J = a1*mean(exp(max(lambda_max(C1), tau))) + a2*mean(sqrt(cond M)) - a3*min lambda.
// Driving J down tightens all three reported loss terms. Sets `params` on the
// metric, accumulates dJ/dparams into `grad` (not zeroed here), returns J.
double metric_objective(Metric& metric, const Eigen::VectorXd& params,
                        const std::vector<Eigen::VectorXd>& states,
                        const std::vector<int>& batch,
                        const dynamics::LearnedDynamics& model,
                        const MetricTrainConfig& cfg, Eigen::VectorXd& grad);

// Mini-batch training of a neural metric on sampled states.
nets::TrainLog train_metric(Metric& metric,
                            const std::vector<Eigen::VectorXd>& states,
                            const dynamics::LearnedDynamics& model,
                            const MetricTrainConfig& cfg);

// For a linear model (f = Ax, g = B constant): projected-gradient search for a
// constant W > 0 with gp^T (A W + W A^T + 2 lambda W) gp strictly negative
// definite. Throws Infeasible when no such W is found (try a lower rate).
Metric solve_constant_metric(const dynamics::LearnedDynamics& model,
                             double lambda);

struct CertifyConfig {
  double psi = 0.99;
  int batch_size = 50;   // samples per block
  int n_batches = 200;   // number of block maxima
  uint64_t seed = 0;
  std::string source = "metric-domain";
};

// Bound the four metric constants over uniform draws from d_x and attach them
// to the metric: lambda_rate (lower bound of lambda(x)), c1_bar (upper bound
// of lambda_max(C1(x)) evaluated at the bounded rate; must come out negative),
// lambda_min_m (lower bound of lambda_min(M(x))), and m_upper = alpha*I with
// alpha an upper bound of lambda_max(M(x)). Constants that are closed-form
// (constant metric, and the contraction matrix of a constant metric with a
// linear model) are recorded as exact instead of estimated. Each estimated
// constant draws from its own derived RNG stream.
void certify(Metric& metric, const dynamics::LearnedDynamics& model,
             const domain::Box& d_x, const CertifyConfig& cfg);

}  // namespace safed::ccm
