#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "safed/domain.hpp"
#include "safed/evt.hpp"
#include "safed/nets.hpp"

namespace safed::dynamics {

using nets::DimensionMismatch;

struct UncertifiedPhi : Error {
  using Error::Error;
};

// How the control matrix g(x) is represented.
enum class GKind {
  InputTail,        // g = [0; I], controls enter the last n_u derivatives
  ConstantMatrix,   // learned constant n_x x n_u matrix
  NetMatrix,        // Mlp x -> n_x*n_u, rows major
};

struct GSpec {
  GKind kind = GKind::InputTail;
  Eigen::MatrixXd constant;  // ConstantMatrix
  nets::Mlp net;             // NetMatrix

  Eigen::MatrixXd at(const Eigen::VectorXd& x, int n_x, int n_u) const;
  bool state_dependent() const { return kind == GKind::NetMatrix; }
};

// Learned control-affine model h(x,u) = f(x) + g(x) u.
struct LearnedDynamics {
  int n_x = 0;
  int n_u = 0;
  nets::Mlp f_net;  // x -> n_x
  GSpec g;

  Eigen::VectorXd eval(const Eigen::VectorXd& x,
                       const Eigen::VectorXd& u) const;
  Eigen::VectorXd f(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd g_at(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd f_jacobian(const Eigen::VectorXd& x) const;

  // True when f is a single affine layer and g is state-independent, so the
  // model is exactly linear (plus offset) and closed-form analysis applies.
  bool is_linear() const;

  void save(std::ostream& out) const;
  static LearnedDynamics load(std::istream& in);
};

struct Record {
  Eigen::VectorXd x;
  Eigen::VectorXd u;
  Eigen::VectorXd xdot;
};

// Transition records with a role tag (training S or validation V).
struct Dataset {
  int n_x = 0;
  int n_u = 0;
  std::string role = "S";  // "S" or "V"
  std::string units = "si";
  std::vector<Record> records;

  void validate_in_domain(const domain::TrustedDomain& dom) const;
  void save(std::ostream& out) const;
  static Dataset load(std::istream& in);
};

// Elementwise-positive disturbance envelope w(x,u), optionally x-only.
struct DisturbanceNet {
  nets::Mlp w_net;  // final activation SoftPlus, so outputs are > 0
  bool control_input = true;
  std::optional<evt::VerifiedConstant> phi;

  Eigen::VectorXd w(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const;

  void save(std::ostream& out) const;
  static DisturbanceNet load(std::istream& in);
};

Eigen::VectorXd eval_dynamics(const LearnedDynamics& model,
                              const Eigen::VectorXd& x,
                              const Eigen::VectorXd& u);

// mean over batch and coordinates of max(0, |xdot - h| - w + margin)
// plus shrink * mean(w).
double disturbance_loss(const std::vector<Record>& batch,
                        const LearnedDynamics& model,
                        const DisturbanceNet& wnet, double margin,
                        double shrink);

// max over coordinates of |xdot - h(x,u)| - w(x,u); the scalar whose extremum
// EVT certifies as phi.
double violation_sample(const Record& record, const LearnedDynamics& model,
                        const DisturbanceNet& wnet);

// w(x,u) + max(phi, 0) elementwise; requires a certified phi.
Eigen::VectorXd verified_bound(const DisturbanceNet& wnet,
                               const Eigen::VectorXd& x,
                               const Eigen::VectorXd& u);

// Fit f (and g when learnable) to (x,u) -> xdot by mean-squared error.
nets::TrainLog train_dynamics(LearnedDynamics& model, const Dataset& data,
                              const nets::TrainConfig& cfg);

// Fit the disturbance envelope on model residuals with the hinge loss.
nets::TrainLog train_disturbance(DisturbanceNet& wnet,
                                 const LearnedDynamics& model,
                                 const Dataset& data, double margin,
                                 double shrink, const nets::TrainConfig& cfg);

}  // namespace safed::dynamics
