#pragma once

#include <Eigen/Dense>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "safed/common.hpp"

namespace safed::nets {

struct DimensionMismatch : Error {
  using Error::Error;
};
struct NonFiniteLoss : Error {
  using Error::Error;
};

enum class Activation { Relu, SoftPlus, Identity };

std::string activation_name(Activation a);
Activation parse_activation(const std::string& name);

double softplus(double z);        // max(z,0) + log1p(exp(-|z|))
double softplus_deriv(double z);  // logistic sigmoid

struct Layer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
  Activation act = Activation::Identity;
};

// Small dense feed-forward network with reverse-mode gradients.
class Mlp {
 public:
  Mlp() = default;
  // widths = {in, h1, ..., out}; acts.size() == widths.size() - 1.
  Mlp(const std::vector<int>& widths, const std::vector<Activation>& acts,
      uint64_t seed);

  int input_dim() const;
  int output_dim() const;
  const std::vector<Layer>& layers() const { return layers_; }
  uint64_t seed() const { return seed_; }

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;

  // Layer inputs and pre-activations recorded for the backward pass.
  struct Trace {
    std::vector<Eigen::VectorXd> inputs;
    std::vector<Eigen::VectorXd> pre;
  };
  Eigen::VectorXd forward(const Eigen::VectorXd& x, Trace& trace) const;

  // Accumulates dLoss/dParams into grad (flat layout, see parameters()) and
  // returns dLoss/dInput. `out_grad` is dLoss/dOutput.
  Eigen::VectorXd backprop(const Trace& trace, const Eigen::VectorXd& out_grad,
                           Eigen::VectorXd& grad) const;

  Eigen::MatrixXd input_jacobian(const Eigen::VectorXd& x) const;

  // Flat parameter vector: per layer, row-major weights then bias.
  int parameter_count() const;
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& p);

  void save(std::ostream& out) const;
  static Mlp load(std::istream& in);

 private:
  std::vector<Layer> layers_;
  uint64_t seed_ = 0;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;
  int epochs = 100;
  uint64_t seed = 0;
  double weight_decay = 0.0;
};

// Adam with decoupled weight decay; fixed published default coefficients.
class Adam {
 public:
  Adam(int n_params, double learning_rate, double weight_decay);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);

 private:
  double lr_, wd_;
  long t_ = 0;
  Eigen::VectorXd m_, v_;
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean per-sample loss per epoch
  double final_loss() const {
    return epoch_loss.empty() ? 0.0 : epoch_loss.back();
  }
};

// Per-sample loss on the net output: returns the loss and fills
// dLoss/dOutput.
using OutputLoss =
    std::function<double(const Eigen::VectorXd& out, const Eigen::VectorXd& target,
                         Eigen::VectorXd& out_grad)>;

OutputLoss mse_loss();  // |out - target|^2
// max(0, |target_i| - out_i + margin) summed, plus shrink * sum(out): pushes
// the predicted envelope above the observed residual while keeping it tight.
OutputLoss hinge_envelope_loss(double margin, double shrink);

// Mini-batch training of `net` against per-sample targets. Columns of
// inputs/targets are samples. Deterministic for a fixed cfg.seed.
TrainLog train(Mlp& net, const Eigen::MatrixXd& inputs,
               const Eigen::MatrixXd& targets, const OutputLoss& loss,
               const TrainConfig& cfg);
TrainLog train_mse(Mlp& net, const Eigen::MatrixXd& inputs,
                   const Eigen::MatrixXd& targets, const TrainConfig& cfg);

// Generic mini-batch driver for losses that do not factor through a single
// net output (e.g. the contraction-metric composite loss). `loss_grad` gets
// the batch sample indices and must return the batch loss and write the
// gradient w.r.t. params.
TrainLog train_custom(
    Eigen::VectorXd& params, int n_samples, const TrainConfig& cfg,
    const std::function<double(const std::vector<int>& batch,
                               const Eigen::VectorXd& params,
                               Eigen::VectorXd& grad)>& loss_grad);

}  // namespace safed::nets
