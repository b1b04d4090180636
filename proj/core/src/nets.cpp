#include "safed/nets.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "safed/textio.hpp"

namespace safed::nets {

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Relu:
      return "relu";
    case Activation::SoftPlus:
      return "softplus";
    case Activation::Identity:
      return "identity";
  }
  throw Error("activation_name: bad enum");
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::Relu;
  if (name == "softplus") return Activation::SoftPlus;
  if (name == "identity") return Activation::Identity;
  throw FormatError("unknown activation '" + name + "'");
}

double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double softplus_deriv(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

double apply_act(Activation a, double z) {
  switch (a) {
    case Activation::Relu:
      return z > 0.0 ? z : 0.0;
    case Activation::SoftPlus:
      return softplus(z);
    case Activation::Identity:
      return z;
  }
  throw Error("apply_act: bad enum");
}

double act_deriv(Activation a, double z) {
  switch (a) {
    case Activation::Relu:
      return z > 0.0 ? 1.0 : 0.0;
    case Activation::SoftPlus:
      return softplus_deriv(z);
    case Activation::Identity:
      return 1.0;
  }
  throw Error("act_deriv: bad enum");
}

}  // namespace

Mlp::Mlp(const std::vector<int>& widths, const std::vector<Activation>& acts,
         uint64_t seed)
    : seed_(seed) {
  if (widths.size() < 2 || acts.size() != widths.size() - 1) {
    throw DimensionMismatch("Mlp: need n+1 widths for n activations");
  }
  Rng rng(seed);
  layers_.reserve(acts.size());
  for (size_t l = 0; l < acts.size(); ++l) {
    const int in = widths[l], out = widths[l + 1];
    if (in < 1 || out < 1) throw DimensionMismatch("Mlp: widths must be >= 1");
    Layer layer;
    layer.weight.resize(out, in);
    const double limit = std::sqrt(6.0 / in);  // He-style uniform fan-in
    for (int r = 0; r < out; ++r) {
      for (int c = 0; c < in; ++c) {
        layer.weight(r, c) = rng.uniform(-limit, limit);
      }
    }
    layer.bias = Eigen::VectorXd::Zero(out);
    layer.act = acts[l];
    layers_.push_back(std::move(layer));
  }
}

int Mlp::input_dim() const {
  if (layers_.empty()) throw Error("Mlp: empty net");
  return static_cast<int>(layers_.front().weight.cols());
}

int Mlp::output_dim() const {
  if (layers_.empty()) throw Error("Mlp: empty net");
  return static_cast<int>(layers_.back().weight.rows());
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const {
  Trace trace;
  return forward(x, trace);
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x, Trace& trace) const {
  if (layers_.empty()) throw Error("Mlp: empty net");
  if (x.size() != layers_.front().weight.cols()) {
    throw DimensionMismatch("Mlp::forward: input size " +
                            std::to_string(x.size()) + " != " +
                            std::to_string(layers_.front().weight.cols()));
  }
  trace.inputs.clear();
  trace.pre.clear();
  Eigen::VectorXd h = x;
  for (const auto& layer : layers_) {
    trace.inputs.push_back(h);
    Eigen::VectorXd z = layer.weight * h + layer.bias;
    trace.pre.push_back(z);
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = apply_act(layer.act, z[i]);
    h = std::move(z);
  }
  return h;
}

Eigen::VectorXd Mlp::backprop(const Trace& trace,
                              const Eigen::VectorXd& out_grad,
                              Eigen::VectorXd& grad) const {
  if (trace.inputs.size() != layers_.size()) {
    throw Error("Mlp::backprop: trace does not match net");
  }
  if (grad.size() != parameter_count()) {
    throw DimensionMismatch("Mlp::backprop: grad buffer size mismatch");
  }
  Eigen::VectorXd dy = out_grad;
  // flat offsets of each layer's block
  std::vector<int> offsets(layers_.size());
  int off = 0;
  for (size_t l = 0; l < layers_.size(); ++l) {
    offsets[l] = off;
    off += static_cast<int>(layers_[l].weight.size() + layers_[l].bias.size());
  }
  for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
    const auto& layer = layers_[static_cast<size_t>(l)];
    const auto& z = trace.pre[static_cast<size_t>(l)];
    const auto& in = trace.inputs[static_cast<size_t>(l)];
    Eigen::VectorXd dz(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      dz[i] = dy[i] * act_deriv(layer.act, z[i]);
    }
    const int rows = static_cast<int>(layer.weight.rows());
    const int cols = static_cast<int>(layer.weight.cols());
    double* gw = grad.data() + offsets[static_cast<size_t>(l)];
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        gw[r * cols + c] += dz[r] * in[c];  // row-major weight block
      }
    }
    double* gb = gw + rows * cols;
    for (int r = 0; r < rows; ++r) gb[r] += dz[r];
    dy = layer.weight.transpose() * dz;
  }
  return dy;
}

Eigen::MatrixXd Mlp::input_jacobian(const Eigen::VectorXd& x) const {
  Trace trace;
  forward(x, trace);
  Eigen::MatrixXd jac =
      Eigen::MatrixXd::Identity(input_dim(), input_dim());
  for (size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    jac = (layer.weight * jac).eval();
    const auto& z = trace.pre[l];
    for (Eigen::Index r = 0; r < jac.rows(); ++r) {
      jac.row(r) *= act_deriv(layer.act, z[r]);
    }
  }
  return jac;
}

int Mlp::parameter_count() const {
  int n = 0;
  for (const auto& layer : layers_) {
    n += static_cast<int>(layer.weight.size() + layer.bias.size());
  }
  return n;
}

Eigen::VectorXd Mlp::parameters() const {
  Eigen::VectorXd p(parameter_count());
  int off = 0;
  for (const auto& layer : layers_) {
    const int rows = static_cast<int>(layer.weight.rows());
    const int cols = static_cast<int>(layer.weight.cols());
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) p[off++] = layer.weight(r, c);
    }
    for (int r = 0; r < rows; ++r) p[off++] = layer.bias[r];
  }
  return p;
}

void Mlp::set_parameters(const Eigen::VectorXd& p) {
  if (p.size() != parameter_count()) {
    throw DimensionMismatch("Mlp::set_parameters: size mismatch");
  }
  if (!p.allFinite()) throw Error("Mlp::set_parameters: non-finite values");
  int off = 0;
  for (auto& layer : layers_) {
    const int rows = static_cast<int>(layer.weight.rows());
    const int cols = static_cast<int>(layer.weight.cols());
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) layer.weight(r, c) = p[off++];
    }
    for (int r = 0; r < rows; ++r) layer.bias[r] = p[off++];
  }
}

void Mlp::save(std::ostream& out) const {
  out << "safed-mlp v1\n";
  out << "seed " << seed_ << "\n";
  out << "layers " << layers_.size() << "\n";
  for (const auto& layer : layers_) {
    out << "layer " << layer.weight.cols() << " " << layer.weight.rows() << " "
        << activation_name(layer.act) << "\n";
    textio::write_matrix(out, layer.weight);
    textio::write_vector(out, layer.bias);
  }
}

Mlp Mlp::load(std::istream& in) {
  using namespace textio;
  require_header(in, "safed-mlp v1");
  auto seed_tok = split_ws(read_line(in, "mlp seed"));
  if (seed_tok.size() != 2 || seed_tok[0] != "seed") {
    throw FormatError("mlp: bad seed line");
  }
  auto n_tok = split_ws(read_line(in, "mlp layer count"));
  if (n_tok.size() != 2 || n_tok[0] != "layers") {
    throw FormatError("mlp: bad layers line");
  }
  Mlp net;
  net.seed_ = static_cast<uint64_t>(std::stoull(seed_tok[1]));
  const long n_layers = to_long(n_tok[1]);
  for (long l = 0; l < n_layers; ++l) {
    auto tok = split_ws(read_line(in, "mlp layer header"));
    if (tok.size() != 4 || tok[0] != "layer") {
      throw FormatError("mlp: bad layer header");
    }
    Layer layer;
    layer.act = parse_activation(tok[3]);
    layer.weight = read_matrix(in, "mlp weight");
    layer.bias = read_vector(in, "mlp bias");
    if (layer.weight.rows() != to_long(tok[2]) ||
        layer.weight.cols() != to_long(tok[1]) ||
        layer.bias.size() != layer.weight.rows()) {
      throw FormatError("mlp: layer dimensions disagree with header");
    }
    net.layers_.push_back(std::move(layer));
  }
  if (net.layers_.empty()) throw FormatError("mlp: no layers");
  return net;
}

Adam::Adam(int n_params, double learning_rate, double weight_decay)
    : lr_(learning_rate),
      wd_(weight_decay),
      m_(Eigen::VectorXd::Zero(n_params)),
      v_(Eigen::VectorXd::Zero(n_params)) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw DimensionMismatch("Adam::step: size mismatch");
  }
  ++t_;
  m_ = kBeta1 * m_ + (1.0 - kBeta1) * grad;
  v_ = kBeta2 * v_ + (1.0 - kBeta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] -= lr_ * (mhat / (std::sqrt(vhat) + kEps) + wd_ * params[i]);
  }
}

OutputLoss mse_loss() {
  return [](const Eigen::VectorXd& out, const Eigen::VectorXd& target,
            Eigen::VectorXd& out_grad) {
    const Eigen::VectorXd r = out - target;
    out_grad = 2.0 * r;
    return r.squaredNorm();
  };
}

OutputLoss hinge_envelope_loss(double margin, double shrink) {
  return [margin, shrink](const Eigen::VectorXd& out,
                          const Eigen::VectorXd& target,
                          Eigen::VectorXd& out_grad) {
    double loss = 0.0;
    out_grad = Eigen::VectorXd::Zero(out.size());
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      const double gap = std::abs(target[i]) - out[i] + margin;
      if (gap > 0.0) {
        loss += gap;
        out_grad[i] -= 1.0;
      }
      loss += shrink * out[i];
      out_grad[i] += shrink;
    }
    return loss;
  };
}

TrainLog train_custom(
    Eigen::VectorXd& params, int n_samples, const TrainConfig& cfg,
    const std::function<double(const std::vector<int>& batch,
                               const Eigen::VectorXd& params,
                               Eigen::VectorXd& grad)>& loss_grad) {
  if (cfg.learning_rate <= 0.0 || cfg.batch_size < 1 || cfg.epochs < 0) {
    throw Error("train: learning_rate, batch_size must be positive");
  }
  if (n_samples < 1) throw Error("train: no samples");
  TrainLog log;
  Adam opt(static_cast<int>(params.size()), cfg.learning_rate,
           cfg.weight_decay);
  Rng rng(splitmix64(cfg.seed ^ 0xba7c45eedULL));
  std::vector<int> order(static_cast<size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) order[static_cast<size_t>(i)] = i;
  Eigen::VectorXd grad(params.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    long seen = 0;
    for (int start = 0; start < n_samples; start += cfg.batch_size) {
      const int end = std::min(start + cfg.batch_size, n_samples);
      const std::vector<int> batch(order.begin() + start, order.begin() + end);
      grad.setZero();
      const double batch_loss = loss_grad(batch, params, grad);
      if (!std::isfinite(batch_loss)) {
        throw NonFiniteLoss("train: non-finite loss at epoch " +
                            std::to_string(epoch) + ", batch offset " +
                            std::to_string(start));
      }
      opt.step(params, grad);
      epoch_loss += batch_loss * static_cast<double>(batch.size());
      seen += static_cast<long>(batch.size());
    }
    log.epoch_loss.push_back(epoch_loss / static_cast<double>(seen));
  }
  return log;
}

TrainLog train(Mlp& net, const Eigen::MatrixXd& inputs,
               const Eigen::MatrixXd& targets, const OutputLoss& loss,
               const TrainConfig& cfg) {
  if (inputs.cols() != targets.cols()) {
    throw DimensionMismatch("train: inputs/targets sample counts differ");
  }
  if (inputs.rows() != net.input_dim() || targets.rows() != net.output_dim()) {
    throw DimensionMismatch("train: data dims do not match net");
  }
  Eigen::VectorXd params = net.parameters();
  Eigen::VectorXd sample_grad(params.size());
  const auto loss_grad = [&](const std::vector<int>& batch,
                             const Eigen::VectorXd& p,
                             Eigen::VectorXd& grad) {
    net.set_parameters(p);
    double total = 0.0;
    Mlp::Trace trace;
    Eigen::VectorXd out_grad;
    for (const int idx : batch) {
      const Eigen::VectorXd out = net.forward(inputs.col(idx), trace);
      total += loss(out, targets.col(idx), out_grad);
      out_grad /= static_cast<double>(batch.size());
      net.backprop(trace, out_grad, grad);
    }
    return total / static_cast<double>(batch.size());
  };
  auto log = train_custom(params, static_cast<int>(inputs.cols()), cfg,
                          loss_grad);
  net.set_parameters(params);
  return log;
}

TrainLog train_mse(Mlp& net, const Eigen::MatrixXd& inputs,
                   const Eigen::MatrixXd& targets, const TrainConfig& cfg) {
  return train(net, inputs, targets, mse_loss(), cfg);
}

}  // namespace safed::nets
