#include "safed/dynamics.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "safed/textio.hpp"

namespace safed::dynamics {

Eigen::MatrixXd GSpec::at(const Eigen::VectorXd& x, int n_x, int n_u) const {
  switch (kind) {
    case GKind::InputTail: {
      Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n_x, n_u);
      g.bottomRows(n_u).setIdentity();
      return g;
    }
    case GKind::ConstantMatrix: {
      if (constant.rows() != n_x || constant.cols() != n_u) {
        throw DimensionMismatch("GSpec: constant matrix is " +
                                std::to_string(constant.rows()) + "x" +
                                std::to_string(constant.cols()));
      }
      return constant;
    }
    case GKind::NetMatrix: {
      const Eigen::VectorXd flat = net.forward(x);
      if (flat.size() != static_cast<Eigen::Index>(n_x) * n_u) {
        throw DimensionMismatch("GSpec: net output size mismatch");
      }
      Eigen::MatrixXd g(n_x, n_u);
      for (int r = 0; r < n_x; ++r) {
        for (int c = 0; c < n_u; ++c) g(r, c) = flat[r * n_u + c];
      }
      return g;
    }
  }
  throw Error("GSpec::at: bad enum");
}

Eigen::VectorXd LearnedDynamics::eval(const Eigen::VectorXd& x,
                                      const Eigen::VectorXd& u) const {
  if (x.size() != n_x || u.size() != n_u) {
    throw DimensionMismatch("LearnedDynamics::eval: expected (" +
                            std::to_string(n_x) + "," + std::to_string(n_u) +
                            "), got (" + std::to_string(x.size()) + "," +
                            std::to_string(u.size()) + ")");
  }
  return f(x) + g_at(x) * u;
}

Eigen::VectorXd LearnedDynamics::f(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd v = f_net.forward(x);
  if (v.size() != n_x) {
    throw DimensionMismatch("LearnedDynamics: f output size mismatch");
  }
  return v;
}

Eigen::MatrixXd LearnedDynamics::g_at(const Eigen::VectorXd& x) const {
  return g.at(x, n_x, n_u);
}

Eigen::MatrixXd LearnedDynamics::f_jacobian(const Eigen::VectorXd& x) const {
  return f_net.input_jacobian(x);
}

bool LearnedDynamics::is_linear() const {
  return f_net.layers().size() == 1 &&
         f_net.layers()[0].act == nets::Activation::Identity &&
         !g.state_dependent();
}

Eigen::VectorXd eval_dynamics(const LearnedDynamics& model,
                              const Eigen::VectorXd& x,
                              const Eigen::VectorXd& u) {
  return model.eval(x, u);
}

namespace {

const char* gkind_name(GKind k) {
  switch (k) {
    case GKind::InputTail:
      return "input_tail";
    case GKind::ConstantMatrix:
      return "constant";
    case GKind::NetMatrix:
      return "net";
  }
  throw Error("gkind_name: bad enum");
}

GKind parse_gkind(const std::string& s) {
  if (s == "input_tail") return GKind::InputTail;
  if (s == "constant") return GKind::ConstantMatrix;
  if (s == "net") return GKind::NetMatrix;
  throw FormatError("unknown g kind '" + s + "'");
}

}  // namespace

void LearnedDynamics::save(std::ostream& out) const {
  out << "safed-dynamics v1\n";
  out << "dims " << n_x << " " << n_u << "\n";
  out << "g_kind " << gkind_name(g.kind) << "\n";
  if (g.kind == GKind::ConstantMatrix) {
    textio::write_matrix(out, g.constant);
  } else if (g.kind == GKind::NetMatrix) {
    g.net.save(out);
  }
  f_net.save(out);
}

LearnedDynamics LearnedDynamics::load(std::istream& in) {
  using namespace textio;
  require_header(in, "safed-dynamics v1");
  auto dims = split_ws(read_line(in, "dynamics dims"));
  if (dims.size() != 3 || dims[0] != "dims") {
    throw FormatError("dynamics: bad dims line");
  }
  LearnedDynamics model;
  model.n_x = static_cast<int>(to_long(dims[1]));
  model.n_u = static_cast<int>(to_long(dims[2]));
  auto gk = split_ws(read_line(in, "dynamics g_kind"));
  if (gk.size() != 2 || gk[0] != "g_kind") {
    throw FormatError("dynamics: bad g_kind line");
  }
  model.g.kind = parse_gkind(gk[1]);
  if (model.g.kind == GKind::ConstantMatrix) {
    model.g.constant = read_matrix(in, "dynamics g");
  } else if (model.g.kind == GKind::NetMatrix) {
    model.g.net = nets::Mlp::load(in);
  }
  model.f_net = nets::Mlp::load(in);
  return model;
}

void Dataset::validate_in_domain(const domain::TrustedDomain& dom) const {
  for (size_t i = 0; i < records.size(); ++i) {
    if (!dom.x.contains(records[i].x) || !dom.u.contains(records[i].u)) {
      throw Error("Dataset: record " + std::to_string(i) +
                  " lies outside the trusted domain");
    }
  }
}

void Dataset::save(std::ostream& out) const {
  using textio::fmt;
  out << "safed-dataset v1\n";
  out << "n_x " << n_x << " n_u " << n_u << " role " << role << " units "
      << units << " count " << records.size() << "\n";
  for (const auto& r : records) {
    for (int i = 0; i < n_x; ++i) out << (i ? " " : "") << fmt(r.x[i]);
    for (int i = 0; i < n_u; ++i) out << " " << fmt(r.u[i]);
    for (int i = 0; i < n_x; ++i) out << " " << fmt(r.xdot[i]);
    out << "\n";
  }
}

Dataset Dataset::load(std::istream& in) {
  using namespace textio;
  require_header(in, "safed-dataset v1");
  auto head = split_ws(read_line(in, "dataset header"));
  if (head.size() != 10 || head[0] != "n_x" || head[2] != "n_u" ||
      head[4] != "role" || head[6] != "units" || head[8] != "count") {
    throw FormatError("dataset: bad header row");
  }
  Dataset ds;
  ds.n_x = static_cast<int>(to_long(head[1]));
  ds.n_u = static_cast<int>(to_long(head[3]));
  ds.role = head[5];
  ds.units = head[7];
  const long count = to_long(head[9]);
  ds.records.reserve(static_cast<size_t>(count));
  for (long i = 0; i < count; ++i) {
    auto tok = split_ws(read_line(in, "dataset record"));
    if (static_cast<long>(tok.size()) != 2L * ds.n_x + ds.n_u) {
      throw FormatError("dataset: record " + std::to_string(i) +
                        " has wrong column count");
    }
    Record r;
    r.x.resize(ds.n_x);
    r.u.resize(ds.n_u);
    r.xdot.resize(ds.n_x);
    int k = 0;
    for (int j = 0; j < ds.n_x; ++j) r.x[j] = to_double(tok[k++]);
    for (int j = 0; j < ds.n_u; ++j) r.u[j] = to_double(tok[k++]);
    for (int j = 0; j < ds.n_x; ++j) r.xdot[j] = to_double(tok[k++]);
    ds.records.push_back(std::move(r));
  }
  return ds;
}

Eigen::VectorXd DisturbanceNet::w(const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& u) const {
  if (control_input) {
    Eigen::VectorXd xu(x.size() + u.size());
    xu << x, u;
    return w_net.forward(xu);
  }
  return w_net.forward(x);
}

double disturbance_loss(const std::vector<Record>& batch,
                        const LearnedDynamics& model,
                        const DisturbanceNet& wnet, double margin,
                        double shrink) {
  if (batch.empty()) throw Error("disturbance_loss: empty batch");
  double hinge = 0.0, mean_w = 0.0;
  long count = 0;
  for (const auto& r : batch) {
    const Eigen::VectorXd residual = (r.xdot - model.eval(r.x, r.u)).cwiseAbs();
    const Eigen::VectorXd w = wnet.w(r.x, r.u);
    for (Eigen::Index k = 0; k < residual.size(); ++k) {
      hinge += std::max(0.0, residual[k] - w[k] + margin);
      mean_w += w[k];
      ++count;
    }
  }
  return hinge / static_cast<double>(count) +
         shrink * mean_w / static_cast<double>(count);
}

double violation_sample(const Record& record, const LearnedDynamics& model,
                        const DisturbanceNet& wnet) {
  const Eigen::VectorXd residual =
      (record.xdot - model.eval(record.x, record.u)).cwiseAbs();
  const Eigen::VectorXd w = wnet.w(record.x, record.u);
  return (residual - w).maxCoeff();
}

Eigen::VectorXd verified_bound(const DisturbanceNet& wnet,
                               const Eigen::VectorXd& x,
                               const Eigen::VectorXd& u) {
  if (!wnet.phi.has_value() || !wnet.phi->valid()) {
    throw UncertifiedPhi(
        "verified_bound: phi is missing or failed certification");
  }
  // A negative certified phi is clamped: the envelope stays valid (larger)
  // and strictly positive.
  const double phi = std::max(wnet.phi->value, 0.0);
  return wnet.w(x, u).array() + phi;
}

nets::TrainLog train_dynamics(LearnedDynamics& model, const Dataset& data,
                              const nets::TrainConfig& cfg) {
  if (data.records.empty()) throw Error("train_dynamics: empty dataset");
  if (data.n_x != model.n_x || data.n_u != model.n_u) {
    throw DimensionMismatch("train_dynamics: dataset dims do not match model");
  }
  const int n = static_cast<int>(data.records.size());

  if (model.g.kind == GKind::InputTail) {
    // Controls enter additively on the tail derivatives, so f's targets are
    // xdot with the control contribution removed; plain mse training then.
    Eigen::MatrixXd X(model.n_x, n), T(model.n_x, n);
    for (int i = 0; i < n; ++i) {
      const auto& r = data.records[static_cast<size_t>(i)];
      X.col(i) = r.x;
      Eigen::VectorXd t = r.xdot;
      t.tail(model.n_u) -= r.u;
      T.col(i) = t;
    }
    return nets::train_mse(model.f_net, X, T, cfg);
  }

  if (model.g.kind == GKind::ConstantMatrix && model.g.constant.size() == 0) {
    model.g.constant = Eigen::MatrixXd::Zero(model.n_x, model.n_u);
  }

  // Joint fit of f parameters and the g representation.
  const int n_f = model.f_net.parameter_count();
  const int n_g = model.g.kind == GKind::ConstantMatrix
                      ? model.n_x * model.n_u
                      : model.g.net.parameter_count();
  Eigen::VectorXd params(n_f + n_g);
  params.head(n_f) = model.f_net.parameters();
  if (model.g.kind == GKind::ConstantMatrix) {
    for (int r = 0; r < model.n_x; ++r) {
      for (int c = 0; c < model.n_u; ++c) {
        params[n_f + r * model.n_u + c] = model.g.constant(r, c);
      }
    }
  } else {
    params.tail(n_g) = model.g.net.parameters();
  }

  const auto loss_grad = [&](const std::vector<int>& batch,
                             const Eigen::VectorXd& p, Eigen::VectorXd& grad) {
    model.f_net.set_parameters(p.head(n_f));
    if (model.g.kind == GKind::ConstantMatrix) {
      for (int r = 0; r < model.n_x; ++r) {
        for (int c = 0; c < model.n_u; ++c) {
          model.g.constant(r, c) = p[n_f + r * model.n_u + c];
        }
      }
    } else {
      model.g.net.set_parameters(p.tail(n_g));
    }
    double total = 0.0;
    nets::Mlp::Trace f_trace, g_trace;
    Eigen::VectorXd f_grad = Eigen::VectorXd::Zero(n_f);
    Eigen::VectorXd g_grad = Eigen::VectorXd::Zero(n_g);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const int idx : batch) {
      const auto& rec = data.records[static_cast<size_t>(idx)];
      const Eigen::VectorXd fx = model.f_net.forward(rec.x, f_trace);
      Eigen::MatrixXd gx;
      Eigen::VectorXd gflat;
      if (model.g.kind == GKind::ConstantMatrix) {
        gx = model.g.constant;
      } else {
        gflat = model.g.net.forward(rec.x, g_trace);
        gx.resize(model.n_x, model.n_u);
        for (int r = 0; r < model.n_x; ++r) {
          for (int c = 0; c < model.n_u; ++c) gx(r, c) = gflat[r * model.n_u + c];
        }
      }
      const Eigen::VectorXd res = fx + gx * rec.u - rec.xdot;
      total += res.squaredNorm();
      model.f_net.backprop(f_trace, 2.0 * inv_b * res, f_grad);
      if (model.g.kind == GKind::ConstantMatrix) {
        for (int r = 0; r < model.n_x; ++r) {
          for (int c = 0; c < model.n_u; ++c) {
            g_grad[r * model.n_u + c] += 2.0 * inv_b * res[r] * rec.u[c];
          }
        }
      } else {
        Eigen::VectorXd og(model.n_x * model.n_u);
        for (int r = 0; r < model.n_x; ++r) {
          for (int c = 0; c < model.n_u; ++c) {
            og[r * model.n_u + c] = 2.0 * inv_b * res[r] * rec.u[c];
          }
        }
        model.g.net.backprop(g_trace, og, g_grad);
      }
    }
    grad.head(n_f) = f_grad;
    grad.tail(n_g) = g_grad;
    return total * inv_b;
  };

  auto log = nets::train_custom(params, n, cfg, loss_grad);
  model.f_net.set_parameters(params.head(n_f));
  if (model.g.kind == GKind::ConstantMatrix) {
    for (int r = 0; r < model.n_x; ++r) {
      for (int c = 0; c < model.n_u; ++c) {
        model.g.constant(r, c) = params[n_f + r * model.n_u + c];
      }
    }
  } else {
    model.g.net.set_parameters(params.tail(n_g));
  }
  return log;
}

nets::TrainLog train_disturbance(DisturbanceNet& wnet,
                                 const LearnedDynamics& model,
                                 const Dataset& data, double margin,
                                 double shrink, const nets::TrainConfig& cfg) {
  if (data.records.empty()) throw Error("train_disturbance: empty dataset");
  if (wnet.w_net.layers().empty() ||
      wnet.w_net.layers().back().act != nets::Activation::SoftPlus) {
    throw Error("train_disturbance: w_net must end in SoftPlus");
  }
  const int n = static_cast<int>(data.records.size());
  const int in_dim = wnet.control_input ? model.n_x + model.n_u : model.n_x;
  if (wnet.w_net.input_dim() != in_dim ||
      wnet.w_net.output_dim() != model.n_x) {
    throw DimensionMismatch("train_disturbance: w_net dims");
  }
  Eigen::MatrixXd X(in_dim, n), T(model.n_x, n);
  for (int i = 0; i < n; ++i) {
    const auto& r = data.records[static_cast<size_t>(i)];
    if (wnet.control_input) {
      X.col(i).head(model.n_x) = r.x;
      X.col(i).tail(model.n_u) = r.u;
    } else {
      X.col(i) = r.x;
    }
    T.col(i) = r.xdot - model.eval(r.x, r.u);
  }
  // Per-sample value matches disturbance_loss up to batch averaging.
  const auto raw = nets::hinge_envelope_loss(margin, shrink);
  const double inv_nx = 1.0 / static_cast<double>(model.n_x);
  const nets::OutputLoss scaled = [raw, inv_nx](const Eigen::VectorXd& out,
                                                const Eigen::VectorXd& target,
                                                Eigen::VectorXd& out_grad) {
    const double v = raw(out, target, out_grad);
    out_grad *= inv_nx;
    return v * inv_nx;
  };
  return nets::train(wnet.w_net, X, T, scaled, cfg);
}

void DisturbanceNet::save(std::ostream& out) const {
  out << "safed-disturbance v1\n";
  out << "control_input " << (control_input ? 1 : 0) << "\n";
  if (phi.has_value()) {
    out << evt::constant_line(*phi) << "\n";
  } else {
    out << "constant none\n";
  }
  w_net.save(out);
}

DisturbanceNet DisturbanceNet::load(std::istream& in) {
  using namespace textio;
  require_header(in, "safed-disturbance v1");
  auto ci = split_ws(read_line(in, "disturbance control_input"));
  if (ci.size() != 2 || ci[0] != "control_input") {
    throw FormatError("disturbance: bad control_input line");
  }
  DisturbanceNet wnet;
  wnet.control_input = ci[1] == "1";
  const std::string phi_line = read_line(in, "disturbance phi");
  if (phi_line != "constant none") {
    wnet.phi = evt::parse_constant_line(phi_line);
  }
  wnet.w_net = nets::Mlp::load(in);
  return wnet;
}

}  // namespace safed::dynamics
