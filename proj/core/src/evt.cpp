#include "safed/evt.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "safed/textio.hpp"

namespace safed::evt {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kGumbelShapeTol = 1e-8;
constexpr double kEulerGamma = 0.5772156649015329;

// Negative log-likelihood of a GEV sample; +inf outside the support.
double neg_loglik(const std::array<double, 3>& p,
                  const std::vector<double>& z) {
  const double xi = p[0], mu = p[1], sigma = p[2];
  if (sigma <= 0.0) return kInf;
  double nll = 0.0;
  if (std::abs(xi) < kGumbelShapeTol) {
    for (double v : z) {
      const double s = (v - mu) / sigma;
      nll += std::log(sigma) + s + std::exp(-s);
    }
    return nll;
  }
  for (double v : z) {
    const double s = (v - mu) / sigma;
    const double t = 1.0 + xi * s;
    if (t <= 0.0) return kInf;  // support constraint
    nll += std::log(sigma) + (1.0 + 1.0 / xi) * std::log(t) +
           std::pow(t, -1.0 / xi);
  }
  return nll;
}

// Probability-weighted-moment (Hosking) starting point.
std::array<double, 3> pwm_init(std::vector<double> z) {
  std::sort(z.begin(), z.end());
  const int n = static_cast<int>(z.size());
  double b0 = 0.0, b1 = 0.0, b2 = 0.0;
  for (int j = 0; j < n; ++j) {
    b0 += z[j];
    b1 += z[j] * j;
    b2 += z[j] * j * (j - 1.0);
  }
  b0 /= n;
  b1 /= static_cast<double>(n) * (n - 1.0);
  b2 /= static_cast<double>(n) * (n - 1.0) * (n - 2.0);
  const double l1 = b0;
  const double l2 = 2.0 * b1 - b0;
  const double l3 = 6.0 * b2 - 6.0 * b1 + b0;
  if (l2 <= 0.0) throw DegenerateSample("fit_gev: nonpositive L-scale");
  const double t3 = l3 / l2;
  const double c = 2.0 / (3.0 + t3) - std::log(2.0) / std::log(3.0);
  double k = 7.8590 * c + 2.9554 * c * c;
  if (std::abs(k) < 1e-6) {
    const double sigma = l2 / std::log(2.0);
    return {0.0, l1 - kEulerGamma * sigma, std::max(sigma, 1e-12)};
  }
  k = std::max(k, -0.9);  // keep Gamma(1+k) well-defined; MLE refines
  const double g1k = std::tgamma(1.0 + k);
  const double sigma = l2 * k / ((1.0 - std::pow(2.0, -k)) * g1k);
  const double mu = l1 - sigma * (1.0 - g1k) / k;
  return {-k, mu, std::max(sigma, 1e-12)};
}

// Derivative-free simplex minimizer; fixed cap and tolerance so the fit is
// deterministic for a given sample.
std::array<double, 3> nelder_mead(
    const std::function<double(const std::array<double, 3>&)>& f,
    std::array<double, 3> x0, int max_iter, double tol) {
  constexpr int kDim = 3;
  std::array<std::array<double, 3>, kDim + 1> xs;
  std::array<double, kDim + 1> fs;
  xs[0] = x0;
  for (int i = 0; i < kDim; ++i) {
    auto xi = x0;
    xi[i] += 0.05 * std::abs(xi[i]) + 0.00025;
    xs[i + 1] = xi;
  }
  for (int i = 0; i <= kDim; ++i) fs[i] = f(xs[i]);

  auto order = [&] {
    std::array<int, kDim + 1> idx{};
    for (int i = 0; i <= kDim; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](int a, int b) { return fs[a] < fs[b]; });
    std::array<std::array<double, 3>, kDim + 1> xs2;
    std::array<double, kDim + 1> fs2;
    for (int i = 0; i <= kDim; ++i) {
      xs2[i] = xs[idx[i]];
      fs2[i] = fs[idx[i]];
    }
    xs = xs2;
    fs = fs2;
  };
  order();

  for (int it = 0; it < max_iter; ++it) {
    const double spread = fs[kDim] - fs[0];
    if (spread <= tol * (std::abs(fs[0]) + tol)) break;

    std::array<double, 3> centroid{0, 0, 0};
    for (int i = 0; i < kDim; ++i)
      for (int d = 0; d < 3; ++d) centroid[d] += xs[i][d] / kDim;

    auto blend = [&](double coef) {
      std::array<double, 3> p;
      for (int d = 0; d < 3; ++d)
        p[d] = centroid[d] + coef * (centroid[d] - xs[kDim][d]);
      return p;
    };

    const auto xr = blend(1.0);
    const double fr = f(xr);
    if (fs[0] <= fr && fr < fs[kDim - 1]) {
      xs[kDim] = xr;
      fs[kDim] = fr;
    } else if (fr < fs[0]) {
      const auto xe = blend(2.0);
      const double fe = f(xe);
      if (fe < fr) {
        xs[kDim] = xe;
        fs[kDim] = fe;
      } else {
        xs[kDim] = xr;
        fs[kDim] = fr;
      }
    } else {
      // inside contraction toward the worst vertex, else shrink
      const auto xc = blend(-0.5);
      const double fc = f(xc);
      if (fc < fs[kDim]) {
        xs[kDim] = xc;
        fs[kDim] = fc;
      } else {
        for (int i = 1; i <= kDim; ++i) {
          for (int d = 0; d < 3; ++d)
            xs[i][d] = xs[0][d] + 0.5 * (xs[i][d] - xs[0][d]);
          fs[i] = f(xs[i]);
        }
      }
    }
    order();
  }
  return xs[0];
}

}  // namespace

double GevParams::right_endpoint() const {
  if (shape >= 0.0) {
    throw NonNegativeShape(
        "right_endpoint: shape must be negative, got " + textio::fmt(shape));
  }
  return location - scale / shape;
}

std::vector<double> block_maxima(const std::vector<double>& samples,
                                 int batch_size) {
  if (batch_size < 1) throw Error("block_maxima: batch_size must be >= 1");
  const size_t n_batches = samples.size() / static_cast<size_t>(batch_size);
  if (n_batches < 2) {
    throw InsufficientSamples(
        "block_maxima: need at least 2 full batches, got " +
        std::to_string(samples.size()) + " samples with batch_size " +
        std::to_string(batch_size));
  }
  std::vector<double> maxima(n_batches);
  for (size_t j = 0; j < n_batches; ++j) {
    double m = samples[j * batch_size];
    for (int i = 1; i < batch_size; ++i)
      m = std::max(m, samples[j * batch_size + i]);
    maxima[j] = m;
  }
  return maxima;
}

GevParams fit_gev(const std::vector<double>& maxima) {
  if (maxima.size() < 30) {
    throw InsufficientSamples("fit_gev: need at least 30 maxima, got " +
                              std::to_string(maxima.size()));
  }
  const auto [lo, hi] = std::minmax_element(maxima.begin(), maxima.end());
  if (*hi - *lo <= 1e-12) {
    throw DegenerateSample("fit_gev: sample spread " + textio::fmt(*hi - *lo) +
                           " below 1e-12");
  }
  auto x0 = pwm_init(maxima);
  const auto f = [&](const std::array<double, 3>& p) {
    return neg_loglik(p, maxima);
  };
  // The moment-based start can sit outside the support (estimated endpoint
  // inside the sample range). The simplex recovers on its own as long as one
  // initial vertex is feasible; only when the whole initial simplex is
  // infeasible do we inflate the scale (which widens the support), falling
  // back to a Gumbel start, which is feasible everywhere.
  const auto simplex_feasible = [&](const std::array<double, 3>& x) {
    if (std::isfinite(f(x))) return true;
    for (int i = 0; i < 3; ++i) {
      auto xi = x;
      xi[i] += 0.05 * std::abs(xi[i]) + 0.00025;
      if (std::isfinite(f(xi))) return true;
    }
    return false;
  };
  for (int tries = 0; !simplex_feasible(x0) && tries < 60; ++tries) {
    x0[2] *= 1.5;
  }
  if (!simplex_feasible(x0)) {
    double mean = 0.0, sq = 0.0;
    for (double v : maxima) mean += v / static_cast<double>(maxima.size());
    for (double v : maxima)
      sq += (v - mean) * (v - mean) / static_cast<double>(maxima.size());
    const double sm = std::max(std::sqrt(sq) * std::sqrt(6.0) / M_PI, 1e-12);
    x0 = {0.0, mean - kEulerGamma * sm, sm};
  }
  const auto best = nelder_mead(f, x0, 2000, 1e-9);
  if (!std::isfinite(f(best))) {
    throw FitDiverged("fit_gev: optimizer left the GEV support");
  }
  return GevParams{best[0], best[1], best[2]};
}

double gev_cdf(const GevParams& gev, double z) {
  const double s = (z - gev.location) / gev.scale;
  if (std::abs(gev.shape) < kGumbelShapeTol) {
    return std::exp(-std::exp(-s));
  }
  const double t = 1.0 + gev.shape * s;
  if (t <= 0.0) return gev.shape > 0.0 ? 0.0 : 1.0;
  return std::exp(-std::pow(t, -1.0 / gev.shape));
}

double ks_critical_value(int n_maxima) {
  if (n_maxima < 1) throw Error("ks_critical_value: need n >= 1");
  return 1.36 / std::sqrt(static_cast<double>(n_maxima));
}

std::pair<double, bool> ks_test(const std::vector<double>& maxima,
                                const GevParams& gev) {
  if (maxima.empty()) throw InsufficientSamples("ks_test: empty sample");
  if (gev.scale <= 0.0) throw Error("ks_test: nonpositive scale");
  std::vector<double> z = maxima;
  std::sort(z.begin(), z.end());
  const double n = static_cast<double>(z.size());
  double stat = 0.0;
  for (size_t i = 0; i < z.size(); ++i) {
    const double cdf = gev_cdf(gev, z[i]);
    stat = std::max(stat, cdf - static_cast<double>(i) / n);
    stat = std::max(stat, static_cast<double>(i + 1) / n - cdf);
  }
  return {stat, stat < ks_critical_value(static_cast<int>(z.size()))};
}

double confidence_upper_bound(const GevParams& gev, double psi) {
  if (gev.shape >= 0.0) {
    throw NonNegativeShape(
        "confidence_upper_bound: shape " + textio::fmt(gev.shape) +
        " >= 0 signals an unbounded extremum");
  }
  if (!(psi > 0.0 && psi < 1.0)) {
    throw Error("confidence_upper_bound: psi must lie in (0,1)");
  }
  // location + scale*((-ln psi)^(-shape) - 1)/shape, via expm1 for stability.
  const double log_neg_log_psi = std::log(-std::log(psi));
  return gev.location +
         gev.scale * std::expm1(-gev.shape * log_neg_log_psi) / gev.shape;
}

VerifiedConstant estimate_constant(const std::function<double()>& sampler,
                                   const EstimateConfig& cfg) {
  if (cfg.batch_size < 1 || cfg.n_batches < 30) {
    throw Error(
        "estimate_constant: need batch_size >= 1 and n_batches >= 30");
  }
  if (!(cfg.psi > 0.0 && cfg.psi < 1.0)) {
    throw Error("estimate_constant: psi must lie in (0,1)");
  }
  const bool lower = cfg.kind == BoundKind::LowerBound;
  std::vector<double> samples(
      static_cast<size_t>(cfg.batch_size) * static_cast<size_t>(cfg.n_batches));
  for (auto& s : samples) {
    const double v = sampler();
    s = lower ? -v : v;
  }
  const auto maxima = block_maxima(samples, cfg.batch_size);
  const auto gev = fit_gev(maxima);
  const auto [stat, pass] = ks_test(maxima, gev);
  if (!pass) {
    throw KsRejected("estimate_constant[" + cfg.name + "]: KS statistic " +
                     textio::fmt(stat) + " >= critical value " +
                     textio::fmt(ks_critical_value(cfg.n_batches)));
  }
  double bound;
  try {
    bound = confidence_upper_bound(gev, cfg.psi);
  } catch (const NonNegativeShape&) {
    throw NonNegativeShape("estimate_constant[" + cfg.name + "]: shape " +
                           textio::fmt(gev.shape) +
                           " >= 0, extremum cannot be bounded");
  }
  VerifiedConstant out;
  out.name = cfg.name;
  out.value = lower ? -bound : bound;
  out.confidence = cfg.psi;
  out.gev = gev;
  out.ks_pass = pass;
  out.ks_stat = stat;
  out.n_batches = cfg.n_batches;
  out.batch_size = cfg.batch_size;
  out.kind = cfg.kind;
  out.source = cfg.source;
  return out;
}

VerifiedConstant exact_constant(double value, BoundKind kind,
                                const std::string& name,
                                const std::string& source) {
  VerifiedConstant out;
  out.name = name;
  out.value = value;
  out.confidence = 1.0;
  // Point-mass sentinel: endpoint equals the value itself.
  out.gev = GevParams{-1.0, value, 1e-30};
  out.ks_pass = true;
  out.ks_stat = 0.0;
  out.n_batches = 0;
  out.batch_size = 0;
  out.kind = kind;
  out.source = source;
  out.exact = true;
  return out;
}

std::string constant_line(const VerifiedConstant& c) {
  using textio::fmt;
  std::ostringstream out;
  out << "constant " << c.name << " kind "
      << (c.kind == BoundKind::UpperBound ? "upper" : "lower") << " value "
      << fmt(c.value) << " psi " << fmt(c.confidence) << " shape "
      << fmt(c.gev.shape) << " location " << fmt(c.gev.location) << " scale "
      << fmt(c.gev.scale) << " ks_stat " << fmt(c.ks_stat) << " ks_pass "
      << (c.ks_pass ? 1 : 0) << " n_batches " << c.n_batches << " batch_size "
      << c.batch_size << " exact " << (c.exact ? 1 : 0) << " source "
      << (c.source.empty() ? "-" : c.source);
  return out.str();
}

VerifiedConstant parse_constant_line(const std::string& line) {
  using namespace textio;
  auto tok = split_ws(line);
  if (tok.size() != 26 || tok[0] != "constant") {
    throw FormatError("bad constant line: '" + line + "'");
  }
  VerifiedConstant c;
  c.name = tok[1];
  c.kind = tok[3] == "upper" ? BoundKind::UpperBound : BoundKind::LowerBound;
  c.value = to_double(tok[5]);
  c.confidence = to_double(tok[7]);
  c.gev.shape = to_double(tok[9]);
  c.gev.location = to_double(tok[11]);
  c.gev.scale = to_double(tok[13]);
  c.ks_stat = to_double(tok[15]);
  c.ks_pass = tok[17] == "1";
  c.n_batches = static_cast<int>(to_long(tok[19]));
  c.batch_size = static_cast<int>(to_long(tok[21]));
  c.exact = tok[23] == "1";
  c.source = tok[25] == "-" ? "" : tok[25];
  return c;
}

void write_certification_report(std::ostream& out,
                                const std::vector<VerifiedConstant>& constants,
                                double composite_confidence,
                                const std::string& config_hash, uint64_t seed) {
  using textio::fmt;
  out << "safed-certification v1\n";
  out << "config_hash " << config_hash << "\n";
  out << "seed " << seed << "\n";
  out << "composite_confidence " << fmt(composite_confidence) << "\n";
  out << "n_constants " << constants.size() << "\n";
  for (const auto& c : constants) {
    out << constant_line(c) << "\n";
  }
}

std::vector<VerifiedConstant> read_certification_report(std::istream& in) {
  using namespace textio;
  require_header(in, "safed-certification v1");
  std::string line = read_line(in, "certification config_hash");
  line = read_line(in, "certification seed");
  line = read_line(in, "certification composite_confidence");
  line = read_line(in, "certification n_constants");
  auto head = split_ws(line);
  if (head.size() != 2 || head[0] != "n_constants") {
    throw FormatError("certification report: bad n_constants line");
  }
  const long n = to_long(head[1]);
  std::vector<VerifiedConstant> out;
  out.reserve(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    out.push_back(parse_constant_line(read_line(in, "certification constant")));
  }
  return out;
}

}  // namespace safed::evt
