#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "safed/common.hpp"

namespace safed::evt {

// Thrown when a bound cannot be certified; subclasses identify the stage.
struct CertificationFailed : Error {
  using Error::Error;
};
struct InsufficientSamples : Error {
  using Error::Error;
};
struct DegenerateSample : CertificationFailed {
  using CertificationFailed::CertificationFailed;
};
struct FitDiverged : CertificationFailed {
  using CertificationFailed::CertificationFailed;
};
struct NonNegativeShape : CertificationFailed {
  using CertificationFailed::CertificationFailed;
};
struct KsRejected : CertificationFailed {
  using CertificationFailed::CertificationFailed;
};

// Generalized-extreme-value parameters for block maxima.
struct GevParams {
  double shape = 0.0;     // xi; negative means a finite right endpoint
  double location = 0.0;  // mu
  double scale = 1.0;     // sigma > 0

  // Finite right endpoint location - scale/shape; requires shape < 0.
  double right_endpoint() const;
};

enum class BoundKind { UpperBound, LowerBound };

// A high-confidence extremum estimate together with its evidence.
struct VerifiedConstant {
  std::string name;    // what is being bounded, e.g. "phi"
  double value = 0.0;  // the certified bound
  double confidence = 0.0;  // psi
  GevParams gev;
  bool ks_pass = false;
  double ks_stat = 0.0;
  int n_batches = 0;               // N_s: number of block maxima
  int batch_size = 0;              // N_b: samples per block
  BoundKind kind = BoundKind::UpperBound;
  std::string source;  // data-slice identifier
  bool exact = false;  // analytically exact value, no statistical slack

  // Usable for downstream guarantees: negative shape and a passed KS gate.
  bool valid() const { return exact || (gev.shape < 0.0 && ks_pass); }
};

struct EstimateConfig {
  int batch_size = 50;   // N_b
  int n_batches = 200;   // N_s
  double psi = 0.99;
  BoundKind kind = BoundKind::UpperBound;
  std::string name;
  std::string source;
};

// Maxima of consecutive batches; the trailing partial batch is dropped.
std::vector<double> block_maxima(const std::vector<double>& samples,
                                 int batch_size);

// Maximum-likelihood GEV fit, simplex search from probability-weighted-moment
// initialization. Deterministic for a given input.
GevParams fit_gev(const std::vector<double>& maxima);

// Kolmogorov-Smirnov goodness-of-fit gate at asymptotic p = 0.05.
std::pair<double, bool> ks_test(const std::vector<double>& maxima,
                                const GevParams& gev);
double ks_critical_value(int n_maxima);

double gev_cdf(const GevParams& gev, double z);

// psi-quantile of the fitted GEV; requires shape < 0.
double confidence_upper_bound(const GevParams& gev, double psi);

// Draw N_b * N_s samples, fit block maxima, gate, and bound. Lower bounds
// negate the samples and the resulting upper bound.
VerifiedConstant estimate_constant(const std::function<double()>& sampler,
                                   const EstimateConfig& cfg);

// Package an analytically-known extremum (e.g. of a constant-metric linear
// closed form) as a VerifiedConstant with no statistical slack.
VerifiedConstant exact_constant(double value, BoundKind kind,
                                const std::string& name,
                                const std::string& source);

// Single-line serialization of one constant (used by the report and by
// artifact files that embed certified values).
std::string constant_line(const VerifiedConstant& c);
VerifiedConstant parse_constant_line(const std::string& line);

// Structured certification report over a set of constants.
void write_certification_report(std::ostream& out,
                                const std::vector<VerifiedConstant>& constants,
                                double composite_confidence,
                                const std::string& config_hash, uint64_t seed);
std::vector<VerifiedConstant> read_certification_report(std::istream& in);

}  // namespace safed::evt
