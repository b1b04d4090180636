#pragma once

#include <Eigen/Dense>
#include <iosfwd>

#include "safed/common.hpp"

namespace safed::domain {

// Axis-aligned hyperrectangle.
struct Box {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  Box() = default;
  Box(Eigen::VectorXd lo, Eigen::VectorXd hi);

  int dim() const { return static_cast<int>(lower.size()); }
  bool contains(const Eigen::VectorXd& p) const;
  Eigen::VectorXd center() const { return 0.5 * (lower + upper); }
  Eigen::VectorXd halfwidth() const { return 0.5 * (upper - lower); }
  Eigen::VectorXd sample(Rng& rng) const;
  Eigen::VectorXd clamp(const Eigen::VectorXd& p) const;
};

// Whether the Euclidean ball B(center, radius) lies entirely inside the box.
bool ball_in_box(const Box& box, const Eigen::VectorXd& center, double radius);

// Union of equal-radius Euclidean balls about data points.
struct BallUnion {
  std::vector<Eigen::VectorXd> centers;
  double radius = 0.0;
};

// A trusted region is either a hyperrectangle or a union of balls around a
// dataset slice, depending on how the data was collected.
struct Region {
  enum class Kind { Rectangle, Balls };
  Kind kind = Kind::Rectangle;
  Box box;          // Rectangle
  BallUnion balls;  // Balls

  Region() = default;
  static Region rectangle(Box box);
  static Region ball_union(std::vector<Eigen::VectorXd> centers,
                           double radius);

  int dim() const;
  bool contains(const Eigen::VectorXd& p) const;
  Eigen::VectorXd sample(Rng& rng) const;
};

// Whether B(center, radius) lies inside the region. For a ball union this is
// the sound sufficient condition: some member ball contains the whole query
// ball (distance to its center <= member radius - query radius).
bool ball_in_domain(const Region& region, const Eigen::VectorXd& center,
                    double radius);

void write_region(std::ostream& out, const Region& region);
Region read_region(std::istream& in, const std::string& context);

// The region the learned model and certified constants are valid on.
struct TrustedDomain {
  Box x;  // states
  Box u;  // controls
};

void write_box(std::ostream& out, const Box& box);
Box read_box(std::istream& in, const std::string& context);

}  // namespace safed::domain
