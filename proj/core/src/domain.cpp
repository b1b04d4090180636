#include "safed/domain.hpp"

#include <cmath>

#include "safed/textio.hpp"

namespace safed::domain {

Box::Box(Eigen::VectorXd lo, Eigen::VectorXd hi)
    : lower(std::move(lo)), upper(std::move(hi)) {
  if (lower.size() != upper.size()) {
    throw Error("Box: lower/upper dimensions differ");
  }
  for (Eigen::Index i = 0; i < lower.size(); ++i) {
    if (!(lower[i] <= upper[i])) {
      throw Error("Box: lower > upper in dimension " + std::to_string(i));
    }
  }
}

bool Box::contains(const Eigen::VectorXd& p) const {
  if (p.size() != lower.size()) {
    throw Error("Box::contains: dimension mismatch");
  }
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] < lower[i] || p[i] > upper[i]) return false;
  }
  return true;
}

Eigen::VectorXd Box::sample(Rng& rng) const {
  Eigen::VectorXd p(lower.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform(lower[i], upper[i]);
  }
  return p;
}

Eigen::VectorXd Box::clamp(const Eigen::VectorXd& p) const {
  if (p.size() != lower.size()) {
    throw Error("Box::clamp: dimension mismatch");
  }
  return p.cwiseMax(lower).cwiseMin(upper);
}

bool ball_in_box(const Box& box, const Eigen::VectorXd& center,
                 double radius) {
  if (radius < 0.0) throw Error("ball_in_box: negative radius");
  if (center.size() != box.lower.size()) {
    throw Error("ball_in_box: dimension mismatch");
  }
  for (Eigen::Index i = 0; i < center.size(); ++i) {
    if (center[i] - radius < box.lower[i] ||
        center[i] + radius > box.upper[i]) {
      return false;
    }
  }
  return true;
}

void write_box(std::ostream& out, const Box& box) {
  textio::write_vector(out, box.lower);
  textio::write_vector(out, box.upper);
}

Box read_box(std::istream& in, const std::string& context) {
  Eigen::VectorXd lo = textio::read_vector(in, context + " lower");
  Eigen::VectorXd hi = textio::read_vector(in, context + " upper");
  return Box(std::move(lo), std::move(hi));
}

Region Region::rectangle(Box box) {
  Region r;
  r.kind = Kind::Rectangle;
  r.box = std::move(box);
  return r;
}

Region Region::ball_union(std::vector<Eigen::VectorXd> centers,
                          double radius) {
  if (centers.empty()) throw Error("Region: ball union needs centers");
  if (!(radius > 0.0)) throw Error("Region: ball radius must be positive");
  for (const auto& c : centers) {
    if (c.size() != centers.front().size()) {
      throw Error("Region: ball centers have mixed dimensions");
    }
  }
  Region r;
  r.kind = Kind::Balls;
  r.balls.centers = std::move(centers);
  r.balls.radius = radius;
  return r;
}

int Region::dim() const {
  return kind == Kind::Rectangle
             ? box.dim()
             : static_cast<int>(balls.centers.front().size());
}

bool Region::contains(const Eigen::VectorXd& p) const {
  if (kind == Kind::Rectangle) return box.contains(p);
  for (const auto& c : balls.centers) {
    if ((p - c).norm() <= balls.radius) return true;
  }
  return false;
}

Eigen::VectorXd Region::sample(Rng& rng) const {
  if (kind == Kind::Rectangle) return box.sample(rng);
  const auto& c =
      balls.centers[rng.uniform_int(static_cast<uint64_t>(balls.centers.size()))];
  const Eigen::Index n = c.size();
  Eigen::VectorXd z(n);
  double norm = 0.0;
  do {
    for (Eigen::Index i = 0; i < n; ++i) z[i] = rng.normal();
    norm = z.norm();
  } while (norm == 0.0);
  const double r = balls.radius *
                   std::pow(rng.uniform(), 1.0 / static_cast<double>(n));
  return c + (r / norm) * z;
}

bool ball_in_domain(const Region& region, const Eigen::VectorXd& center,
                    double radius) {
  if (radius < 0.0) throw Error("ball_in_domain: negative radius");
  if (center.size() != region.dim()) {
    throw Error("ball_in_domain: dimension mismatch");
  }
  if (region.kind == Region::Kind::Rectangle) {
    return ball_in_box(region.box, center, radius);
  }
  for (const auto& c : region.balls.centers) {
    if ((center - c).norm() <= region.balls.radius - radius) return true;
  }
  return false;
}

void write_region(std::ostream& out, const Region& region) {
  if (region.kind == Region::Kind::Rectangle) {
    out << "rectangle\n";
    write_box(out, region.box);
    return;
  }
  out << "balls " << region.balls.centers.size() << " "
      << textio::fmt(region.balls.radius) << "\n";
  for (const auto& c : region.balls.centers) textio::write_vector(out, c);
}

Region read_region(std::istream& in, const std::string& context) {
  const auto fields = textio::split_ws(textio::read_line(in, context));
  if (fields.empty()) throw FormatError(context + ": empty region header");
  if (fields[0] == "rectangle") {
    return Region::rectangle(read_box(in, context));
  }
  if (fields[0] != "balls" || fields.size() != 3) {
    throw FormatError(context + ": unknown region kind '" + fields[0] + "'");
  }
  const long count = textio::to_long(fields[1]);
  const double radius = textio::to_double(fields[2]);
  std::vector<Eigen::VectorXd> centers;
  centers.reserve(static_cast<size_t>(count));
  for (long i = 0; i < count; ++i) {
    centers.push_back(textio::read_vector(in, context + " center"));
  }
  return Region::ball_union(std::move(centers), radius);
}

}  // namespace safed::domain
