#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

#include "safed/common.hpp"

namespace safed {

struct FormatError : Error {
  using Error::Error;
};

// Thrown by pipeline stages when a required input file is absent.
struct MissingArtifact : Error {
  using Error::Error;
};

namespace textio {

// Round-trip-exact decimal formatting for doubles.
std::string fmt(double v);
double to_double(const std::string& s);
long to_long(const std::string& s);

std::vector<std::string> split_ws(const std::string& line);

// Reads one line; throws FormatError on EOF.
std::string read_line(std::istream& in, const std::string& context);

// Reads the first line and checks it equals `expected` (format version tag).
void require_header(std::istream& in, const std::string& expected);

void write_vector(std::ostream& out, const Eigen::VectorXd& v);
Eigen::VectorXd read_vector(std::istream& in, const std::string& context);
void write_matrix(std::ostream& out, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(std::istream& in, const std::string& context);

}  // namespace textio
}  // namespace safed
