#include "safed/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "safed/textio.hpp"

namespace safed {

namespace textio {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double to_double(const std::string& s) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw FormatError("trailing characters");
    return v;
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception&) {
    throw FormatError("expected a real number, got '" + s + "'");
  }
}

long to_long(const std::string& s) {
  try {
    size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw FormatError("trailing characters");
    return v;
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception&) {
    throw FormatError("expected an integer, got '" + s + "'");
  }
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

std::string read_line(std::istream& in, const std::string& context) {
  std::string line;
  if (!std::getline(in, line)) {
    throw FormatError("unexpected end of file while reading " + context);
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

void require_header(std::istream& in, const std::string& expected) {
  const std::string line = read_line(in, "format header");
  if (line != expected) {
    throw FormatError("bad format header: expected '" + expected + "', got '" +
                      line + "'");
  }
}

void write_vector(std::ostream& out, const Eigen::VectorXd& v) {
  out << v.size();
  for (Eigen::Index i = 0; i < v.size(); ++i) out << " " << fmt(v[i]);
  out << "\n";
}

Eigen::VectorXd read_vector(std::istream& in, const std::string& context) {
  const auto tok = split_ws(read_line(in, context));
  if (tok.empty()) throw FormatError("empty vector line in " + context);
  const long n = to_long(tok[0]);
  if (static_cast<long>(tok.size()) != n + 1) {
    throw FormatError("vector length mismatch in " + context);
  }
  Eigen::VectorXd v(n);
  for (long i = 0; i < n; ++i) v[i] = to_double(tok[static_cast<size_t>(i) + 1]);
  return v;
}

void write_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  out << m.rows() << " " << m.cols() << "\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      out << (c ? " " : "") << fmt(m(r, c));
    }
    out << "\n";
  }
}

Eigen::MatrixXd read_matrix(std::istream& in, const std::string& context) {
  const auto dims = split_ws(read_line(in, context + " dims"));
  if (dims.size() != 2) throw FormatError("bad matrix dims in " + context);
  const long rows = to_long(dims[0]), cols = to_long(dims[1]);
  Eigen::MatrixXd m(rows, cols);
  for (long r = 0; r < rows; ++r) {
    const auto tok = split_ws(read_line(in, context + " row"));
    if (static_cast<long>(tok.size()) != cols) {
      throw FormatError("matrix row length mismatch in " + context);
    }
    for (long c = 0; c < cols; ++c) m(r, c) = to_double(tok[static_cast<size_t>(c)]);
  }
  return m;
}

}  // namespace textio

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

Config Config::from_stream(std::istream& in) {
  Config cfg;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config: expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw FormatError("config: empty key");
    cfg.values_[key] = value;
    cfg.order_.push_back(key);
  }
  return cfg;
}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("config file not found: " + path);
  return from_stream(in);
}

bool Config::has(const std::string& key) const {
  return values_.count(key) != 0;
}

std::string Config::get_string(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error("config: missing key '" + key + "'");
  return it->second;
}

std::string Config::get_string(const std::string& key,
                               const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key) const {
  return textio::to_double(get_string(key));
}

double Config::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

long Config::get_long(const std::string& key) const {
  return textio::to_long(get_string(key));
}

long Config::get_long(const std::string& key, long fallback) const {
  return has(key) ? get_long(key) : fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get_string(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw FormatError("config: key '" + key + "' is not a boolean: '" + v + "'");
}

Eigen::VectorXd Config::get_vector(const std::string& key) const {
  const auto tok = textio::split_ws(get_string(key));
  Eigen::VectorXd v(static_cast<long>(tok.size()));
  for (size_t i = 0; i < tok.size(); ++i) {
    v[static_cast<long>(i)] = textio::to_double(tok[i]);
  }
  return v;
}

Eigen::VectorXd Config::get_vector(const std::string& key,
                                   const Eigen::VectorXd& fallback) const {
  return has(key) ? get_vector(key) : fallback;
}

void Config::set(const std::string& key, const std::string& value) {
  if (!values_.count(key)) order_.push_back(key);
  values_[key] = value;
}

std::string Config::canonical_text() const {
  std::vector<std::string> keys;
  keys.reserve(values_.size());
  for (const auto& [k, v] : values_) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  std::string out;
  for (const auto& k : keys) out += k + " = " + values_.at(k) + "\n";
  return out;
}

std::string Config::hash() const {
  // FNV-1a 64 over the canonicalized text.
  uint64_t h = 1469598103934665603ULL;
  for (const char ch : canonical_text()) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

void Config::write(std::ostream& out) const {
  for (const auto& k : order_) {
    out << k << " = " << values_.at(k) << "\n";
  }
}

}  // namespace safed
