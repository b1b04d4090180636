#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace safed {

// Flat `key = value` configuration: one pair per line, `#` starts a comment.
// Vector values are whitespace-separated reals. Keys are unique; a repeated
// key overwrites. The hash is stable under key reordering.
class Config {
 public:
  static Config from_stream(std::istream& in);
  static Config from_file(const std::string& path);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key,
                         const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long get_long(const std::string& key) const;
  long get_long(const std::string& key, long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  Eigen::VectorXd get_vector(const std::string& key) const;
  Eigen::VectorXd get_vector(const std::string& key,
                             const Eigen::VectorXd& fallback) const;

  void set(const std::string& key, const std::string& value);

  // Sorted-key text used for hashing; independent of file ordering.
  std::string canonical_text() const;
  std::string hash() const;  // 16-hex-digit FNV-1a of the canonical text

  void write(std::ostream& out) const;

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

}  // namespace safed
