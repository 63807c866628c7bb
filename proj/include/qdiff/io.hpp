#pragma once

#include <cstddef>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "qdiff/errors.hpp"
#include "qdiff/point_cloud.hpp"

namespace qdiff::io {

// Point-cloud text format:
//
//   N d
//   x_11 ... x_1d
//   ...
//   x_N1 ... x_Nd
//
// A dataset file is a sequence of such blocks. Blank lines and lines starting
// with '#' are ignored.

namespace detail {

inline bool next_token(std::istream& in, std::string& tok) {
  while (in >> tok) {
    if (!tok.empty() && tok[0] == '#') {
      in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
      continue;
    }
    return true;
  }
  return false;
}

inline double to_real(const std::string& tok) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    throw ParseError("expected a real number, got '" + tok + "'");
  }
  if (used != tok.size()) throw ParseError("expected a real number, got '" + tok + "'");
  return v;
}

inline std::size_t to_count(const std::string& tok) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(tok, &used);
  } catch (const std::exception&) {
    throw ParseError("expected a positive integer, got '" + tok + "'");
  }
  if (used != tok.size() || v <= 0) throw ParseError("expected a positive integer, got '" + tok + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Reads one block; returns false at clean end of input.
inline bool read_point_cloud(std::istream& in, PointCloud& out) {
  std::string tok;
  if (!detail::next_token(in, tok)) return false;
  const std::size_t n = detail::to_count(tok);
  if (!detail::next_token(in, tok)) throw ParseError("missing dimension after N");
  const std::size_t d = detail::to_count(tok);
  std::vector<double> data(n * d);
  for (auto& v : data) {
    if (!detail::next_token(in, tok))
      throw ParseError("truncated point cloud: expected " + std::to_string(n * d) + " values");
    v = detail::to_real(tok);
  }
  try {
    out = PointCloud(n, d, std::move(data));
  } catch (const DomainError& e) {
    throw ParseError(e.what());
  }
  return true;
}

inline PointCloud read_point_cloud(std::istream& in) {
  PointCloud pc;
  if (!read_point_cloud(in, pc)) throw ParseError("empty point-cloud input");
  return pc;
}

inline std::vector<PointCloud> read_dataset(std::istream& in) {
  std::vector<PointCloud> out;
  PointCloud pc;
  while (read_point_cloud(in, pc)) out.push_back(pc);
  return out;
}

inline void write_point_cloud(std::ostream& out, const PointCloud& x) {
  out << x.n() << ' ' << x.d() << '\n';
  out << std::setprecision(17);
  for (std::size_t i = 0; i < x.n(); ++i) {
    for (std::size_t k = 0; k < x.d(); ++k) out << (k ? " " : "") << x(i, k);
    out << '\n';
  }
}

inline void write_dataset(std::ostream& out, const std::vector<PointCloud>& xs) {
  for (const auto& x : xs) write_point_cloud(out, x);
}

/// Maps element symbols to one-hot slots, e.g. {H, C, N, O, F}.
class ElementTable {
 public:
  ElementTable() = default;
  explicit ElementTable(const std::vector<std::string>& symbols) {
    for (const auto& s : symbols) add(s);
  }

  /// Parses "H,C,N,O" (whitespace tolerated).
  static ElementTable parse(const std::string& list) {
    ElementTable t;
    std::string cur;
    for (char ch : list + ",") {
      if (ch == ',' ) {
        if (!cur.empty()) t.add(cur);
        cur.clear();
      } else if (ch != ' ' && ch != '\t') {
        cur += ch;
      }
    }
    return t;
  }

  void add(const std::string& symbol) {
    if (index_.count(symbol)) throw ParseError("duplicate element '" + symbol + "'");
    index_.emplace(symbol, index_.size());
  }
  std::size_t size() const { return index_.size(); }
  std::size_t slot(const std::string& symbol) const {
    auto it = index_.find(symbol);
    if (it == index_.end()) throw ParseError("element '" + symbol + "' not in element table");
    return it->second;
  }

 private:
  std::map<std::string, std::size_t> index_;
};

/// XYZ molecule reader: "count / comment / El x y z" lines. Each atom becomes
/// a point (x, y, z, onehot(El)) of dimension 3 + table.size().
inline PointCloud read_xyz(std::istream& in, const ElementTable& table) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty xyz input");
  const std::size_t d = 3 + table.size();
  std::size_t count = 0;
  {
    std::istringstream head(line);
    std::string tok;
    head >> tok;
    count = detail::to_count(tok);
  }
  std::getline(in, line);  // comment
  std::vector<double> data;
  data.reserve(count * d);
  for (std::size_t a = 0; a < count; ++a) {
    if (!std::getline(in, line)) throw ParseError("truncated xyz: expected " + std::to_string(count) + " atoms");
    std::istringstream row(line);
    std::string sym, tx, ty, tz;
    if (!(row >> sym >> tx >> ty >> tz)) throw ParseError("malformed xyz atom line: '" + line + "'");
    data.push_back(detail::to_real(tx));
    data.push_back(detail::to_real(ty));
    data.push_back(detail::to_real(tz));
    const std::size_t slot = table.slot(sym);
    for (std::size_t e = 0; e < table.size(); ++e) data.push_back(e == slot ? 1.0 : 0.0);
  }
  return PointCloud(count, d, std::move(data));
}

}  // namespace qdiff::io
