#pragma once

// CSV tables (RFC 4180 quoting) and fixed-precision number formatting.

#include <cmath>
#include <fstream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "lqi/errors.hpp"
#include "lqi/kernels.hpp"

namespace lqi::io {

/// 12 significant digits, the precision of every report and table.
inline std::string num(double v) { return fmt::format("{:.12g}", v); }

/// Shortest text that reads back to the same double.
inline std::string exact(double v) { return fmt::format("{}", v); }

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  /// NaN entries are written as empty fields.
  void add_row(const std::vector<double>& row) {
    std::vector<std::string> cells;
    for (double v : row) cells.push_back(std::isnan(v) ? std::string() : num(v));
    add_cells(std::move(cells));
  }

  void add_cells(std::vector<std::string> cells) {
    if (cells.size() != header_.size()) {
      throw DimensionError("CSV row has " + std::to_string(cells.size()) + " fields, header has " +
                           std::to_string(header_.size()));
    }
    rows_.push_back(std::move(cells));
  }

  size_t rows() const { return rows_.size(); }
  const std::vector<std::string>& header() const { return header_; }

  void write(std::ostream& os) const {
    for (size_t i = 0; i < header_.size(); ++i) {
      os << (i ? "," : "") << csv_field(header_[i]);
    }
    os << "\r\n";
    for (const auto& r : rows_) {
      for (size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << csv_field(r[i]);
      os << "\r\n";
    }
  }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path + " for writing");
    write(f);
    if (!f) throw InputError("failed writing " + path);
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::vector<std::string> numbered(std::string_view stem, Index count) {
  std::vector<std::string> names;
  for (Index i = 1; i <= count; ++i) names.push_back(std::string(stem) + std::to_string(i));
  return names;
}

}  // namespace lqi::io
