#pragma once

// Structured text reports in a YAML subset: nested maps, scalars and
// matrices as lists of rows. Readable back through yaml-cpp.

#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "lqi/errors.hpp"
#include "lqi/io/csv.hpp"
#include "lqi/kernels.hpp"

namespace lqi::io {

class TextReport {
 public:
  /// `round_trip` writes shortest exact doubles instead of 12 digits.
  explicit TextReport(bool round_trip = false) : round_trip_(round_trip) {}

  TextReport& section(std::string_view key) {
    line(std::string(key) + ":");
    indent_ += 2;
    return *this;
  }
  TextReport& end() {
    indent_ -= 2;
    return *this;
  }

  TextReport& value(std::string_view key, double v) { return kv(key, fmt_num(v)); }
  template <class I, std::enable_if_t<std::is_integral_v<I> && !std::is_same_v<I, bool>, int> = 0>
  TextReport& value(std::string_view key, I v) {
    return kv(key, std::to_string(v));
  }
  TextReport& flag(std::string_view key, bool v) { return kv(key, v ? "true" : "false"); }
  TextReport& text(std::string_view key, std::string_view v) { return kv(key, quote(v)); }

  TextReport& matrix(std::string_view key, const Mat& M) {
    std::string s = "[";
    for (Index r = 0; r < M.rows(); ++r) {
      s += r ? ", [" : "[";
      for (Index c = 0; c < M.cols(); ++c) s += (c ? ", " : "") + fmt_num(M(r, c));
      s += "]";
    }
    s += "]";
    return kv(key, s);
  }

  TextReport& vector(std::string_view key, const Vec& v) {
    std::string s = "[";
    for (Index i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt_num(v(i));
    return kv(key, s + "]");
  }

  TextReport& strings(std::string_view key, const std::vector<std::string>& items) {
    if (items.empty()) return kv(key, "[]");
    line(std::string(key) + ":");
    for (const auto& s : items) line("  - " + quote(s));
    return *this;
  }

  std::string str() const { return out_.str(); }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path + " for writing");
    f << out_.str();
    if (!f) throw InputError("failed writing " + path);
  }

 private:
  std::string fmt_num(double v) const { return round_trip_ ? exact(v) : num(v); }

  static std::string quote(std::string_view v) {
    std::string s = "\"";
    for (char c : v) {
      if (c == '"' || c == '\\') s += '\\';
      s += c;
    }
    return s + "\"";
  }

  TextReport& kv(std::string_view key, const std::string& v) {
    line(std::string(key) + ": " + v);
    return *this;
  }

  void line(const std::string& s) { out_ << std::string(static_cast<size_t>(indent_), ' ') << s << "\n"; }

  std::ostringstream out_;
  int indent_ = 0;
  bool round_trip_;
};

}  // namespace lqi::io
