#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbsde/errors.hpp"
#include "mbsde/lattice.hpp"

namespace mbsde::cli {

/// Shortest round-trip decimal form; independent of the global locale.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// Header row plus rows of cells; written with LF line ends.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  CsvTable& row() {
    rows_.emplace_back();
    return *this;
  }
  CsvTable& add(double v) { return add_text(format_number(v)); }
  CsvTable& add(std::size_t v) { return add_text(std::to_string(v)); }
  CsvTable& add(bool v) { return add_text(v ? "1" : "0"); }
  CsvTable& add_text(const std::string& s) {
    rows_.back().push_back(s);
    return *this;
  }

  std::size_t rows() const { return rows_.size(); }

  std::string str() const {
    std::string out;
    auto line = [&out](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline CsvTable trace_table(const std::vector<lattice::TraceRow>& trace) {
  CsvTable t({"iter", "residual", "a_residual", "Y0", "damping"});
  for (const auto& r : trace) t.row().add(r.iter).add(r.residual).add(r.a_residual).add(r.y0).add(r.damping);
  return t;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ResourceError("cannot write '" + path.string() + "'");
  out << text;
}

/// Non-finite doubles become strings so the report stays valid JSON.
inline nlohmann::json num(double v) {
  if (std::isfinite(v)) return v;
  return format_number(v);
}

}  // namespace mbsde::cli
