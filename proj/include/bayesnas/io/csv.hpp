#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bayesnas/error.hpp"
#include "bayesnas/io/dataset.hpp"

namespace bayesnas {

inline constexpr double kStdFloor = 1e-8;

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell += ch;
    }
  }
  out.push_back(cell);
  for (auto& c : out) {
    const auto b = c.find_first_not_of(" \t");
    const auto e = c.find_last_not_of(" \t");
    c = b == std::string::npos ? std::string() : c.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_cell(const std::string& cell, std::size_t row, std::size_t col, const std::string& path) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw DataError(path + ": row " + std::to_string(row) + ", column " + std::to_string(col) +
                    ": cannot parse '" + cell + "' as a number");
  }
  return v;
}

}  // namespace detail

/// Per-column z-score statistics (population std, floored).
inline Normalization fit_normalization(const std::vector<double>& features, std::size_t cols) {
  Normalization n;
  n.mean.assign(cols, 0.0);
  n.stddev.assign(cols, 0.0);
  const std::size_t rows = cols ? features.size() / cols : 0;
  if (rows == 0) return n;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) n.mean[c] += features[r * cols + c];
  for (auto& m : n.mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = features[r * cols + c] - n.mean[c];
      n.stddev[c] += d * d;
    }
  for (auto& s : n.stddev) s = std::max(std::sqrt(s / static_cast<double>(rows)), kStdFloor);
  return n;
}

inline void apply_normalization(std::vector<double>& features, const Normalization& n) {
  const std::size_t cols = n.mean.size();
  for (std::size_t i = 0; i < features.size(); ++i) features[i] = n.apply(i % cols, features[i]);
}

/// CSV with a header row. `label_column` is a header name or empty for the
/// last column. Features are z-scored; statistics are kept on the dataset
/// (or `fixed` statistics are applied when given, e.g. for a test split).
inline Dataset load_csv(const std::string& path, const std::string& label_column = "",
                        const Normalization* fixed = nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file, expected a header row");
  const auto header = detail::split_csv_line(line);
  std::size_t label_idx = header.size() - 1;
  if (!label_column.empty()) {
    auto it = std::find(header.begin(), header.end(), label_column);
    if (it == header.end()) throw DataError(path + ": no column named '" + label_column + "'");
    label_idx = static_cast<std::size_t>(it - header.begin());
  }
  const std::size_t cols = header.size() - 1;
  if (cols == 0) throw DataError(path + ": need at least one feature column besides the label");
  Dataset d;
  d.kind = FeatureKind::tabular;
  d.tag = path;
  d.input_shape = {cols};
  std::size_t row = 1;
  int max_label = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError(path + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " columns, header has " + std::to_string(header.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const double v = detail::parse_cell(cells[c], row, c + 1, path);
      if (c == label_idx) {
        if (v < 0 || v != std::floor(v)) {
          throw DataError(path + ": row " + std::to_string(row) + ", column " + std::to_string(c + 1) +
                          ": label must be a non-negative integer");
        }
        d.labels.push_back(static_cast<int>(v));
        max_label = std::max(max_label, static_cast<int>(v));
      } else {
        d.features.push_back(v);
      }
    }
  }
  if (d.labels.empty()) throw DataError(path + ": no data rows");
  d.num_classes = std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  if (fixed) {
    if (fixed->mean.size() != cols) throw DataError(path + ": normalization statistics do not match the column count");
    d.normalization = *fixed;
  } else {
    d.normalization = fit_normalization(d.features, cols);
  }
  apply_normalization(d.features, d.normalization);
  d.validate();
  return d;
}

}  // namespace bayesnas
