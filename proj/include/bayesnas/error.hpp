#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bayesnas {

// Error categories map one-to-one onto CLI exit codes (see exit_code()).
enum class ErrorKind {
  dimension,
  config,
  data,
  numeric,
  usage,
  selection,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  std::string_view kind_name() const noexcept {
    switch (kind_) {
      case ErrorKind::dimension: return "dimension_error";
      case ErrorKind::config: return "config_error";
      case ErrorKind::data: return "data_error";
      case ErrorKind::numeric: return "numeric_error";
      case ErrorKind::usage: return "usage_error";
      case ErrorKind::selection: return "selection_error";
    }
    return "error";
  }

  // 0 ok, 2 config, 3 data, 4 numeric divergence, 1 anything else.
  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::config: return 2;
      case ErrorKind::data: return 3;
      case ErrorKind::selection: return 3;
      case ErrorKind::numeric: return 4;
      default: return 1;
    }
  }

 private:
  ErrorKind kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error(ErrorKind::dimension, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::numeric, w) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error(ErrorKind::usage, w) {}
};
struct SelectionError : Error {
  explicit SelectionError(const std::string& w) : Error(ErrorKind::selection, w) {}
};

}  // namespace bayesnas
