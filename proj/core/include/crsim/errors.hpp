#pragma once

#include <stdexcept>
#include <string>

namespace crsim {

/// Invalid or inconsistent configuration (bad parameter, missing key).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or degenerate input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parse failure in a line-oriented input file.
class ParseError : public DataError {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : DataError(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// JSON document that does not follow an expected schema. `path` names the
/// offending field, e.g. `turns[2].agent.kind`.
class SchemaError : public DataError {
 public:
  SchemaError(const std::string& path, const std::string& what)
      : DataError(path + ": " + what), path_(path) {}

  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// A request that cannot be satisfied by the given state (no feasible query,
/// incompatible observation, slate larger than the catalog).
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace crsim
