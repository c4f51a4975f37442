#pragma once

#include <stdexcept>
#include <string>

namespace dcba {

// Every error raised by the library derives from Error so callers can catch
// one type; the subclasses exist so tests and the CLI can tell them apart.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };
struct GraphError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct StateError : Error { using Error::Error; };
struct PartitionError : Error { using Error::Error; };
struct SingularityError : Error { using Error::Error; };
struct ConvergenceError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

/// Raised by the training loop when a loss or gradient leaves the finite range.
struct DivergenceError : Error {
  DivergenceError(const std::string& what, long step, long task)
      : Error(what + " (step " + std::to_string(step) + ", task " + std::to_string(task) + ")"),
        step(step),
        task(task) {}
  long step;
  long task;
};

}  // namespace dcba
