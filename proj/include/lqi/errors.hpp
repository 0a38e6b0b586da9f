#pragma once

#include <stdexcept>
#include <string>

namespace lqi {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Iteration failure, overflow, or a post-condition that did not hold
/// numerically.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class SingularityError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

/// Evaluation outside the set of stabilizing parameterizers.
class DomainError : public Error {
 public:
  using Error::Error;
};

class RankError : public Error {
 public:
  RankError(const std::string& what, int rank, int expected, double threshold)
      : Error(what + " (numerical rank " + std::to_string(rank) + " of " +
              std::to_string(expected) + ", threshold " +
              std::to_string(threshold) + ")"),
        rank_(rank),
        expected_(expected),
        threshold_(threshold) {}

  int rank() const { return rank_; }
  int expected() const { return expected_; }
  double threshold() const { return threshold_; }

 private:
  int rank_;
  int expected_;
  double threshold_;
};

class InfeasibleError : public Error {
 public:
  enum class Stage { kPhaseOne, kNumericalStall };

  InfeasibleError(Stage stage, const std::string& what)
      : Error(what), stage_(stage) {}

  Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

class NonConvergenceError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace lqi
