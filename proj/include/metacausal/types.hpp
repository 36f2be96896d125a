#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace metacausal {

using Vector = Eigen::VectorXd;
// Row-major so that row subsets (splits, minibatches) stay contiguous.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Invalid user-supplied configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Arguments outside an operation's domain (shape mismatch, negative shift...).
struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Optimisation produced non-finite values (CLI exit code 3).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace metacausal
