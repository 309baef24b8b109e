#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace iontrace {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Invalid user-supplied parameters (dimensions, counts, schedules).
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Evaluation request outside the valid domain (e.g. inside a conductor).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Linear solve failed or is untrustworthy.
struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Integrator step size underflow (stiff or discontinuous right-hand side).
struct StiffnessError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

} // namespace iontrace
