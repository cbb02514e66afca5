#pragma once

#include <Eigen/Dense>
#include <functional>

#include "prevmap/errors.hpp"

namespace prevmap {

/// Smooth objective with analytic gradient. Implementations may also expose an
/// analytic Hessian; otherwise find_mode falls back to central finite
/// differences of the gradient.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual Eigen::Index dim() const = 0;
  virtual double value_grad(const Eigen::VectorXd& x,
                            Eigen::VectorXd& grad) const = 0;
  virtual bool has_hessian() const { return false; }
  virtual Eigen::MatrixXd hessian(const Eigen::VectorXd&) const {
    throw NumericalError("objective has no analytic hessian");
  }
  double value(const Eigen::VectorXd& x) const {
    Eigen::VectorXd g(x.size());
    return value_grad(x, g);
  }
};

struct ModeOptions {
  double grad_tol = 1e-6;     // infinity norm at the mode
  int max_iterations = 500;   // BFGS iteration cap
  int polish_iterations = 25; // Newton steps allowed after BFGS
  double hessian_step = 1e-4; // FD-of-gradient step scale for the Hessian
  Eigen::VectorXd h0_diag;    // optional initial inverse-Hessian diagonal
  bool require_convergence = true;
};

struct ModeResult {
  Eigen::VectorXd mode;
  Eigen::MatrixXd hessian;
  double value = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// BFGS with backtracking (Armijo) line search. Returns the best iterate;
/// convergence status is reported through the output parameters.
Eigen::VectorXd minimize_bfgs(const Objective& f, Eigen::VectorXd x,
                              const ModeOptions& opts, int* iterations,
                              double* grad_norm);

/// Central finite differences of the analytic gradient, symmetrized.
Eigen::MatrixXd fd_hessian(const Objective& f, const Eigen::VectorXd& x,
                           double step_scale);

/// BFGS followed by a Newton polish, returning the stationary point and the
/// dense curvature there. Throws OptimizationError when the gradient tolerance
/// cannot be met within the iteration budget.
ModeResult find_mode(const Objective& f, const Eigen::VectorXd& init,
                     const ModeOptions& opts = {});

/// Worst relative disagreement between the analytic gradient and central
/// finite differences with step 1e-5*(1+|x_i|), using
/// |fd - g| / max(1, |g|, |fd|) per coordinate.
double grad_check(const Objective& f, const Eigen::VectorXd& point);

}  // namespace prevmap
