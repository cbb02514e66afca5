#include "prevmap/optimize.hpp"

#include <cmath>
#include <sstream>

namespace prevmap {

namespace {

// Armijo backtracking from unit step. Returns the accepted step length, or 0
// when no decrease could be found.
double backtrack(const Objective& f, const Eigen::VectorXd& x, double fx,
                 const Eigen::VectorXd& grad, const Eigen::VectorXd& dir,
                 Eigen::VectorXd& x_new, double& f_new,
                 Eigen::VectorXd& g_new) {
  const double slope = grad.dot(dir);
  if (!(slope < 0)) return 0.0;
  double t = 1.0;
  for (int k = 0; k < 60; ++k) {
    x_new = x + t * dir;
    f_new = f.value_grad(x_new, g_new);
    if (std::isfinite(f_new) && f_new <= fx + 1e-4 * t * slope) return t;
    t *= 0.5;
  }
  return 0.0;
}

}  // namespace

Eigen::VectorXd minimize_bfgs(const Objective& f, Eigen::VectorXd x,
                              const ModeOptions& opts, int* iterations,
                              double* grad_norm) {
  const Eigen::Index n = f.dim();
  Eigen::VectorXd g(n), x_new(n), g_new(n);
  double fx = f.value_grad(x, g);
  if (!std::isfinite(fx))
    throw OptimizationError("objective is not finite at the initial point");

  Eigen::MatrixXd H;  // inverse Hessian approximation
  if (opts.h0_diag.size() == n)
    H = opts.h0_diag.asDiagonal();
  else
    H = Eigen::MatrixXd::Identity(n, n);

  int iter = 0;
  double gnorm = g.lpNorm<Eigen::Infinity>();
  bool reset_since_fail = false;
  while (gnorm > opts.grad_tol && iter < opts.max_iterations) {
    Eigen::VectorXd dir = -(H * g);
    if (!(g.dot(dir) < 0)) {  // fallback if curvature estimate went bad
      H = Eigen::MatrixXd::Identity(n, n);
      dir = -g;
    }
    double f_new;
    double t = backtrack(f, x, fx, g, dir, x_new, f_new, g_new);
    if (t == 0.0 && !reset_since_fail) {
      // retry once along steepest descent with a reset metric
      H = Eigen::MatrixXd::Identity(n, n);
      dir = -g;
      t = backtrack(f, x, fx, g, dir, x_new, f_new, g_new);
      reset_since_fail = true;
    }
    if (t == 0.0) break;  // stalled; caller decides whether that is fatal

    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (iter == 0 && opts.h0_diag.size() != n)
        H *= sy / y.squaredNorm();  // standard initial scaling
      const double rho = 1.0 / sy;
      const Eigen::VectorXd Hy = H * y;
      H.noalias() -= rho * (Hy * s.transpose() + s * Hy.transpose());
      H.noalias() += rho * rho * (y.dot(Hy) + 1.0 / rho) * (s * s.transpose());
      reset_since_fail = false;
    }
    x = x_new;
    g = g_new;
    fx = f_new;
    gnorm = g.lpNorm<Eigen::Infinity>();
    ++iter;
  }
  if (iterations) *iterations = iter;
  if (grad_norm) *grad_norm = gnorm;
  return x;
}

Eigen::MatrixXd fd_hessian(const Objective& f, const Eigen::VectorXd& x,
                           double step_scale) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd H(n, n);
  Eigen::VectorXd xp = x, gp(n), gm(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double h = step_scale * (1.0 + std::abs(x[i]));
    xp[i] = x[i] + h;
    f.value_grad(xp, gp);
    xp[i] = x[i] - h;
    f.value_grad(xp, gm);
    xp[i] = x[i];
    H.col(i) = (gp - gm) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose());
}

ModeResult find_mode(const Objective& f, const Eigen::VectorXd& init,
                     const ModeOptions& opts) {
  if (init.size() != f.dim())
    throw ValidationError("find_mode: init has wrong dimension");
  if (!init.allFinite())
    throw ValidationError("find_mode: init must be finite");

  ModeResult res;
  int iters = 0;
  double gnorm = 0.0;
  res.mode = minimize_bfgs(f, init, opts, &iters, &gnorm);
  res.iterations = iters;

  const auto curvature = [&](const Eigen::VectorXd& x) {
    return f.has_hessian() ? f.hessian(x) : fd_hessian(f, x, opts.hessian_step);
  };

  Eigen::VectorXd g(f.dim());
  double fx = f.value_grad(res.mode, g);
  gnorm = g.lpNorm<Eigen::Infinity>();
  res.hessian = curvature(res.mode);

  // Newton polish: drives the gradient below tolerance when BFGS stalls close
  // to the mode, and refreshes the curvature at the final point.
  for (int k = 0; k < opts.polish_iterations && gnorm > opts.grad_tol; ++k) {
    Eigen::MatrixXd H = res.hessian;
    double ridge = 0.0;
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    while (llt.info() != Eigen::Success && ridge < 1e6) {
      ridge = (ridge == 0.0) ? 1e-8 * (1.0 + H.diagonal().cwiseAbs().maxCoeff())
                             : ridge * 10.0;
      llt.compute(H + ridge * Eigen::MatrixXd::Identity(H.rows(), H.cols()));
    }
    if (llt.info() != Eigen::Success) break;
    const Eigen::VectorXd dir = -llt.solve(g);
    Eigen::VectorXd x_new(f.dim()), g_new(f.dim());
    double f_new;
    if (backtrack(f, res.mode, fx, g, dir, x_new, f_new, g_new) == 0.0) break;
    res.mode = x_new;
    g = g_new;
    fx = f_new;
    gnorm = g.lpNorm<Eigen::Infinity>();
    res.hessian = curvature(res.mode);
    ++res.iterations;
  }

  res.value = fx;
  res.grad_norm = gnorm;
  res.converged = gnorm <= opts.grad_tol;
  if (!res.converged && opts.require_convergence) {
    std::ostringstream os;
    os << "mode finding did not converge: gradient inf-norm " << gnorm
       << " after " << res.iterations << " iterations (tolerance "
       << opts.grad_tol << ")";
    throw OptimizationError(os.str());
  }
  return res;
}

double grad_check(const Objective& f, const Eigen::VectorXd& point) {
  if (!point.allFinite()) throw ValidationError("grad_check: point must be finite");
  Eigen::VectorXd g(f.dim());
  f.value_grad(point, g);
  Eigen::VectorXd xp = point;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double h = 1e-5 * (1.0 + std::abs(point[i]));
    xp[i] = point[i] + h;
    const double fp = f.value(xp);
    xp[i] = point[i] - h;
    const double fm = f.value(xp);
    xp[i] = point[i];
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(g[i]), std::abs(fd)});
    worst = std::max(worst, std::abs(fd - g[i]) / denom);
  }
  return worst;
}

}  // namespace prevmap
