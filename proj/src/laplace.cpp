#include "prevmap/laplace.hpp"

#include <sstream>

#include "prevmap/errors.hpp"
#include "prevmap/rng.hpp"

namespace prevmap {

Eigen::MatrixXd laplace_sample(const Eigen::VectorXd& mode,
                               const Eigen::MatrixXd& hessian, int n,
                               std::uint64_t seed) {
  const Eigen::Index d = mode.size();
  if (hessian.rows() != d || hessian.cols() != d)
    throw ValidationError("laplace_sample: hessian dimension mismatch");
  if (n < 0) throw ValidationError("laplace_sample: negative sample count");

  Eigen::LLT<Eigen::MatrixXd> llt(hessian);
  if (llt.info() != Eigen::Success) {
    const double lmin =
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(hessian)
            .eigenvalues()
            .minCoeff();
    std::ostringstream os;
    os << "laplace_sample: curvature is not positive definite"
       << " (smallest eigenvalue " << lmin << ")";
    throw FactorizationError(os.str());
  }

  // x = mode + L^-T z has covariance (L L^T)^-1 = hessian^-1.
  Rng rng(seed);
  Eigen::MatrixXd draws(n, d);
  Eigen::VectorXd z(d);
  const Eigen::MatrixXd L = llt.matrixL();
  for (int s = 0; s < n; ++s) {
    for (Eigen::Index i = 0; i < d; ++i) z[i] = rng.normal();
    draws.row(s) =
        (mode + L.transpose().triangularView<Eigen::Upper>().solve(z))
            .transpose();
  }
  return draws;
}

}  // namespace prevmap
