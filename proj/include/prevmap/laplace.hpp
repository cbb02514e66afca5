#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "prevmap/kernels.hpp"

namespace prevmap {

/// A fitted latent Gaussian field: kernel, training inputs, posterior mode and
/// negative-log-posterior curvature there. Immutable once fitted.
struct LatentField {
  Eigen::MatrixXd locations;  // one training input per row
  Kernel kernel;
  Eigen::VectorXd mode;
  Eigen::MatrixXd hessian;
};

/// Draws from N(mode, hessian^-1) via Cholesky of the curvature; row per draw.
/// Identical seed and inputs give bitwise-identical output.
Eigen::MatrixXd laplace_sample(const Eigen::VectorXd& mode,
                               const Eigen::MatrixXd& hessian, int n,
                               std::uint64_t seed);

}  // namespace prevmap
