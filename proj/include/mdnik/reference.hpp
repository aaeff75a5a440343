#pragma once

// Serial reference versions of the parallel kernels. Straight loops, one
// sample at a time, no BLAS-style batching; kept to cross-check the fast
// paths in tests and benchmarks.

#include <Eigen/Dense>

#include "mdnik/kinematics.hpp"
#include "mdnik/mdn.hpp"

namespace mdnik::reference {

BatchGradient batch_gradient(const MdnModel& model, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets);

Eigen::Matrix3Xd forward_positions(const KinematicChain& chain, const Eigen::MatrixXd& configs);

}  // namespace mdnik::reference
