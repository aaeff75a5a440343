#pragma once

#include <vector>

#include "mdnik/kinematics.hpp"

namespace mdnik {

struct DlsSettings {
    double damping = 1e-4;       // initial and minimum lambda, m^2
    int max_iters = 500;
    double position_tol = 1e-6;  // m
    double step_clamp = 0.2;     // largest per-joint change per iteration

    void validate() const;
};

enum class DlsStatus { converged, not_converged };

struct DlsResult {
    JointConfig q;  // best iterate found, always within joint limits
    DlsStatus status = DlsStatus::not_converged;
    int iterations = 0;
    double error = 0.0;  // |target - FK(q)| in meters
    std::vector<double> best_error_trace;  // best-so-far error before each iteration and at exit
};

// Damped least squares on the tip position:
//   dq = J^T (J J^T + lambda I)^-1 e,  e = target - FK(q)
// with dq scaled so no entry exceeds step_clamp, and q clamped to the joint
// limits after every step. lambda starts at settings.damping and is raised
// tenfold whenever a step fails to reduce the error (the step is dropped).
DlsResult solve_dls(const KinematicChain& chain, const Eigen::Vector3d& target, const JointConfig& q0,
                    const DlsSettings& settings = {});

}  // namespace mdnik
