#include "mdnik/ik_numeric.hpp"

#include <algorithm>

#include "mdnik/errors.hpp"

namespace mdnik {

namespace {
constexpr double kMaxDamping = 1e6;
}

void DlsSettings::validate() const {
    if (!(damping > 0.0)) throw ValidationError("DLS damping must be positive");
    if (!(position_tol > 0.0)) throw ValidationError("DLS position tolerance must be positive");
    if (max_iters < 0) throw ValidationError("DLS max_iters must be non-negative");
    if (!(step_clamp > 0.0)) throw ValidationError("DLS step clamp must be positive");
}

DlsResult solve_dls(const KinematicChain& chain, const Eigen::Vector3d& target, const JointConfig& q0,
                    const DlsSettings& settings) {
    settings.validate();
    if (!target.allFinite()) throw DomainError("non-finite IK target");
    if (static_cast<std::size_t>(q0.size()) != chain.dof()) throw DimensionError("initial configuration length does not match dof");

    DlsResult result;
    JointConfig q = chain.clamp(q0);
    Eigen::Vector3d e = target - forward_kinematics(chain, q).translation;
    result.q = q;
    result.error = e.norm();
    result.best_error_trace.push_back(result.error);

    // Levenberg-Marquardt style: a step that does not lower the error is
    // rejected and retried with ten times the damping; accepted steps relax
    // it back toward the configured value. Without this the clamped step
    // can bounce across a singular pose forever (fully stretched arm).
    double lambda = settings.damping;
    for (int it = 0; it < settings.max_iters && result.error >= settings.position_tol; ++it) {
        const auto jac = jacobian(chain, q);
        const Eigen::Matrix3d a = jac * jac.transpose() + lambda * Eigen::Matrix3d::Identity();
        Eigen::VectorXd dq = jac.transpose() * a.llt().solve(e);
        const double biggest = dq.cwiseAbs().maxCoeff();
        if (biggest > settings.step_clamp) dq *= settings.step_clamp / biggest;
        const JointConfig trial = chain.clamp(q + dq);
        const Eigen::Vector3d trial_e = target - forward_kinematics(chain, trial).translation;
        result.iterations = it + 1;
        const double err = trial_e.norm();
        if (err < result.error) {
            q = trial;
            e = trial_e;
            result.error = err;
            result.q = q;
            lambda = std::max(settings.damping, lambda * 0.1);
        } else {
            lambda = std::min(lambda * 10.0, kMaxDamping);
        }
        result.best_error_trace.push_back(result.error);
    }
    result.status = result.error < settings.position_tol ? DlsStatus::converged : DlsStatus::not_converged;
    return result;
}

}  // namespace mdnik
