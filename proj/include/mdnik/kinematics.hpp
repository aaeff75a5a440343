#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mdnik/rng.hpp"

namespace mdnik {

using JointConfig = Eigen::VectorXd;

struct RigidTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    static RigidTransform identity() { return {}; }

    // URDF convention: R = Rz(yaw) * Ry(pitch) * Rx(roll), fixed axes.
    static RigidTransform from_xyz_rpy(const Eigen::Vector3d& xyz, const Eigen::Vector3d& rpy);

    RigidTransform operator*(const RigidTransform& rhs) const {
        return {rotation * rhs.rotation, rotation * rhs.translation + translation};
    }
    Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
    RigidTransform inverse() const {
        const Eigen::Matrix3d rt = rotation.transpose();
        return {rt, -(rt * translation)};
    }
};

enum class JointKind { revolute, prismatic, fixed };

std::string_view to_string(JointKind kind);

struct JointLimits {
    double lower = 0.0;
    double upper = 0.0;
};

struct Joint {
    std::string name;
    JointKind kind = JointKind::fixed;
    std::string parent_link;
    std::string child_link;

    // As declared in the description file; kept so the chain can be written
    // back out without any rounding drift.
    Eigen::Vector3d origin_xyz = Eigen::Vector3d::Zero();
    Eigen::Vector3d origin_rpy = Eigen::Vector3d::Zero();
    Eigen::Vector3d axis_declared = Eigen::Vector3d::UnitX();

    RigidTransform origin;
    Eigen::Vector3d axis = Eigen::Vector3d::UnitX();  // unit length
    std::optional<JointLimits> limits;
    bool masked = false;

    bool active() const { return kind != JointKind::fixed && !masked; }
};

// Serial chain from base to tip. Immutable once built; safe to share.
class KinematicChain {
  public:
    KinematicChain() = default;
    KinematicChain(std::string robot_name, std::string base_link, std::string tip_link,
                   std::vector<Joint> joints);

    const std::string& robot_name() const { return robot_name_; }
    const std::string& base_link() const { return base_link_; }
    const std::string& tip_link() const { return tip_link_; }
    const std::vector<Joint>& joints() const { return joints_; }

    std::size_t dof() const { return active_.size(); }
    // Index into joints() of the i-th active joint.
    std::size_t active_joint(std::size_t i) const { return active_[i]; }
    const Joint& active(std::size_t i) const { return joints_[active_[i]]; }

    Eigen::VectorXd lower_limits() const;
    Eigen::VectorXd upper_limits() const;
    JointConfig mid_config() const;
    JointConfig clamp(const JointConfig& q) const;

    // 16 hex digits, FNV-1a over the canonical description.
    const std::string& fingerprint() const { return fingerprint_; }

    // Upper bound on the tip distance from the first active joint, summed
    // link by link. Zero for a chain without active joints.
    double reach() const;
    // World position of the first active joint (at any configuration the
    // joints before it are fixed or masked).
    Eigen::Vector3d reach_center() const;

  private:
    std::string robot_name_;
    std::string base_link_;
    std::string tip_link_;
    std::vector<Joint> joints_;
    std::vector<std::size_t> active_;
    std::string fingerprint_;
};

struct ChainOptions {
    std::string base_link;  // empty: the unique root link
    std::string tip_link;   // empty: the unique leaf reachable from base
    std::vector<std::string> masked_joints;
};

// Parses the supported URDF subset: robot, link, joint (revolute, continuous,
// prismatic, fixed), origin, axis, limit. A joint may carry masked="true".
KinematicChain parse_chain(std::string_view source, const ChainOptions& options = {});
KinematicChain load_chain(const std::string& path, const ChainOptions& options = {});

// Writes the chain back out in the same subset; parse(to_urdf(c)) has the
// same fingerprint as c.
std::string to_urdf(const KinematicChain& chain);

// Human-readable summary (dof, joints, limits, fingerprint).
std::string describe(const KinematicChain& chain);

RigidTransform forward_kinematics(const KinematicChain& chain, const JointConfig& q);

// 3 x dof positional Jacobian of the tip translation.
Eigen::Matrix<double, 3, Eigen::Dynamic> jacobian(const KinematicChain& chain, const JointConfig& q);

JointConfig sample_config(const KinematicChain& chain, Rng& rng);

// Tip positions for every column of configs (dof x n). OpenMP-parallel over
// columns; the result does not depend on the thread count.
Eigen::Matrix3Xd forward_positions(const KinematicChain& chain, const Eigen::MatrixXd& configs);

struct IkSample {
    Eigen::Vector3d position;
    JointConfig config;
};

struct IkDataset {
    std::string chain_fingerprint;
    std::uint64_t seed = 0;
    std::size_t dof = 0;
    std::vector<IkSample> samples;
};

IkDataset generate_dataset(const KinematicChain& chain, std::size_t n, std::uint64_t seed);

// CSV with a one-line header:
//   # mdn-ik dataset v1, chain=<hash>, n=<count>, seed=<seed>
// then rows x,y,z,q0,...,q{dof-1} with 17 significant digits.
void write_dataset(std::ostream& out, const IkDataset& dataset);
IkDataset read_dataset(std::istream& in);
void save_dataset(const std::string& path, const IkDataset& dataset);
IkDataset load_dataset(const std::string& path);

// Shortest-round-trip-safe decimal rendering used by every text format here.
std::string format_double(double v);

}  // namespace mdnik
