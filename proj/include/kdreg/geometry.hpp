#pragma once

// Rigid-body pose algebra and trajectory metrics.
//
// Rotations in PoseDelta are Euler angles (roll, pitch, yaw) in the intrinsic
// X-Y'-Z'' convention, R = Rx(roll) * Ry(pitch) * Rz(yaw), wrapped to (-pi, pi].
// Learning losses compare these Euler vectors directly; the rotation RPE metric
// uses the geodesic angle of the relative rotation instead.

#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace kdreg::geo {

struct PoseDelta {
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
    Eigen::Vector3d r = Eigen::Vector3d::Zero();

    static PoseDelta identity() { return {}; }
    bool operator==(const PoseDelta&) const = default;
};

struct Pose {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Eigen::Matrix4d homogeneous() const;
    static Pose from_homogeneous(const Eigen::Matrix4d& m);
};

using Trajectory = std::vector<Pose>;

// Wraps an angle to (-pi, pi].
double wrap_angle(double a);

Eigen::Matrix3d euler_to_matrix(const Eigen::Vector3d& r);

struct EulerResult {
    Eigen::Vector3d angles;
    bool gimbal_lock = false;  // |pitch| near pi/2; roll forced to 0
};
// Throws std::invalid_argument if R deviates from orthonormal by more than 1e-6.
EulerResult matrix_to_euler(const Eigen::Matrix3d& rotation);

Pose to_pose(const PoseDelta& d);
PoseDelta to_delta(const Pose& p);

// Closest rotation in the Frobenius sense (SVD projection, det +1).
Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& m);
// Largest absolute entry of R^T R - I.
double orthonormality_error(const Eigen::Matrix3d& m);

Pose compose(const Pose& a, const Pose& b);
Pose inverse(const Pose& p);
PoseDelta compose(const PoseDelta& a, const PoseDelta& b);
PoseDelta inverse(const PoseDelta& d);

// Folds compose from the identity; the result has deltas.size() + 1 poses.
Trajectory integrate(std::span<const PoseDelta> deltas);
// Relative motion between consecutive poses; inverse of integrate.
std::vector<PoseDelta> differences(const Trajectory& traj);

// Geodesic angle of a rotation matrix, in [0, pi].
double rotation_angle(const Eigen::Matrix3d& r);

struct RpeResult {
    double rms_t = 0.0;
    double rms_r = 0.0;
};
// Per-frame RMS of translation error norms and of relative-rotation geodesic angles.
RpeResult rpe(std::span<const PoseDelta> predicted, std::span<const PoseDelta> truth);

// RMS positional error of absolute poses, optionally after a rigid
// (rotation + translation, no scale) least-squares alignment.
double ate(const Trajectory& predicted, const Trajectory& truth, bool align = false);

// Rigid transform minimizing sum |R p_i + t - q_i|^2.
Pose align_rigid(const Trajectory& source, const Trajectory& target);

}  // namespace kdreg::geo
