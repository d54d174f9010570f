#include "kdreg/geometry.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace kdreg::geo {

namespace {

constexpr double kGimbalCos = 1e-6;
constexpr double kOrthonormalTolerance = 1e-6;

}  // namespace

Eigen::Matrix4d Pose::homogeneous() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
}

Pose Pose::from_homogeneous(const Eigen::Matrix4d& m) {
    return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
}

double wrap_angle(double a) {
    double r = std::remainder(a, 2.0 * std::numbers::pi);
    if (r <= -std::numbers::pi) r += 2.0 * std::numbers::pi;
    return r;
}

Eigen::Matrix3d euler_to_matrix(const Eigen::Vector3d& r) {
    return (Eigen::AngleAxisd(r.x(), Eigen::Vector3d::UnitX()) * Eigen::AngleAxisd(r.y(), Eigen::Vector3d::UnitY()) *
            Eigen::AngleAxisd(r.z(), Eigen::Vector3d::UnitZ()))
        .toRotationMatrix();
}

double orthonormality_error(const Eigen::Matrix3d& m) {
    return (m.transpose() * m - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
}

EulerResult matrix_to_euler(const Eigen::Matrix3d& R) {
    const double err = orthonormality_error(R);
    if (!(err <= kOrthonormalTolerance) || R.determinant() < 0.0) {
        throw std::invalid_argument("matrix_to_euler: not a rotation (orthonormality error " + std::to_string(err) +
                                    ")");
    }
    EulerResult out;
    const double cos_pitch = std::hypot(R(0, 0), R(0, 1));
    const double pitch = std::atan2(R(0, 2), cos_pitch);
    if (cos_pitch < kGimbalCos) {
        out.gimbal_lock = true;
        out.angles = {0.0, pitch, std::atan2(R(1, 0), R(1, 1))};
    } else {
        out.angles = {std::atan2(-R(1, 2), R(2, 2)), pitch, std::atan2(-R(0, 1), R(0, 0))};
    }
    for (int i = 0; i < 3; ++i) out.angles[i] = wrap_angle(out.angles[i]);
    return out;
}

Pose to_pose(const PoseDelta& d) { return {euler_to_matrix(d.r), d.t}; }

PoseDelta to_delta(const Pose& p) { return {p.translation, matrix_to_euler(p.rotation).angles}; }

Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& m) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    return svd.matrixU() * d * svd.matrixV().transpose();
}

Pose compose(const Pose& a, const Pose& b) {
    return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

Pose inverse(const Pose& p) {
    const Eigen::Matrix3d rt = p.rotation.transpose();
    return {rt, -rt * p.translation};
}

PoseDelta compose(const PoseDelta& a, const PoseDelta& b) { return to_delta(compose(to_pose(a), to_pose(b))); }

PoseDelta inverse(const PoseDelta& d) { return to_delta(inverse(to_pose(d))); }

Trajectory integrate(std::span<const PoseDelta> deltas) {
    Trajectory traj;
    traj.reserve(deltas.size() + 1);
    traj.emplace_back();
    for (const auto& d : deltas) {
        Pose next = compose(traj.back(), to_pose(d));
        next.rotation = orthonormalize(next.rotation);
        traj.push_back(next);
    }
    return traj;
}

std::vector<PoseDelta> differences(const Trajectory& traj) {
    std::vector<PoseDelta> out;
    for (std::size_t i = 1; i < traj.size(); ++i) {
        Pose rel = compose(inverse(traj[i - 1]), traj[i]);
        rel.rotation = orthonormalize(rel.rotation);
        out.push_back(to_delta(rel));
    }
    return out;
}

double rotation_angle(const Eigen::Matrix3d& r) {
    const Eigen::Vector3d axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
    const double s = 0.5 * axis.norm();
    const double c = 0.5 * (r.trace() - 1.0);
    return std::atan2(s, c);
}

RpeResult rpe(std::span<const PoseDelta> predicted, std::span<const PoseDelta> truth) {
    if (predicted.size() != truth.size()) {
        throw std::invalid_argument("rpe: " + std::to_string(predicted.size()) + " predicted vs " +
                                    std::to_string(truth.size()) + " ground-truth frames");
    }
    if (predicted.empty()) throw std::invalid_argument("rpe: empty sequence");
    double sum_t = 0.0, sum_r = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        sum_t += (predicted[i].t - truth[i].t).squaredNorm();
        const double angle =
            rotation_angle(euler_to_matrix(truth[i].r).transpose() * euler_to_matrix(predicted[i].r));
        sum_r += angle * angle;
    }
    const auto n = static_cast<double>(predicted.size());
    return {std::sqrt(sum_t / n), std::sqrt(sum_r / n)};
}

Pose align_rigid(const Trajectory& source, const Trajectory& target) {
    if (source.size() != target.size() || source.empty()) {
        throw std::invalid_argument("align_rigid: trajectories must be non-empty and of equal length");
    }
    const auto n = static_cast<double>(source.size());
    Eigen::Vector3d mu_s = Eigen::Vector3d::Zero(), mu_t = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < source.size(); ++i) {
        mu_s += source[i].translation;
        mu_t += target[i].translation;
    }
    mu_s /= n;
    mu_t /= n;
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t i = 0; i < source.size(); ++i) {
        cov += (source[i].translation - mu_s) * (target[i].translation - mu_t).transpose();
    }
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    const Eigen::Matrix3d rot = svd.matrixV() * d * svd.matrixU().transpose();
    return {rot, mu_t - rot * mu_s};
}

double ate(const Trajectory& predicted, const Trajectory& truth, bool align) {
    if (predicted.size() != truth.size()) {
        throw std::invalid_argument("ate: " + std::to_string(predicted.size()) + " predicted vs " +
                                    std::to_string(truth.size()) + " ground-truth poses");
    }
    if (predicted.size() < 2) throw std::invalid_argument("ate: need at least two poses");
    Pose correction;
    if (align) correction = align_rigid(predicted, truth);
    double sum = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const Eigen::Vector3d p = correction.rotation * predicted[i].translation + correction.translation;
        sum += (p - truth[i].translation).squaredNorm();
    }
    return std::sqrt(sum / static_cast<double>(predicted.size()));
}

}  // namespace kdreg::geo
