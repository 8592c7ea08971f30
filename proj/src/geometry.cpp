#include "streamdet/geometry.hpp"

#include <cmath>
#include <stdexcept>

namespace streamdet {

namespace {
constexpr double kRigidTol = 1e-6;
}

Pose::Pose(const Eigen::Matrix4d& m) : m_(m) {
  const Eigen::Matrix3d r = m.block<3, 3>(0, 0);
  const double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity())
                           .cwiseAbs()
                           .maxCoeff();
  if (ortho > kRigidTol || std::abs(r.determinant() - 1.0) > kRigidTol ||
      m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0) {
    throw std::invalid_argument("Pose: matrix is not a rigid transform");
  }
}

Pose Pose::from_rt(const Eigen::Matrix3d& rot, const Eigen::Vector3d& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<3, 3>(0, 0) = rot;
  m.block<3, 1>(0, 3) = t;
  return Pose(m);
}

Pose Pose::translation(double x, double y, double z) {
  return from_rt(Eigen::Matrix3d::Identity(), Eigen::Vector3d(x, y, z));
}

Pose Pose::rotation_z(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Eigen::Matrix3d r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return from_rt(r, Eigen::Vector3d::Zero());
}

Pose Pose::rotation_x(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  Eigen::Matrix3d r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return from_rt(r, Eigen::Vector3d::Zero());
}

Pose Pose::inverse() const {
  const Eigen::Matrix3d rt = rotation().transpose();
  return from_rt(rt, -rt * translation_part());
}

std::array<double, 16> Pose::to_row_major() const {
  std::array<double, 16> out;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) out[r * 4 + c] = m_(r, c);
  return out;
}

Pose Pose::from_row_major(const std::array<double, 16>& v) {
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = v[r * 4 + c];
  return Pose(m);
}

Pose compose(const Pose& a, const Pose& b) {
  return Pose(a.matrix() * b.matrix());
}

Pose invert(const Pose& p) { return p.inverse(); }

Pose relative_pose(const Pose& t_cur, const Pose& t_last) {
  return compose(t_cur.inverse(), t_last);
}

Eigen::Matrix4d AugTransform::flip_matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  if (flip == FlipAxis::kX) m(1, 1) = -1.0;
  if (flip == FlipAxis::kY) m(0, 0) = -1.0;
  return m;
}

Eigen::Matrix4d AugTransform::rotation_matrix() const {
  return Pose::rotation_z(rotation_z).matrix();
}

Eigen::Matrix4d AugTransform::scale_matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m(0, 0) = m(1, 1) = m(2, 2) = scale;
  return m;
}

Eigen::Matrix4d AugTransform::translation_matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<3, 1>(0, 3) = translation;
  return m;
}

Eigen::Matrix4d AugTransform::combined() const {
  return translation_matrix() * scale_matrix() * rotation_matrix() *
         flip_matrix();
}

Eigen::Matrix4d AugTransform::combined_inverse() const {
  if (scale <= 0.0)
    throw std::invalid_argument("AugTransform: scale must be > 0");
  Eigen::Matrix4d rot_inv = Pose::rotation_z(-rotation_z).matrix();
  Eigen::Matrix4d scale_inv = Eigen::Matrix4d::Identity();
  scale_inv(0, 0) = scale_inv(1, 1) = scale_inv(2, 2) = 1.0 / scale;
  Eigen::Matrix4d trans_inv = Eigen::Matrix4d::Identity();
  trans_inv.block<3, 1>(0, 3) = -translation;
  return flip_matrix() * rot_inv * scale_inv * trans_inv;
}

bool AugTransform::is_identity() const {
  return flip == FlipAxis::kNone && rotation_z == 0.0 && scale == 1.0 &&
         translation.isZero(0.0);
}

Pose augmented_relative_pose(const Pose& t_cur, const Pose& t_last,
                             const AugTransform& aug) {
  // T_t*T_s*T_r*T_f * t_cur^-1 * t_last * T_f*T_r^-1*T_s^-1*T_t^-1. The right
  // factor keeps the flip uninverted; combined_inverse() already has that form
  // because the flip is an involution.
  const Eigen::Matrix4d m = aug.combined() * t_cur.inverse().matrix() *
                            t_last.matrix() * aug.combined_inverse();
  return Pose(m);
}

void transform_xyz(const Eigen::Matrix4d& m, double* xyz, size_t count,
                   size_t stride_doubles) {
  const Eigen::Matrix3d lin = m.block<3, 3>(0, 0);
  const Eigen::Vector3d t = m.block<3, 1>(0, 3);
  for (size_t i = 0; i < count; ++i) {
    double* p = xyz + i * stride_doubles;
    const Eigen::Vector3d v = lin * Eigen::Vector3d(p[0], p[1], p[2]) + t;
    p[0] = v.x();
    p[1] = v.y();
    p[2] = v.z();
  }
}

Eigen::Vector3d transform_point(const Eigen::Matrix4d& m,
                                const Eigen::Vector3d& p) {
  return m.block<3, 3>(0, 0) * p + m.block<3, 1>(0, 3);
}

Se2 Se2::inverse() const {
  Se2 out;
  out.rot = rot.inverse();
  out.t = -out.rot * t;
  return out;
}

Se2 se2_of(const Eigen::Matrix4d& m, double tol) {
  // The linear block must be a z-rotation times uniform scale: no coupling
  // between the plane and the z axis, equal diagonal / antisymmetric
  // off-diagonal in the 2x2 block.
  const double mag = std::max(1.0, m.block<3, 3>(0, 0).cwiseAbs().maxCoeff());
  const double out_of_plane =
      std::max({std::abs(m(0, 2)), std::abs(m(1, 2)), std::abs(m(2, 0)),
                std::abs(m(2, 1))});
  const double shape = std::max(std::abs(m(0, 0) - m(1, 1)),
                                std::abs(m(0, 1) + m(1, 0)));
  if (out_of_plane > tol * mag || shape > tol * mag) {
    throw std::invalid_argument(
        "se2_of: transform has out-of-plane or non-conformal component");
  }
  Se2 out;
  out.rot = m.block<2, 2>(0, 0);
  out.t = m.block<2, 1>(0, 3);
  return out;
}

Se2 se2_of(const Pose& p, double tol) { return se2_of(p.matrix(), tol); }

void GridSpec::validate() const {
  if (width < 1 || height < 1)
    throw std::invalid_argument("GridSpec: width and height must be >= 1");
  if (!(cell_size > 0.0))
    throw std::invalid_argument("GridSpec: cell_size must be > 0");
  if (channels < 1)
    throw std::invalid_argument("GridSpec: channels must be >= 1");
}

bool GridSpec::same_geometry(const GridSpec& o) const {
  return x_min == o.x_min && y_min == o.y_min && cell_size == o.cell_size &&
         width == o.width && height == o.height;
}

}  // namespace streamdet
