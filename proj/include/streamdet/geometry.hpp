#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>

namespace streamdet {

/// Rigid ego transform, 4x4 homogeneous, translation in meters. The rotation
/// block is validated to be orthonormal with determinant +1 on construction.
class Pose {
 public:
  Pose() : m_(Eigen::Matrix4d::Identity()) {}
  explicit Pose(const Eigen::Matrix4d& m);

  static Pose from_rt(const Eigen::Matrix3d& rot, const Eigen::Vector3d& t);
  static Pose translation(double x, double y, double z);
  static Pose rotation_z(double yaw);
  static Pose rotation_x(double angle);

  const Eigen::Matrix4d& matrix() const { return m_; }
  Eigen::Matrix3d rotation() const { return m_.block<3, 3>(0, 0); }
  Eigen::Vector3d translation_part() const { return m_.block<3, 1>(0, 3); }
  double yaw() const { return std::atan2(m_(1, 0), m_(0, 0)); }

  Pose inverse() const;

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return rotation() * p + translation_part();
  }

  /// Row-major little-endian f64 layout used by the frame file format.
  std::array<double, 16> to_row_major() const;
  static Pose from_row_major(const std::array<double, 16>& v);

  bool is_approx(const Pose& o, double tol = 1e-9) const {
    return (m_ - o.m_).cwiseAbs().maxCoeff() <= tol;
  }

 private:
  Eigen::Matrix4d m_;
};

Pose compose(const Pose& a, const Pose& b);
Pose invert(const Pose& p);

/// Relative pose mapping last-frame coordinates into the current frame:
/// inverse(t_cur) * t_last.
Pose relative_pose(const Pose& t_cur, const Pose& t_last);

enum class FlipAxis : uint8_t { kNone = 0, kX = 1, kY = 2 };

/// Frame augmentation: flip, z-rotation, uniform scale and translation, kept
/// both as parameters and as 4x4 factor matrices. Scale makes the combined
/// matrix a similarity rather than a rigid transform; it only ever appears in
/// the conjugated relative pose and in point transforms.
struct AugTransform {
  FlipAxis flip = FlipAxis::kNone;
  double rotation_z = 0.0;  // radians
  double scale = 1.0;       // > 0, uniform
  Eigen::Vector3d translation{0.0, 0.0, 0.0};

  // Flip convention: kX negates y, kY negates x.
  Eigen::Matrix4d flip_matrix() const;
  Eigen::Matrix4d rotation_matrix() const;
  Eigen::Matrix4d scale_matrix() const;
  Eigen::Matrix4d translation_matrix() const;

  /// T_t * T_s * T_r * T_f (applied to points right to left).
  Eigen::Matrix4d combined() const;
  Eigen::Matrix4d combined_inverse() const;

  bool is_identity() const;
  static AugTransform identity() { return {}; }
};

/// Relative pose of an augmented stream: the plain relative pose conjugated by
/// the augmentation, T_t*T_s*T_r*T_f * t_cur^-1 * t_last * T_f*T_r^-1*T_s^-1*T_t^-1.
/// The flip factor is its own inverse, so it appears uninverted on both sides.
/// The scale cancels under conjugation, so the result is again rigid.
Pose augmented_relative_pose(const Pose& t_cur, const Pose& t_last,
                             const AugTransform& aug);

/// In-place homogeneous transform of xyz triples laid out with a fixed stride.
/// Non-spatial fields between triples are left untouched.
void transform_xyz(const Eigen::Matrix4d& m, double* xyz, size_t count,
                   size_t stride_doubles);

Eigen::Vector3d transform_point(const Eigen::Matrix4d& m,
                                const Eigen::Vector3d& p);

/// Ground-plane action of a transform: 2x2 linear block plus xy translation.
struct Se2 {
  Eigen::Matrix2d rot;
  Eigen::Vector2d t;

  Se2 inverse() const;
  Eigen::Vector2d apply(const Eigen::Vector2d& p) const { return rot * p + t; }
};

/// Extracts the SE(2) (optionally uniformly scaled) action of a 4x4 transform.
/// Throws std::invalid_argument if the transform has out-of-plane rotation
/// beyond tolerance; that signals an unsupported augmentation or pose.
Se2 se2_of(const Eigen::Matrix4d& m, double tol = 1e-6);
Se2 se2_of(const Pose& p, double tol = 1e-6);

/// BEV grid geometry. Cell (ix, iy) covers
/// [x_min + ix*cell, x_min + (ix+1)*cell) x [y_min + iy*cell, ...).
struct GridSpec {
  double x_min = 0.0;   // meters
  double y_min = 0.0;   // meters
  double cell_size = 1.0;  // meters per cell
  int width = 1;     // cells along x
  int height = 1;    // cells along y
  int channels = 1;

  void validate() const;

  double cell_center_x(int ix) const { return x_min + (ix + 0.5) * cell_size; }
  double cell_center_y(int iy) const { return y_min + (iy + 0.5) * cell_size; }

  bool same_geometry(const GridSpec& o) const;
  bool operator==(const GridSpec& o) const {
    return same_geometry(o) && channels == o.channels;
  }
};

}  // namespace streamdet
