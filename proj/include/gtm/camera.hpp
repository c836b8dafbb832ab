#pragma once

#include "gtm/common.hpp"

#include <Eigen/Geometry>

namespace gtm {

/// Pinhole camera with a world-to-camera rigid transform: p_cam = R p + t.
/// Pixel centers sit at half-integer coordinates (COLMAP convention).
template <typename Scalar>
struct Camera {
  Scalar fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;
  Matrix3<Scalar> rotation = Matrix3<Scalar>::Identity();
  Vector3<Scalar> translation = Vector3<Scalar>::Zero();

  Vector3<Scalar> center() const { return -rotation.transpose() * translation; }
  Vector3<Scalar> to_camera(const Vector3<Scalar>& p) const { return rotation * p + translation; }

  /// Throws ConfigError unless R is a proper rotation and focal lengths are positive.
  void validate(double tol = 1e-6) const {
    if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ConfigError("camera: image size must be positive");
    const Matrix3<double> r = rotation.template cast<double>();
    if (((r.transpose() * r) - Matrix3<double>::Identity()).cwiseAbs().maxCoeff() > tol)
      throw ConfigError("camera: rotation is not orthonormal");
    if (std::abs(r.determinant() - 1.0) > tol) throw ConfigError("camera: rotation determinant is not +1");
  }

  template <typename Other>
  Camera<Other> cast() const {
    Camera<Other> c;
    c.fx = Other(fx);
    c.fy = Other(fy);
    c.cx = Other(cx);
    c.cy = Other(cy);
    c.width = width;
    c.height = height;
    c.rotation = rotation.template cast<Other>();
    c.translation = translation.template cast<Other>();
    return c;
  }

  /// Camera at `eye` looking at `target`, with image y pointing along -up.
  static Camera look_at(const Vector3<Scalar>& eye, const Vector3<Scalar>& target, const Vector3<Scalar>& up,
                        Scalar focal, int w, int h) {
    const Vector3<Scalar> z = (target - eye).normalized();
    const Vector3<Scalar> x = z.cross(up).normalized();
    const Vector3<Scalar> y = z.cross(x);
    Camera c;
    c.rotation.row(0) = x.transpose();
    c.rotation.row(1) = y.transpose();
    c.rotation.row(2) = z.transpose();
    c.translation = -c.rotation * eye;
    c.fx = c.fy = focal;
    c.cx = Scalar(w) / 2;
    c.cy = Scalar(h) / 2;
    c.width = w;
    c.height = h;
    return c;
  }
};

/// Rotation matrix of a quaternion (w, x, y, z); the quaternion is normalized
/// first. Throws NumericalError on a zero-norm input.
template <typename Scalar>
Matrix3<Scalar> quaternion_to_rotation(const Vector4<Scalar>& q_in) {
  const Scalar n = q_in.norm();
  if (!(n > Scalar(0)) || !std::isfinite(double(n))) throw NumericalError("quaternion has zero or non-finite norm");
  const Vector4<Scalar> q = q_in / n;
  const Scalar w = q[0], x = q[1], y = q[2], z = q[3];
  Matrix3<Scalar> r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),    //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

/// Quaternion (w, x, y, z) of a rotation matrix.
template <typename Scalar>
Vector4<Scalar> rotation_to_quaternion(const Matrix3<Scalar>& r) {
  Eigen::Quaternion<Scalar> q(r);
  q.normalize();
  return {q.w(), q.x(), q.y(), q.z()};
}

}  // namespace gtm
