#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace gtm {

// Error taxonomy shared by every module. Each maps onto one failure class the
// CLI turns into an exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct UnsupportedError : Error {
  using Error::Error;
};

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix3X = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;
template <typename Scalar>
using Matrix4X = Eigen::Matrix<Scalar, 4, Eigen::Dynamic>;
template <typename Scalar>
using Vector2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Vector4 = Eigen::Matrix<Scalar, 4, 1>;
template <typename Scalar>
using Matrix2 = Eigen::Matrix<Scalar, 2, 2>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;

/// RGB image with channels stored as columns; pixel (x, y) lives in row
/// y * width + x. Values are nominally in [0, 1].
template <typename Scalar>
struct Image {
  using Pixels = Eigen::Array<Scalar, Eigen::Dynamic, 3>;

  int width = 0;
  int height = 0;
  Pixels pixels;

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(Pixels::Zero(Eigen::Index(w) * h, 3)) {}

  static Image filled(int w, int h, const Vector3<Scalar>& rgb) {
    Image img(w, h);
    for (int c = 0; c < 3; ++c) img.pixels.col(c).setConstant(rgb[c]);
    return img;
  }

  Eigen::Index size() const { return pixels.rows(); }
  bool same_shape(const Image& other) const { return width == other.width && height == other.height; }

  auto pixel(int x, int y) { return pixels.row(Eigen::Index(y) * width + x); }
  auto pixel(int x, int y) const { return pixels.row(Eigen::Index(y) * width + x); }

  /// Channel c as a row-major height x width view.
  auto channel(int c) const {
    return Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        pixels.col(c).data(), height, width);
  }

  template <typename Other>
  Image<Other> cast() const {
    Image<Other> out;
    out.width = width;
    out.height = height;
    out.pixels = pixels.template cast<Other>();
    return out;
  }
};

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

}  // namespace gtm
