#pragma once

#include "gtm/common.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace gtm {

struct LossWeights {
  double lambda_ssim = 0.2;
  double lambda_vol = 0.01;
};

template <typename Scalar>
struct LossReport {
  double total = 0, l1 = 0, ssim_term = 0, vol = 0;
  Image<Scalar> image_grad;
  Matrix3X<Scalar> scale_grad;
};

template <typename Scalar>
struct ValueAndImageGrad {
  double value = 0;
  Image<Scalar> grad;
};

inline void require_same_shape(int w0, int h0, int w1, int h1, const char* what) {
  if (w0 != w1 || h0 != h1) throw ShapeError(std::string(what) + ": image shapes differ");
}

/// Mean absolute difference over all pixels and channels.
template <typename Scalar>
ValueAndImageGrad<Scalar> l1_loss(const Image<Scalar>& pred, const Image<Scalar>& gt) {
  require_same_shape(pred.width, pred.height, gt.width, gt.height, "l1_loss");
  const auto diff = pred.pixels - gt.pixels;
  const double count = double(diff.size());
  ValueAndImageGrad<Scalar> r;
  r.value = double(diff.abs().template cast<double>().sum()) / count;
  r.grad = Image<Scalar>(pred.width, pred.height);
  r.grad.pixels = diff.sign() * Scalar(1.0 / count);
  return r;
}

namespace ssim_detail {

inline constexpr int kWindow = 11;
inline constexpr int kRadius = kWindow / 2;
inline constexpr double kSigma = 1.5;
inline constexpr double kC1 = 0.01 * 0.01;
inline constexpr double kC2 = 0.03 * 0.03;

template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
std::array<Scalar, kWindow> window() {
  std::array<double, kWindow> w{};
  double sum = 0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kRadius;
    w[size_t(i)] = std::exp(-d * d / (2 * kSigma * kSigma));
    sum += w[size_t(i)];
  }
  std::array<Scalar, kWindow> out{};
  for (int i = 0; i < kWindow; ++i) out[size_t(i)] = Scalar(w[size_t(i)] / sum);
  return out;
}

/// Reflection without repeating the edge sample: -1 -> 1, n -> n - 2.
inline int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

/// Separable Gaussian blur with reflection padding.
template <typename Scalar>
Plane<Scalar> blur(const Plane<Scalar>& x) {
  const auto w = window<Scalar>();
  const int h = int(x.rows()), wd = int(x.cols());
  Plane<Scalar> tmp(h, wd), out(h, wd);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < wd; ++c) {
      Scalar s = 0;
      for (int u = 0; u < kWindow; ++u) s += w[size_t(u)] * x(r, reflect(c + u - kRadius, wd));
      tmp(r, c) = s;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < wd; ++c) {
      Scalar s = 0;
      for (int u = 0; u < kWindow; ++u) s += w[size_t(u)] * tmp(reflect(r + u - kRadius, h), c);
      out(r, c) = s;
    }
  return out;
}

/// Adjoint of blur.
template <typename Scalar>
Plane<Scalar> blur_transpose(const Plane<Scalar>& g) {
  const auto w = window<Scalar>();
  const int h = int(g.rows()), wd = int(g.cols());
  Plane<Scalar> tmp = Plane<Scalar>::Zero(h, wd), out = Plane<Scalar>::Zero(h, wd);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < wd; ++c)
      for (int u = 0; u < kWindow; ++u) tmp(reflect(r + u - kRadius, h), c) += w[size_t(u)] * g(r, c);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < wd; ++c)
      for (int u = 0; u < kWindow; ++u) out(r, reflect(c + u - kRadius, wd)) += w[size_t(u)] * tmp(r, c);
  return out;
}

}  // namespace ssim_detail

/// Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5),
/// with its gradient w.r.t. `pred`.
template <typename Scalar>
ValueAndImageGrad<Scalar> ssim(const Image<Scalar>& pred, const Image<Scalar>& gt, bool with_grad = true) {
  using namespace ssim_detail;
  using P = Plane<Scalar>;
  require_same_shape(pred.width, pred.height, gt.width, gt.height, "ssim");
  if (pred.width < kWindow || pred.height < kWindow) throw ShapeError("ssim: image smaller than the 11x11 window");
  const Scalar c1 = Scalar(kC1), c2 = Scalar(kC2);
  const double count = double(pred.width) * pred.height;
  ValueAndImageGrad<Scalar> r;
  if (with_grad) r.grad = Image<Scalar>(pred.width, pred.height);
  double total = 0;
  for (int ch = 0; ch < 3; ++ch) {
    const P x = pred.channel(ch);
    const P y = gt.channel(ch);
    const P mx = blur<Scalar>(x), my = blur<Scalar>(y);
    const P sxx = blur<Scalar>(P(x * x)) - mx * mx;
    const P syy = blur<Scalar>(P(y * y)) - my * my;
    const P sxy = blur<Scalar>(P(x * y)) - mx * my;
    const P a1 = 2 * mx * my + c1, a2 = 2 * sxy + c2;
    const P b1 = mx * mx + my * my + c1, b2 = sxx + syy + c2;
    const P s = (a1 * a2) / (b1 * b2);
    total += double(s.template cast<double>().sum()) / count;
    if (!with_grad) continue;
    const Scalar inv = Scalar(1.0 / (3.0 * count));
    const P d_mu = (2 * my * a2 / (b1 * b2) - s * 2 * mx / b1) * inv;
    const P d_sxx = (-s / b2) * inv;
    const P d_sxy = (2 * a1 / (b1 * b2)) * inv;
    const P g = blur_transpose<Scalar>(d_mu) + 2 * x * blur_transpose<Scalar>(d_sxx) -
                2 * blur_transpose<Scalar>(P(d_sxx * mx)) + y * blur_transpose<Scalar>(d_sxy) -
                blur_transpose<Scalar>(P(d_sxy * my));
    r.grad.pixels.col(ch) = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(g.data(), g.size());
  }
  r.value = total / 3.0;
  return r;
}

/// Sum over Gaussians of the product of their three scales.
template <typename Scalar>
std::pair<double, Matrix3X<Scalar>> volume_regularizer(const Matrix3X<Scalar>& scales) {
  Matrix3X<Scalar> grad(3, scales.cols());
  double value = 0;
  for (Eigen::Index i = 0; i < scales.cols(); ++i) {
    const Scalar sx = scales(0, i), sy = scales(1, i), sz = scales(2, i);
    value += double(sx * sy * sz);
    grad.col(i) << sy * sz, sx * sz, sx * sy;
  }
  return {value, grad};
}

/// L1 + lambda_ssim (1 - SSIM) + lambda_vol L_vol, with gradients combined linearly.
template <typename Scalar>
LossReport<Scalar> total_loss(const Image<Scalar>& pred, const Image<Scalar>& gt, const Matrix3X<Scalar>& scales,
                              const LossWeights& weights) {
  if (!(weights.lambda_ssim >= 0) || !(weights.lambda_vol >= 0))
    throw ConfigError("total_loss: weights must be non-negative");
  LossReport<Scalar> rep;
  auto l1 = l1_loss(pred, gt);
  rep.l1 = l1.value;
  rep.image_grad = std::move(l1.grad);
  if (weights.lambda_ssim > 0) {
    auto s = ssim(pred, gt);
    rep.ssim_term = 1.0 - s.value;
    rep.image_grad.pixels -= Scalar(weights.lambda_ssim) * s.grad.pixels;
  } else {
    rep.ssim_term = 1.0 - ssim(pred, gt, false).value;
  }
  auto [vol, vol_grad] = volume_regularizer(scales);
  rep.vol = vol;
  rep.scale_grad = Scalar(weights.lambda_vol) * vol_grad;
  rep.total = rep.l1 + weights.lambda_ssim * rep.ssim_term + weights.lambda_vol * rep.vol;
  return rep;
}

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE), capped at 100 dB for identical images.
template <typename Scalar>
double psnr(const Image<Scalar>& pred, const Image<Scalar>& gt) {
  require_same_shape(pred.width, pred.height, gt.width, gt.height, "psnr");
  const double mse = (pred.pixels - gt.pixels).template cast<double>().square().mean();
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

}  // namespace gtm
