#pragma once

#include "gtm/camera.hpp"
#include "gtm/common.hpp"
#include "gtm/model.hpp"

#include <algorithm>
#include <vector>

namespace gtm {

struct RenderSettings {
  int tile_size = 16;
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  /// Alpha skip below 1/255 and early stop below T = 1e-4. Disabled for
  /// gradient checks so finite differences are well posed.
  bool thresholds = true;
  double near_clip = 0.01;
  int threads = 1;
};

inline constexpr double kAlphaSkip = 1.0 / 255.0;
inline constexpr double kEarlyStopTransmittance = 1e-4;
inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kCovarianceDilation = 0.3;
inline constexpr double kSingularDeterminant = 1e-12;

/// A Gaussian projected to screen space.
template <typename Scalar>
struct Splat2D {
  Vector2<Scalar> mean2d;
  Vector3<Scalar> cov2d;  // (xx, xy, yy), dilated
  Vector3<Scalar> conic;  // inverse of cov2d, same layout
  Scalar depth = 0;
  Scalar alpha_base = 0;
  Vector3<Scalar> color;
  int source_index = 0;
  int radius = 0;
  // cached for project_backward
  Vector3<Scalar> p_cam;
  Matrix3<Scalar> cov_cam;  // W Sigma W^T
};

template <typename Scalar>
struct Projection {
  std::vector<Splat2D<Scalar>> splats;
  int culled_depth = 0;
  int culled_opacity = 0;
  int singular = 0;
};

template <typename Scalar>
struct RenderOutput {
  Image<Scalar> image;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> transmittance;  // row y * width + x
  // Retained forward state.
  std::vector<Splat2D<Scalar>> splats;
  std::vector<std::vector<int>> tiles;  // depth-sorted splat indices per tile
  std::vector<int> contributors;        // per pixel: processed prefix length of its tile list
  int tiles_x = 0, tiles_y = 0;
  RenderSettings settings;
  bool has_state = false;
};

/// Per-splat gradients of a composite.
template <typename Scalar>
struct SplatGradients {
  Matrix3X<Scalar> color;
  VectorX<Scalar> alpha_base;
  Eigen::Matrix<Scalar, 2, Eigen::Dynamic> mean2d;
  Matrix3X<Scalar> cov2d;  // w.r.t. (xx, xy, yy); xy perturbs both off-diagonals

  static SplatGradients zeros(Eigen::Index n) {
    return {Matrix3X<Scalar>::Zero(3, n), VectorX<Scalar>::Zero(n), Eigen::Matrix<Scalar, 2, Eigen::Dynamic>::Zero(2, n),
            Matrix3X<Scalar>::Zero(3, n)};
  }
};

/// Pinhole Jacobian of (u, v) w.r.t. the camera-space point.
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 3> projection_jacobian(const Vector3<Scalar>& p, Scalar fx, Scalar fy) {
  const Scalar iz = Scalar(1) / p.z();
  Eigen::Matrix<Scalar, 2, 3> j;
  j << fx * iz, 0, -fx * p.x() * iz * iz, 0, fy * iz, -fy * p.y() * iz * iz;
  return j;
}

/// Alpha below which a splat is treated as absent when binning it to tiles.
/// With thresholds on this equals the alpha skip, so the tile footprint never
/// drops a pixel the compositor would have used.
inline double footprint_cutoff(const RenderSettings& s) { return s.thresholds ? kAlphaSkip : 1e-10; }

/// Projects one Gaussian. Returns false if culled by the near plane, the
/// opacity gate (activation <= 0) or a singular 2D covariance.
template <typename Scalar>
bool project_gaussian(const Vector3<Scalar>& mean, const Vector3<Scalar>& scale, const Vector4<Scalar>& rotation,
                      Scalar opacity, const Camera<Scalar>& camera, const RenderSettings& settings,
                      Splat2D<Scalar>& s, Projection<Scalar>* stats = nullptr) {
  const Scalar near_clip = Scalar(settings.near_clip);
  if (!(opacity > Scalar(0))) {
    if (stats) ++stats->culled_opacity;
    return false;
  }
  s.p_cam = camera.to_camera(mean);
  if (!(s.p_cam.z() > near_clip)) {
    if (stats) ++stats->culled_depth;
    return false;
  }
  const Matrix3<Scalar> sigma = build_covariance(scale, rotation);
  s.cov_cam = camera.rotation * sigma * camera.rotation.transpose();
  const auto j = projection_jacobian(s.p_cam, camera.fx, camera.fy);
  const Matrix2<Scalar> c2 = j * s.cov_cam * j.transpose();
  s.cov2d = {c2(0, 0) + Scalar(kCovarianceDilation), Scalar(0.5) * (c2(0, 1) + c2(1, 0)),
             c2(1, 1) + Scalar(kCovarianceDilation)};
  const Scalar det = s.cov2d[0] * s.cov2d[2] - s.cov2d[1] * s.cov2d[1];
  if (!(det >= Scalar(kSingularDeterminant))) {
    if (stats) ++stats->singular;
    return false;
  }
  s.conic = Vector3<Scalar>(s.cov2d[2], -s.cov2d[1], s.cov2d[0]) / det;
  s.mean2d = {camera.fx * s.p_cam.x() / s.p_cam.z() + camera.cx, camera.fy * s.p_cam.y() / s.p_cam.z() + camera.cy};
  s.depth = s.p_cam.z();
  s.alpha_base = std::min(opacity, Scalar(kMaxAlpha));
  const Scalar mid = Scalar(0.5) * (s.cov2d[0] + s.cov2d[2]);
  const Scalar lambda_max = mid + std::sqrt(std::max(Scalar(0), mid * mid - det));
  // alpha_base exp(-r^2 / (2 lambda_max)) reaches the cutoff at r
  const double ratio = double(s.alpha_base) / footprint_cutoff(settings);
  s.radius = ratio > 1 ? int(std::ceil(std::sqrt(2 * std::log(ratio) * double(lambda_max)))) : 0;
  return true;
}

/// Screen-space splats for every Gaussian that passes the visibility gate.
template <typename Scalar>
Projection<Scalar> project(const NeuralGaussianBatch<Scalar>& batch, const Camera<Scalar>& camera,
                           const RenderSettings& settings = {}) {
  Projection<Scalar> out;
  out.splats.reserve(size_t(batch.size()));
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    Splat2D<Scalar> s;
    if (!project_gaussian<Scalar>(batch.means.col(i), batch.scales.col(i), batch.rotations.col(i),
                                  batch.opacities[i], camera, settings, s, &out))
      continue;
    s.color = batch.colors.col(i);
    s.source_index = int(i);
    out.splats.push_back(s);
  }
  return out;
}

namespace detail {

template <typename Scalar>
Scalar splat_power(const Splat2D<Scalar>& s, Scalar dx, Scalar dy) {
  return Scalar(-0.5) * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
}

template <typename Scalar>
void bin_splats(RenderOutput<Scalar>& out, int width, int height) {
  const int ts = out.settings.tile_size;
  out.tiles_x = (width + ts - 1) / ts;
  out.tiles_y = (height + ts - 1) / ts;
  out.tiles.assign(size_t(out.tiles_x * out.tiles_y), {});
  for (size_t i = 0; i < out.splats.size(); ++i) {
    const auto& s = out.splats[i];
    const double mx = double(s.mean2d.x()), my = double(s.mean2d.y());
    // pixel centers are at +0.5
    const int x0 = std::max(0, int(std::floor((mx - s.radius - 0.5) / ts)));
    const int x1 = std::min(out.tiles_x - 1, int(std::floor((mx + s.radius - 0.5) / ts)));
    const int y0 = std::max(0, int(std::floor((my - s.radius - 0.5) / ts)));
    const int y1 = std::min(out.tiles_y - 1, int(std::floor((my + s.radius - 0.5) / ts)));
    for (int ty = y0; ty <= y1; ++ty)
      for (int tx = x0; tx <= x1; ++tx) out.tiles[size_t(ty * out.tiles_x + tx)].push_back(int(i));
  }
  const auto& splats = out.splats;
  for (auto& list : out.tiles)
    std::sort(list.begin(), list.end(), [&](int a, int b) {
      const auto& sa = splats[size_t(a)];
      const auto& sb = splats[size_t(b)];
      if (sa.depth != sb.depth) return sa.depth < sb.depth;
      return sa.source_index < sb.source_index;
    });
}

}  // namespace detail

/// Front-to-back alpha compositing over 16x16 (by default) tiles.
template <typename Scalar>
RenderOutput<Scalar> composite_forward(std::vector<Splat2D<Scalar>> splats, int width, int height,
                                       const RenderSettings& settings = {}) {
  RenderOutput<Scalar> out;
  out.settings = settings;
  out.splats = std::move(splats);
  out.image = Image<Scalar>(width, height);
  out.transmittance.resize(Eigen::Index(width) * height);
  out.contributors.assign(size_t(width * height), 0);
  detail::bin_splats(out, width, height);

  const int ts = settings.tile_size;
  const Vector3<Scalar> bg = settings.background.template cast<Scalar>();
  const bool gate = settings.thresholds;
  const int num_tiles = out.tiles_x * out.tiles_y;
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, settings.threads))
  for (int tile = 0; tile < num_tiles; ++tile) {
    const auto& list = out.tiles[size_t(tile)];
    const int tx = tile % out.tiles_x, ty = tile / out.tiles_x;
    for (int y = ty * ts; y < std::min(height, (ty + 1) * ts); ++y) {
      for (int x = tx * ts; x < std::min(width, (tx + 1) * ts); ++x) {
        const Scalar px = Scalar(x) + Scalar(0.5), py = Scalar(y) + Scalar(0.5);
        Scalar t = 1;
        Vector3<Scalar> c = Vector3<Scalar>::Zero();
        int processed = 0;
        for (size_t n = 0; n < list.size(); ++n) {
          const auto& s = out.splats[size_t(list[n])];
          const Scalar alpha = s.alpha_base * std::exp(detail::splat_power(s, px - s.mean2d.x(), py - s.mean2d.y()));
          processed = int(n) + 1;
          if (gate && alpha < Scalar(kAlphaSkip)) continue;
          c += (t * alpha) * s.color;
          t *= Scalar(1) - alpha;
          if (gate && t < Scalar(kEarlyStopTransmittance)) break;
        }
        const Eigen::Index p = Eigen::Index(y) * width + x;
        out.image.pixels.row(p) = (c + t * bg).transpose().array();
        out.transmittance[p] = t;
        out.contributors[size_t(p)] = processed;
      }
    }
  }
  out.has_state = true;
  return out;
}

/// Exact reverse of composite_forward, with the alpha-skip and early-stop
/// decisions of the forward pass held fixed. Per-tile partial sums are merged
/// in tile order, so the result does not depend on the thread count.
template <typename Scalar>
SplatGradients<Scalar> composite_backward(const RenderOutput<Scalar>& out, const Image<Scalar>& image_grad) {
  if (!out.has_state) throw StateError("composite_backward: render output carries no forward state");
  if (!image_grad.same_shape(out.image)) throw ShapeError("composite_backward: gradient image shape mismatch");
  const int width = out.image.width, height = out.image.height;
  const int ts = out.settings.tile_size;
  const bool gate = out.settings.thresholds;
  const Vector3<Scalar> bg = out.settings.background.template cast<Scalar>();
  const int num_tiles = out.tiles_x * out.tiles_y;

  // per tile, per list entry: color(3), alpha_base, mean2d(2), cov2d(3)
  std::vector<Eigen::Matrix<Scalar, 9, Eigen::Dynamic>> partial(static_cast<size_t>(num_tiles));
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, out.settings.threads))
  for (int tile = 0; tile < num_tiles; ++tile) {
    const auto& list = out.tiles[size_t(tile)];
    auto& acc = partial[size_t(tile)];
    acc.setZero(9, Eigen::Index(list.size()));
    if (list.empty()) continue;
    std::vector<Scalar> alphas, trans;
    std::vector<int> entries;
    const int tx = tile % out.tiles_x, ty = tile / out.tiles_x;
    for (int y = ty * ts; y < std::min(height, (ty + 1) * ts); ++y) {
      for (int x = tx * ts; x < std::min(width, (tx + 1) * ts); ++x) {
        const Eigen::Index p = Eigen::Index(y) * width + x;
        const Vector3<Scalar> g = image_grad.pixels.row(p).transpose().matrix();
        if (g.isZero(0)) continue;
        const Scalar px = Scalar(x) + Scalar(0.5), py = Scalar(y) + Scalar(0.5);
        // replay the forward pass to recover T_i for each contributor
        alphas.clear();
        trans.clear();
        entries.clear();
        Scalar t = 1;
        const int processed = out.contributors[size_t(p)];
        for (int n = 0; n < processed; ++n) {
          const auto& s = out.splats[size_t(list[size_t(n)])];
          const Scalar alpha = s.alpha_base * std::exp(detail::splat_power(s, px - s.mean2d.x(), py - s.mean2d.y()));
          if (gate && alpha < Scalar(kAlphaSkip)) continue;
          entries.push_back(n);
          alphas.push_back(alpha);
          trans.push_back(t);
          t *= Scalar(1) - alpha;
        }
        Vector3<Scalar> behind = bg;  // color behind entry i, normalized by T_{i+1}
        for (size_t e = entries.size(); e-- > 0;) {
          const int n = entries[e];
          const auto& s = out.splats[size_t(list[size_t(n)])];
          const Scalar alpha = alphas[e];
          const Scalar ti = trans[e];
          acc.col(n).template head<3>() += (ti * alpha) * g;
          const Scalar d_alpha = ti * (s.color - behind).dot(g);
          behind = alpha * s.color + (Scalar(1) - alpha) * behind;

          const Scalar dx = px - s.mean2d.x(), dy = py - s.mean2d.y();
          const Scalar falloff = alpha / s.alpha_base;
          acc(3, n) += d_alpha * falloff;
          const Scalar d_power = d_alpha * alpha;
          acc(4, n) += d_power * (s.conic[0] * dx + s.conic[1] * dy);
          acc(5, n) += d_power * (s.conic[1] * dx + s.conic[2] * dy);
          // conic gradient, xy counted once as it appears as 2*B*dx*dy
          const Scalar ga = Scalar(-0.5) * d_power * dx * dx;
          const Scalar gb = -d_power * dx * dy;
          const Scalar gc = Scalar(-0.5) * d_power * dy * dy;
          const Scalar a = s.cov2d[0], b = s.cov2d[1], c = s.cov2d[2];
          const Scalar det = a * c - b * b;
          const Scalar id2 = Scalar(1) / (det * det);
          acc(6, n) += id2 * (-c * c * ga + b * c * gb - b * b * gc);
          acc(7, n) += id2 * (2 * b * c * ga - (a * c + b * b) * gb + 2 * a * b * gc);
          acc(8, n) += id2 * (-b * b * ga + a * b * gb - a * a * gc);
        }
      }
    }
  }

  auto grads = SplatGradients<Scalar>::zeros(Eigen::Index(out.splats.size()));
  for (int tile = 0; tile < num_tiles; ++tile) {
    const auto& list = out.tiles[size_t(tile)];
    const auto& acc = partial[size_t(tile)];
    for (size_t n = 0; n < list.size(); ++n) {
      const int i = list[n];
      grads.color.col(i) += acc.col(Eigen::Index(n)).template head<3>();
      grads.alpha_base[i] += acc(3, Eigen::Index(n));
      grads.mean2d.col(i) += acc.col(Eigen::Index(n)).template segment<2>(4);
      grads.cov2d.col(i) += acc.col(Eigen::Index(n)).template segment<3>(6);
    }
  }
  return grads;
}

/// Chains screen-space gradients back to the Gaussians' world-space
/// attributes. Gaussians that were culled receive zero gradient.
template <typename Scalar>
GaussianGradients<Scalar> project_backward(const std::vector<Splat2D<Scalar>>& splats,
                                           const SplatGradients<Scalar>& sg, const NeuralGaussianBatch<Scalar>& batch,
                                           const Camera<Scalar>& camera) {
  auto out = GaussianGradients<Scalar>::zeros(batch.size());
  const Matrix3<Scalar>& w = camera.rotation;
  for (size_t i = 0; i < splats.size(); ++i) {
    const auto& s = splats[i];
    const int g = s.source_index;
    out.colors.col(g) += sg.color.col(Eigen::Index(i));
    if (batch.opacities[g] < Scalar(kMaxAlpha)) out.opacities[g] += sg.alpha_base[Eigen::Index(i)];

    const Scalar fx = camera.fx, fy = camera.fy;
    const Scalar x = s.p_cam.x(), y = s.p_cam.y(), z = s.p_cam.z();
    const Scalar iz = Scalar(1) / z, iz2 = iz * iz, iz3 = iz2 * iz;
    Vector3<Scalar> d_p = Vector3<Scalar>::Zero();
    const Scalar du = sg.mean2d(0, Eigen::Index(i)), dv = sg.mean2d(1, Eigen::Index(i));
    d_p.x() += du * fx * iz;
    d_p.y() += dv * fy * iz;
    d_p.z() += -du * fx * x * iz2 - dv * fy * y * iz2;

    const Vector3<Scalar> dc = sg.cov2d.col(Eigen::Index(i));
    Matrix2<Scalar> g2;
    g2 << dc[0], Scalar(0.5) * dc[1], Scalar(0.5) * dc[1], dc[2];
    const auto j = projection_jacobian(s.p_cam, fx, fy);
    const Matrix3<Scalar> d_cov_cam = j.transpose() * g2 * j;
    const Eigen::Matrix<Scalar, 2, 3> d_j = Scalar(2) * g2 * j * s.cov_cam;
    d_p.x() += d_j(0, 2) * (-fx * iz2);
    d_p.y() += d_j(1, 2) * (-fy * iz2);
    d_p.z() += d_j(0, 0) * (-fx * iz2) + d_j(0, 2) * (2 * fx * x * iz3) + d_j(1, 1) * (-fy * iz2) +
               d_j(1, 2) * (2 * fy * y * iz3);
    out.means.col(g) += w.transpose() * d_p;

    const Matrix3<Scalar> d_sigma = w.transpose() * d_cov_cam * w;
    Vector3<Scalar> d_scale;
    Vector4<Scalar> d_rot;
    build_covariance_backward<Scalar>(batch.scales.col(g), batch.rotations.col(g), d_sigma, d_scale, d_rot);
    out.scales.col(g) += d_scale;
    out.rotations.col(g) += d_rot;
  }
  return out;
}

/// Decode, project and composite in one call. Keeps every intermediate for
/// the backward pass.
template <typename Scalar>
struct Rendered {
  NeuralGaussianBatch<Scalar> batch;
  RenderOutput<Scalar> output;
  int culled_opacity = 0;
};

template <typename Scalar>
Rendered<Scalar> render(const SceneModel<Scalar>& model, const Camera<Scalar>& camera, const TimeInput<Scalar>& time,
                        RenderSettings settings = {}) {
  settings.near_clip = model.config.near_clip;
  Rendered<Scalar> r;
  r.batch = decode_neural_gaussians(model, camera, time);
  auto proj = project(r.batch, camera, settings);
  r.culled_opacity = proj.culled_opacity;
  r.output = composite_forward(std::move(proj.splats), camera.width, camera.height, settings);
  return r;
}

}  // namespace gtm
