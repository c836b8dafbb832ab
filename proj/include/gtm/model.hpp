#pragma once

#include "gtm/camera.hpp"
#include "gtm/common.hpp"
#include "gtm/mlp.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

namespace gtm {

enum class TimeEncoder { Embedding, Positional };

inline std::string to_string(TimeEncoder e) { return e == TimeEncoder::Embedding ? "embedding" : "pe"; }
inline TimeEncoder parse_time_encoder(const std::string& s) {
  if (s == "embedding") return TimeEncoder::Embedding;
  if (s == "pe" || s == "positional") return TimeEncoder::Positional;
  throw ConfigError("unknown time encoder '" + s + "' (expected embedding or pe)");
}

/// Architecture and geometry constants of a scene model.
struct ModelConfig {
  int feature_dim = 32;
  int offsets_per_anchor = 10;
  int embedding_dim = 16;
  int pe_frequencies = 8;
  int hidden_width = 32;
  int hidden_layers = 2;
  TimeEncoder encoder = TimeEncoder::Embedding;
  double scene_extent = 1.0;
  double near_clip = 0.01;
  double cull_margin = 1.2;

  int time_input_dim() const { return encoder == TimeEncoder::Embedding ? embedding_dim : 2 * pe_frequencies; }
  int base_input_dim() const { return feature_dim + 4; }
  int time_head_input_dim() const { return base_input_dim() + time_input_dim(); }

  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct AnchorSet {
  Matrix3X<Scalar> centers;       // 3 x N
  MatrixX<Scalar> features;       // F x N
  MatrixX<Scalar> offsets;        // 3k x N, offset j in rows 3j..3j+2
  Matrix3X<Scalar> log_scalings;  // 3 x N

  Eigen::Index size() const { return centers.cols(); }

  bool operator==(const AnchorSet& o) const {
    return centers.cols() == o.centers.cols() && features.rows() == o.features.rows() &&
           offsets.rows() == o.offsets.rows() && centers == o.centers && features == o.features &&
           offsets == o.offsets && log_scalings == o.log_scalings;
  }
};

/// One learnable column per discrete time index. Empty (zero rows) when the
/// positional encoder is used.
template <typename Scalar>
struct TimeEmbeddingTable {
  MatrixX<Scalar> table;  // l x T

  Eigen::Index dim() const { return table.rows(); }
  Eigen::Index count() const { return table.cols(); }

  VectorX<Scalar> row(int t) const {
    if (t < 0 || t >= count())
      throw IndexError("time index " + std::to_string(t) + " out of range [0, " + std::to_string(count()) + ")");
    return table.col(t);
  }
};

enum class Head { Opacity = 0, StaticColor, DynamicColor, Blend, Covariance };
inline constexpr std::array<const char*, 5> kHeadNames = {"opacity", "static_color", "dynamic_color", "blend",
                                                         "covariance"};

template <typename Scalar>
struct HeadSet {
  std::array<MlpParams<Scalar>, 5> nets;

  MlpParams<Scalar>& operator[](Head h) { return nets[size_t(h)]; }
  const MlpParams<Scalar>& operator[](Head h) const { return nets[size_t(h)]; }
  bool operator==(const HeadSet& o) const { return nets == o.nets; }
};

/// Whether a head sees the time input. Covariance and static color do not.
inline bool head_is_time_conditioned(Head h) {
  return h == Head::Opacity || h == Head::DynamicColor || h == Head::Blend;
}

inline int head_output_dim(Head h, int k) {
  switch (h) {
    case Head::Opacity:
    case Head::Blend:
      return k;
    case Head::StaticColor:
    case Head::DynamicColor:
      return 3 * k;
    case Head::Covariance:
      return 7 * k;
  }
  return 0;
}

inline std::vector<int> head_dims(const ModelConfig& cfg, Head h) {
  std::vector<int> dims{head_is_time_conditioned(h) ? cfg.time_head_input_dim() : cfg.base_input_dim()};
  for (int i = 0; i < cfg.hidden_layers; ++i) dims.push_back(cfg.hidden_width);
  dims.push_back(head_output_dim(h, cfg.offsets_per_anchor));
  return dims;
}

/// The learnable scene state: anchors, heads and time embeddings.
template <typename Scalar>
struct SceneModel {
  ModelConfig config;
  AnchorSet<Scalar> anchors;
  HeadSet<Scalar> heads;
  TimeEmbeddingTable<Scalar> embeddings;
  int num_times = 1;

  int k() const { return config.offsets_per_anchor; }

  bool operator==(const SceneModel& o) const {
    return config == o.config && num_times == o.num_times && anchors == o.anchors && heads == o.heads &&
           embeddings.table.rows() == o.embeddings.table.rows() &&
           embeddings.table.cols() == o.embeddings.table.cols() && embeddings.table == o.embeddings.table;
  }

  /// Throws ShapeError if any tensor disagrees with the config.
  void validate() const {
    const auto n = anchors.centers.cols();
    const int k = config.offsets_per_anchor;
    if (k < 1) throw ShapeError("model: k must be >= 1");
    if (anchors.features.rows() != config.feature_dim || anchors.features.cols() != n ||
        anchors.offsets.rows() != 3 * k || anchors.offsets.cols() != n || anchors.log_scalings.cols() != n)
      throw ShapeError("model: anchor tensors inconsistent");
    for (int h = 0; h < 5; ++h) {
      const auto dims = head_dims(config, Head(h));
      const auto& net = heads.nets[size_t(h)];
      if (net.layers.size() + 1 != dims.size()) throw ShapeError(std::string("model: head depth ") + kHeadNames[h]);
      for (size_t i = 0; i < net.layers.size(); ++i)
        if (net.layers[i].weight.cols() != dims[i] || net.layers[i].weight.rows() != dims[i + 1] ||
            net.layers[i].bias.size() != dims[i + 1])
          throw ShapeError(std::string("model: head dims ") + kHeadNames[h]);
    }
    const int l = config.encoder == TimeEncoder::Embedding ? config.embedding_dim : 0;
    if (embeddings.table.rows() != l || embeddings.table.cols() != (l ? num_times : embeddings.table.cols()))
      throw ShapeError("model: embedding table shape");
    if (num_times < 1) throw ShapeError("model: need at least one time step");
  }
};

/// gamma(t) = (sin(2^k pi t), cos(2^k pi t)) for k = 0..L-1, interleaved.
template <typename Scalar>
VectorX<Scalar> positional_time_encoding(Scalar t, int frequencies) {
  if (frequencies < 1) throw ShapeError("positional_time_encoding: need at least one frequency");
  VectorX<Scalar> out(2 * frequencies);
  for (int k = 0; k < frequencies; ++k) {
    const Scalar arg = Scalar(std::ldexp(1.0, k)) * std::numbers::pi_v<Scalar> * t;
    out[2 * k] = std::sin(arg);
    out[2 * k + 1] = std::cos(arg);
  }
  return out;
}

template <typename Scalar>
VectorX<Scalar> interpolate_embedding(const TimeEmbeddingTable<Scalar>& table, int t0, int t1, Scalar alpha) {
  const VectorX<Scalar> a = table.row(t0);
  const VectorX<Scalar> b = table.row(t1);
  return (Scalar(1) - alpha) * a + alpha * b;
}

/// What the time-conditioned heads see: either a discrete time index (looked
/// up or encoded) or an explicit time vector, e.g. an interpolated embedding.
template <typename Scalar>
struct TimeInput {
  bool by_index = true;
  int index = 0;
  VectorX<Scalar> vector;

  static TimeInput at(int t) { return {true, t, {}}; }
  static TimeInput explicit_vector(VectorX<Scalar> v) { return {false, -1, std::move(v)}; }
  bool is_index() const { return by_index; }
};

/// Resolves a time input to the vector concatenated onto head inputs.
template <typename Scalar>
VectorX<Scalar> resolve_time_vector(const SceneModel<Scalar>& model, const TimeInput<Scalar>& time) {
  const int dim = model.config.time_input_dim();
  if (!time.is_index()) {
    if (time.vector.size() != dim)
      throw ShapeError("time vector has dim " + std::to_string(time.vector.size()) + ", expected " +
                       std::to_string(dim));
    return time.vector;
  }
  if (time.index < 0 || time.index >= model.num_times)
    throw IndexError("time index " + std::to_string(time.index) + " out of range [0, " +
                     std::to_string(model.num_times) + ")");
  if (model.config.encoder == TimeEncoder::Embedding) return model.embeddings.row(time.index);
  const Scalar t = model.num_times > 1 ? Scalar(time.index) / Scalar(model.num_times - 1) : Scalar(0);
  return positional_time_encoding(t, model.config.pe_frequencies);
}

/// Time input between two trained times: embeddings are mixed linearly, and
/// the positional encoder is evaluated at the mixed normalized time. alpha = 0
/// and alpha = 1 reproduce the endpoint inputs exactly.
template <typename Scalar>
TimeInput<Scalar> blended_time(const SceneModel<Scalar>& model, int t0, int t1, Scalar alpha) {
  for (int t : {t0, t1})
    if (t < 0 || t >= model.num_times)
      throw IndexError("time index " + std::to_string(t) + " out of range [0, " + std::to_string(model.num_times) +
                       ")");
  if (!std::isfinite(double(alpha))) throw ConfigError("interpolation weight must be finite");
  if (model.config.encoder == TimeEncoder::Embedding)
    return TimeInput<Scalar>::explicit_vector(interpolate_embedding(model.embeddings, t0, t1, alpha));
  const Scalar denom = model.num_times > 1 ? Scalar(model.num_times - 1) : Scalar(1);
  const Scalar a = Scalar(t0) / denom, b = Scalar(t1) / denom;
  return TimeInput<Scalar>::explicit_vector(
      positional_time_encoding((Scalar(1) - alpha) * a + alpha * b, model.config.pe_frequencies));
}

/// Sigma = R S S^T R^T with S = diag(scale). The quaternion is normalized.
template <typename Scalar>
Matrix3<Scalar> build_covariance(const Vector3<Scalar>& scale, const Vector4<Scalar>& rotation) {
  const Matrix3<Scalar> m = quaternion_to_rotation(rotation) * scale.asDiagonal();
  return m * m.transpose();
}

/// Reverse of build_covariance. `d_cov` is the gradient w.r.t. a symmetric
/// Sigma; the quaternion gradient is w.r.t. the (possibly unnormalized) input.
template <typename Scalar>
void build_covariance_backward(const Vector3<Scalar>& scale, const Vector4<Scalar>& rotation,
                               const Matrix3<Scalar>& d_cov, Vector3<Scalar>& d_scale, Vector4<Scalar>& d_rotation) {
  const Scalar qn = rotation.norm();
  const Vector4<Scalar> q = rotation / qn;
  const Matrix3<Scalar> r = quaternion_to_rotation(q);
  const Matrix3<Scalar> m = r * scale.asDiagonal();
  const Matrix3<Scalar> sym = Scalar(0.5) * (d_cov + d_cov.transpose());
  const Matrix3<Scalar> d_m = Scalar(2) * sym * m;
  const Matrix3<Scalar> rt_dm = r.transpose() * d_m;
  d_scale = rt_dm.diagonal();
  const Matrix3<Scalar> g = d_m * scale.asDiagonal();  // dL/dR
  const Scalar w = q[0], x = q[1], y = q[2], z = q[3];
  Vector4<Scalar> dq;
  dq[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  dq[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) -
               2 * x * g(2, 2));
  dq[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
               z * g(2, 1) - 2 * y * g(2, 2));
  dq[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
               x * g(2, 0) + y * g(2, 1));
  d_rotation = (dq - q * q.dot(dq)) / qn;
}

/// Per-render decoded primitives plus what decode_backward needs.
template <typename Scalar>
struct NeuralGaussianBatch {
  Matrix3X<Scalar> means;
  VectorX<Scalar> opacities;  // tanh activations in (-1, 1)
  Matrix3X<Scalar> scales;
  Matrix4X<Scalar> rotations;  // unit (w, x, y, z)
  Matrix3X<Scalar> colors;
  std::vector<int> anchor_index;

  struct Cache {
    bool valid = false;
    std::vector<int> visible_anchors;
    int time_index = -1;  // embedding column to receive gradients, -1 if none
    MatrixX<Scalar> base_input;  // (F+4) x Nv
    MatrixX<Scalar> time_input;  // (F+4+l) x Nv
    std::array<ForwardCache<Scalar>, 5> heads;
    MatrixX<Scalar> static_color;   // 3k x Nv, post-sigmoid
    MatrixX<Scalar> dynamic_color;  // 3k x Nv, post-sigmoid
    MatrixX<Scalar> blend;          // k x Nv, post-sigmoid
    MatrixX<Scalar> scale_gate;     // 3k x Nv, sigmoid of raw scale outputs
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> scale_clamped;  // 3k x Nv
    MatrixX<Scalar> quaternion_norm;  // k x Nv, norm before normalization
  } cache;

  Eigen::Index size() const { return means.cols(); }
};

/// Per-Gaussian gradients flowing into decode_backward.
template <typename Scalar>
struct GaussianGradients {
  Matrix3X<Scalar> means;
  VectorX<Scalar> opacities;
  Matrix3X<Scalar> scales;
  Matrix4X<Scalar> rotations;
  Matrix3X<Scalar> colors;

  static GaussianGradients zeros(Eigen::Index m) {
    return {Matrix3X<Scalar>::Zero(3, m), VectorX<Scalar>::Zero(m), Matrix3X<Scalar>::Zero(3, m),
            Matrix4X<Scalar>::Zero(4, m), Matrix3X<Scalar>::Zero(3, m)};
  }
};

/// Accumulators mirroring every learnable tensor of a SceneModel.
template <typename Scalar>
struct ModelGradients {
  MatrixX<Scalar> features;
  MatrixX<Scalar> offsets;
  Matrix3X<Scalar> log_scalings;
  HeadSet<Scalar> heads;
  MatrixX<Scalar> embeddings;

  static ModelGradients zeros_like(const SceneModel<Scalar>& m) {
    ModelGradients g;
    g.features = MatrixX<Scalar>::Zero(m.anchors.features.rows(), m.anchors.features.cols());
    g.offsets = MatrixX<Scalar>::Zero(m.anchors.offsets.rows(), m.anchors.offsets.cols());
    g.log_scalings = Matrix3X<Scalar>::Zero(3, m.anchors.log_scalings.cols());
    for (size_t h = 0; h < 5; ++h) g.heads.nets[h] = m.heads.nets[h].zeros_like();
    g.embeddings = MatrixX<Scalar>::Zero(m.embeddings.table.rows(), m.embeddings.table.cols());
    return g;
  }

  void set_zero() {
    features.setZero();
    offsets.setZero();
    log_scalings.setZero();
    for (auto& h : heads.nets) h.set_zero();
    embeddings.setZero();
  }
};

/// Blended color terms for a batch of head inputs (columns are anchors).
template <typename Scalar>
struct ColorTerms {
  MatrixX<Scalar> color;          // 3k x n
  MatrixX<Scalar> static_color;   // 3k x n
  MatrixX<Scalar> dynamic_color;  // 3k x n
  MatrixX<Scalar> blend;          // k x n
};

namespace detail {

template <typename Scalar>
MatrixX<Scalar> run_head(const HeadSet<Scalar>& heads, Head h, const MatrixX<Scalar>& input,
                         ForwardCache<Scalar>* cache) {
  MatrixX<Scalar> out = mlp_forward(heads[h], input, cache);
  if (!out.allFinite())
    throw NumericalError(std::string("decode: non-finite output from ") + kHeadNames[size_t(h)] + " head");
  return out;
}

template <typename Scalar>
MatrixX<Scalar> sigmoid(const MatrixX<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return gtm::sigmoid(v); });
}

}  // namespace detail

/// c_s = sigmoid(F_cs(base)), c_d = sigmoid(F_cd(base, z)), m = sigmoid(F_m(base, z)),
/// c = (1 - m) c_s + m c_d with m broadcast over each Gaussian's 3 channels.
template <typename Scalar>
ColorTerms<Scalar> decompose_color(const MatrixX<Scalar>& base_input, const MatrixX<Scalar>& time_input,
                                   const HeadSet<Scalar>& heads, ForwardCache<Scalar>* static_cache = nullptr,
                                   ForwardCache<Scalar>* dynamic_cache = nullptr,
                                   ForwardCache<Scalar>* blend_cache = nullptr) {
  ColorTerms<Scalar> t;
  t.static_color = detail::sigmoid<Scalar>(detail::run_head(heads, Head::StaticColor, base_input, static_cache));
  t.dynamic_color = detail::sigmoid<Scalar>(detail::run_head(heads, Head::DynamicColor, time_input, dynamic_cache));
  t.blend = detail::sigmoid<Scalar>(detail::run_head(heads, Head::Blend, time_input, blend_cache));
  const Eigen::Index k = t.blend.rows();
  t.color.resize(3 * k, t.blend.cols());
  for (Eigen::Index j = 0; j < k; ++j) {
    for (int ch = 0; ch < 3; ++ch) {
      const auto r = 3 * j + ch;
      t.color.row(r) = ((Scalar(1) - t.blend.row(j).array()) * t.static_color.row(r).array() +
                        t.blend.row(j).array() * t.dynamic_color.row(r).array())
                           .matrix();
    }
  }
  return t;
}

/// Indices of anchors whose center is in front of the near plane and projects
/// inside the canvas grown by cull_margin.
template <typename Scalar>
std::vector<int> visible_anchors(const SceneModel<Scalar>& model, const Camera<Scalar>& camera) {
  std::vector<int> out;
  const Scalar margin_x = Scalar(0.5 * (model.config.cull_margin - 1.0)) * Scalar(camera.width);
  const Scalar margin_y = Scalar(0.5 * (model.config.cull_margin - 1.0)) * Scalar(camera.height);
  for (Eigen::Index i = 0; i < model.anchors.size(); ++i) {
    const Vector3<Scalar> p = camera.to_camera(model.anchors.centers.col(i));
    if (!(p.z() > Scalar(model.config.near_clip))) continue;
    const Scalar u = camera.fx * p.x() / p.z() + camera.cx;
    const Scalar v = camera.fy * p.y() / p.z() + camera.cy;
    if (u < -margin_x || u > Scalar(camera.width) + margin_x || v < -margin_y || v > Scalar(camera.height) + margin_y)
      continue;
    out.push_back(int(i));
  }
  return out;
}

/// Decodes the k neural Gaussians of every view-visible anchor for one camera
/// and time input. Geometry (means, scales, rotations) never depends on time.
template <typename Scalar>
NeuralGaussianBatch<Scalar> decode_neural_gaussians(const SceneModel<Scalar>& model, const Camera<Scalar>& camera,
                                                    const TimeInput<Scalar>& time) {
  const VectorX<Scalar> z = resolve_time_vector(model, time);
  const int k = model.k();
  const int f_dim = model.config.feature_dim;
  NeuralGaussianBatch<Scalar> b;
  auto& cache = b.cache;
  cache.visible_anchors = visible_anchors(model, camera);
  cache.time_index = (time.is_index() && model.config.encoder == TimeEncoder::Embedding) ? time.index : -1;
  const auto nv = Eigen::Index(cache.visible_anchors.size());
  const Eigen::Index m = nv * k;

  const Vector3<Scalar> cam_center = camera.center();
  const Scalar inv_extent = Scalar(1.0 / model.config.scene_extent);
  cache.base_input.resize(f_dim + 4, nv);
  cache.time_input.resize(f_dim + 4 + z.size(), nv);
  for (Eigen::Index c = 0; c < nv; ++c) {
    const int a = cache.visible_anchors[size_t(c)];
    const Vector3<Scalar> rel = model.anchors.centers.col(a) - cam_center;
    const Scalar dist = rel.norm();
    cache.base_input.col(c).head(f_dim) = model.anchors.features.col(a);
    cache.base_input(f_dim, c) = dist * inv_extent;
    cache.base_input.col(c).segment(f_dim + 1, 3) = rel / dist;
    cache.time_input.col(c).head(f_dim + 4) = cache.base_input.col(c);
    cache.time_input.col(c).tail(z.size()) = z;
  }

  const MatrixX<Scalar> opacity_raw =
      detail::run_head(model.heads, Head::Opacity, cache.time_input, &cache.heads[size_t(Head::Opacity)]);
  const MatrixX<Scalar> cov_raw =
      detail::run_head(model.heads, Head::Covariance, cache.base_input, &cache.heads[size_t(Head::Covariance)]);
  ColorTerms<Scalar> color = decompose_color(
      cache.base_input, cache.time_input, model.heads, &cache.heads[size_t(Head::StaticColor)],
      &cache.heads[size_t(Head::DynamicColor)], &cache.heads[size_t(Head::Blend)]);

  b.means.resize(3, m);
  b.opacities.resize(m);
  b.scales.resize(3, m);
  b.rotations.resize(4, m);
  b.colors.resize(3, m);
  b.anchor_index.resize(size_t(m));
  cache.scale_gate.resize(3 * k, nv);
  cache.scale_clamped.resize(3 * k, nv);
  cache.quaternion_norm.resize(k, nv);

  const Scalar scale_min(1e-6);
  const Scalar scale_max = Scalar(0.5 * model.config.scene_extent);
  for (Eigen::Index c = 0; c < nv; ++c) {
    const int a = cache.visible_anchors[size_t(c)];
    const Vector3<Scalar> center = model.anchors.centers.col(a);
    const Vector3<Scalar> anchor_scale = model.anchors.log_scalings.col(a).array().exp();
    for (int j = 0; j < k; ++j) {
      const Eigen::Index g = c * k + j;
      b.anchor_index[size_t(g)] = a;
      b.means.col(g) = center + model.anchors.offsets.col(a).template segment<3>(3 * j).cwiseProduct(anchor_scale);
      b.opacities[g] = std::tanh(opacity_raw(j, c));
      for (int d = 0; d < 3; ++d) {
        const Scalar gate = gtm::sigmoid(cov_raw(7 * j + d, c));
        const Scalar s = anchor_scale[d] * gate;
        cache.scale_gate(3 * j + d, c) = gate;
        cache.scale_clamped(3 * j + d, c) = s < scale_min || s > scale_max;
        b.scales(d, g) = std::clamp(s, scale_min, scale_max);
      }
      Vector4<Scalar> q = cov_raw.col(c).template segment<4>(7 * j + 3);
      q[0] += Scalar(1);
      const Scalar qn = q.norm();
      if (!(qn > Scalar(0))) throw NumericalError("decode: zero-norm quaternion from covariance head");
      cache.quaternion_norm(j, c) = qn;
      b.rotations.col(g) = q / qn;
      b.colors.col(g) = color.color.col(c).template segment<3>(3 * j);
    }
  }
  cache.static_color = std::move(color.static_color);
  cache.dynamic_color = std::move(color.dynamic_color);
  cache.blend = std::move(color.blend);
  cache.valid = true;
  return b;
}

/// Chains per-Gaussian gradients through the decode into `out`. Anchor centers
/// are not learnable; their head-input terms receive no gradient.
template <typename Scalar>
void decode_backward(const SceneModel<Scalar>& model, const NeuralGaussianBatch<Scalar>& batch,
                     const GaussianGradients<Scalar>& grads, ModelGradients<Scalar>& out) {
  const auto& cache = batch.cache;
  if (!cache.valid)
    throw StateError("decode_backward: batch has no forward cache");
  const int k = model.k();
  const int f_dim = model.config.feature_dim;
  const auto nv = Eigen::Index(cache.visible_anchors.size());
  if (grads.means.cols() != batch.size()) throw ShapeError("decode_backward: gradient count mismatch");
  if (nv == 0) return;

  MatrixX<Scalar> d_opacity(k, nv), d_static(3 * k, nv), d_dynamic(3 * k, nv), d_blend(k, nv), d_cov(7 * k, nv);
  for (Eigen::Index c = 0; c < nv; ++c) {
    const int a = cache.visible_anchors[size_t(c)];
    const Vector3<Scalar> anchor_scale = model.anchors.log_scalings.col(a).array().exp();
    Vector3<Scalar> d_log_scale = Vector3<Scalar>::Zero();
    for (int j = 0; j < k; ++j) {
      const Eigen::Index g = c * k + j;
      const Scalar o = batch.opacities[g];
      d_opacity(j, c) = grads.opacities[g] * (Scalar(1) - o * o);

      const Scalar m = cache.blend(j, c);
      Scalar dm = 0;
      for (int ch = 0; ch < 3; ++ch) {
        const auto r = 3 * j + ch;
        const Scalar dc = grads.colors(ch, g);
        const Scalar cs = cache.static_color(r, c);
        const Scalar cd = cache.dynamic_color(r, c);
        d_static(r, c) = (Scalar(1) - m) * dc * cs * (Scalar(1) - cs);
        d_dynamic(r, c) = m * dc * cd * (Scalar(1) - cd);
        dm += (cd - cs) * dc;
      }
      d_blend(j, c) = dm * m * (Scalar(1) - m);

      for (int d = 0; d < 3; ++d) {
        const auto r = 3 * j + d;
        if (cache.scale_clamped(r, c)) {
          d_cov(7 * j + d, c) = 0;
          continue;
        }
        const Scalar gate = cache.scale_gate(r, c);
        const Scalar ds = grads.scales(d, g);
        d_cov(7 * j + d, c) = ds * anchor_scale[d] * gate * (Scalar(1) - gate);
        d_log_scale[d] += ds * anchor_scale[d] * gate;
      }
      const Vector4<Scalar> q = batch.rotations.col(g);
      const Vector4<Scalar> dq = grads.rotations.col(g);
      d_cov.col(c).template segment<4>(7 * j + 3) = (dq - q * q.dot(dq)) / cache.quaternion_norm(j, c);

      const Vector3<Scalar> dmu = grads.means.col(g);
      const Vector3<Scalar> offset = model.anchors.offsets.col(a).template segment<3>(3 * j);
      out.offsets.col(a).template segment<3>(3 * j) += dmu.cwiseProduct(anchor_scale);
      d_log_scale += dmu.cwiseProduct(offset).cwiseProduct(anchor_scale);
    }
    out.log_scalings.col(a) += d_log_scale;
  }

  MatrixX<Scalar> d_time_input = MatrixX<Scalar>::Zero(cache.time_input.rows(), nv);
  MatrixX<Scalar> d_base_input = MatrixX<Scalar>::Zero(cache.base_input.rows(), nv);
  auto backprop = [&](Head h, const MatrixX<Scalar>& upstream, MatrixX<Scalar>& d_input) {
    auto g = mlp_backward(model.heads[h], cache.heads[size_t(h)], upstream);
    auto& acc = out.heads[h];
    for (size_t i = 0; i < acc.layers.size(); ++i) {
      acc.layers[i].weight += g.params.layers[i].weight;
      acc.layers[i].bias += g.params.layers[i].bias;
    }
    d_input += g.input;
  };
  backprop(Head::Opacity, d_opacity, d_time_input);
  backprop(Head::DynamicColor, d_dynamic, d_time_input);
  backprop(Head::Blend, d_blend, d_time_input);
  backprop(Head::StaticColor, d_static, d_base_input);
  backprop(Head::Covariance, d_cov, d_base_input);

  for (Eigen::Index c = 0; c < nv; ++c) {
    const int a = cache.visible_anchors[size_t(c)];
    out.features.col(a) += d_time_input.col(c).head(f_dim) + d_base_input.col(c).head(f_dim);
  }
  if (cache.time_index >= 0) {
    const auto l = cache.time_input.rows() - (f_dim + 4);
    out.embeddings.col(cache.time_index) += d_time_input.bottomRows(l).rowwise().sum();
  }
}

/// Integer voxel coordinates of a point.
template <typename Scalar>
std::array<std::int64_t, 3> voxel_key(const Vector3<Scalar>& p, double voxel) {
  return {std::int64_t(std::floor(double(p.x()) / voxel)), std::int64_t(std::floor(double(p.y()) / voxel)),
          std::int64_t(std::floor(double(p.z()) / voxel))};
}

/// Snaps points to voxel centers, keeping one per occupied voxel in first-seen order.
template <typename Scalar>
Matrix3X<Scalar> voxel_deduplicate(const Matrix3X<Scalar>& points, double voxel) {
  std::map<std::array<std::int64_t, 3>, bool> seen;
  std::vector<Vector3<Scalar>> kept;
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    const auto key = voxel_key<Scalar>(points.col(i), voxel);
    if (!seen.emplace(key, true).second) continue;
    kept.emplace_back(Scalar((key[0] + 0.5) * voxel), Scalar((key[1] + 0.5) * voxel), Scalar((key[2] + 0.5) * voxel));
  }
  Matrix3X<Scalar> out(3, Eigen::Index(kept.size()));
  for (size_t i = 0; i < kept.size(); ++i) out.col(Eigen::Index(i)) = kept[i];
  return out;
}

/// Radius of the bounding sphere around the points' centroid.
template <typename Scalar>
double point_cloud_extent(const Matrix3X<Scalar>& points) {
  if (points.cols() == 0) return 1.0;
  const Vector3<Scalar> centroid = points.rowwise().mean();
  const double r = double((points.colwise() - centroid).colwise().norm().maxCoeff());
  return r > 0 ? r : 1.0;
}

/// Fresh model seeded from an SfM point cloud: voxel-deduplicated anchors,
/// zero features and offsets, log anchor scales from neighbor spacing,
/// Kaiming heads and N(0, 0.01^2) embeddings.
/// The nearest float, as a double. Through a volatile because g++ 11 at -O3
/// was seen to drop a plain double -> float -> double round trip.
inline double round_to_float(double v) {
  volatile float f = float(v);
  return double(f);
}

template <typename Scalar>
SceneModel<Scalar> init_scene_model(const Matrix3X<Scalar>& points, ModelConfig config, int num_times,
                                    std::uint64_t seed, double voxel_fraction = 1.0 / 128) {
  if (points.cols() < 1) throw ConfigError("init_scene_model: empty point cloud");
  if (num_times < 1) throw ConfigError("init_scene_model: need at least one time step");
  if (config.scene_extent <= 0) config.scene_extent = point_cloud_extent(points);
  // these are stored as f32 in scene files; round now so a saved model reloads equal
  config.scene_extent = round_to_float(config.scene_extent);
  config.near_clip = round_to_float(config.near_clip);
  config.cull_margin = round_to_float(config.cull_margin);
  SceneModel<Scalar> model;
  model.config = config;
  model.num_times = num_times;
  const double voxel = config.scene_extent * voxel_fraction;
  auto& an = model.anchors;
  an.centers = voxel_deduplicate(points, voxel);
  const auto n = an.centers.cols();
  an.features = MatrixX<Scalar>::Zero(config.feature_dim, n);
  an.offsets = MatrixX<Scalar>::Zero(3 * config.offsets_per_anchor, n);
  an.log_scalings.resize(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    // mean squared distance to the 3 nearest neighbours
    std::array<double, 3> best{1e30, 1e30, 1e30};
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d2 = double((an.centers.col(i) - an.centers.col(j)).squaredNorm());
      if (d2 < best[2]) {
        best[2] = d2;
        std::sort(best.begin(), best.end());
      }
    }
    int cnt = 0;
    double sum = 0;
    for (double d : best)
      if (d < 1e29) sum += d, ++cnt;
    const double mean_d2 = cnt ? sum / cnt : voxel * voxel;
    an.log_scalings.col(i).setConstant(Scalar(std::log(std::max(std::sqrt(mean_d2), 1e-7))));
  }
  std::mt19937_64 rng(seed);
  for (int h = 0; h < 5; ++h) model.heads.nets[size_t(h)] = mlp_init<Scalar>(head_dims(config, Head(h)), rng());
  if (config.encoder == TimeEncoder::Embedding) {
    std::normal_distribution<double> normal(0.0, 0.01);
    model.embeddings.table.resize(config.embedding_dim, num_times);
    for (Eigen::Index c = 0; c < num_times; ++c)
      for (Eigen::Index r = 0; r < config.embedding_dim; ++r) model.embeddings.table(r, c) = Scalar(normal(rng));
  } else {
    model.embeddings.table.resize(0, num_times);
  }
  return model;
}

template <typename Other, typename Scalar>
SceneModel<Other> cast_model(const SceneModel<Scalar>& m) {
  SceneModel<Other> o;
  o.config = m.config;
  o.num_times = m.num_times;
  o.anchors.centers = m.anchors.centers.template cast<Other>();
  o.anchors.features = m.anchors.features.template cast<Other>();
  o.anchors.offsets = m.anchors.offsets.template cast<Other>();
  o.anchors.log_scalings = m.anchors.log_scalings.template cast<Other>();
  for (size_t h = 0; h < 5; ++h) o.heads.nets[h] = m.heads.nets[h].template cast<Other>();
  o.embeddings.table = m.embeddings.table.template cast<Other>();
  return o;
}

}  // namespace gtm
