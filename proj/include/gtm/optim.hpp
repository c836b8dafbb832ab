#pragma once

#include "gtm/common.hpp"
#include "gtm/loss.hpp"
#include "gtm/model.hpp"
#include "gtm/rasterizer.hpp"
#include "gtm/sample.hpp"

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

namespace gtm {

enum class ParamGroup { Features, Offsets, Scalings, Heads, Embeddings };

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
};

/// First and second moments of one tensor, flattened in storage order.
template <typename Scalar>
struct AdamMoments {
  Eigen::Array<Scalar, Eigen::Dynamic, 1> m, v;
  bool operator==(const AdamMoments& o) const {
    return m.size() == o.m.size() && v.size() == o.v.size() && (m == o.m).all() && (v == o.v).all();
  }
};

template <typename Scalar>
struct AdamState {
  std::int64_t step = 0;
  std::vector<AdamMoments<Scalar>> tensors;
  bool operator==(const AdamState&) const = default;
};

/// Bias-corrected Adam update of one tensor at step `step` (1-based).
template <typename Scalar>
void adam_update(Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> param,
                 Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> grad, AdamMoments<Scalar>& mom,
                 double lr, std::int64_t step, const AdamHyper& h = {}) {
  if (param.size() != grad.size() || mom.m.size() != param.size() || mom.v.size() != param.size())
    throw ShapeError("adam_update: parameter, gradient and moment shapes differ");
  const Scalar b1 = Scalar(h.beta1), b2 = Scalar(h.beta2);
  mom.m = b1 * mom.m + (Scalar(1) - b1) * grad;
  mom.v = b2 * mom.v + (Scalar(1) - b2) * grad.square();
  const Scalar c1 = Scalar(1.0 - std::pow(h.beta1, double(step)));
  const Scalar c2 = Scalar(1.0 - std::pow(h.beta2, double(step)));
  param -= Scalar(lr) * (mom.m / c1) / ((mom.v / c2).sqrt() + Scalar(h.eps));
}

/// Visits every learnable tensor of a model alongside its gradient, in a fixed
/// order that AdamState relies on.
template <typename Scalar, typename Fn>
void for_each_tensor(SceneModel<Scalar>& model, ModelGradients<Scalar>& grads, Fn&& fn) {
  auto visit = [&](ParamGroup group, auto& p, auto& g) {
    fn(group, Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(p.data(), p.size()),
       Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(g.data(), g.size()));
  };
  visit(ParamGroup::Features, model.anchors.features, grads.features);
  visit(ParamGroup::Offsets, model.anchors.offsets, grads.offsets);
  visit(ParamGroup::Scalings, model.anchors.log_scalings, grads.log_scalings);
  for (size_t h = 0; h < 5; ++h)
    for (size_t l = 0; l < model.heads.nets[h].layers.size(); ++l) {
      visit(ParamGroup::Heads, model.heads.nets[h].layers[l].weight, grads.heads.nets[h].layers[l].weight);
      visit(ParamGroup::Heads, model.heads.nets[h].layers[l].bias, grads.heads.nets[h].layers[l].bias);
    }
  visit(ParamGroup::Embeddings, model.embeddings.table, grads.embeddings);
}

/// Number of per-anchor tensors at the front of the visiting order.
inline constexpr int kAnchorTensorCount = 3;

template <typename Scalar>
AdamState<Scalar> make_adam_state(SceneModel<Scalar>& model) {
  AdamState<Scalar> st;
  auto g = ModelGradients<Scalar>::zeros_like(model);
  for_each_tensor(model, g, [&](ParamGroup, auto p, auto) {
    st.tensors.push_back({Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(p.size()),
                          Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(p.size())});
  });
  return st;
}

/// One Adam step over every tensor, with a learning rate per group.
template <typename Scalar>
void adam_step(SceneModel<Scalar>& model, ModelGradients<Scalar>& grads, AdamState<Scalar>& state,
               const std::function<double(ParamGroup)>& lr, const AdamHyper& h = {}) {
  ++state.step;
  size_t i = 0;
  for_each_tensor(model, grads, [&](ParamGroup group, auto p, auto g) {
    if (i >= state.tensors.size()) throw ShapeError("adam_step: optimizer state has too few tensors");
    adam_update<Scalar>(p, g, state.tensors[i++], lr(group), state.step, h);
  });
  if (i != state.tensors.size()) throw ShapeError("adam_step: optimizer state has too many tensors");
}

struct TrainConfig {
  int iterations = 3000;
  double lr_features = 7.5e-3;
  double lr_offsets = 1e-2;
  double lr_scalings = 7e-3;
  double lr_heads = 2e-3;
  double lr_embeddings = 5e-3;
  double lr_final_factor = 0.1;  // exponential decay target over the run
  bool decay_embeddings = true;
  LossWeights loss;
  bool adapt = true;
  int adapt_interval = 100;
  int adapt_start = 500;
  int adapt_stop = -1;  // -1: 80% of iterations
  double grow_threshold = 2e-3;  // mean NDC-scaled gradient over visible renders
  double prune_opacity = 0.005;
  double voxel_fraction = 1.0 / 128;
  std::uint64_t seed = 0;
  ModelConfig model{.scene_extent = 0.0};  // extent 0: from the SfM points
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  int threads = 1;
  int checkpoint_interval = 1000;  // 0 disables periodic checkpoints

  int adapt_stop_iteration() const { return adapt_stop >= 0 ? adapt_stop : int(0.8 * iterations); }
  void validate() const {
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    for (double lr : {lr_features, lr_offsets, lr_scalings, lr_heads, lr_embeddings})
      if (!(lr >= 0)) throw ConfigError("learning rates must be non-negative");
    if (!(loss.lambda_ssim >= 0) || !(loss.lambda_vol >= 0)) throw ConfigError("loss weights must be non-negative");
    if (adapt_interval < 1) throw ConfigError("adapt_interval must be positive");
    if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be non-negative");
    if (threads < 1) throw ConfigError("threads must be positive");
  }
};

/// Statistics gathered between anchor adaptations.
template <typename Scalar>
struct AdaptStats {
  MatrixX<Scalar> grad_sum;    // k x N, summed NDC-scaled screen-space mean gradient norms
  MatrixX<Scalar> visible;     // k x N, number of renders in which the Gaussian was a splat
  VectorX<Scalar> max_opacity; // N, max opacity activation over the interval
  VectorX<Scalar> visits;      // N, renders in which the anchor was decoded

  static AdaptStats zeros(Eigen::Index k, Eigen::Index n) {
    return {MatrixX<Scalar>::Zero(k, n), MatrixX<Scalar>::Zero(k, n), VectorX<Scalar>::Constant(n, Scalar(-2)),
            VectorX<Scalar>::Zero(n)};
  }
  bool operator==(const AdaptStats& o) const {
    return grad_sum.cols() == o.grad_sum.cols() && grad_sum == o.grad_sum && visible == o.visible &&
           max_opacity == o.max_opacity && visits == o.visits;
  }
};

struct AdaptReport {
  int grown = 0;
  int pruned = 0;
};

namespace detail {

template <typename Scalar>
void keep_columns(MatrixX<Scalar>& m, const std::vector<int>& keep, Eigen::Index extra) {
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(m.rows(), Eigen::Index(keep.size()) + extra);
  for (size_t i = 0; i < keep.size(); ++i) out.col(Eigen::Index(i)) = m.col(keep[i]);
  m = std::move(out);
}

template <typename Scalar>
void keep_moment_columns(Eigen::Array<Scalar, Eigen::Dynamic, 1>& flat, Eigen::Index rows, const std::vector<int>& keep,
                         Eigen::Index extra) {
  Eigen::Array<Scalar, Eigen::Dynamic, 1> out = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(
      rows * (Eigen::Index(keep.size()) + extra));
  for (size_t i = 0; i < keep.size(); ++i) out.segment(Eigen::Index(i) * rows, rows) = flat.segment(keep[i] * rows, rows);
  flat = std::move(out);
}

}  // namespace detail

/// Grows anchors at neural-Gaussian positions whose mean screen-space
/// gradient exceeded the growth threshold (one per empty voxel) and prunes
/// anchors that were decoded but never reached the opacity threshold.
/// Optimizer rows follow the anchors; new rows start at zero.
template <typename Scalar>
AdaptReport adapt_anchors(SceneModel<Scalar>& model, AdamState<Scalar>& adam, const AdaptStats<Scalar>& stats,
                          double grow_threshold, double prune_opacity, double voxel) {
  auto& an = model.anchors;
  const int k = model.k();
  const Eigen::Index n = an.size();
  AdaptReport rep;

  std::map<std::array<std::int64_t, 3>, int> occupied;
  for (Eigen::Index i = 0; i < n; ++i) occupied.emplace(voxel_key<Scalar>(an.centers.col(i), voxel), -1);

  std::vector<std::pair<std::array<std::int64_t, 3>, int>> grown;  // voxel, parent anchor
  for (Eigen::Index a = 0; a < n; ++a) {
    const Vector3<Scalar> s = an.log_scalings.col(a).array().exp();
    for (int j = 0; j < k; ++j) {
      if (stats.visible(j, a) <= 0) continue;
      if (double(stats.grad_sum(j, a) / stats.visible(j, a)) <= grow_threshold) continue;
      const Vector3<Scalar> pos = an.centers.col(a) + an.offsets.col(a).template segment<3>(3 * j).cwiseProduct(s);
      const auto key = voxel_key<Scalar>(pos, voxel);
      if (occupied.emplace(key, int(a)).second) grown.emplace_back(key, int(a));
    }
  }

  std::vector<int> keep;
  for (Eigen::Index a = 0; a < n; ++a) {
    const bool prune = stats.visits[a] > 0 && double(stats.max_opacity[a]) < prune_opacity;
    if (!prune) keep.push_back(int(a));
  }
  // never prune the last anchor
  if (keep.empty() && grown.empty() && n > 0) keep.push_back(0);
  rep.pruned = int(n) - int(keep.size());
  rep.grown = int(grown.size());
  if (rep.pruned == 0 && rep.grown == 0) return rep;

  const auto extra = Eigen::Index(grown.size());
  MatrixX<Scalar> centers = an.centers;
  MatrixX<Scalar> scal = an.log_scalings;
  detail::keep_columns(centers, keep, extra);
  detail::keep_columns(scal, keep, extra);
  MatrixX<Scalar> parent_features = an.features;
  MatrixX<Scalar> parent_scal = an.log_scalings;
  detail::keep_columns(an.features, keep, extra);
  detail::keep_columns(an.offsets, keep, extra);
  for (Eigen::Index g = 0; g < extra; ++g) {
    const auto& [key, parent] = grown[size_t(g)];
    const Eigen::Index c = Eigen::Index(keep.size()) + g;
    centers.col(c) << Scalar((key[0] + 0.5) * voxel), Scalar((key[1] + 0.5) * voxel), Scalar((key[2] + 0.5) * voxel);
    an.features.col(c) = parent_features.col(parent);
    scal.col(c) = parent_scal.col(parent);
  }
  an.centers = centers;
  an.log_scalings = scal;

  if (adam.tensors.size() >= size_t(kAnchorTensorCount)) {
    const Eigen::Index rows[kAnchorTensorCount] = {an.features.rows(), an.offsets.rows(), 3};
    for (int t = 0; t < kAnchorTensorCount; ++t) {
      detail::keep_moment_columns(adam.tensors[size_t(t)].m, rows[t], keep, extra);
      detail::keep_moment_columns(adam.tensors[size_t(t)].v, rows[t], keep, extra);
    }
  }
  return rep;
}

/// One training step's log record.
struct IterationLog {
  int iteration = 0;
  int sample = 0;
  int time_index = 0;
  double total = 0, l1 = 0, ssim_term = 0, vol = 0;
  int anchors = 0;
  int splats = 0;
  double wall_seconds = 0;
};

/// Everything that evolves during training. Saving and restoring it resumes
/// the exact trajectory.
template <typename Scalar>
struct TrainerState {
  SceneModel<Scalar> model;
  AdamState<Scalar> adam;
  AdaptStats<Scalar> stats;
  int iteration = 0;
};

/// Uniform sample index for an iteration, a pure function of (seed, iteration).
inline int sample_index(std::uint64_t seed, int iteration, int count) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + std::uint64_t(iteration) + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  z ^= z >> 31;
  return int(z % std::uint64_t(count));
}

template <typename Scalar>
class Trainer {
 public:
  Trainer(const TrainingData<Scalar>& data, TrainConfig config) : data_(data), config_(std::move(config)) {
    config_.validate();
    if (data_.train.empty()) throw ConfigError("train: dataset has no training samples");
    if (data_.points.cols() < 1) throw ConfigError("train: no SfM points for anchor initialization");
    config_.model.scene_extent =
        config_.model.scene_extent > 0 ? config_.model.scene_extent : point_cloud_extent(data_.points);
    state_.model = init_scene_model(data_.points, config_.model, data_.num_times, config_.seed, config_.voxel_fraction);
    state_.adam = make_adam_state(state_.model);
    reset_stats();
  }

  /// Resume from a saved state; the config must match the original run.
  Trainer(const TrainingData<Scalar>& data, TrainConfig config, TrainerState<Scalar> state)
      : data_(data), config_(std::move(config)), state_(std::move(state)) {
    config_.validate();
    config_.model = state_.model.config;
    state_.model.validate();
  }

  const TrainerState<Scalar>& state() const { return state_; }
  const SceneModel<Scalar>& model() const { return state_.model; }
  const TrainConfig& config() const { return config_; }
  bool done() const { return state_.iteration >= config_.iterations; }

  double learning_rate(ParamGroup g) const {
    const double progress = config_.iterations > 0 ? double(state_.iteration) / config_.iterations : 0.0;
    const double decay = std::pow(config_.lr_final_factor, progress);
    switch (g) {
      case ParamGroup::Features:
        return config_.lr_features * decay;
      case ParamGroup::Offsets:
        return config_.lr_offsets * decay;
      case ParamGroup::Scalings:
        return config_.lr_scalings * decay;
      case ParamGroup::Heads:
        return config_.lr_heads * decay;
      case ParamGroup::Embeddings:
        return config_.lr_embeddings * (config_.decay_embeddings ? decay : 1.0);
    }
    return 0;
  }

  RenderSettings render_settings() const {
    RenderSettings s;
    s.background = config_.background;
    s.threads = config_.threads;
    return s;
  }

  IterationLog step() {
    const auto t0 = std::chrono::steady_clock::now();
    auto& model = state_.model;
    const int idx = sample_index(config_.seed, state_.iteration, int(data_.train.size()));
    const auto& sample = data_.train[size_t(idx)];

    auto rendered = render(model, sample.camera, TimeInput<Scalar>::at(sample.time_index), render_settings());
    const auto& splats = rendered.output.splats;
    Matrix3X<Scalar> splat_scales(3, Eigen::Index(splats.size()));
    for (size_t i = 0; i < splats.size(); ++i)
      splat_scales.col(Eigen::Index(i)) = rendered.batch.scales.col(splats[i].source_index);
    auto loss = total_loss(rendered.output.image, sample.image, splat_scales, config_.loss);
    if (!std::isfinite(loss.total))
      throw NumericalError("train: non-finite loss at iteration " + std::to_string(state_.iteration) + " (l1=" +
                           std::to_string(loss.l1) + ", ssim_term=" + std::to_string(loss.ssim_term) +
                           ", vol=" + std::to_string(loss.vol) + ")");

    auto sg = composite_backward(rendered.output, loss.image_grad);
    auto gg = project_backward(splats, sg, rendered.batch, sample.camera);
    for (size_t i = 0; i < splats.size(); ++i)
      gg.scales.col(splats[i].source_index) += loss.scale_grad.col(Eigen::Index(i));
    auto grads = ModelGradients<Scalar>::zeros_like(model);
    decode_backward(model, rendered.batch, gg, grads);

    accumulate_stats(rendered, sg, sample.camera);
    adam_step<Scalar>(model, grads, state_.adam, [this](ParamGroup g) { return learning_rate(g); });
    ++state_.iteration;

    if (config_.adapt && state_.iteration >= config_.adapt_start &&
        state_.iteration <= config_.adapt_stop_iteration() && state_.iteration % config_.adapt_interval == 0) {
      last_adapt_ = adapt_anchors(model, state_.adam, state_.stats, config_.grow_threshold, config_.prune_opacity,
                                  model.config.scene_extent * config_.voxel_fraction);
      reset_stats();
    }

    IterationLog log;
    log.iteration = state_.iteration;
    log.sample = idx;
    log.time_index = sample.time_index;
    log.total = loss.total;
    log.l1 = loss.l1;
    log.ssim_term = loss.ssim_term;
    log.vol = loss.vol;
    log.anchors = int(model.anchors.size());
    log.splats = int(splats.size());
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
  }

  /// Runs until `until` iterations (default: the configured total).
  std::vector<IterationLog> run(int until = -1, const std::function<void(const IterationLog&)>& on_step = {}) {
    if (until < 0 || until > config_.iterations) until = config_.iterations;
    std::vector<IterationLog> logs;
    while (state_.iteration < until) {
      logs.push_back(step());
      if (on_step) on_step(logs.back());
    }
    return logs;
  }

  const AdaptReport& last_adapt() const { return last_adapt_; }

 private:
  void reset_stats() { state_.stats = AdaptStats<Scalar>::zeros(state_.model.k(), state_.model.anchors.size()); }

  void accumulate_stats(const Rendered<Scalar>& r, const SplatGradients<Scalar>& sg, const Camera<Scalar>& cam) {
    auto& st = state_.stats;
    const int k = state_.model.k();
    for (int a : r.batch.cache.visible_anchors) st.visits[a] += 1;
    for (Eigen::Index g = 0; g < r.batch.size(); ++g) {
      const int a = r.batch.anchor_index[size_t(g)];
      st.max_opacity[a] = std::max(st.max_opacity[a], r.batch.opacities[g]);
    }
    const Scalar hx = Scalar(0.5 * cam.width), hy = Scalar(0.5 * cam.height);
    for (size_t i = 0; i < r.output.splats.size(); ++i) {
      const int g = r.output.splats[i].source_index;
      const int a = r.batch.anchor_index[size_t(g)];
      const int j = g % k;
      const Scalar gx = sg.mean2d(0, Eigen::Index(i)) * hx, gy = sg.mean2d(1, Eigen::Index(i)) * hy;
      st.grad_sum(j, a) += std::sqrt(gx * gx + gy * gy);
      st.visible(j, a) += 1;
    }
  }

  const TrainingData<Scalar>& data_;
  TrainConfig config_;
  TrainerState<Scalar> state_;
  AdaptReport last_adapt_;
};

template <typename Scalar>
struct TrainResult {
  SceneModel<Scalar> model;
  std::vector<IterationLog> log;
};

template <typename Scalar>
TrainResult<Scalar> train(const TrainingData<Scalar>& data, const TrainConfig& config) {
  Trainer<Scalar> trainer(data, config);
  auto log = trainer.run();
  return {trainer.model(), std::move(log)};
}

}  // namespace gtm
