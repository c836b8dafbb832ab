#pragma once

#include "gtm/common.hpp"

#include <random>
#include <vector>

namespace gtm {

/// Dense feed-forward net: affine layers with ReLU between them and a linear
/// output. Samples are columns, so a batch is an (in_dim x batch) matrix.
template <typename Scalar>
struct MlpParams {
  struct Layer {
    MatrixX<Scalar> weight;  // out x in
    VectorX<Scalar> bias;    // out
  };
  std::vector<Layer> layers;

  Eigen::Index input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  Eigen::Index output_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }

  /// Same shapes, all zeros. Used for gradient accumulators.
  MlpParams zeros_like() const {
    MlpParams out;
    for (const auto& l : layers)
      out.layers.push_back({MatrixX<Scalar>::Zero(l.weight.rows(), l.weight.cols()),
                            VectorX<Scalar>::Zero(l.bias.size())});
    return out;
  }

  void set_zero() {
    for (auto& l : layers) {
      l.weight.setZero();
      l.bias.setZero();
    }
  }

  template <typename Other>
  MlpParams<Other> cast() const {
    MlpParams<Other> out;
    for (const auto& l : layers)
      out.layers.push_back({l.weight.template cast<Other>(), l.bias.template cast<Other>()});
    return out;
  }

  bool operator==(const MlpParams& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (size_t i = 0; i < layers.size(); ++i) {
      const auto& a = layers[i];
      const auto& b = o.layers[i];
      if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols()) return false;
      if (a.weight != b.weight || a.bias != b.bias) return false;
    }
    return true;
  }
};

/// Activations retained by one forward pass.
template <typename Scalar>
struct ForwardCache {
  std::vector<MatrixX<Scalar>> inputs;           // input to each layer
  std::vector<MatrixX<Scalar>> pre_activations;  // W x + b of each hidden layer
  bool empty() const { return inputs.empty(); }
};

template <typename Scalar>
struct MlpGradients {
  MlpParams<Scalar> params;
  MatrixX<Scalar> input;
};

/// Builds a net with layer widths dims = {in, hidden..., out}. Weights are
/// Kaiming-uniform in [-sqrt(6/in), sqrt(6/in)], biases zero.
template <typename Scalar>
MlpParams<Scalar> mlp_init(const std::vector<int>& dims, std::uint64_t seed) {
  if (dims.size() < 2) throw ShapeError("mlp_init: need at least input and output dims");
  for (int d : dims)
    if (d <= 0) throw ShapeError("mlp_init: layer dims must be positive");
  std::mt19937_64 rng(seed);
  MlpParams<Scalar> p;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    const int in = dims[i];
    const int out = dims[i + 1];
    const double bound = std::sqrt(6.0 / in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    typename MlpParams<Scalar>::Layer layer{MatrixX<Scalar>(out, in), VectorX<Scalar>::Zero(out)};
    for (int c = 0; c < in; ++c)
      for (int r = 0; r < out; ++r) layer.weight(r, c) = Scalar(dist(rng));
    p.layers.push_back(std::move(layer));
  }
  return p;
}

/// out = W_L relu(... relu(W_1 x + b_1) ...) + b_L. Optionally fills a cache
/// for mlp_backward.
template <typename Scalar>
MatrixX<Scalar> mlp_forward(const MlpParams<Scalar>& params, const MatrixX<Scalar>& input,
                            ForwardCache<Scalar>* cache = nullptr) {
  if (params.layers.empty()) throw ShapeError("mlp_forward: empty network");
  if (input.rows() != params.input_dim())
    throw ShapeError("mlp_forward: input dim " + std::to_string(input.rows()) + " != " +
                     std::to_string(params.input_dim()));
  if (cache) {
    cache->inputs.clear();
    cache->pre_activations.clear();
  }
  MatrixX<Scalar> x = input;
  const size_t n = params.layers.size();
  for (size_t i = 0; i < n; ++i) {
    const auto& layer = params.layers[i];
    MatrixX<Scalar> z = layer.weight * x;
    z.colwise() += layer.bias;
    if (cache) cache->inputs.push_back(std::move(x));
    if (i + 1 == n) return z;
    x = z.cwiseMax(Scalar(0));
    if (cache) cache->pre_activations.push_back(std::move(z));
  }
  return x;  // unreachable
}

/// Reverse pass. The ReLU subgradient at exactly zero is taken as zero.
template <typename Scalar>
MlpGradients<Scalar> mlp_backward(const MlpParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                                  const MatrixX<Scalar>& upstream) {
  const size_t n = params.layers.size();
  if (cache.inputs.size() != n || cache.pre_activations.size() + 1 != n)
    throw StateError("mlp_backward: cache does not match network depth");
  for (size_t i = 0; i < n; ++i)
    if (cache.inputs[i].rows() != params.layers[i].weight.cols() ||
        cache.inputs[i].cols() != upstream.cols())
      throw StateError("mlp_backward: cache shape does not match parameters");
  if (upstream.rows() != params.output_dim()) throw ShapeError("mlp_backward: upstream dim mismatch");

  MlpGradients<Scalar> g;
  g.params.layers.resize(n);
  MatrixX<Scalar> dz = upstream;
  for (size_t i = n; i-- > 0;) {
    const auto& layer = params.layers[i];
    g.params.layers[i].weight = dz * cache.inputs[i].transpose();
    g.params.layers[i].bias = dz.rowwise().sum();
    MatrixX<Scalar> dx = layer.weight.transpose() * dz;
    if (i == 0) {
      g.input = std::move(dx);
      break;
    }
    const auto& pre = cache.pre_activations[i - 1];
    dz = (pre.array() > Scalar(0)).select(dx, Scalar(0));
  }
  return g;
}

}  // namespace gtm
