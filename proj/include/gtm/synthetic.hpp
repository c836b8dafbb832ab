#pragma once

#include "gtm/dataset.hpp"
#include "gtm/model.hpp"
#include "gtm/rasterizer.hpp"
#include "gtm/sample.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace gtm {

/// A scene of explicit Gaussians (no networks) whose appearance changes with
/// time: every Gaussian's albedo is lit by a per-time light color, and the
/// object Gaussians are only present at `object_times`.
struct SyntheticOptions {
  int num_times = 2;
  int train_cameras_per_time = 8;
  int test_cameras_per_time = 2;
  int width = 64;
  int height = 64;
  int ground_gaussians = 140;
  int blob_gaussians = 40;  // per blob, three blobs
  int object_gaussians = 40;
  double camera_distance = 3.0;
  double focal = 88.0;
  std::uint64_t seed = 7;
};

struct SyntheticScene {
  SyntheticOptions options;
  Eigen::Matrix3Xf means;
  Eigen::Matrix3Xf scales;
  Eigen::Matrix4Xf rotations;
  Eigen::Matrix3Xf albedo;
  Eigen::VectorXf opacity;
  std::vector<bool> is_object;
  Eigen::Matrix3Xf lights;             // one light color per time
  std::vector<bool> object_visible;    // per time
  Eigen::AlignedBox3f object_bounds;   // of the object Gaussians' means
  TrainingData<float> data;

  Eigen::Index size() const { return means.cols(); }
  /// The ground-truth primitives as seen at time t.
  NeuralGaussianBatch<float> gaussians_at(int t) const;
  Image<float> render_truth(const Camera<float>& camera, int t) const;
};

/// Builds the scene and renders its train and test views. Rendered images are
/// quantized to 8 bits so they match what a PNG round trip would give.
SyntheticScene make_synthetic_scene(const SyntheticOptions& options = {});

/// Writes PNGs, a COLMAP text model (seed points = Gaussian means) and
/// manifest.json under `dir`. Returns the manifest path.
std::filesystem::path write_synthetic_dataset(const SyntheticScene& scene, const std::filesystem::path& dir);

}  // namespace gtm
