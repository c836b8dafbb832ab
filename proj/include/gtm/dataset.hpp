#pragma once

#include "gtm/camera.hpp"
#include "gtm/common.hpp"
#include "gtm/sample.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace gtm {

namespace fs = std::filesystem;

// ---- PNG ------------------------------------------------------------------

/// Reads an 8-bit RGB or RGBA PNG into [0, 1]; alpha is dropped.
/// Throws FormatError for other bit depths or color types.
Image<float> image_read(const fs::path& path);

/// Writes an 8-bit RGB PNG, quantizing with round-half-up after clamping to [0, 1].
void image_write(const fs::path& path, const Image<float>& image);

/// The byte a channel value is written as.
inline std::uint8_t quantize_channel(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return std::uint8_t(std::floor(c * 255.0 + 0.5));
}

// ---- COLMAP text model ----------------------------------------------------

struct ColmapCamera {
  int id = 0;
  std::string model;
  int width = 0, height = 0;
  double fx = 0, fy = 0, cx = 0, cy = 0;
};

struct ColmapImage {
  int id = 0;
  std::string name;
  int camera_id = 0;
  Eigen::Vector4d qvec;  // w, x, y, z (world to camera)
  Eigen::Vector3d tvec;
};

struct SfmPointCloud {
  Eigen::Matrix3Xd positions;
  Eigen::Matrix3Xd colors;  // [0, 1]; empty if unavailable
};

struct ColmapModel {
  std::map<int, ColmapCamera> cameras;
  std::vector<ColmapImage> images;
  SfmPointCloud points;

  /// Camera record for the image with this name. Throws ConfigError if absent.
  Camera<double> camera_for(const std::string& image_name) const;
};

/// Parses cameras.txt, images.txt and points3D.txt from `dir`. Supports the
/// PINHOLE and SIMPLE_PINHOLE camera models.
ColmapModel load_colmap_text(const fs::path& dir);

/// Writes a COLMAP text model (no 2D observations).
void write_colmap_text(const fs::path& dir, const ColmapModel& model);

// ---- Scene manifest ---------------------------------------------------------

enum class Split { Train, Test };

struct ManifestEntry {
  fs::path image;       // resolved against the manifest's directory
  std::string time_tag;
  Split split = Split::Train;
  std::string camera;   // "colmap:<image_name>"
  int time_index = 0;
};

struct SceneManifest {
  fs::path path;
  fs::path sfm_dir;
  std::vector<ManifestEntry> entries;
  std::vector<std::string> time_tags;  // sorted ascending; index = time index
  ColmapModel colmap;

  int num_times() const { return int(time_tags.size()); }
  std::vector<const ManifestEntry*> split(Split s) const;
  Camera<double> camera(const ManifestEntry& e) const;
  TrainSample<float> load_sample(const ManifestEntry& e) const;
};

/// Distinct tags sorted ascending; returns the index of every input tag.
std::vector<int> assign_time_indices(const std::vector<std::string>& tags, std::vector<std::string>* sorted_tags = nullptr);

/// Loads and validates a manifest and its COLMAP model. Images are read lazily
/// by load_sample, but their existence is checked here.
SceneManifest load_manifest(const fs::path& path);

/// Reads every image of the manifest into memory.
TrainingData<float> load_training_data(const SceneManifest& manifest);

Split parse_split(const std::string& s);

}  // namespace gtm
