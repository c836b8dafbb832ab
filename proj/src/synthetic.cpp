#include "gtm/synthetic.hpp"

#include "json.hpp"

#include <fstream>
#include <numbers>
#include <random>

namespace gtm {

namespace {

Vector4<float> random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Vector4d q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().cast<float>();
}

Camera<float> orbit_camera(const SyntheticOptions& o, double azimuth, double elevation) {
  const double r = o.camera_distance;
  const Eigen::Vector3d eye(r * std::cos(elevation) * std::cos(azimuth), r * std::cos(elevation) * std::sin(azimuth),
                            r * std::sin(elevation));
  return Camera<double>::look_at(eye, Eigen::Vector3d(0, 0, -0.45), Eigen::Vector3d(0, 0, 1), o.focal, o.width,
                                 o.height)
      .cast<float>();
}

std::string time_tag(int t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "time-%02d", t);
  return buf;
}

Image<float> quantized(Image<float> img) {
  img.pixels = img.pixels.unaryExpr([](float v) { return float(quantize_channel(v)) / 255.0f; });
  return img;
}

}  // namespace

NeuralGaussianBatch<float> SyntheticScene::gaussians_at(int t) const {
  if (t < 0 || t >= lights.cols()) throw IndexError("synthetic scene: time " + std::to_string(t) + " out of range");
  NeuralGaussianBatch<float> b;
  b.means = means;
  b.scales = scales;
  b.rotations = rotations;
  b.opacities = opacity;
  b.colors.resize(3, size());
  b.anchor_index.resize(size_t(size()));
  for (Eigen::Index i = 0; i < size(); ++i) {
    b.colors.col(i) = albedo.col(i).cwiseProduct(lights.col(t)).cwiseMin(1.0f);
    b.anchor_index[size_t(i)] = int(i);
    if (is_object[size_t(i)] && !object_visible[size_t(t)]) b.opacities[i] = -1.0f;
  }
  return b;
}

Image<float> SyntheticScene::render_truth(const Camera<float>& camera, int t) const {
  const auto batch = gaussians_at(t);
  RenderSettings settings;
  auto proj = project(batch, camera, settings);
  return composite_forward(std::move(proj.splats), camera.width, camera.height, settings).image;
}

SyntheticScene make_synthetic_scene(const SyntheticOptions& o) {
  if (o.num_times < 1 || o.train_cameras_per_time < 1) throw ConfigError("synthetic scene: need times and cameras");
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SyntheticScene s;
  s.options = o;
  const int n = o.ground_gaussians + 3 * o.blob_gaussians + o.object_gaussians;
  s.means.resize(3, n);
  s.scales.resize(3, n);
  s.rotations.resize(4, n);
  s.albedo.resize(3, n);
  s.opacity.resize(n);
  s.is_object.assign(size_t(n), false);
  int i = 0;

  // ground disk with four colored quadrants
  const Eigen::Vector3f quadrant[4] = {{0.85f, 0.8f, 0.7f}, {0.35f, 0.55f, 0.35f}, {0.7f, 0.7f, 0.75f},
                                       {0.55f, 0.35f, 0.3f}};
  for (int g = 0; g < o.ground_gaussians; ++g, ++i) {
    const double r = std::sqrt(u(rng)) * 1.1, a = 2 * std::numbers::pi * u(rng);
    s.means.col(i) << float(r * std::cos(a)), float(r * std::sin(a)), -0.6f;
    s.scales.col(i) << 0.14f, 0.14f, 0.015f;
    s.rotations.col(i) << 1, 0, 0, 0;
    const int q = int(std::floor(a / (std::numbers::pi / 2))) & 3;
    s.albedo.col(i) = quadrant[q];
    s.opacity[i] = 0.9f;
  }
  // three blobs on the ground
  const Eigen::Vector3f blob_center[3] = {{-0.45f, 0.35f, -0.3f}, {0.4f, 0.45f, -0.35f}, {-0.1f, -0.5f, -0.25f}};
  const Eigen::Vector3f blob_color[3] = {{0.9f, 0.3f, 0.25f}, {0.25f, 0.5f, 0.9f}, {0.9f, 0.8f, 0.2f}};
  const float blob_radius[3] = {0.28f, 0.22f, 0.3f};
  for (int b = 0; b < 3; ++b)
    for (int g = 0; g < o.blob_gaussians; ++g, ++i) {
      const double z = 2 * u(rng) - 1, a = 2 * std::numbers::pi * u(rng), rr = std::sqrt(1 - z * z);
      const Eigen::Vector3f dir(float(rr * std::cos(a)), float(rr * std::sin(a)), float(z));
      s.means.col(i) = blob_center[b] + blob_radius[b] * float(0.6 + 0.4 * u(rng)) * dir;
      s.scales.col(i) << float(0.06 + 0.04 * u(rng)), float(0.06 + 0.04 * u(rng)), float(0.04 + 0.03 * u(rng));
      s.rotations.col(i) = random_rotation(rng);
      s.albedo.col(i) = (blob_color[b] * float(0.85 + 0.15 * u(rng))).cwiseMin(1.0f);
      s.opacity[i] = 0.85f;
    }
  // the time-dependent object: a small box
  const Eigen::Vector3f box_center(0.35f, -0.25f, -0.4f);
  for (int g = 0; g < o.object_gaussians; ++g, ++i) {
    const Eigen::Vector3f p(float(u(rng) - 0.5), float(u(rng) - 0.5), float(u(rng) - 0.5));
    s.means.col(i) = box_center + p.cwiseProduct(Eigen::Vector3f(0.3f, 0.3f, 0.3f));
    s.scales.col(i) << 0.06f, 0.06f, 0.06f;
    s.rotations.col(i) << 1, 0, 0, 0;
    s.albedo.col(i) << 0.95f, 0.95f, 0.95f;
    s.opacity[i] = 0.9f;
    s.is_object[size_t(i)] = true;
    s.object_bounds.extend(Eigen::Vector3f(s.means.col(i)));
  }

  // per-time light colors between warm and cool
  s.lights.resize(3, o.num_times);
  s.object_visible.resize(size_t(o.num_times));
  const Eigen::Vector3f warm(1.0f, 0.8f, 0.55f), cool(0.55f, 0.75f, 1.05f);
  for (int t = 0; t < o.num_times; ++t) {
    const float a = o.num_times > 1 ? float(t) / float(o.num_times - 1) : 0.0f;
    s.lights.col(t) = (1 - a) * warm + a * cool;
    s.object_visible[size_t(t)] = t % 2 == 1;
  }

  // cameras: interleaved azimuths so the times jointly cover the orbit
  auto& d = s.data;
  d.num_times = o.num_times;
  for (int t = 0; t < o.num_times; ++t) d.time_tags.push_back(time_tag(t));
  const int total_train = o.num_times * o.train_cameras_per_time;
  for (int t = 0; t < o.num_times; ++t) {
    for (int c = 0; c < o.train_cameras_per_time; ++c) {
      const int slot = c * o.num_times + t;
      const double az = 2 * std::numbers::pi * slot / total_train;
      const double el = (c % 2 ? 0.55 : 0.4);
      TrainSample<float> smp;
      smp.name = time_tag(t) + "_train_" + std::to_string(c) + ".png";
      smp.camera = orbit_camera(o, az, el);
      smp.time_index = t;
      smp.image = quantized(s.render_truth(smp.camera, t));
      d.train.push_back(std::move(smp));
    }
    for (int c = 0; c < o.test_cameras_per_time; ++c) {
      const double slot = (c + 0.5) * total_train / double(o.test_cameras_per_time) + t + 0.5;
      const double az = 2 * std::numbers::pi * slot / total_train;
      TrainSample<float> smp;
      smp.name = time_tag(t) + "_test_" + std::to_string(c) + ".png";
      smp.camera = orbit_camera(o, az, 0.47);
      smp.time_index = t;
      smp.image = quantized(s.render_truth(smp.camera, t));
      d.test.push_back(std::move(smp));
    }
  }
  d.points = s.means;
  return s;
}

std::filesystem::path write_synthetic_dataset(const SyntheticScene& scene, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  ColmapModel colmap;
  nlohmann::json frames = nlohmann::json::array();
  int id = 1;
  auto add = [&](const TrainSample<float>& smp, const char* split) {
    const auto& c = smp.camera;
    ColmapCamera cam;
    cam.id = id;
    cam.model = "PINHOLE";
    cam.width = c.width;
    cam.height = c.height;
    cam.fx = c.fx;
    cam.fy = c.fy;
    cam.cx = c.cx;
    cam.cy = c.cy;
    colmap.cameras[id] = cam;
    ColmapImage im;
    im.id = id;
    im.name = smp.name;
    im.camera_id = id;
    im.qvec = rotation_to_quaternion<double>(c.rotation.cast<double>());
    im.tvec = c.translation.cast<double>();
    colmap.images.push_back(im);
    image_write(dir / "images" / smp.name, smp.image);
    frames.push_back({{"image", "images/" + smp.name},
                      {"time", scene.data.time_tags[size_t(smp.time_index)]},
                      {"split", split},
                      {"camera", "colmap:" + smp.name}});
    ++id;
  };
  for (const auto& smp : scene.data.train) add(smp, "train");
  for (const auto& smp : scene.data.test) add(smp, "test");
  colmap.points.positions = scene.means.cast<double>();
  colmap.points.colors = scene.albedo.cast<double>();
  write_colmap_text(dir / "sparse", colmap);
  nlohmann::json manifest = {{"sfm", "sparse"}, {"frames", frames}};
  const auto path = dir / "manifest.json";
  std::ofstream(path) << manifest.dump(2) << '\n';
  return path;
}

}  // namespace gtm
