#include "gtm/dataset.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace gtm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void parse_fail(const fs::path& file, int line, const std::string& msg) {
  throw ParseError(file.string() + ":" + std::to_string(line) + ": " + msg);
}

std::ifstream open_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open " + p.string());
  return in;
}

std::map<int, ColmapCamera> parse_cameras(const fs::path& file) {
  auto in = open_text(file);
  std::map<int, ColmapCamera> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    ColmapCamera c;
    if (!(ss >> c.id >> c.model >> c.width >> c.height)) parse_fail(file, lineno, "expected CAMERA_ID MODEL WIDTH HEIGHT");
    std::vector<double> params;
    double v;
    while (ss >> v) params.push_back(v);
    if (!ss.eof()) parse_fail(file, lineno, "non-numeric camera parameter");
    if (c.model == "SIMPLE_PINHOLE") {
      if (params.size() != 3) parse_fail(file, lineno, "SIMPLE_PINHOLE needs 3 parameters (f cx cy)");
      c.fx = c.fy = params[0];
      c.cx = params[1];
      c.cy = params[2];
    } else if (c.model == "PINHOLE") {
      if (params.size() != 4) parse_fail(file, lineno, "PINHOLE needs 4 parameters (fx fy cx cy)");
      c.fx = params[0];
      c.fy = params[1];
      c.cx = params[2];
      c.cy = params[3];
    } else {
      throw UnsupportedError(file.string() + ":" + std::to_string(lineno) + ": unsupported camera model " + c.model);
    }
    if (c.width <= 0 || c.height <= 0 || !(c.fx > 0) || !(c.fy > 0)) parse_fail(file, lineno, "invalid camera values");
    out[c.id] = c;
  }
  return out;
}

std::vector<ColmapImage> parse_images(const fs::path& file) {
  auto in = open_text(file);
  std::vector<ColmapImage> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::istringstream ss(t);
    ColmapImage im;
    auto& q = im.qvec;
    auto& tv = im.tvec;
    if (!(ss >> im.id >> q[0] >> q[1] >> q[2] >> q[3] >> tv[0] >> tv[1] >> tv[2] >> im.camera_id >> im.name))
      parse_fail(file, lineno, "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME");
    if (!(q.norm() > 0)) parse_fail(file, lineno, "zero quaternion");
    out.push_back(im);
    // the following line holds the 2D observations and may be empty
    if (std::getline(in, line)) ++lineno;
  }
  return out;
}

SfmPointCloud parse_points(const fs::path& file) {
  auto in = open_text(file);
  std::vector<Eigen::Vector3d> pos, col;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    long long id;
    Eigen::Vector3d p;
    int r, g, b;
    if (!(ss >> id >> p[0] >> p[1] >> p[2] >> r >> g >> b))
      parse_fail(file, lineno, "expected POINT3D_ID X Y Z R G B ...");
    if (!p.allFinite()) parse_fail(file, lineno, "non-finite point");
    pos.push_back(p);
    col.emplace_back(r / 255.0, g / 255.0, b / 255.0);
  }
  SfmPointCloud pc;
  pc.positions.resize(3, Eigen::Index(pos.size()));
  pc.colors.resize(3, Eigen::Index(col.size()));
  for (size_t i = 0; i < pos.size(); ++i) {
    pc.positions.col(Eigen::Index(i)) = pos[i];
    pc.colors.col(Eigen::Index(i)) = col[i];
  }
  return pc;
}

}  // namespace

Camera<double> ColmapModel::camera_for(const std::string& image_name) const {
  const auto it = std::find_if(images.begin(), images.end(), [&](const ColmapImage& im) { return im.name == image_name; });
  if (it == images.end()) throw ConfigError("COLMAP model has no image named '" + image_name + "'");
  const auto cam_it = cameras.find(it->camera_id);
  if (cam_it == cameras.end())
    throw ConfigError("image '" + image_name + "' references missing camera " + std::to_string(it->camera_id));
  const auto& c = cam_it->second;
  Camera<double> cam;
  cam.fx = c.fx;
  cam.fy = c.fy;
  cam.cx = c.cx;
  cam.cy = c.cy;
  cam.width = c.width;
  cam.height = c.height;
  cam.rotation = quaternion_to_rotation<double>(it->qvec);
  cam.translation = it->tvec;
  cam.validate();
  return cam;
}

ColmapModel load_colmap_text(const fs::path& dir) {
  for (const char* f : {"cameras.txt", "images.txt", "points3D.txt"})
    if (!fs::exists(dir / f)) throw ConfigError("COLMAP directory " + dir.string() + " lacks " + f);
  ColmapModel m;
  m.cameras = parse_cameras(dir / "cameras.txt");
  m.images = parse_images(dir / "images.txt");
  m.points = parse_points(dir / "points3D.txt");
  return m;
}

void write_colmap_text(const fs::path& dir, const ColmapModel& model) {
  fs::create_directories(dir);
  std::ofstream cams(dir / "cameras.txt");
  cams << "# Camera list with one line of data per camera:\n"
       << "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n"
       << "# Number of cameras: " << model.cameras.size() << "\n"
       << std::setprecision(17);
  for (const auto& [id, c] : model.cameras) {
    cams << id << ' ' << c.model << ' ' << c.width << ' ' << c.height;
    if (c.model == "SIMPLE_PINHOLE")
      cams << ' ' << c.fx << ' ' << c.cx << ' ' << c.cy << '\n';
    else
      cams << ' ' << c.fx << ' ' << c.fy << ' ' << c.cx << ' ' << c.cy << '\n';
  }
  std::ofstream ims(dir / "images.txt");
  ims << "# Image list with two lines of data per image:\n"
      << "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n"
      << "#   POINTS2D[] as (X, Y, POINT3D_ID)\n"
      << "# Number of images: " << model.images.size() << "\n"
      << std::setprecision(17);
  for (const auto& im : model.images) {
    ims << im.id << ' ' << im.qvec[0] << ' ' << im.qvec[1] << ' ' << im.qvec[2] << ' ' << im.qvec[3] << ' '
        << im.tvec[0] << ' ' << im.tvec[1] << ' ' << im.tvec[2] << ' ' << im.camera_id << ' ' << im.name << "\n\n";
  }
  std::ofstream pts(dir / "points3D.txt");
  pts << "# 3D point list with one line of data per point:\n"
      << "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n"
      << "# Number of points: " << model.points.positions.cols() << "\n"
      << std::setprecision(17);
  const bool has_color = model.points.colors.cols() == model.points.positions.cols();
  for (Eigen::Index i = 0; i < model.points.positions.cols(); ++i) {
    const auto p = model.points.positions.col(i);
    int rgb[3] = {128, 128, 128};
    if (has_color)
      for (int c = 0; c < 3; ++c) rgb[c] = quantize_channel(model.points.colors(c, i));
    pts << i + 1 << ' ' << p[0] << ' ' << p[1] << ' ' << p[2] << ' ' << rgb[0] << ' ' << rgb[1] << ' ' << rgb[2]
        << " 0\n";
  }
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "' (expected train or test)");
}

std::vector<int> assign_time_indices(const std::vector<std::string>& tags, std::vector<std::string>* sorted_tags) {
  std::set<std::string> distinct(tags.begin(), tags.end());
  std::vector<std::string> sorted(distinct.begin(), distinct.end());
  std::vector<int> out;
  out.reserve(tags.size());
  for (const auto& t : tags)
    out.push_back(int(std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin()));
  if (sorted_tags) *sorted_tags = std::move(sorted);
  return out;
}

std::vector<const ManifestEntry*> SceneManifest::split(Split s) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (e.split == s) out.push_back(&e);
  return out;
}

Camera<double> SceneManifest::camera(const ManifestEntry& e) const {
  const std::string prefix = "colmap:";
  if (e.camera.rfind(prefix, 0) != 0) throw ConfigError("camera reference '" + e.camera + "' must start with colmap:");
  return colmap.camera_for(e.camera.substr(prefix.size()));
}

TrainSample<float> SceneManifest::load_sample(const ManifestEntry& e) const {
  TrainSample<float> s;
  s.name = e.image.filename().string();
  s.camera = camera(e).cast<float>();
  s.image = image_read(e.image);
  s.time_index = e.time_index;
  if (s.image.width != s.camera.width || s.image.height != s.camera.height)
    throw ConfigError("image " + e.image.string() + " size does not match its camera");
  return s;
}

SceneManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest " + path.string() + ": " + e.what());
  }
  SceneManifest m;
  m.path = path;
  const fs::path base = path.parent_path();
  try {
    m.sfm_dir = base / j.at("sfm").get<std::string>();
    std::set<fs::path> seen;
    std::vector<std::string> tags;
    for (const auto& f : j.at("frames")) {
      ManifestEntry e;
      e.image = base / f.at("image").get<std::string>();
      e.time_tag = f.at("time").get<std::string>();
      e.split = parse_split(f.value("split", std::string("train")));
      e.camera = f.at("camera").get<std::string>();
      const auto canonical = e.image.lexically_normal();
      if (!seen.insert(canonical).second) throw ConfigError("manifest lists image " + e.image.string() + " twice");
      if (!fs::exists(e.image)) throw ConfigError("manifest image not found: " + e.image.string());
      tags.push_back(e.time_tag);
      m.entries.push_back(std::move(e));
    }
    const auto idx = assign_time_indices(tags, &m.time_tags);
    for (size_t i = 0; i < idx.size(); ++i) m.entries[i].time_index = idx[i];
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest " + path.string() + ": " + e.what());
  }
  if (m.split(Split::Train).empty()) throw ConfigError("manifest " + path.string() + " has no train entries");
  m.colmap = load_colmap_text(m.sfm_dir);
  for (const auto& e : m.entries) (void)m.camera(e);
  return m;
}

TrainingData<float> load_training_data(const SceneManifest& manifest) {
  TrainingData<float> d;
  for (const auto* e : manifest.split(Split::Train)) d.train.push_back(manifest.load_sample(*e));
  for (const auto* e : manifest.split(Split::Test)) d.test.push_back(manifest.load_sample(*e));
  d.points = manifest.colmap.points.positions.cast<float>();
  d.num_times = manifest.num_times();
  d.time_tags = manifest.time_tags;
  return d;
}

}  // namespace gtm
