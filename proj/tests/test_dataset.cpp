#include "gtm/dataset.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>
#include <json.hpp>
#include <png.h>

#include <fstream>

using namespace gtm;
using gtm::testing::scratch_dir;

namespace {

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << s;
}

/// Writes a PNG in a layout the reader must reject, through libpng directly.
void write_raw_png(const fs::path& p, png_uint_32 format, int w, int h) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(w);
  img.height = png_uint_32(h);
  img.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img), 100);
  ASSERT_NE(png_image_write_to_file(&img, p.c_str(), 0, buf.data(), 0, nullptr), 0);
}

ColmapModel three_view_model() {
  ColmapModel m;
  m.cameras[1] = {1, "PINHOLE", 40, 30, 50.0, 52.0, 20.0, 15.0};
  m.cameras[2] = {2, "SIMPLE_PINHOLE", 40, 30, 45.0, 45.0, 19.5, 14.5};
  for (int i = 0; i < 3; ++i) {
    const double az = 0.4 + 1.7 * i;
    const auto cam = Camera<double>::look_at({3 * std::cos(az), 3 * std::sin(az), 1.0}, Eigen::Vector3d::Zero(),
                                             {0, 0, 1}, 50.0, 40, 30);
    ColmapImage im;
    im.id = i + 1;
    im.name = "view_" + std::to_string(i) + ".png";
    im.camera_id = i == 2 ? 2 : 1;
    im.qvec = rotation_to_quaternion<double>(cam.rotation);
    im.tvec = cam.translation;
    m.images.push_back(im);
  }
  m.points.positions = Eigen::Matrix3Xd::Random(3, 5);
  return m;
}

/// A minimal dataset directory: COLMAP model plus one tiny image per frame.
struct ManifestFixture {
  fs::path dir;
  nlohmann::json frames = nlohmann::json::array();

  explicit ManifestFixture(const std::string& name) : dir(scratch_dir(name)) {
    write_colmap_text(dir / "sparse", three_view_model());
    fs::create_directories(dir / "images");
    for (int i = 0; i < 3; ++i) image_write(dir / "images" / ("view_" + std::to_string(i) + ".png"), Image<float>(40, 30));
  }
  void add(int view, const std::string& time, const std::string& split = "train") {
    frames.push_back({{"image", "images/view_" + std::to_string(view) + ".png"},
                      {"time", time},
                      {"split", split},
                      {"camera", "colmap:view_" + std::to_string(view) + ".png"}});
  }
  fs::path write() const {
    const auto p = dir / "manifest.json";
    std::ofstream(p) << nlohmann::json{{"sfm", "sparse"}, {"frames", frames}}.dump();
    return p;
  }
};

}  // namespace

TEST(Png, ReadsExactByteValues) {
  const auto dir = scratch_dir("png_exact");
  Image<float> img(2, 1);
  img.pixel(0, 0) << 1.0f, 0.0f, 128 / 255.0f;
  img.pixel(1, 0) << 0.2f, 0.4f, 0.6f;
  image_write(dir / "a.png", img);
  const auto back = image_read(dir / "a.png");
  ASSERT_EQ(back.width, 2);
  ASSERT_EQ(back.height, 1);
  EXPECT_EQ(back.pixel(0, 0)[0], 1.0f);
  EXPECT_EQ(back.pixel(0, 0)[1], 0.0f);
  EXPECT_EQ(back.pixel(0, 0)[2], 128 / 255.0f);
}

TEST(Png, RoundTripWithinHalfAStep) {
  const auto dir = scratch_dir("png_round");
  Image<float> img(17, 9);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(-0.1f, 1.1f);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = u(rng);
  image_write(dir / "r.png", img);
  const auto back = image_read(dir / "r.png");
  const Image<float>::Pixels clamped = img.pixels.cwiseMax(0.0f).cwiseMin(1.0f);
  EXPECT_LE((back.pixels - clamped).abs().maxCoeff(), 1.0f / 510 + 1e-6f);
}

TEST(Png, QuantizationRoundsHalfUp) {
  EXPECT_EQ(quantize_channel(0.5 / 255), 1);
  EXPECT_EQ(quantize_channel(0.49 / 255), 0);
  EXPECT_EQ(quantize_channel(-3.0), 0);
  EXPECT_EQ(quantize_channel(7.0), 255);
}

TEST(Png, RejectsUnsupportedLayouts) {
  const auto dir = scratch_dir("png_reject");
  write_raw_png(dir / "gray.png", PNG_FORMAT_GRAY, 4, 4);
  write_raw_png(dir / "wide.png", PNG_FORMAT_LINEAR_RGB, 4, 4);
  write_text(dir / "junk.png", "not a png");
  EXPECT_THROW(image_read(dir / "gray.png"), FormatError);
  EXPECT_THROW(image_read(dir / "wide.png"), FormatError);
  EXPECT_THROW(image_read(dir / "junk.png"), FormatError);
  EXPECT_THROW(image_read(dir / "missing.png"), ConfigError);
}

TEST(Png, AcceptsRgbaAndDropsAlpha) {
  const auto dir = scratch_dir("png_rgba");
  write_raw_png(dir / "rgba.png", PNG_FORMAT_RGBA, 3, 2);
  const auto img = image_read(dir / "rgba.png");
  EXPECT_EQ(img.width, 3);
  EXPECT_NEAR(img.pixel(2, 1)[1], 100 / 255.0f, 1e-7f);
}

TEST(Colmap, SimplePinholeSharesFocal) {
  const auto dir = scratch_dir("colmap_simple");
  write_text(dir / "cameras.txt", "# comment\n7 SIMPLE_PINHOLE 100 80 90.5 50 40\n");
  write_text(dir / "images.txt", "1 1 0 0 0 0.5 -1 2 7 a.png\n\n");
  write_text(dir / "points3D.txt", "1 0 0 5 255 0 0 0.1\n");
  const auto m = load_colmap_text(dir);
  const auto cam = m.camera_for("a.png");
  EXPECT_EQ(cam.fx, 90.5);
  EXPECT_EQ(cam.fy, 90.5);
  EXPECT_EQ(cam.cx, 50.0);
  EXPECT_TRUE(cam.rotation.isIdentity(0));
  EXPECT_EQ(cam.translation, Eigen::Vector3d(0.5, -1, 2));
  ASSERT_EQ(m.points.positions.cols(), 1);
  EXPECT_EQ(m.points.colors(0, 0), 1.0);
}

TEST(Colmap, RoundTripPreservesProjection) {
  const auto dir = scratch_dir("colmap_round");
  const auto model = three_view_model();
  write_colmap_text(dir, model);
  const auto back = load_colmap_text(dir);
  ASSERT_EQ(back.images.size(), 3u);
  const Eigen::Vector3d p(0.2, -0.3, 0.1);
  for (const auto& im : model.images) {
    const auto a = model.camera_for(im.name), b = back.camera_for(im.name);
    auto pix = [&](const Camera<double>& c) {
      const Eigen::Vector3d q = c.to_camera(p);
      return Eigen::Vector2d(c.fx * q.x() / q.z() + c.cx, c.fy * q.y() / q.z() + c.cy);
    };
    EXPECT_LT((pix(a) - pix(b)).norm(), 1e-9) << im.name;
  }
  EXPECT_LT((back.points.positions - model.points.positions).norm(), 1e-12);
}

TEST(Colmap, UnsupportedModelAndBadLines) {
  const auto dir = scratch_dir("colmap_bad");
  write_text(dir / "images.txt", "");
  write_text(dir / "points3D.txt", "");
  write_text(dir / "cameras.txt", "1 OPENCV 10 10 1 1 5 5 0 0 0 0\n");
  EXPECT_THROW(load_colmap_text(dir), UnsupportedError);
  write_text(dir / "cameras.txt", "# header\n\n1 PINHOLE 10 10 1 1 5\n");
  try {
    load_colmap_text(dir);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("cameras.txt:3"), std::string::npos) << e.what();
  }
  write_text(dir / "cameras.txt", "1 PINHOLE 10 10 1 1 5 5\n");
  write_text(dir / "images.txt", "1 1 0 0 0 0 0 0 1 a.png\n\n2 1 0 0 x 0 0 0 1 b.png\n\n");
  try {
    load_colmap_text(dir);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("images.txt:3"), std::string::npos) << e.what();
  }
  fs::remove(dir / "points3D.txt");
  EXPECT_THROW(load_colmap_text(dir), ConfigError);
}

TEST(Manifest, TimeTagsAreSortedToIndices) {
  EXPECT_EQ(assign_time_indices({"2021-06", "2019-01", "2021-06"}), (std::vector<int>{1, 0, 1}));
  ManifestFixture fx("manifest_tags");
  fx.add(0, "2021-06");
  fx.add(1, "2019-01");
  fx.add(2, "2021-06", "test");
  const auto m = load_manifest(fx.write());
  EXPECT_EQ(m.time_tags, (std::vector<std::string>{"2019-01", "2021-06"}));
  EXPECT_EQ(m.entries[0].time_index, 1);
  EXPECT_EQ(m.entries[1].time_index, 0);
  const auto data = load_training_data(m);
  EXPECT_EQ(data.train.size(), 2u);
  EXPECT_EQ(data.test.size(), 1u);
  EXPECT_EQ(data.num_times, 2);
  for (const auto& s : data.train) EXPECT_NE(s.name, "view_2.png");
  EXPECT_EQ(data.points.cols(), 5);
}

TEST(Manifest, FrameOrderDoesNotChangeIndices) {
  ManifestFixture a("manifest_order_a"), b("manifest_order_b");
  a.add(0, "t2");
  a.add(1, "t0");
  a.add(2, "t1");
  b.add(2, "t1");
  b.add(0, "t2");
  b.add(1, "t0");
  const auto ma = load_manifest(a.write()), mb = load_manifest(b.write());
  EXPECT_EQ(ma.time_tags, mb.time_tags);
  for (const auto& ea : ma.entries)
    for (const auto& eb : mb.entries)
      if (ea.image.filename() == eb.image.filename()) {
        EXPECT_EQ(ea.time_index, eb.time_index);
      }
}

TEST(Manifest, InvalidManifestsAreConfigErrors) {
  ManifestFixture only_test("manifest_only_test");
  only_test.add(0, "a", "test");
  EXPECT_THROW(load_manifest(only_test.write()), ConfigError);

  ManifestFixture dup("manifest_dup");
  dup.add(0, "a");
  dup.add(0, "b");
  EXPECT_THROW(load_manifest(dup.write()), ConfigError);

  ManifestFixture missing("manifest_missing");
  missing.add(0, "a");
  missing.frames.push_back({{"image", "images/nope.png"}, {"time", "a"}, {"camera", "colmap:view_1.png"}});
  EXPECT_THROW(load_manifest(missing.write()), ConfigError);

  ManifestFixture unknown_cam("manifest_camera");
  unknown_cam.frames.push_back({{"image", "images/view_0.png"}, {"time", "a"}, {"camera", "colmap:other.png"}});
  EXPECT_THROW(load_manifest(unknown_cam.write()), ConfigError);

  ManifestFixture bad_split("manifest_split");
  bad_split.add(0, "a", "validation");
  EXPECT_THROW(load_manifest(bad_split.write()), ConfigError);

  const auto dir = scratch_dir("manifest_syntax");
  write_text(dir / "manifest.json", "{\"sfm\": ");
  EXPECT_THROW(load_manifest(dir / "manifest.json"), ParseError);
  EXPECT_THROW(load_manifest(dir / "absent.json"), ConfigError);
}
