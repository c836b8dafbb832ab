#include "gtm/rasterizer.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace gtm;
using gtm::testing::brute_force_composite;
using gtm::testing::numeric_gradient;
using gtm::testing::random_model;
using gtm::testing::random_splats;
using gtm::testing::relative_error;
using gtm::testing::sample_indices;
using gtm::testing::test_camera;

namespace {

Camera<double> identity_camera(int w = 64, int h = 64, double f = 100) {
  Camera<double> c;
  c.fx = c.fy = f;
  c.cx = w / 2.0;
  c.cy = h / 2.0;
  c.width = w;
  c.height = h;
  return c;
}

Splat2D<double> disc(double x, double y, double depth, double alpha, Eigen::Vector3d color, int index) {
  Splat2D<double> s;
  s.mean2d = {x, y};
  s.cov2d = {2.0, 0.0, 2.0};
  s.conic = {0.5, 0.0, 0.5};
  s.depth = depth;
  s.alpha_base = alpha;
  s.color = color;
  s.source_index = index;
  s.radius = 10;
  return s;
}

void set_cov(Splat2D<double>& s) {
  const double det = s.cov2d[0] * s.cov2d[2] - s.cov2d[1] * s.cov2d[1];
  s.conic = Eigen::Vector3d(s.cov2d[2], -s.cov2d[1], s.cov2d[0]) / det;
}

NeuralGaussianBatch<double> random_batch(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> g(0, 1);
  NeuralGaussianBatch<double> b;
  b.means.resize(3, n);
  b.scales.resize(3, n);
  b.rotations.resize(4, n);
  b.opacities.resize(n);
  b.colors.resize(3, n);
  b.anchor_index.assign(size_t(n), 0);
  for (int i = 0; i < n; ++i) {
    b.means.col(i) << 0.6 * (u(rng) - 0.5), 0.6 * (u(rng) - 0.5), 3 + u(rng);
    b.scales.col(i) << 0.05 + 0.15 * u(rng), 0.05 + 0.15 * u(rng), 0.05 + 0.15 * u(rng);
    b.rotations.col(i) = Eigen::Vector4d(g(rng), g(rng), g(rng), g(rng)).normalized();
    b.opacities[i] = 0.2 + 0.7 * u(rng);
    b.colors.col(i) << u(rng), u(rng), u(rng);
  }
  return b;
}

}  // namespace

TEST(Project, OnAxisExample) {
  const auto cam = identity_camera();
  Splat2D<double> s;
  ASSERT_TRUE(project_gaussian<double>({0, 0, 5}, {0.1, 0.1, 0.1}, {1, 0, 0, 0}, 0.7, cam, RenderSettings{}, s));
  EXPECT_NEAR(s.mean2d.x(), 32.0, 1e-12);
  EXPECT_NEAR(s.mean2d.y(), 32.0, 1e-12);
  EXPECT_NEAR(s.cov2d[0], 400 * 0.01 + 0.3, 1e-12);
  EXPECT_NEAR(s.cov2d[1], 0.0, 1e-12);
  EXPECT_NEAR(s.cov2d[2], 400 * 0.01 + 0.3, 1e-12);
  EXPECT_DOUBLE_EQ(s.depth, 5.0);
  EXPECT_DOUBLE_EQ(s.alpha_base, 0.7);
}

TEST(Project, Culling) {
  const auto cam = identity_camera();
  Splat2D<double> s;
  Projection<double> stats;
  EXPECT_FALSE(project_gaussian<double>({0, 0, -1}, {0.1, 0.1, 0.1}, {1, 0, 0, 0}, 0.5, cam, {}, s, &stats));
  EXPECT_FALSE(project_gaussian<double>({0, 0, 5}, {0.1, 0.1, 0.1}, {1, 0, 0, 0}, 0.0, cam, {}, s, &stats));
  EXPECT_FALSE(project_gaussian<double>({0, 0, 5}, {0.1, 0.1, 0.1}, {1, 0, 0, 0}, -0.3, cam, {}, s, &stats));
  EXPECT_EQ(stats.culled_depth, 1);
  EXPECT_EQ(stats.culled_opacity, 2);
  // opacity is capped
  ASSERT_TRUE(project_gaussian<double>({0, 0, 5}, {0.1, 0.1, 0.1}, {1, 0, 0, 0}, 0.999, cam, {}, s));
  EXPECT_DOUBLE_EQ(s.alpha_base, kMaxAlpha);
}

TEST(Composite, EmptySceneIsBackground) {
  RenderSettings st;
  st.background = {0.1, 0.2, 0.3};
  const auto out = composite_forward<double>({}, 20, 10, st);
  for (Eigen::Index p = 0; p < out.image.size(); ++p) {
    EXPECT_EQ(out.image.pixels(p, 0), 0.1);
    EXPECT_EQ(out.image.pixels(p, 2), 0.3);
    EXPECT_EQ(out.transmittance[p], 1.0);
  }
}

TEST(Composite, SingleSplatAtPixelCenter) {
  RenderSettings st;
  st.background = {0, 0, 1};
  const auto out = composite_forward<double>({disc(5.5, 7.5, 1, 0.5, {1, 0, 0}, 0)}, 16, 16, st);
  const auto px = out.image.pixel(5, 7);
  EXPECT_DOUBLE_EQ(px(0), 0.5);
  EXPECT_DOUBLE_EQ(px(1), 0.0);
  EXPECT_DOUBLE_EQ(px(2), 0.5);
  EXPECT_DOUBLE_EQ(out.transmittance[7 * 16 + 5], 0.5);
}

TEST(Composite, DepthOrderNotInputOrder) {
  RenderSettings st;
  const auto front = disc(4.5, 4.5, 1, 0.5, {1, 0, 0}, 0);
  const auto back = disc(4.5, 4.5, 2, 0.5, {0, 1, 0}, 1);
  const auto a = composite_forward<double>({front, back}, 8, 8, st);
  const auto b = composite_forward<double>({back, front}, 8, 8, st);
  EXPECT_DOUBLE_EQ(a.image.pixel(4, 4)(0), 0.5);
  EXPECT_DOUBLE_EQ(a.image.pixel(4, 4)(1), 0.25);
  EXPECT_TRUE((a.image.pixels == b.image.pixels).all());
}

TEST(Composite, MatchesBruteForceOracle) {
  std::mt19937_64 rng(17);
  for (int scene = 0; scene < 4; ++scene) {
    RenderSettings st;
    st.background = {0.2, 0.1, 0.3};
    const auto splats = random_splats<float>(rng, 150, 64, 64);
    const auto fast = composite_forward(splats, 64, 64, st);
    const auto ref = brute_force_composite(splats, 64, 64, st);
    EXPECT_LE((fast.image.pixels.cast<double>() - ref.pixels).abs().maxCoeff(), 2e-3);
  }
}

TEST(Composite, BackwardWithoutStateThrows) {
  RenderOutput<double> out;
  EXPECT_THROW(composite_backward(out, Image<double>(4, 4)), StateError);
  const auto ok = composite_forward<double>({}, 4, 4);
  EXPECT_THROW(composite_backward(ok, Image<double>(5, 4)), ShapeError);
}

TEST(Composite, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0, 1);
  const int w = 24, h = 20;
  RenderSettings st;
  st.thresholds = false;
  st.background = {0.3, 0.6, 0.1};
  std::vector<Splat2D<double>> splats;
  for (int i = 0; i < 6; ++i) {
    Splat2D<double> s;
    s.mean2d = {w * u(rng), h * u(rng)};
    s.cov2d = {10 + 20 * u(rng), 6 * (u(rng) - 0.5), 10 + 20 * u(rng)};
    set_cov(s);
    s.depth = 1 + u(rng);
    s.alpha_base = 0.2 + 0.7 * u(rng);
    s.color = {u(rng), u(rng), u(rng)};
    s.source_index = i;
    s.radius = 40;
    splats.push_back(s);
  }
  Image<double> weights(w, h);
  weights.pixels = Image<double>::Pixels::Random(w * h, 3);
  auto loss = [&] { return (composite_forward(splats, w, h, st).image.pixels * weights.pixels).sum(); };
  const auto out = composite_forward(splats, w, h, st);
  const auto g = composite_backward(out, weights);

  Eigen::VectorXd analytic(6 * 9), numeric(6 * 9);
  int k = 0;
  for (size_t i = 0; i < splats.size(); ++i) {
    auto& s = splats[i];
    double* fields[9] = {&s.color[0], &s.color[1], &s.color[2], &s.alpha_base, &s.mean2d[0],
                         &s.mean2d[1], &s.cov2d[0],  &s.cov2d[1],  &s.cov2d[2]};
    const double grads[9] = {g.color(0, i),  g.color(1, i),  g.color(2, i),  g.alpha_base[Eigen::Index(i)],
                             g.mean2d(0, i), g.mean2d(1, i), g.cov2d(0, i), g.cov2d(1, i), g.cov2d(2, i)};
    for (int f = 0; f < 9; ++f) {
      const double saved = *fields[f];
      const double hstep = 1e-6;
      *fields[f] = saved + hstep;
      set_cov(s);
      const double lp = loss();
      *fields[f] = saved - hstep;
      set_cov(s);
      const double lm = loss();
      *fields[f] = saved;
      set_cov(s);
      numeric[k] = (lp - lm) / (2 * hstep);
      analytic[k] = grads[f];
      ++k;
    }
  }
  EXPECT_LT(relative_error(analytic, numeric), 1e-3);
  // per-field check as well, so one large field cannot mask another
  for (int f = 0; f < 9; ++f) {
    Eigen::VectorXd a(6), n(6);
    for (int i = 0; i < 6; ++i) {
      a[i] = analytic[i * 9 + f];
      n[i] = numeric[i * 9 + f];
    }
    EXPECT_LT(relative_error(a, n, 1e-8), 1e-3) << "field " << f;
  }
}

TEST(Project, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(29);
  auto cam = identity_camera(32, 24, 40);
  cam.rotation = quaternion_to_rotation<double>({0.98, 0.1, -0.12, 0.05});
  cam.translation = {0.1, -0.05, 0.2};
  auto batch = random_batch(rng, 8);
  RenderSettings st;
  st.thresholds = false;
  Image<double> weights(cam.width, cam.height);
  weights.pixels = Image<double>::Pixels::Random(cam.width * cam.height, 3);
  auto loss = [&] {
    auto proj = project(batch, cam, st);
    return (composite_forward(std::move(proj.splats), cam.width, cam.height, st).image.pixels * weights.pixels).sum();
  };
  auto proj = project(batch, cam, st);
  ASSERT_EQ(proj.splats.size(), 8u);
  const auto out = composite_forward(proj.splats, cam.width, cam.height, st);
  const auto sg = composite_backward(out, weights);
  const auto gg = project_backward(out.splats, sg, batch, cam);

  auto check = [&](const char* what, auto& param, const auto& grad) {
    std::vector<Eigen::Index> all(size_t(param.size()));
    std::iota(all.begin(), all.end(), Eigen::Index(0));
    const Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(grad.data(), grad.size());
    EXPECT_LT(relative_error(a, numeric_gradient(loss, param.data(), all)), 1e-3) << what;
  };
  check("means", batch.means, gg.means);
  check("scales", batch.scales, gg.scales);
  check("opacities", batch.opacities, gg.opacities);
  check("colors", batch.colors, gg.colors);
  // the quaternion is normalized inside, so the radial component is zero
  check("rotations", batch.rotations, gg.rotations);
}

TEST(Project, IsotropicGaussianHasNoRotationGradient) {
  std::mt19937_64 rng(31);
  auto cam = identity_camera(32, 32, 40);
  auto batch = random_batch(rng, 3);
  for (int i = 0; i < 3; ++i) batch.scales.col(i).setConstant(0.1 + 0.05 * i);
  RenderSettings st;
  st.thresholds = false;
  auto proj = project(batch, cam, st);
  const auto out = composite_forward(proj.splats, cam.width, cam.height, st);
  Image<double> weights(32, 32);
  weights.pixels = Image<double>::Pixels::Random(32 * 32, 3);
  const auto gg = project_backward(out.splats, composite_backward(out, weights), batch, cam);
  EXPECT_LT(gg.rotations.cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_GT(gg.scales.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Render, ThreadCountDoesNotChangeResults) {
  auto m = random_model<float>(5, 30, 2, TimeEncoder::Embedding, 6);
  const auto cam = test_camera<float>(80, 64);
  RenderSettings one, many;
  many.threads = 4;
  const auto a = render(m, cam, TimeInput<float>::at(1), one);
  const auto b = render(m, cam, TimeInput<float>::at(1), many);
  ASSERT_TRUE((a.output.image.pixels == b.output.image.pixels).all());
  Image<float> g(80, 64);
  g.pixels = Image<float>::Pixels::Random(80 * 64, 3);
  const auto ga = composite_backward(a.output, g);
  const auto gb = composite_backward(b.output, g);
  EXPECT_EQ(ga.color, gb.color);
  EXPECT_EQ(ga.mean2d, gb.mean2d);
  EXPECT_EQ(ga.cov2d, gb.cov2d);
  EXPECT_EQ(ga.alpha_base, gb.alpha_base);
}

TEST(Render, NegativeOpacityGaussiansAreInvisible) {
  auto m = random_model<float>(6, 20, 2);
  const auto cam = test_camera<float>();
  const auto r = render(m, cam, TimeInput<float>::at(0));
  int negative = 0;
  for (Eigen::Index i = 0; i < r.batch.size(); ++i) negative += r.batch.opacities[i] <= 0;
  EXPECT_GT(negative, 0);
  EXPECT_EQ(r.culled_opacity, negative);
  for (const auto& s : r.output.splats) EXPECT_GT(r.batch.opacities[s.source_index], 0);
}
