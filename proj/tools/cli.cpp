#include "cli.hpp"

#include "gtm/config.hpp"
#include "gtm/dataset.hpp"
#include "gtm/loss.hpp"
#include "gtm/optim.hpp"
#include "gtm/rasterizer.hpp"
#include "gtm/scene_io.hpp"
#include "gtm/synthetic.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>

namespace gtm::cli {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

/// Where a render's camera comes from.
struct CameraArgs {
  std::string colmap;  // "colmap:<image_name>"
  std::string manifest;
  std::vector<double> pose;        // R row-major, then t (world to camera)
  std::vector<double> intrinsics;  // fx fy cx cy
  std::string size;                // WxH

  void add_to(CLI::App* app) {
    app->add_option("--camera", colmap, "camera reference colmap:<image_name> (needs --manifest)");
    app->add_option("--pose", pose, "12 numbers: world-to-camera rotation (row-major) then translation")
        ->expected(12);
    app->add_option("--intrinsics", intrinsics, "fx fy cx cy")->expected(4);
    app->add_option("--size", size, "image size WxH");
  }
};

std::pair<int, int> parse_size(const std::string& s) {
  int w = 0, h = 0;
  char x = 0;
  std::istringstream in(s);
  if (!(in >> w >> x >> h) || x != 'x' || w <= 0 || h <= 0 || in.rdbuf()->in_avail() != 0)
    throw ConfigError("size must look like 256x256, got '" + s + "'");
  return {w, h};
}

Camera<float> resolve_camera(const CameraArgs& cam_args) {
  if (!cam_args.colmap.empty()) {
    if (cam_args.manifest.empty()) throw ConfigError("--camera colmap:<name> needs --manifest");
    const auto manifest = load_manifest(cam_args.manifest);
    ManifestEntry e;
    e.camera = cam_args.colmap;
    auto cam = manifest.camera(e);
    if (!cam_args.size.empty()) throw ConfigError("--size cannot be combined with a colmap camera");
    return cam.cast<float>();
  }
  if (cam_args.pose.empty() || cam_args.intrinsics.empty() || cam_args.size.empty())
    throw ConfigError("give either --camera colmap:<name> or all of --pose, --intrinsics and --size");
  Camera<double> c;
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) c.rotation(r, k) = cam_args.pose[size_t(3 * r + k)];
  c.translation = {cam_args.pose[9], cam_args.pose[10], cam_args.pose[11]};
  c.fx = cam_args.intrinsics[0];
  c.fy = cam_args.intrinsics[1];
  c.cx = cam_args.intrinsics[2];
  c.cy = cam_args.intrinsics[3];
  std::tie(c.width, c.height) = parse_size(cam_args.size);
  c.validate(1e-4);
  return c.cast<float>();
}

/// "t0:t1:a"
std::tuple<int, int, float> parse_alpha(const std::string& s) {
  int t0 = 0, t1 = 0;
  float a = 0;
  char c0 = 0, c1 = 0;
  std::istringstream in(s);
  if (!(in >> t0 >> c0 >> t1 >> c1 >> a) || c0 != ':' || c1 != ':' || in.rdbuf()->in_avail() != 0)
    throw ConfigError("--alpha must look like t0:t1:a, got '" + s + "'");
  return {t0, t1, a};
}

/// Order-independent digest of a batch's geometry, for checking that it
/// does not move with time.
std::uint64_t geometry_digest(const NeuralGaussianBatch<float>& b) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const float* p, Eigen::Index n) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p);
    for (Eigen::Index i = 0; i < n * Eigen::Index(sizeof(float)); ++i) h = (h ^ bytes[i]) * 1099511628211ull;
  };
  mix(b.means.data(), b.means.size());
  mix(b.scales.data(), b.scales.size());
  mix(b.rotations.data(), b.rotations.size());
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

RenderSettings settings_for(int threads) {
  RenderSettings s;
  s.threads = threads;
  return s;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string manifest, config, out, resume, encoder;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations, threads, until;
  bool no_adapt = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig cfg;
  if (!a.config.empty()) apply_config_file(cfg, a.config);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.iterations) cfg.iterations = *a.iterations;
  if (a.threads) cfg.threads = *a.threads;
  if (!a.encoder.empty()) cfg.model.encoder = parse_time_encoder(a.encoder);
  if (a.no_adapt) cfg.adapt = false;
  cfg.validate();

  const auto manifest = load_manifest(a.manifest);
  const auto data = load_training_data(manifest);
  if (cfg.model.scene_extent <= 0) cfg.model.scene_extent = point_cloud_extent(data.points);
  err << "# resolved config\n" << format_config(cfg);
  err << "# " << data.train.size() << " train / " << data.test.size() << " test views, " << data.num_times
      << " times\n";

  fs::create_directories(a.out);
  {
    std::ofstream c(fs::path(a.out) / "config.toml");
    c << format_config(cfg);
  }
  std::optional<Trainer<float>> trainer;
  if (a.resume.empty()) {
    trainer.emplace(data, cfg);
  } else {
    auto state = load_checkpoint(a.resume);
    err << "# resuming at iteration " << state.iteration << "\n";
    trainer.emplace(data, cfg, std::move(state));
  }
  const auto mode = a.resume.empty() ? std::ios::trunc : std::ios::app;
  std::ofstream metrics(fs::path(a.out) / "metrics.jsonl", std::ios::out | mode);
  std::ofstream timing(fs::path(a.out) / "timing.jsonl", std::ios::out | mode);
  const auto ckpt_path = fs::path(a.out) / "checkpoint.gtmc";
  const auto t0 = Clock::now();
  double last_report = 0;
  if (a.until && *a.until < trainer->state().iteration)
    throw ConfigError("--until " + std::to_string(*a.until) + " is before the checkpoint's iteration");
  trainer->run(a.until.value_or(-1), [&](const IterationLog& log) {
    json m = {{"iteration", log.iteration}, {"sample", log.sample}, {"time", log.time_index},
              {"loss", log.total},          {"l1", log.l1},         {"ssim_term", log.ssim_term},
              {"vol", log.vol},             {"anchors", log.anchors}, {"splats", log.splats}};
    metrics << m.dump() << '\n';
    timing << json{{"iteration", log.iteration}, {"wall_seconds", log.wall_seconds}}.dump() << '\n';
    if (cfg.checkpoint_interval > 0 && log.iteration % cfg.checkpoint_interval == 0)
      save_checkpoint(trainer->state(), ckpt_path);
    const double el = seconds_since(t0);
    if (el - last_report > 5 || log.iteration == cfg.iterations || log.iteration == a.until) {
      err << "iter " << log.iteration << " loss " << log.total << " anchors " << log.anchors << " (" << el << " s)\n";
      last_report = el;
    }
  });
  save_checkpoint(trainer->state(), ckpt_path);
  const auto scene_path = fs::path(a.out) / "scene.gtms";
  save_scene(trainer->model(), scene_path);

  double psnr_sum = 0;
  for (const auto& s : data.train)
    psnr_sum += psnr(render(trainer->model(), s.camera, TimeInput<float>::at(s.time_index), settings_for(cfg.threads))
                         .output.image,
                     s.image);
  err << "trained " << trainer->state().iteration << " iterations in " << seconds_since(t0) << " s\n";
  out << json{{"iterations", trainer->state().iteration},
              {"anchors", trainer->model().anchors.size()},
              {"train_psnr", psnr_sum / double(data.train.size())},
              {"scene", scene_path.string()},
              {"checkpoint", ckpt_path.string()}}
             .dump()
      << '\n';
  return 0;
}

// ---- render -------------------------------------------------------------------

struct RenderArgs {
  std::string scene, out, alpha;
  std::optional<int> time;
  CameraArgs camera;
  int threads = 1;
};

int cmd_render(const RenderArgs& a, std::ostream& out, std::ostream& err) {
  const auto model = load_scene(a.scene);
  const auto camera = resolve_camera(a.camera);
  if (a.time && !a.alpha.empty()) throw ConfigError("give either --time or --alpha, not both");
  TimeInput<float> time = TimeInput<float>::at(a.time.value_or(0));
  if (!a.alpha.empty()) {
    const auto [t0, t1, w] = parse_alpha(a.alpha);
    time = blended_time(model, t0, t1, w);
  } else {
    (void)resolve_time_vector(model, time);  // range check before any work
  }
  const auto r = render(model, camera, time, settings_for(a.threads));
  image_write(a.out, r.output.image);
  err << "rendered " << r.output.splats.size() << " splats to " << a.out << "\n";
  out << json{{"out", a.out}, {"splats", r.output.splats.size()}, {"width", camera.width}, {"height", camera.height}}
             .dump()
      << '\n';
  return 0;
}

// ---- eval -----------------------------------------------------------------------

struct EvalArgs {
  std::string scene, manifest, split = "test";
  int threads = 1;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const auto model = load_scene(a.scene);
  const auto manifest = load_manifest(a.manifest);
  const auto split = parse_split(a.split);
  const auto entries = manifest.split(split);
  if (entries.empty()) throw ConfigError("split '" + a.split + "' has no views");
  if (manifest.num_times() != model.num_times)
    throw ConfigError("manifest has " + std::to_string(manifest.num_times()) + " times, scene has " +
                      std::to_string(model.num_times));
  json views = json::array();
  double psnr_sum = 0, ssim_sum = 0;
  for (const auto* e : entries) {
    const auto s = manifest.load_sample(*e);
    const auto img = render(model, s.camera, TimeInput<float>::at(s.time_index), settings_for(a.threads)).output.image;
    const double p = psnr(img, s.image);
    const double q = ssim(img, s.image, false).value;
    psnr_sum += p;
    ssim_sum += q;
    views.push_back({{"view", s.name}, {"time", s.time_index}, {"psnr", p}, {"ssim", q}});
  }
  const double n = double(entries.size());
  err << a.split << ": " << entries.size() << " views, mean PSNR " << psnr_sum / n << " dB, mean SSIM "
      << ssim_sum / n << "\n";
  out << json{{"split", a.split}, {"mean_psnr", psnr_sum / n}, {"mean_ssim", ssim_sum / n}, {"views", views}}.dump()
      << '\n';
  return 0;
}

// ---- interpolate -----------------------------------------------------------------

struct InterpolateArgs {
  std::string scene, out;
  int from = 0, to = 1, steps = 16;
  CameraArgs camera;
  int threads = 1;
};

int cmd_interpolate(const InterpolateArgs& a, std::ostream& out, std::ostream& err) {
  if (a.steps < 1) throw ConfigError("--steps must be at least 1");
  const auto model = load_scene(a.scene);
  const auto camera = resolve_camera(a.camera);
  fs::create_directories(a.out);
  json frames = json::array();
  std::optional<std::uint64_t> first_digest;
  bool same_geometry = true;
  for (int i = 0; i < a.steps; ++i) {
    const float w = a.steps > 1 ? float(i) / float(a.steps - 1) : 0.0f;
    const auto r = render(model, camera, blended_time(model, a.from, a.to, w), settings_for(a.threads));
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03d.png", i);
    image_write(fs::path(a.out) / name, r.output.image);
    const auto digest = geometry_digest(r.batch);
    if (!first_digest) first_digest = digest;
    same_geometry = same_geometry && digest == *first_digest;
    frames.push_back({{"frame", name}, {"alpha", w}, {"splats", r.output.splats.size()}, {"geometry", hex(digest)}});
  }
  err << "wrote " << a.steps << " frames to " << a.out << (same_geometry ? "" : " (geometry changed!)") << "\n";
  out << json{{"frames", frames}, {"geometry_identical", same_geometry}}.dump() << '\n';
  return 0;
}

// ---- export ------------------------------------------------------------------------

struct ExportArgs {
  std::string checkpoint, out, fixture;
  int times = 2;
  std::uint64_t seed = 7;
};

int cmd_export(const ExportArgs& a, std::ostream& out, std::ostream& err) {
  if (!a.fixture.empty() == !a.checkpoint.empty()) throw ConfigError("give exactly one of --checkpoint or --fixture");
  if (!a.checkpoint.empty()) {
    if (a.out.empty()) throw ConfigError("--checkpoint needs --out <scene.gtms>");
    const auto state = load_checkpoint(a.checkpoint);
    save_scene(state.model, a.out);
    err << "exported iteration " << state.iteration << " to " << a.out << "\n";
    out << json{{"scene", a.out}, {"iteration", state.iteration}, {"anchors", state.model.anchors.size()}}.dump()
        << '\n';
    return 0;
  }
  SyntheticOptions opt;
  opt.num_times = a.times;
  opt.seed = a.seed;
  const auto scene = make_synthetic_scene(opt);
  const auto path = write_synthetic_dataset(scene, a.fixture);
  err << "wrote synthetic dataset (" << scene.size() << " Gaussians) to " << a.fixture << "\n";
  out << json{{"manifest", path.string()},
              {"gaussians", scene.size()},
              {"train_views", scene.data.train.size()},
              {"test_views", scene.data.test.size()}}
             .dump()
      << '\n';
  return 0;
}

// ---- bench -------------------------------------------------------------------------

struct BenchArgs {
  std::string scene, size = "256x256";
  int anchors = 2000, frames = 30, threads = 1;
  std::uint64_t seed = 0;
};

/// A model with random anchors in the unit ball whose heads give every
/// Gaussian positive opacity, for throughput runs without a trained scene.
SceneModel<float> bench_model(int anchors, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Eigen::Matrix3Xf pts(3, anchors);
  for (int i = 0; i < anchors; ++i) {
    Eigen::Vector3f p;
    do p = {u(rng), u(rng), u(rng)};
    while (p.norm() > 1.0f);
    pts.col(i) = p;
  }
  ModelConfig cfg;
  cfg.scene_extent = 1.0;
  auto m = init_scene_model(pts, cfg, 2, seed, 1e-4);
  for (Eigen::Index i = 0; i < m.anchors.size(); ++i)
    for (Eigen::Index r = 0; r < m.anchors.offsets.rows(); ++r) m.anchors.offsets(r, i) = u(rng);
  m.heads[Head::Opacity].layers.back().bias.setConstant(1.0f);
  return m;
}

int cmd_bench(const BenchArgs& a, std::ostream& out, std::ostream& err) {
  if (a.frames < 1) throw ConfigError("--frames must be at least 1");
  const auto model = a.scene.empty() ? bench_model(a.anchors, a.seed) : load_scene(a.scene);
  const auto [w, h] = parse_size(a.size);
  const Eigen::Vector3f centroid = model.anchors.centers.rowwise().mean();
  const float radius = 2.5f * float(model.config.scene_extent);
  const auto settings = settings_for(a.threads);
  std::vector<double> frame_s, decode_s, project_s, composite_s;
  std::size_t splats = 0;
  for (int f = 0; f < a.frames; ++f) {
    const float az = 2.0f * std::numbers::pi_v<float> * float(f) / float(a.frames);
    const Eigen::Vector3f eye = centroid + radius * Eigen::Vector3f(std::cos(az), std::sin(az), 0.4f);
    const auto cam = Camera<float>::look_at(eye, centroid, {0, 0, 1}, 0.9f * float(w), w, h);
    const auto t0 = Clock::now();
    const auto batch = decode_neural_gaussians(model, cam, TimeInput<float>::at(f % model.num_times));
    const auto t1 = Clock::now();
    auto proj = project(batch, cam, settings);
    const auto t2 = Clock::now();
    splats = proj.splats.size();
    const auto img = composite_forward(std::move(proj.splats), w, h, settings);
    const auto t3 = Clock::now();
    decode_s.push_back(std::chrono::duration<double>(t1 - t0).count());
    project_s.push_back(std::chrono::duration<double>(t2 - t1).count());
    composite_s.push_back(std::chrono::duration<double>(t3 - t2).count());
    frame_s.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); };
  auto sorted = frame_s;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted.size() % 2 ? sorted[sorted.size() / 2]
                                          : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
  const double total = mean(frame_s);
  err << "bench: " << a.frames << " frames at " << w << "x" << h << ", ~" << splats << " splats, mean "
      << 1.0 / total << " FPS\n";
  out << json{{"frames", a.frames},
              {"width", w},
              {"height", h},
              {"threads", a.threads},
              {"splats_last_frame", splats},
              {"mean_fps", 1.0 / total},
              {"median_fps", 1.0 / median},
              {"total_ms", 1e3 * total},
              {"stages_ms", {{"decode", 1e3 * mean(decode_s)},
                             {"project", 1e3 * mean(project_s)},
                             {"composite", 1e3 * mean(composite_s)}}}}
             .dump()
      << '\n';
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"train and render Gaussian scenes whose appearance changes over time", "gtm-cli"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a scene from a manifest");
  t->add_option("--manifest", train.manifest, "scene manifest JSON")->required();
  t->add_option("--config", train.config, "key = value config file");
  t->add_option("--out", train.out, "output directory")->required();
  t->add_option("--set", train.overrides, "override a config key (key=value), repeatable");
  t->add_option("--seed", train.seed);
  t->add_option("--iterations", train.iterations);
  t->add_option("--threads", train.threads);
  t->add_option("--encoder", train.encoder, "embedding or pe");
  t->add_option("--resume", train.resume, "checkpoint to continue from");
  t->add_option("--until", train.until, "stop at this iteration (schedules still follow --iterations)");
  t->add_flag("--no-adapt", train.no_adapt, "disable anchor growing and pruning");

  RenderArgs rend;
  auto* r = app.add_subcommand("render", "render one view of a scene");
  r->add_option("--scene", rend.scene)->required();
  r->add_option("--out", rend.out, "output PNG")->required();
  r->add_option("--time", rend.time, "time index");
  r->add_option("--alpha", rend.alpha, "t0:t1:a, render between two times");
  r->add_option("--manifest", rend.camera.manifest);
  r->add_option("--threads", rend.threads);
  rend.camera.add_to(r);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "PSNR and SSIM of a scene against a manifest split");
  e->add_option("--scene", ev.scene)->required();
  e->add_option("--manifest", ev.manifest)->required();
  e->add_option("--split", ev.split, "train or test");
  e->add_option("--threads", ev.threads);

  InterpolateArgs ip;
  auto* i = app.add_subcommand("interpolate", "render a fixed view while blending between two times");
  i->add_option("--scene", ip.scene)->required();
  i->add_option("--out", ip.out, "output directory")->required();
  i->add_option("--from", ip.from, "first time index");
  i->add_option("--to", ip.to, "second time index");
  i->add_option("--steps", ip.steps, "number of frames, endpoints included");
  i->add_option("--manifest", ip.camera.manifest);
  i->add_option("--threads", ip.threads);
  ip.camera.add_to(i);

  ExportArgs ex;
  auto* x = app.add_subcommand("export", "checkpoint to .gtms, or write the synthetic dataset");
  x->add_option("--checkpoint", ex.checkpoint);
  x->add_option("--out", ex.out, "output .gtms path");
  x->add_option("--fixture", ex.fixture, "directory for the synthetic dataset");
  x->add_option("--times", ex.times, "number of appearance states of the synthetic dataset");
  x->add_option("--seed", ex.seed);

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "decode and render throughput");
  b->add_option("--scene", bench.scene, "scene to benchmark (default: random model)");
  b->add_option("--anchors", bench.anchors, "anchor count of the random model");
  b->add_option("--frames", bench.frames);
  b->add_option("--size", bench.size, "WxH");
  b->add_option("--threads", bench.threads);
  b->add_option("--seed", bench.seed);

  std::vector<const char*> argv{"gtm-cli"};
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (t->parsed()) return cmd_train(train, out, err);
    if (r->parsed()) return cmd_render(rend, out, err);
    if (e->parsed()) return cmd_eval(ev, out, err);
    if (i->parsed()) return cmd_interpolate(ip, out, err);
    if (x->parsed()) return cmd_export(ex, out, err);
    if (b->parsed()) return cmd_bench(bench, out, err);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const FormatError& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const UnsupportedError& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const IndexError& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace gtm::cli
