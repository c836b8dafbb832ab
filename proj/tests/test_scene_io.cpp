#include "gtm/scene_io.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace gtm;
using gtm::testing::random_model;
using gtm::testing::scratch_dir;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

void put_u32(std::vector<std::uint8_t>& b, size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + size_t(i)] = std::uint8_t(v >> (8 * i));
}

/// Tiny posed dataset built from a random model's own renders.
TrainingData<float> self_rendered_data(const SceneModel<float>& truth, int views) {
  TrainingData<float> d;
  d.num_times = truth.num_times;
  d.points = truth.anchors.centers;
  for (int t = 0; t < truth.num_times; ++t)
    for (int v = 0; v < views; ++v) {
      TrainSample<float> s;
      s.camera = gtm::testing::test_camera<float>(24, 24, 20.0f, 0.7 * v + 0.3 * t);
      s.image = render(truth, s.camera, TimeInput<float>::at(t)).output.image;
      s.time_index = t;
      d.train.push_back(std::move(s));
    }
  return d;
}

}  // namespace

TEST(SceneIo, RoundTripIsBitwise) {
  for (auto enc : {TimeEncoder::Embedding, TimeEncoder::Positional}) {
    const auto m = random_model<float>(1, 9, 3, enc);
    const auto bytes = encode_scene(m);
    const auto back = decode_scene(bytes);
    EXPECT_EQ(back, m);
    EXPECT_EQ(encode_scene(back), bytes);
  }
}

TEST(SceneIo, HeaderLayout) {
  const auto m = random_model<float>(2, 5, 4, TimeEncoder::Positional);
  const auto b = encode_scene(m);
  EXPECT_EQ(std::memcmp(b.data(), "GTMS", 4), 0);
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 0);
  EXPECT_EQ(b[6] & 1, 1);
  std::uint32_t n = 0;
  for (int i = 0; i < 4; ++i) n |= std::uint32_t(b[8 + size_t(i)]) << (8 * i);
  EXPECT_EQ(n, std::uint32_t(m.anchors.size()));
  // first payload float is the first anchor's x coordinate
  float x0;
  const size_t header = 4 + 2 + 2 + 7 * 4 + 3 * 4 + 4 + 5 * (3 + size_t(m.config.hidden_layers)) * 4;
  std::memcpy(&x0, b.data() + header, 4);
  EXPECT_EQ(x0, m.anchors.centers(0, 0));
}

TEST(SceneIo, RejectsCorruptFiles) {
  const auto good = encode_scene(random_model<float>(3, 4, 2));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_NE(error_of([&] { decode_scene(bad_magic); }).find("magic"), std::string::npos);

  auto bad_version = good;
  bad_version[4] = 9;
  EXPECT_NE(error_of([&] { decode_scene(bad_version); }).find("version 9"), std::string::npos);

  std::vector<std::uint8_t> header_cut(good.begin(), good.begin() + 20);
  EXPECT_NE(error_of([&] { decode_scene(header_cut); }).find("offset 20"), std::string::npos);

  std::vector<std::uint8_t> payload_cut(good.begin(), good.end() - 3);
  EXPECT_NE(error_of([&] { decode_scene(payload_cut); }).find("offset"), std::string::npos);

  auto wrong_n = good;
  put_u32(wrong_n, 8, 5);
  EXPECT_NE(error_of([&] { decode_scene(wrong_n); }).find("mismatch"), std::string::npos);

  auto huge_n = good;
  put_u32(huge_n, 8, 0xFFFFFFFFu);
  EXPECT_THROW(decode_scene(huge_n), FormatError);

  auto wrong_heads = good;
  put_u32(wrong_heads, 48, 4);
  EXPECT_THROW(decode_scene(wrong_heads), FormatError);

  EXPECT_THROW(decode_scene(std::vector<std::uint8_t>{}), FormatError);
}

TEST(SceneIo, FileHelpers) {
  const auto dir = scratch_dir("scene_files");
  const auto m = random_model<float>(4, 6, 2);
  save_scene(m, dir / "a.gtms");
  EXPECT_EQ(load_scene(dir / "a.gtms"), m);
  for (const auto& e : std::filesystem::directory_iterator(dir)) EXPECT_EQ(e.path().filename(), "a.gtms");
  EXPECT_THROW(load_scene(dir / "missing.gtms"), ConfigError);
}

TEST(Checkpoint, FreshStateRoundTrips) {
  const auto dir = scratch_dir("ckpt_fresh");
  TrainerState<float> st;
  st.model = random_model<float>(5, 6, 2);
  st.adam = make_adam_state(st.model);
  st.stats = AdaptStats<float>::zeros(st.model.k(), st.model.anchors.size());
  save_checkpoint(st, dir / "c.gtmc");
  const auto back = load_checkpoint(dir / "c.gtmc");
  EXPECT_EQ(back.iteration, 0);
  EXPECT_EQ(back.adam.step, 0);
  EXPECT_EQ(back.model, st.model);
  EXPECT_EQ(back.adam, st.adam);
  EXPECT_EQ(back.stats, st.stats);

  auto bytes = read_file(dir / "c.gtmc");
  bytes.push_back(0);
  write_file_atomic(dir / "t.gtmc", bytes);
  EXPECT_THROW(load_checkpoint(dir / "t.gtmc"), FormatError);
  bytes.resize(bytes.size() - 9);
  write_file_atomic(dir / "t.gtmc", bytes);
  EXPECT_THROW(load_checkpoint(dir / "t.gtmc"), FormatError);
  bytes[0] = 'Z';
  write_file_atomic(dir / "t.gtmc", bytes);
  EXPECT_THROW(load_checkpoint(dir / "t.gtmc"), FormatError);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const auto dir = scratch_dir("ckpt_resume");
  const auto data = self_rendered_data(random_model<float>(6, 10, 2), 3);
  TrainConfig cfg;
  cfg.iterations = 200;
  cfg.adapt_start = 40;
  cfg.adapt_interval = 40;
  cfg.seed = 3;

  Trainer<float> straight(data, cfg);
  straight.run();

  Trainer<float> first(data, cfg);
  first.run(100);
  save_checkpoint(first.state(), dir / "half.gtmc");
  Trainer<float> second(data, cfg, load_checkpoint(dir / "half.gtmc"));
  EXPECT_EQ(second.state().iteration, 100);
  second.run();

  EXPECT_EQ(second.state().iteration, 200);
  EXPECT_EQ(second.model(), straight.model());
  EXPECT_EQ(second.state().adam, straight.state().adam);
  EXPECT_EQ(second.state().stats, straight.state().stats);
}
