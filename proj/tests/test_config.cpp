#include "gtm/config.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace gtm;

TEST(Config, ParsesKeysCommentsAndTables) {
  TrainConfig c;
  apply_config_text(c, R"(
# training
[train]
iterations = 1234   # trailing comment
lr_heads = 1e-3
adapt = false
encoder = "pe"
background = [0.1, 0.2, 0.3]
seed = 42
hidden_layers = 3
)");
  EXPECT_EQ(c.iterations, 1234);
  EXPECT_EQ(c.lr_heads, 1e-3);
  EXPECT_FALSE(c.adapt);
  EXPECT_EQ(c.model.encoder, TimeEncoder::Positional);
  EXPECT_EQ(c.background, Eigen::Vector3d(0.1, 0.2, 0.3));
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.model.hidden_layers, 3);
  // untouched keys keep their defaults
  EXPECT_EQ(c.lr_features, TrainConfig{}.lr_features);
}

TEST(Config, ErrorsNameTheLine) {
  auto message = [](const std::string& text) {
    TrainConfig c;
    try {
      apply_config_text(c, text, "cfg.toml");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("iterations = 5\nbogus_key = 1\n").find("cfg.toml:2"), std::string::npos);
  EXPECT_NE(message("iterations = five\n").find("cfg.toml:1"), std::string::npos);
  EXPECT_NE(message("\n\njust words\n").find("cfg.toml:3"), std::string::npos);
  EXPECT_NE(message("adapt = maybe\n").find("adapt"), std::string::npos);
  EXPECT_NE(message("background = [1, 2]\n").find("background"), std::string::npos);
  EXPECT_NE(message("encoder = \"fourier\"\n"), "");
  TrainConfig c;
  EXPECT_THROW(set_config_value(c, "nope", "1"), ConfigError);
  EXPECT_THROW(apply_config_file(c, "/nonexistent/cfg.toml"), ConfigError);
}

TEST(Config, ValidationRejectsNonsense) {
  TrainConfig c;
  c.iterations = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr_offsets = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.threads = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.adapt_interval = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, FormattedConfigParsesBackIdentically) {
  TrainConfig c;
  c.iterations = 77;
  c.lr_offsets = 0.123456789012345;
  c.background = {0.25, 1.0 / 3, 0.0};
  c.model.encoder = TimeEncoder::Positional;
  c.model.scene_extent = 2.5;
  c.seed = 9;
  const auto text = format_config(c);
  TrainConfig back;
  apply_config_text(back, text);
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(back.lr_offsets, c.lr_offsets);
  EXPECT_EQ(back.background, c.background);
  EXPECT_EQ(back.model, c.model);

  const auto dir = gtm::testing::scratch_dir("config_file");
  std::ofstream(dir / "c.toml") << text;
  TrainConfig from_file;
  apply_config_file(from_file, dir / "c.toml");
  EXPECT_EQ(format_config(from_file), text);
}
