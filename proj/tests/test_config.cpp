#include <gtest/gtest.h>

#include "mstgcn/config.hpp"

using namespace mstgcn;
using nlohmann::json;

namespace {

json minimal_model() {
  return json::parse(R"({
    "model": {"preset": "mstgcn-8c-2s", "topology": "chain:9",
              "num_classes": 4}
  })");
}

}  // namespace

TEST(RunConfig, MinimalConfigGetsDocumentedDefaults) {
  auto cfg = parse_run_config(minimal_model());
  EXPECT_EQ(cfg.seed, 0u);
  EXPECT_EQ(cfg.network.in_channels, 3);
  EXPECT_EQ(cfg.network.max_persons, 2);
  EXPECT_EQ(cfg.network.normalization, AdjacencyNormalization::as_printed);
  EXPECT_EQ(cfg.network.blocks.size(), 10u);
  EXPECT_EQ(cfg.data.stream, StreamKind::joint);
  EXPECT_TRUE(cfg.data.center);
  EXPECT_EQ(cfg.data.pad_to, 300);
  EXPECT_FALSE(cfg.data.window.has_value());
  EXPECT_DOUBLE_EQ(cfg.train.lr0, 0.1);
  EXPECT_DOUBLE_EQ(cfg.train.momentum, 0.9);
  EXPECT_EQ(cfg.train.batch_size, 24);
  EXPECT_EQ(cfg.train.epochs, 110);
  EXPECT_EQ(cfg.train.decay_epochs, (std::vector<int>{50, 70, 90}));
  EXPECT_EQ(cfg.precision, "f32");
}

TEST(RunConfig, UnknownKeysRejectedEverywhere) {
  auto j = minimal_model();
  j["model"]["bogus"] = 1;
  EXPECT_THROW(parse_run_config(j), ConfigError);

  j = minimal_model();
  j["data"] = {{"stream", "joint"}, {"windowing", 150}};
  EXPECT_THROW(parse_run_config(j), ConfigError);

  j = minimal_model();
  j["train"] = {{"lr", 0.1}};
  EXPECT_THROW(parse_run_config(j), ConfigError);

  j = minimal_model();
  j["extra_section"] = json::object();
  EXPECT_THROW(parse_run_config(j), ConfigError);
}

TEST(RunConfig, ExactlyOneModelForm) {
  auto j = minimal_model();
  j["model"]["family"] = "mstgcn";
  EXPECT_THROW(parse_run_config(j), ConfigError);

  j = minimal_model();
  j["model"].erase("preset");
  EXPECT_THROW(parse_run_config(j), ConfigError);

  j = minimal_model();
  j["model"].erase("preset");
  j["model"]["family"] = "msgcn";
  j["model"]["c"] = 17;
  j["model"]["s"] = 4;
  auto cfg = parse_run_config(j);
  EXPECT_EQ(cfg.preset, "msgcn-17c-4s");
  EXPECT_EQ(cfg.network.blocks[1].out_channels, 68);
}

TEST(RunConfig, ExplicitBlockListParses) {
  auto j = minimal_model();
  j["model"].erase("preset");
  j["model"]["blocks"] = json::array();
  int in_ch = 3;
  for (int i = 0; i < 10; ++i) {
    const int out = i < 4 ? 8 : (i < 7 ? 16 : 32);
    json b{{"in_channels", in_ch},
           {"out_channels", out},
           {"stride", (i == 4 || i == 7) ? 2 : 1},
           {"residual", i != 0}};
    if (i > 0) {
      b["spatial"] = "ms";
      b["s"] = 2;
    }
    j["model"]["blocks"].push_back(b);
    in_ch = out;
  }
  auto cfg = parse_run_config(j);
  EXPECT_TRUE(cfg.preset.empty());
  EXPECT_EQ(validate_network_config(cfg.network).size(), 0u);
  EXPECT_EQ(cfg.network.blocks[1].spatial_kind, SpatialKind::ms);
}

TEST(RunConfig, LrBatchScalingIsOptIn) {
  auto j = minimal_model();
  j["train"] = {{"lr0", 0.1}, {"batch_size", 48}};
  EXPECT_DOUBLE_EQ(parse_run_config(j).train.lr0, 0.1);

  j["train"]["lr_batch_reference"] = 24;
  EXPECT_DOUBLE_EQ(parse_run_config(j).train.lr0, 0.2);
}

TEST(RunConfig, BadValuesReportKey) {
  auto j = minimal_model();
  j["train"] = {{"precision", "f16"}};
  EXPECT_THROW(parse_run_config(j), ConfigError);

  j = minimal_model();
  j["train"] = {{"decay_epochs", {90, 50}}};
  EXPECT_THROW(parse_run_config(j), ConfigError);

  j = minimal_model();
  j["model"]["normalization"] = "fancy";
  EXPECT_THROW(parse_run_config(j), ConfigError);
}
