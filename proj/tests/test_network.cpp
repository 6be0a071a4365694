#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mstgcn/network.hpp"

using namespace mstgcn;

namespace {

NetworkConfig preset_cfg(const std::string& preset,
                         const std::string& topology, int classes,
                         int persons = 2, uint64_t seed = 1) {
  NetworkConfig cfg;
  cfg.topology = topology;
  cfg.num_classes = classes;
  cfg.max_persons = persons;
  cfg.seed = seed;
  cfg.blocks = preset_blocks(preset, cfg.in_channels);
  return cfg;
}

Tensor<double> random_input(const Shape& shape, uint32_t seed) {
  std::mt19937 rng(seed);
  return Tensor<double>::uniform(shape, -1.0, 1.0, rng);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::path(::testing::TempDir()) / name).string();
}

}  // namespace

// ---------------------------------------------------------------------------
// presets and validation

TEST(Presets, StgcnChannelSchedule) {
  auto blocks = preset_blocks("stgcn-64c-1s", 3);
  ASSERT_EQ(blocks.size(), 10u);
  const int expect[10] = {64, 64, 64, 64, 128, 128, 128, 256, 256, 256};
  for (int i = 0; i < 10; ++i) {
    EXPECT_EQ(blocks[i].out_channels, expect[i]) << "block " << i + 1;
    EXPECT_EQ(blocks[i].stride, (i == 4 || i == 7) ? 2 : 1);
    EXPECT_EQ(blocks[i].spatial_kind, SpatialKind::regular);
    EXPECT_EQ(blocks[i].temporal_kind, TemporalKind::regular);
  }
  EXPECT_FALSE(blocks[0].has_residual);
  EXPECT_TRUE(blocks[1].has_residual);
}

TEST(Presets, MsgcnBaseWidthIsCTimesS) {
  auto blocks = preset_blocks("msgcn-17c-4s", 3);
  const int expect[10] = {68, 68, 68, 68, 136, 136, 136, 272, 272, 272};
  for (int i = 0; i < 10; ++i) {
    EXPECT_EQ(blocks[i].out_channels, expect[i]);
  }
  EXPECT_EQ(blocks[0].spatial_kind, SpatialKind::regular);  // plain block 1
  for (int i = 1; i < 10; ++i) {
    EXPECT_EQ(blocks[i].spatial_kind, SpatialKind::ms);
    EXPECT_EQ(blocks[i].temporal_kind, TemporalKind::regular);
    EXPECT_EQ(blocks[i].s, 4);
  }
}

TEST(Presets, FamiliesMapToUnitKinds) {
  EXPECT_EQ(preset_blocks("mtgcn-24c-4s", 3)[2].temporal_kind,
            TemporalKind::mt);
  EXPECT_EQ(preset_blocks("mstgcn-30c-4s", 3)[2].spatial_kind,
            SpatialKind::ms);
  EXPECT_EQ(preset_blocks("mstgcn-30c-4s", 3)[2].temporal_kind,
            TemporalKind::mt);
  EXPECT_EQ(preset_blocks("strgcn-30c-4s", 3)[2].fused, FusedKind::str);
  EXPECT_THROW(preset_blocks("foo-1c-1s", 3), ConfigError);
  EXPECT_THROW(preset_blocks("mstgcn-4s", 3), ConfigError);
}

TEST(Validation, NineBlocksRejectedWithReport) {
  auto cfg = preset_cfg("stgcn-4c-1s", "chain:3", 4);
  cfg.blocks.pop_back();
  auto problems = validate_network_config(cfg);
  ASSERT_FALSE(problems.empty());
  EXPECT_NE(problems[0].find("10 blocks"), std::string::npos);
  EXPECT_THROW(build_network<double>(cfg), ConfigError);
}

TEST(Validation, AggregatesAllProblems) {
  auto cfg = preset_cfg("stgcn-4c-1s", "chain:3", 4);
  cfg.num_classes = 1;
  cfg.blocks[4].stride = 1;
  cfg.blocks[0].has_residual = true;
  auto problems = validate_network_config(cfg);
  EXPECT_GE(problems.size(), 3u);
}

// ---------------------------------------------------------------------------
// forward contract

TEST(Forward, FullSizeShapeContract) {
  auto cfg = preset_cfg("stgcn-8c-1s", "ntu25", 60);
  auto net = build_network<double>(cfg);
  auto x = random_input(Shape{2, 3, 300, 25, 2}, 3);
  auto logits = net.forward(x, Mode::eval);
  EXPECT_EQ(logits.shape(), (Shape{2, 60}));
}

TEST(Forward, EvalModeIsBitwiseDeterministic) {
  auto cfg = preset_cfg("mstgcn-4c-2s", "chain:5", 4, 1);
  auto net = build_network<double>(cfg);
  auto x = random_input(Shape{2, 3, 16, 5, 1}, 4);
  auto a = net.forward(x, Mode::eval);
  auto b = net.forward(x, Mode::eval);
  EXPECT_EQ(a.values(), b.values());
}

TEST(Forward, BatchPermutationPermutesLogits) {
  auto cfg = preset_cfg("mstgcn-4c-2s", "chain:5", 4, 1);
  auto net = build_network<double>(cfg);
  auto x = random_input(Shape{3, 3, 16, 5, 1}, 5);
  auto logits = net.forward(x, Mode::eval);

  // Reverse the batch.
  Tensor<double> rev(x.shape());
  const size_t sample = x.numel() / 3;
  for (int n = 0; n < 3; ++n) {
    std::copy_n(x.values().begin() + size_t(n) * sample, sample,
                rev.values_mut().begin() + size_t(2 - n) * sample);
  }
  auto logits_rev = net.forward(rev, Mode::eval);
  for (int n = 0; n < 3; ++n) {
    for (int k = 0; k < 4; ++k) {
      EXPECT_EQ(logits.at(n, k), logits_rev.at(2 - n, k));
    }
  }
}

TEST(Forward, PersonSlotPermutationInvariantAtInit) {
  // Freshly initialized per-slot batch-norm channels are identical, so
  // swapping person slots cannot change the person-mean.
  auto cfg = preset_cfg("stgcn-4c-1s", "chain:4", 3, 2);
  auto net = build_network<double>(cfg);
  auto x = random_input(Shape{2, 3, 8, 4, 2}, 6);
  Tensor<double> swapped(x.shape());
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int t = 0; t < 8; ++t) {
        for (int v = 0; v < 4; ++v) {
          swapped.set(x.at(n, c, t, v, 1), n, c, t, v, 0);
          swapped.set(x.at(n, c, t, v, 0), n, c, t, v, 1);
        }
      }
    }
  }
  auto a = net.forward(x, Mode::eval);
  auto b = net.forward(swapped, Mode::eval);
  for (size_t i = 0; i < a.values().size(); ++i) {
    EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
  }
}

TEST(Forward, DuplicatePersonEqualsSinglePersonMean) {
  // With both slots holding the same pose, the person-mean equals either
  // slot's features, so doubling a person is a no-op relative to a copy.
  auto cfg = preset_cfg("stgcn-4c-1s", "chain:4", 3, 2);
  auto net = build_network<double>(cfg);
  std::mt19937 rng(7);
  auto person = Tensor<double>::uniform(Shape{2, 3, 8, 4, 1}, -1, 1, rng);
  Tensor<double> dup(Shape{2, 3, 8, 4, 2});
  Tensor<double> dup2(Shape{2, 3, 8, 4, 2});
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int t = 0; t < 8; ++t) {
        for (int v = 0; v < 4; ++v) {
          const double val = person.at(n, c, t, v, 0);
          dup.set(val, n, c, t, v, 0);
          dup.set(val, n, c, t, v, 1);
          dup2.set(val, n, c, t, v, 0);
          dup2.set(val, n, c, t, v, 1);
        }
      }
    }
  }
  auto a = net.forward(dup, Mode::eval);
  auto b = net.forward(dup2, Mode::eval);
  EXPECT_EQ(a.values(), b.values());
}

TEST(Forward, SymmetricNormalizationVariantRuns) {
  auto cfg = preset_cfg("stgcn-4c-1s", "chain:4", 3, 1);
  cfg.normalization = AdjacencyNormalization::symmetric;
  auto net = build_network<double>(cfg);
  auto x = random_input(Shape{1, 3, 8, 4, 1}, 31);
  EXPECT_EQ(net.forward(x, Mode::eval).shape(), (Shape{1, 3}));

  // The two variants give different adjacencies, hence different logits.
  auto cfg_printed = preset_cfg("stgcn-4c-1s", "chain:4", 3, 1);
  auto net_printed = build_network<double>(cfg_printed);
  auto a = net.forward(x, Mode::eval);
  auto b = net_printed.forward(x, Mode::eval);
  bool any_diff = false;
  for (size_t i = 0; i < a.values().size(); ++i) {
    any_diff = any_diff || a.values()[i] != b.values()[i];
  }
  EXPECT_TRUE(any_diff);
}

TEST(Forward, RejectsBadExtents) {
  auto cfg = preset_cfg("stgcn-4c-1s", "chain:4", 3, 2);
  auto net = build_network<double>(cfg);
  EXPECT_THROW(net.forward(random_input(Shape{1, 3, 8, 5, 2}, 8), Mode::eval),
               DimensionError);  // wrong V
  EXPECT_THROW(net.forward(random_input(Shape{1, 3, 10, 4, 2}, 9), Mode::eval),
               DimensionError);  // T not divisible by 4
  EXPECT_THROW(net.forward(random_input(Shape{1, 3, 8, 4, 1}, 10), Mode::eval),
               DimensionError);  // wrong M
}

TEST(Forward, MatchesComposedPipelineOracle) {
  auto cfg = preset_cfg("stgcn-4c-1s", "chain:3", 3, 1);
  auto net = build_network<double>(cfg);
  const int N = 2, C = 3, T = 8, V = 3, M = 1;
  auto x = random_input(Shape{N, C, T, V, M}, 11);
  auto got = net.forward(x, Mode::eval);

  NoGradGuard guard;
  auto h = permute(x, {0, 4, 3, 1, 2});
  h = reshape(h, Shape{N, M * V * C, T});
  h = net.input_bn().forward(h, Mode::eval);
  h = reshape(h, Shape{N, M, V, C, T});
  h = permute(h, {0, 1, 3, 4, 2});
  h = reshape(h, Shape{N * M, C, T, V});
  for (auto& block : net.blocks()) h = block.forward(h, Mode::eval);
  h = global_avg_pool(h);
  const int feat = h.size(1);
  h = reshape(h, Shape{N, M, feat});
  h = permute(h, {0, 2, 1});
  h = reshape(h, Shape{N, feat, M, 1});
  h = global_avg_pool(h);
  auto expect = linear(h, net.classifier_weight(), net.classifier_bias());
  EXPECT_EQ(got.values(), expect.values());
}

// ---------------------------------------------------------------------------
// parameter accounting

TEST(CountParameters, SingleSgcArithmetic) {
  std::mt19937 rng(12);
  auto adj = build_partitioned_adjacency(build_topology("ntu25"));
  SpatialGraphConv<double> layer(64, 64, adj, rng);
  int64_t weights = 0;
  for (const auto& w : layer.weights) weights += w.numel();
  EXPECT_EQ(weights, 3 * 64 * 64);  // 12288
  SpatialGraphConv<double> sub(16, 16, adj, rng);
  int64_t sub_weights = 0;
  for (const auto& w : sub.weights) sub_weights += w.numel();
  EXPECT_EQ(sub_weights, 768);
  EXPECT_EQ(sub_weights, weights / 16);
}

TEST(CountParameters, TotalEqualsTrainableScalars) {
  auto cfg = preset_cfg("mstgcn-4c-2s", "chain:5", 4, 1);
  auto net = build_network<double>(cfg);
  auto report = count_parameters(net);
  int64_t manual = 0;
  for (const auto& p : net.state()) {
    if (p.trainable) manual += p.tensor.numel();
  }
  EXPECT_EQ(report.total, manual);
  int64_t group_sum = 0;
  for (const auto& [name, n] : report.by_group) group_sum += n;
  EXPECT_EQ(group_sum, report.total);
}

TEST(CountParameters, StgcnPresetNearPaperTotal) {
  auto cfg = preset_cfg("stgcn-64c-1s", "ntu25", 60);
  auto net = build_network<double>(cfg);
  auto report = count_parameters(net);
  EXPECT_GE(report.total, int64_t(3.1e6 * 0.8));
  EXPECT_LE(report.total, int64_t(3.1e6 * 1.2));
}

TEST(CountParameters, MsgcnPresetNearPaperTotal) {
  auto cfg = preset_cfg("msgcn-17c-4s", "ntu25", 60);
  auto net = build_network<double>(cfg);
  auto report = count_parameters(net);
  EXPECT_GE(report.total, int64_t(3.0e6 * 0.8));
  EXPECT_LE(report.total, int64_t(3.0e6 * 1.2));
}

// ---------------------------------------------------------------------------
// checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  auto cfg = preset_cfg("mstgcn-4c-2s", "chain:5", 4, 1, 42);
  auto net = build_network<float>(cfg);
  const auto path_a = temp_path("ckpt_a.mgck");
  const auto path_b = temp_path("ckpt_b.mgck");
  save_checkpoint(net, path_a);

  auto net2 = build_network<float>(preset_cfg("mstgcn-4c-2s", "chain:5", 4,
                                              1, 777));  // different init
  load_checkpoint(net2, path_a);
  for (size_t i = 0; i < net.state().size(); ++i) {
    EXPECT_EQ(net.state()[i].tensor.values(), net2.state()[i].tensor.values())
        << net.state()[i].name;
  }
  save_checkpoint(net2, path_b);
  std::ifstream fa(path_a, std::ios::binary), fb(path_b, std::ios::binary);
  std::string bytes_a((std::istreambuf_iterator<char>(fa)),
                      std::istreambuf_iterator<char>());
  std::string bytes_b((std::istreambuf_iterator<char>(fb)),
                      std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes_a, bytes_b);
}

TEST(Checkpoint, BadMagicAndTruncationDetected) {
  auto cfg = preset_cfg("stgcn-4c-1s", "chain:3", 3, 1);
  auto net = build_network<float>(cfg);
  const auto path = temp_path("ckpt_bad.mgck");
  {
    std::ofstream os(path, std::ios::binary);
    os.write("NOPE", 4);
  }
  EXPECT_THROW(load_checkpoint(net, path), FormatError);

  save_checkpoint(net, path);
  std::ifstream is(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
  is.close();
  bytes.resize(bytes.size() / 2);
  std::ofstream(path, std::ios::binary).write(bytes.data(), bytes.size());
  EXPECT_THROW(load_checkpoint(net, path), FormatError);
}

TEST(Checkpoint, MismatchedNetworkRejected) {
  auto net_a = build_network<float>(preset_cfg("stgcn-4c-1s", "chain:3", 3, 1));
  auto net_b = build_network<float>(preset_cfg("stgcn-8c-1s", "chain:3", 3, 1));
  const auto path = temp_path("ckpt_mismatch.mgck");
  save_checkpoint(net_a, path);
  EXPECT_THROW(load_checkpoint(net_b, path), ConfigError);
}

TEST(Checkpoint, UniqueParameterNames) {
  auto cfg = preset_cfg("strgcn-4c-2s", "chain:5", 4, 1);
  auto net = build_network<double>(cfg);
  std::set<std::string> names;
  for (const auto& p : net.state()) {
    EXPECT_TRUE(names.insert(p.name).second) << "duplicate " << p.name;
  }
  // spec-style name paths exist
  bool found_frag_weight = false;
  for (const auto& p : net.state()) {
    if (p.name.find(".strgc.frag2.sgc.w_centrifugal") != std::string::npos) {
      found_frag_weight = true;
    }
  }
  EXPECT_TRUE(found_frag_weight);
}

// ---------------------------------------------------------------------------
// probes

TEST(Probe, SingleFragmentModuleMatchesPlainConvSupport) {
  std::mt19937 rng(13);
  MtGc<double> module(4, 4, 1, 9, 1, rng);
  prepare_probe(module);
  auto supports = temporal_fragment_supports(module, 3, 40, 20);
  ASSERT_EQ(supports.size(), 1u);
  EXPECT_EQ(int(supports[0].size()), 9);
  EXPECT_EQ(supports[0].front(), 16);
  EXPECT_EQ(supports[0].back(), 24);
}

TEST(Probe, MtGcSupportsMatchDerivedWidths) {
  std::mt19937 rng(14);
  MtGc<double> module(8, 8, 4, 9, 1, rng);
  prepare_probe(module);
  auto supports = temporal_fragment_supports(module, 2, 80, 40);
  std::vector<int> widths;
  for (const auto& s : supports) widths.push_back(int(s.size()));
  EXPECT_EQ(widths, (std::vector<int>{9, 17, 25, 33}));
}

TEST(Probe, NetworkBlockOutputsGrowOneHopPerPlainBlock) {
  // With plain spatial units each block expands the joint support by one
  // hop, so block i covers the radius-i ball around the impulse.
  auto cfg = preset_cfg("stgcn-4c-1s", "chain:11", 3, 1);
  auto net = build_network<double>(cfg);
  prepare_probe(net);
  auto dists = hop_distances(net.topology());
  const int source = 5;
  auto supports = block_output_supports(net, ProbeAxis::spatial, 8, source);
  ASSERT_EQ(supports.size(), 10u);
  for (int b = 0; b < 10; ++b) {
    std::vector<int> ball;
    for (int v = 0; v < 11; ++v) {
      if (dists.at(source, v) <= b + 1) ball.push_back(v);
    }
    EXPECT_EQ(supports[b], ball) << "block " << b + 1;
  }
}

TEST(Probe, NetworkBlockSupportsAreMonotone) {
  auto cfg = preset_cfg("mstgcn-4c-2s", "chain:9", 3, 1);
  auto net = build_network<double>(cfg);
  prepare_probe(net);
  auto supports = block_output_supports(net, ProbeAxis::spatial, 8, 0);
  for (size_t b = 1; b < supports.size(); ++b) {
    EXPECT_TRUE(std::includes(supports[b].begin(), supports[b].end(),
                              supports[b - 1].begin(),
                              supports[b - 1].end()))
        << "block " << b + 1;
  }
}
