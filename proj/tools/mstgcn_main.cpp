// mstgcn command-line interface: train, eval, fuse, inspect, probe and
// gensynth subcommands over the SKL1 dataset format and MGCK checkpoints.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mstgcn/config.hpp"

namespace {

using namespace mstgcn;
namespace fs = std::filesystem;

Dataset load_checked(const std::string& path, const NetworkConfig& net_cfg) {
  Dataset data = load_dataset(path);
  if (data.manifest.topology != net_cfg.topology) {
    throw ConfigError(path + ": dataset topology \"" +
                      data.manifest.topology +
                      "\" does not match model topology \"" +
                      net_cfg.topology + "\"");
  }
  if (int(data.manifest.num_classes) != net_cfg.num_classes) {
    throw ConfigError(path + ": dataset has " +
                      std::to_string(data.manifest.num_classes) +
                      " classes, model expects " +
                      std::to_string(net_cfg.num_classes));
  }
  return data;
}

std::string metrics_suffix(const char* prefix, const Metrics& m) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), " %s_loss=%.6f %s_top1=%.4f %s_top5=%.4f",
                prefix, m.loss, prefix, m.top1, prefix, m.top5);
  return buf;
}

nlohmann::json metrics_json(const Metrics& m) {
  return {{"loss", m.loss}, {"top1", m.top1}, {"top5", m.top5}};
}

template <typename Real>
int run_train(const RunConfig& cfg, const std::string& data_path,
              const std::string& val_path, const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  Dataset train_data = load_checked(data_path, cfg.network);
  std::optional<Dataset> val_data;
  if (!val_path.empty()) val_data = load_checked(val_path, cfg.network);

  auto net = build_network<Real>(cfg.network);
  SgdNesterov<Real> opt(cfg.train);

  fs::create_directories(out_dir);
  const std::string checkpoint_path =
      (fs::path(out_dir) / "checkpoint.mgck").string();
  std::ofstream log((fs::path(out_dir) / "metrics.log").string());
  if (!log) throw IoError("cannot open metrics.log under " + out_dir);

  Metrics last_train;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    last_train = train_epoch(net, train_data, cfg.data, cfg.train, opt, epoch);
    std::string line = last_train.line(epoch, lr_at_epoch(cfg.train, epoch));
    if (val_data) {
      auto val = evaluate(net, *val_data, cfg.data, cfg.train.batch_size);
      line += metrics_suffix("val", val.metrics);
    }
    std::cout << line << "\n";
    log << line << "\n";
    log.flush();
  }
  save_checkpoint(net, checkpoint_path);

  nlohmann::json summary;
  summary["preset"] = cfg.preset;
  summary["epochs"] = cfg.train.epochs;
  summary["seed"] = cfg.seed;
  summary["checkpoint"] = checkpoint_path;
  summary["final_train"] = metrics_json(last_train);

  // Final validation metrics come from the checkpoint as written, so a
  // later `eval` on the same file reproduces them exactly.
  if (val_data) {
    load_checkpoint(net, checkpoint_path);
    auto final_val = evaluate(net, *val_data, cfg.data, cfg.train.batch_size);
    std::string line = "final" + metrics_suffix("val", final_val.metrics);
    std::cout << line << "\n";
    log << line << "\n";
    summary["final_val"] = metrics_json(final_val.metrics);
  }
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  summary["elapsed_seconds"] = elapsed;
  std::ofstream summary_os((fs::path(out_dir) / "summary.json").string());
  summary_os << summary.dump(2) << "\n";
  return 0;
}

template <typename Real>
int run_eval(const RunConfig& cfg, const std::string& checkpoint_path,
             const std::string& data_path, const std::string& scores_out) {
  Dataset data = load_checked(data_path, cfg.network);
  auto net = build_network<Real>(cfg.network);
  load_checkpoint(net, checkpoint_path);
  auto result = evaluate(net, data, cfg.data, cfg.train.batch_size);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "loss=%.6f top1=%.4f top5=%.4f",
                result.metrics.loss, result.metrics.top1, result.metrics.top5);
  std::cout << buf << "\n";
  if (!scores_out.empty()) {
    ScoreFile file;
    file.num_classes = cfg.network.num_classes;
    file.labels = result.labels;
    file.scores = result.scores;
    save_scores(file, scores_out);
  }
  return 0;
}

int run_fuse(const std::vector<std::string>& paths) {
  std::vector<ScoreFile> files;
  for (const auto& p : paths) files.push_back(load_scores(p));
  for (size_t i = 1; i < files.size(); ++i) {
    if (files[i].labels != files[0].labels) {
      throw DataError(paths[i] + ": label array differs from " + paths[0]);
    }
    if (files[i].num_classes != files[0].num_classes) {
      throw DimensionError(paths[i] + ": class count differs from " +
                           paths[0]);
    }
  }
  std::vector<std::vector<std::vector<double>>> streams;
  for (auto& f : files) streams.push_back(std::move(f.scores));
  auto fused = fuse_scores(streams);
  const auto& labels = files[0].labels;
  const int classes = files[0].num_classes;
  double loss = 0.0;
  for (size_t n = 0; n < fused.size(); ++n) {
    loss -= std::log(std::max(fused[n][labels[n]], 1e-300));
  }
  loss /= double(fused.empty() ? 1 : fused.size());
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "streams=%zu loss=%.6f top1=%.4f top5=%.4f", paths.size(),
                loss, topk_accuracy(fused, labels, 1),
                topk_accuracy(fused, labels, std::min(5, classes)));
  std::cout << buf << "\n";
  return 0;
}

int run_inspect(const RunConfig& cfg) {
  auto net = build_network<float>(cfg.network);
  auto report = count_parameters(net);
  std::printf("preset: %s\n", cfg.preset.empty() ? "<explicit blocks>"
                                                 : cfg.preset.c_str());
  std::printf("total trainable parameters: %lld\n",
              static_cast<long long>(report.total));
  std::printf("by group:\n");
  for (const auto& [group, n] : report.by_group) {
    std::printf("  %-12s %lld\n", group.c_str(), static_cast<long long>(n));
  }
  std::printf("by module:\n");
  for (size_t i = 0; i < net.blocks().size() + 2; ++i) {
    std::string name = i == 0 ? "input_bn"
                      : i <= net.blocks().size()
                          ? "block" + std::to_string(i)
                          : "classifier";
    auto it = report.by_module.find(name);
    if (it != report.by_module.end()) {
      std::printf("  %-12s %lld\n", name.c_str(),
                  static_cast<long long>(it->second));
    }
  }
  // Per-block sub-convolution weight counts against the full convolution.
  for (size_t i = 0; i < net.blocks().size(); ++i) {
    const BlockSpec& b = net.blocks()[i].spec;
    const int s = b.s;
    if (s <= 1) continue;
    if (b.spatial_kind == SpatialKind::ms || b.fused == FusedKind::str) {
      const long long full = 3ll * b.in_channels * b.out_channels;
      const long long frag =
          3ll * (b.in_channels / s) * (b.out_channels / s);
      std::printf(
          "block%zu spatial: sub-conv weights %lld = %lld / %d (s=%d) %s\n",
          i + 1, frag, full, s * s, s,
          frag * s * s == full ? "exact" : "MISMATCH");
    }
    if (b.temporal_kind == TemporalKind::mt || b.fused == FusedKind::str) {
      const long long full =
          1ll * b.out_channels * b.out_channels * b.kernel_t;
      const long long frag = 1ll * (b.out_channels / s) *
                             (b.out_channels / s) * b.kernel_t;
      std::printf(
          "block%zu temporal: sub-conv weights %lld = %lld / %d (s=%d) %s\n",
          i + 1, frag, full, s * s, s,
          frag * s * s == full ? "exact" : "MISMATCH");
    }
  }
  return 0;
}

int run_probe(const RunConfig& cfg, const std::string& axis, int source) {
  if (cfg.network.blocks.size() < 2) {
    throw ConfigError("probe needs the standard block schedule");
  }
  const BlockSpec& b = cfg.network.blocks[1];  // second block sets c and s
  const int s = std::max(1, b.s);
  const int width = b.out_channels;
  std::mt19937 rng(static_cast<uint32_t>(cfg.seed));
  if (axis == "spatial") {
    auto topo = build_topology(cfg.network.topology);
    auto adj = build_partitioned_adjacency(topo, cfg.network.alpha,
                                           cfg.network.normalization);
    MsGc<double> module(width, width, s, adj, rng);
    prepare_probe(module);
    const int joint = source < 0 ? topo.center_joint : source;
    auto supports = spatial_fragment_supports(module, 4, joint);
    std::printf("spatial probe: topology=%s joints=%d source=%d s=%d\n",
                cfg.network.topology.c_str(), topo.num_joints, joint, s);
    for (size_t i = 0; i < supports.size(); ++i) {
      std::printf("fragment %zu: %zu joints:", i + 1, supports[i].size());
      for (int v : supports[i]) std::printf(" %d", v);
      std::printf("\n");
    }
  } else if (axis == "temporal") {
    const int kt = b.kernel_t;
    const int frames = 4 * s * kt;
    MtGc<double> module(width, width, s, kt, 1, rng);
    prepare_probe(module);
    const int frame = source < 0 ? frames / 2 : source;
    auto supports = temporal_fragment_supports(module, 2, frames, frame);
    std::printf("temporal probe: kernel_t=%d frames=%d source=%d s=%d\n", kt,
                frames, frame, s);
    for (size_t i = 0; i < supports.size(); ++i) {
      std::printf("fragment %zu: %zu frames: [%d..%d]\n", i + 1,
                  supports[i].size(), supports[i].front(),
                  supports[i].back());
    }
  } else {
    throw ConfigError("probe axis must be \"spatial\" or \"temporal\"");
  }
  return 0;
}

int run_gensynth(int classes, int samples, const std::string& topology,
                 int frames, double noise, uint64_t seed,
                 const std::string& out) {
  auto data =
      generate_synthetic(classes, samples, topology, frames, seed,
                         static_cast<float>(noise));
  save_dataset(data, out);
  std::printf("wrote %zu samples (%d classes, topology %s, %d frames) to %s\n",
              data.samples.size(), classes, topology.c_str(), frames,
              out.c_str());
  return 0;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Multi-scale spatial-temporal graph convolutional network for "
      "skeleton-based action recognition"};
  app.require_subcommand(1);

  std::string config_path, data_path, val_path, out_path, checkpoint_path;
  std::string scores_out, axis = "spatial", topology = "ntu25";
  std::vector<std::string> score_paths;
  int classes = 4, samples = 25, frames = 300, source = -1;
  double noise = 0.05;
  uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "run configuration (JSON)")
      ->required();
  train->add_option("--data", data_path, "training dataset (SKL1)")
      ->required();
  train->add_option("--val", val_path, "validation dataset (SKL1)");
  train->add_option("--out", out_path, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path, "run configuration (JSON)")
      ->required();
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint (MGCK)")
      ->required();
  eval->add_option("--data", data_path, "dataset (SKL1)")->required();
  eval->add_option("--scores-out", scores_out, "write per-sample scores");

  auto* fuse = app.add_subcommand("fuse", "fuse stream score files");
  fuse->add_option("--scores", score_paths, "2-4 score files (or 1)")
      ->required()
      ->expected(1, 4);

  auto* inspect = app.add_subcommand("inspect", "parameter count report");
  inspect->add_option("--config", config_path, "run configuration (JSON)")
      ->required();

  auto* probe = app.add_subcommand("probe", "receptive-field probe");
  probe->add_option("--config", config_path, "run configuration (JSON)")
      ->required();
  probe->add_option("--axis", axis, "spatial | temporal")->required();
  probe->add_option("--source", source,
                    "impulse joint/frame (default: center)");

  auto* gensynth = app.add_subcommand("gensynth", "generate synthetic data");
  gensynth->add_option("--classes", classes, "number of classes (<= 8)");
  gensynth->add_option("--samples", samples, "samples per class");
  gensynth->add_option("--topology", topology, "skeleton topology");
  gensynth->add_option("--frames", frames, "frames per sample");
  gensynth->add_option("--noise", noise, "coordinate noise sigma");
  gensynth->add_option("--seed", seed, "generator seed");
  gensynth->add_option("--out", out_path, "output file (SKL1)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  return guarded([&]() -> int {
    if (app.got_subcommand(train)) {
      auto cfg = load_run_config(config_path);
      return cfg.precision == "f64"
                 ? run_train<double>(cfg, data_path, val_path, out_path)
                 : run_train<float>(cfg, data_path, val_path, out_path);
    }
    if (app.got_subcommand(eval)) {
      auto cfg = load_run_config(config_path);
      return cfg.precision == "f64"
                 ? run_eval<double>(cfg, checkpoint_path, data_path,
                                    scores_out)
                 : run_eval<float>(cfg, checkpoint_path, data_path,
                                   scores_out);
    }
    if (app.got_subcommand(fuse)) return run_fuse(score_paths);
    if (app.got_subcommand(inspect)) return run_inspect(load_run_config(config_path));
    if (app.got_subcommand(probe)) {
      return run_probe(load_run_config(config_path), axis, source);
    }
    if (app.got_subcommand(gensynth)) {
      return run_gensynth(classes, samples, topology, frames, noise, seed,
                          out_path);
    }
    return 1;
  });
}
