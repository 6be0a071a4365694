#pragma once

#include <json.hpp>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mstgcn/data.hpp"
#include "mstgcn/network.hpp"

namespace mstgcn {

struct TrainConfig {
  double lr0 = 0.1;
  double momentum = 0.9;  // Nesterov
  int batch_size = 24;
  int epochs = 110;
  std::vector<int> decay_epochs{50, 70, 90};
  double decay_factor = 0.1;
  double weight_decay = 0.0;
  uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  for (size_t i = 0; i < cfg.decay_epochs.size(); ++i) {
    if (cfg.decay_epochs[i] >= cfg.epochs || cfg.decay_epochs[i] < 1) {
      throw ConfigError("decay epoch " + std::to_string(cfg.decay_epochs[i]) +
                        " outside (0, epochs)");
    }
    if (i > 0 && cfg.decay_epochs[i] <= cfg.decay_epochs[i - 1]) {
      throw ConfigError("decay_epochs must be strictly increasing");
    }
  }
}

/// Piecewise-constant schedule: lr0 * decay_factor^(decay epochs reached).
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 0 || epoch >= cfg.epochs) {
    throw ContractError("lr_at_epoch: epoch " + std::to_string(epoch) +
                        " outside [0, " + std::to_string(cfg.epochs) + ")");
  }
  double lr = cfg.lr0;
  for (int d : cfg.decay_epochs) {
    if (epoch >= d) lr *= cfg.decay_factor;
  }
  return lr;
}

/// SGD with Nesterov momentum. Per parameter, with g the gradient, p the
/// value, mu the momentum and wd the weight decay:
///   d = g + wd * p
///   v = mu * v + d
///   p = p - lr * (d + mu * v)
template <typename Real>
class SgdNesterov {
 public:
  SgdNesterov(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  explicit SgdNesterov(const TrainConfig& cfg)
      : SgdNesterov(cfg.momentum, cfg.weight_decay) {}

  int64_t step_count() const { return step_count_; }

  void step(std::vector<NamedTensor<Real>>& state, double lr) {
    size_t slot = 0;
    for (auto& p : state) {
      if (!p.trainable) continue;
      if (!p.tensor.requires_grad() || !p.tensor.has_grad()) {
        throw ContractError("optimizer step: parameter \"" + p.name +
                            "\" has no gradient");
      }
      if (slot == velocity_.size()) {
        velocity_.emplace_back(p.tensor.numel(), Real(0));
      }
      auto& v = velocity_[slot++];
      if (v.size() != p.tensor.values().size()) {
        throw ContractError("optimizer step: velocity/parameter size "
                            "mismatch for \"" + p.name + "\"");
      }
      const auto& g = p.tensor.grad();
      auto& vals = p.tensor.values_mut();
      const Real mu = Real(momentum_);
      const Real wd = Real(weight_decay_);
      const Real eta = Real(lr);
      for (size_t i = 0; i < vals.size(); ++i) {
        const Real d = g[i] + wd * vals[i];
        v[i] = mu * v[i] + d;
        vals[i] -= eta * (d + mu * v[i]);
      }
    }
    if (slot != velocity_.size()) {
      throw ContractError("optimizer step: parameter set changed size");
    }
    ++step_count_;
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<Real>> velocity_;
  int64_t step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Batch assembly

/// Per-sample preprocessing chain: person selection, center normalization,
/// stream derivation, replay padding, optional crop.
struct Preprocess {
  StreamKind stream = StreamKind::joint;
  bool center = true;
  int pad_to = 300;
  std::optional<int> window;
};

inline SkeletonSequence preprocess_sample(const SkeletonSequence& raw,
                                          const SkeletonTopology& topo,
                                          const Preprocess& pp,
                                          int max_persons, CropMode crop_mode,
                                          std::mt19937& rng) {
  SkeletonSequence seq = raw;
  if (seq.persons != max_persons) seq = select_top_persons(seq, max_persons);
  if (pp.center) seq = normalize_center(seq, topo);
  if (pp.stream != StreamKind::joint) seq = derive_stream(seq, pp.stream, topo);
  if (seq.valid_frames < pp.pad_to) seq = pad_replay(seq, pp.pad_to);
  if (pp.window) seq = crop_window(seq, *pp.window, crop_mode, rng);
  return seq;
}

template <typename Real>
Tensor<Real> assemble_batch(const std::vector<SkeletonSequence>& samples) {
  if (samples.empty()) throw DataError("assemble_batch: empty batch");
  const auto& first = samples.front();
  Tensor<Real> x(Shape{int(samples.size()), first.channels, first.frames,
                       first.joints, first.persons});
  auto& xv = x.values_mut();
  const size_t sample_size = size_t(first.numel());
  for (size_t n = 0; n < samples.size(); ++n) {
    if (samples[n].channels != first.channels ||
        samples[n].frames != first.frames ||
        samples[n].joints != first.joints ||
        samples[n].persons != first.persons) {
      throw DimensionError("assemble_batch: inconsistent sample shapes");
    }
    for (size_t i = 0; i < sample_size; ++i) {
      xv[n * sample_size + i] = Real(samples[n].values[i]);
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double loss = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  int num_classes = 0;
  std::vector<int64_t> confusion;  // [true * num_classes + predicted]

  std::string line(int epoch, double lr) const {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "epoch=%d lr=%.6g loss=%.6f top1=%.4f top5=%.4f", epoch, lr,
                  loss, top1, top5);
    return buf;
  }
};

/// Fraction of samples whose label is among the k highest scores; equal
/// scores rank by lower class index.
inline double topk_accuracy(const std::vector<std::vector<double>>& scores,
                            const std::vector<int>& labels, int k) {
  if (scores.size() != labels.size()) {
    throw ContractError("topk_accuracy: " + std::to_string(scores.size()) +
                        " score rows vs " + std::to_string(labels.size()) +
                        " labels");
  }
  if (scores.empty()) return 0.0;
  const int classes = int(scores.front().size());
  if (k < 1 || k > classes) {
    throw ContractError("topk_accuracy: k=" + std::to_string(k) +
                        " outside [1, " + std::to_string(classes) + "]");
  }
  int64_t hits = 0;
  std::vector<int> order(classes);
  for (size_t n = 0; n < scores.size(); ++n) {
    if (int(scores[n].size()) != classes) {
      throw DimensionError("topk_accuracy: ragged score rows");
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return scores[n][a] > scores[n][b];
    });
    for (int i = 0; i < k; ++i) {
      if (order[i] == labels[n]) {
        ++hits;
        break;
      }
    }
  }
  return double(hits) / double(scores.size());
}

namespace detail {

inline void tally_metrics(const std::vector<std::vector<double>>& scores,
                          const std::vector<int>& labels, double mean_loss,
                          int num_classes, Metrics& out) {
  out.loss = mean_loss;
  out.num_classes = num_classes;
  out.top1 = topk_accuracy(scores, labels, 1);
  out.top5 = topk_accuracy(scores, labels, std::min(5, num_classes));
  out.confusion.assign(size_t(num_classes) * num_classes, 0);
  for (size_t n = 0; n < scores.size(); ++n) {
    int best = 0;
    for (int k = 1; k < num_classes; ++k) {
      if (scores[n][k] > scores[n][best]) best = k;
    }
    out.confusion[size_t(labels[n]) * num_classes + best] += 1;
  }
}

inline uint32_t sample_rng_seed(uint64_t seed, int epoch, size_t index) {
  // Per-sample stream: the epoch reseeds the global stream, the sample
  // index is xored in, so order of assembly never matters.
  uint64_t mixed = seed ^ (uint64_t(epoch) * 0x9e3779b97f4a7c15ull) ^
                   (uint64_t(index) * 0xc2b2ae3d27d4eb4full);
  mixed ^= mixed >> 33;
  return static_cast<uint32_t>(mixed ^ (mixed >> 32));
}

template <typename Real>
std::vector<std::vector<double>> softmax_rows(const Tensor<Real>& logits) {
  const int N = logits.size(0), K = logits.size(1);
  std::vector<std::vector<double>> rows(N, std::vector<double>(K));
  for (int n = 0; n < N; ++n) {
    double m = double(logits.at(n, 0));
    for (int k = 1; k < K; ++k) m = std::max(m, double(logits.at(n, k)));
    double z = 0;
    for (int k = 0; k < K; ++k) {
      rows[n][k] = std::exp(double(logits.at(n, k)) - m);
      z += rows[n][k];
    }
    for (int k = 0; k < K; ++k) rows[n][k] /= z;
  }
  return rows;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training / evaluation loops

/// One pass over the training set: seeded shuffle (seed xor epoch),
/// minibatches with the last partial batch kept, cross-entropy loss and one
/// optimizer step per batch. Returns metrics measured on the training
/// batches as they were seen.
template <typename Real>
Metrics train_epoch(MstGcn<Real>& net, const Dataset& data,
                    const Preprocess& pp, const TrainConfig& cfg,
                    SgdNesterov<Real>& opt, int epoch) {
  if (data.samples.empty()) throw DataError("train_epoch: empty dataset");
  const int classes = net.config().num_classes;
  for (size_t i = 0; i < data.samples.size(); ++i) {
    if (data.samples[i].label < 0 || data.samples[i].label >= classes) {
      throw DataError("sample " + std::to_string(i) + ": label " +
                      std::to_string(data.samples[i].label) +
                      " out of range for " + std::to_string(classes) +
                      " classes");
    }
  }
  std::vector<size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937 shuffle_rng(
      static_cast<uint32_t>(cfg.seed ^ uint64_t(epoch)));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  const double lr = lr_at_epoch(cfg, epoch);
  double loss_sum = 0.0;
  std::vector<std::vector<double>> all_scores;
  std::vector<int> all_labels;
  for (size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
    const size_t end = std::min(order.size(), begin + cfg.batch_size);
    std::vector<SkeletonSequence> batch;
    std::vector<int> labels;
    batch.reserve(end - begin);
    for (size_t i = begin; i < end; ++i) {
      const size_t idx = order[i];
      std::mt19937 rng(detail::sample_rng_seed(cfg.seed, epoch, idx));
      batch.push_back(preprocess_sample(data.samples[idx], net.topology(), pp,
                                        net.config().max_persons,
                                        CropMode::random, rng));
      labels.push_back(data.samples[idx].label);
    }
    auto x = assemble_batch<Real>(batch);
    auto logits = net.forward(x, Mode::train);
    auto loss = cross_entropy(logits, labels);
    net.zero_grads();
    backward(loss);
    opt.step(net.state(), lr);

    loss_sum += double(loss.item()) * double(end - begin);
    auto scores = detail::softmax_rows(logits);
    for (auto& row : scores) all_scores.push_back(std::move(row));
    all_labels.insert(all_labels.end(), labels.begin(), labels.end());
  }
  Metrics metrics;
  detail::tally_metrics(all_scores, all_labels,
                        loss_sum / double(order.size()), classes, metrics);
  return metrics;
}

struct EvalResult {
  Metrics metrics;
  std::vector<std::vector<double>> scores;  // softmax rows per sample
  std::vector<int> labels;
};

/// Deterministic eval-mode pass in dataset order with centered crops.
template <typename Real>
EvalResult evaluate(MstGcn<Real>& net, const Dataset& data,
                    const Preprocess& pp, int batch_size = 24) {
  if (data.samples.empty()) throw DataError("evaluate: empty dataset");
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
  const int classes = net.config().num_classes;
  EvalResult result;
  double loss_sum = 0.0;
  std::mt19937 rng(0);  // centered crops never consume randomness
  for (size_t begin = 0; begin < data.samples.size(); begin += batch_size) {
    const size_t end = std::min(data.samples.size(), begin + batch_size);
    std::vector<SkeletonSequence> batch;
    std::vector<int> labels;
    for (size_t i = begin; i < end; ++i) {
      if (data.samples[i].label < 0 || data.samples[i].label >= classes) {
        throw DataError("sample " + std::to_string(i) + ": label " +
                        std::to_string(data.samples[i].label) +
                        " out of range for " + std::to_string(classes) +
                        " classes");
      }
      batch.push_back(preprocess_sample(data.samples[i], net.topology(), pp,
                                        net.config().max_persons,
                                        CropMode::center, rng));
      labels.push_back(data.samples[i].label);
    }
    auto x = assemble_batch<Real>(batch);
    auto logits = net.forward(x, Mode::eval);
    loss_sum += double(cross_entropy(logits, labels).item()) *
                double(end - begin);
    auto scores = detail::softmax_rows(logits);
    for (auto& row : scores) result.scores.push_back(std::move(row));
    result.labels.insert(result.labels.end(), labels.begin(), labels.end());
  }
  detail::tally_metrics(result.scores, result.labels,
                        loss_sum / double(data.samples.size()), classes,
                        result.metrics);
  return result;
}

// ---------------------------------------------------------------------------
// Score fusion

/// Unweighted elementwise mean of per-stream probability matrices.
inline std::vector<std::vector<double>> fuse_scores(
    const std::vector<std::vector<std::vector<double>>>& streams) {
  if (streams.empty()) throw ContractError("fuse_scores: no score matrices");
  const size_t rows = streams.front().size();
  const size_t cols = rows == 0 ? 0 : streams.front().front().size();
  for (const auto& s : streams) {
    if (s.size() != rows || (rows > 0 && s.front().size() != cols)) {
      throw DimensionError("fuse_scores: score matrices differ in shape");
    }
  }
  std::vector<std::vector<double>> fused(rows, std::vector<double>(cols, 0.0));
  for (const auto& s : streams) {
    for (size_t n = 0; n < rows; ++n) {
      if (s[n].size() != cols) {
        throw DimensionError("fuse_scores: ragged score matrix");
      }
      for (size_t k = 0; k < cols; ++k) fused[n][k] += s[n][k];
    }
  }
  for (auto& row : fused) {
    for (auto& v : row) v /= double(streams.size());
  }
  return fused;
}

// ---------------------------------------------------------------------------
// Score files: JSON with labels and per-sample probability rows.

struct ScoreFile {
  int num_classes = 0;
  std::vector<int> labels;
  std::vector<std::vector<double>> scores;
};

inline void save_scores(const ScoreFile& file, const std::string& path) {
  nlohmann::json j;
  j["num_classes"] = file.num_classes;
  j["labels"] = file.labels;
  j["scores"] = file.scores;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("failed writing " + path);
}

inline ScoreFile load_scores(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  ScoreFile file;
  try {
    file.num_classes = j.at("num_classes").get<int>();
    file.labels = j.at("labels").get<std::vector<int>>();
    file.scores = j.at("scores").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (file.labels.size() != file.scores.size()) {
    throw FormatError(path + ": labels/scores length mismatch");
  }
  return file;
}

}  // namespace mstgcn
