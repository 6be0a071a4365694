#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mstgcn/blocks.hpp"

namespace mstgcn {

/// Full description of a 10-block network.
struct NetworkConfig {
  std::string topology = "ntu25";
  int num_classes = 0;
  int in_channels = 3;
  int max_persons = 2;
  std::vector<BlockSpec> blocks;
  AdjacencyNormalization normalization = AdjacencyNormalization::as_printed;
  double alpha = 1e-3;
  uint64_t seed = 0;
};

/// Builds the standard 10-block schedule for a preset id of the form
/// "<family>-<c>c-<s>s" with family one of stgcn, msgcn, mtgcn, mstgcn,
/// strgcn. Per-fragment width c fixes the base block width at c*s; widths
/// double at blocks 5 and 8, which also stride the frame axis by 2. Block 1
/// always uses plain units and has no residual.
inline std::vector<BlockSpec> preset_blocks(const std::string& preset,
                                            int in_channels,
                                            int kernel_t = 9) {
  const size_t d1 = preset.find('-');
  const size_t d2 = preset.find('-', d1 == std::string::npos ? 0 : d1 + 1);
  auto bad = [&]() -> ConfigError {
    return ConfigError("unknown preset \"" + preset +
                       "\" (expected <family>-<c>c-<s>s, e.g. mstgcn-30c-4s)");
  };
  if (d1 == std::string::npos || d2 == std::string::npos) throw bad();
  const std::string family = preset.substr(0, d1);
  const std::string c_part = preset.substr(d1 + 1, d2 - d1 - 1);
  const std::string s_part = preset.substr(d2 + 1);
  if (c_part.size() < 2 || c_part.back() != 'c' || s_part.size() < 2 ||
      s_part.back() != 's') {
    throw bad();
  }
  int c = 0, s = 0;
  try {
    c = std::stoi(c_part.substr(0, c_part.size() - 1));
    s = std::stoi(s_part.substr(0, s_part.size() - 1));
  } catch (const std::exception&) {
    throw bad();
  }
  if (c < 1 || s < 1) throw bad();

  SpatialKind spatial = SpatialKind::regular;
  TemporalKind temporal = TemporalKind::regular;
  FusedKind fused = FusedKind::none;
  if (family == "stgcn") {
  } else if (family == "msgcn") {
    spatial = SpatialKind::ms;
  } else if (family == "mtgcn") {
    temporal = TemporalKind::mt;
  } else if (family == "mstgcn") {
    spatial = SpatialKind::ms;
    temporal = TemporalKind::mt;
  } else if (family == "strgcn") {
    fused = FusedKind::str;
  } else {
    throw bad();
  }

  const int base = c * s;
  std::vector<BlockSpec> blocks(10);
  for (int i = 0; i < 10; ++i) {
    BlockSpec& b = blocks[i];
    const int stage = i < 4 ? 0 : (i < 7 ? 1 : 2);
    b.out_channels = base << stage;
    b.in_channels = i == 0 ? in_channels : blocks[i - 1].out_channels;
    b.stride = (i == 4 || i == 7) ? 2 : 1;
    b.kernel_t = kernel_t;
    if (i == 0) {
      // plain first block
      b.s = 1;
      b.has_residual = false;
    } else {
      b.spatial_kind = spatial;
      b.temporal_kind = temporal;
      b.fused = fused;
      b.s = s;
      b.has_residual = true;
    }
  }
  return blocks;
}

/// Checks every NetworkConfig invariant and returns the full list of
/// problems (empty when valid).
inline std::vector<std::string> validate_network_config(
    const NetworkConfig& cfg) {
  std::vector<std::string> problems;
  SkeletonTopology topo;
  try {
    topo = build_topology(cfg.topology);
  } catch (const Error& e) {
    problems.emplace_back(e.what());
  }
  if (cfg.num_classes < 2) {
    problems.push_back("num_classes must be >= 2, got " +
                       std::to_string(cfg.num_classes));
  }
  if (cfg.in_channels < 1) problems.push_back("in_channels must be >= 1");
  if (cfg.max_persons < 1) problems.push_back("max_persons must be >= 1");
  if (cfg.blocks.size() != 10) {
    problems.push_back("expected exactly 10 blocks, got " +
                       std::to_string(cfg.blocks.size()));
    return problems;
  }
  for (size_t i = 0; i < cfg.blocks.size(); ++i) {
    const BlockSpec& b = cfg.blocks[i];
    const std::string tag = "block " + std::to_string(i + 1) + ": ";
    const int expect_in =
        i == 0 ? cfg.in_channels : cfg.blocks[i - 1].out_channels;
    if (b.in_channels != expect_in) {
      problems.push_back(tag + "in_channels " +
                         std::to_string(b.in_channels) + " != " +
                         std::to_string(expect_in) + " from upstream");
    }
    if (b.out_channels < 1) problems.push_back(tag + "out_channels < 1");
    if (b.kernel_t < 1 || b.kernel_t % 2 == 0) {
      problems.push_back(tag + "kernel_t must be odd and positive");
    }
    const bool is_stride_block = i == 4 || i == 7;
    if (is_stride_block) {
      if (b.stride != 2) problems.push_back(tag + "must have stride 2");
      if (i > 0 && b.out_channels != 2 * cfg.blocks[i - 1].out_channels) {
        problems.push_back(tag + "must double the channel count");
      }
    } else if (b.stride != 1) {
      problems.push_back(tag + "must have stride 1");
    }
    if (i == 0 && b.has_residual) {
      problems.push_back(tag + "the first block carries no residual");
    }
    const bool multi_scale = b.fused == FusedKind::str ||
                             b.spatial_kind == SpatialKind::ms ||
                             b.temporal_kind == TemporalKind::mt;
    if (b.s < 1) problems.push_back(tag + "s must be >= 1");
    if (multi_scale && b.s >= 1 &&
        (b.in_channels % b.s != 0 || b.out_channels % b.s != 0)) {
      problems.push_back(tag + "channels not divisible by s=" +
                         std::to_string(b.s));
    }
    if (b.fused == FusedKind::str &&
        (b.spatial_kind == SpatialKind::ms ||
         b.temporal_kind == TemporalKind::mt)) {
      problems.push_back(tag +
                         "fused str excludes separate ms/mt unit kinds");
    }
  }
  return problems;
}

/// The MST-GCN backbone: input batch norm over the per-person flattened
/// C*V channels, ten ST-GC blocks with persons folded into the batch axis,
/// global average pooling, a mean over persons, and the classifier.
template <typename Real>
class MstGcn {
 public:
  explicit MstGcn(const NetworkConfig& cfg)
      : cfg_(cfg),
        topology_(build_topology(cfg.topology)),
        input_bn_(cfg.max_persons * topology_.num_joints * cfg.in_channels) {
    if (cfg.blocks.empty()) {
      throw ConfigError("network needs at least one block");
    }
    const PartitionedAdjacency adj = build_partitioned_adjacency(
        topology_, cfg.alpha, cfg.normalization);
    std::mt19937 rng(static_cast<uint32_t>(cfg.seed));
    blocks_.reserve(cfg.blocks.size());
    for (const BlockSpec& spec : cfg.blocks) {
      blocks_.emplace_back(spec, adj, rng);
    }
    const int feat = cfg.blocks.back().out_channels;
    classifier_weight_ = detail::fan_in_uniform<Real>(
        Shape{cfg.num_classes, feat}, feat, rng);
    classifier_bias_ = detail::trainable_zeros<Real>(Shape{cfg.num_classes});

    input_bn_.register_state("input_bn", state_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].register_state("block" + std::to_string(i + 1), state_);
    }
    state_.push_back({"classifier.weight", classifier_weight_, true});
    state_.push_back({"classifier.bias", classifier_bias_, true});

    std::set<std::string> names;
    for (const auto& p : state_) {
      if (!names.insert(p.name).second) {
        throw ContractError("duplicate parameter name " + p.name);
      }
    }
  }

  /// x: [N, C, T, V, M] -> logits [N, num_classes]. Eval mode runs without
  /// tape recording and uses the stored batch-norm moments.
  Tensor<Real> forward(const Tensor<Real>& x, Mode mode) {
    if (x.rank() != 5) {
      throw DimensionError("forward: expected [N,C,T,V,M], got " +
                           x.shape().str());
    }
    const int N = x.size(0), C = x.size(1), T = x.size(2), V = x.size(3),
              M = x.size(4);
    if (C != cfg_.in_channels || V != topology_.num_joints ||
        M != cfg_.max_persons) {
      throw DimensionError(
          "forward: input " + x.shape().str() + " does not match network (C=" +
          std::to_string(cfg_.in_channels) +
          ", V=" + std::to_string(topology_.num_joints) +
          ", M=" + std::to_string(cfg_.max_persons) + ")");
    }
    int total_stride = 1;
    for (const auto& b : blocks_) total_stride *= b.spec.stride;
    if (T % total_stride != 0) {
      throw DimensionError("forward: T=" + std::to_string(T) +
                           " must be divisible by the total stride " +
                           std::to_string(total_stride));
    }
    std::optional<NoGradGuard> guard;
    if (mode == Mode::eval) guard.emplace();

    // [N,C,T,V,M] -> [N, M*V*C, T] for the input normalization.
    Tensor<Real> h = permute(x, {0, 4, 3, 1, 2});
    h = reshape(h, Shape{N, M * V * C, T});
    h = input_bn_.forward(h, mode);
    // -> [N*M, C, T, V] for the backbone.
    h = reshape(h, Shape{N, M, V, C, T});
    h = permute(h, {0, 1, 3, 4, 2});
    h = reshape(h, Shape{N * M, C, T, V});
    for (auto& block : blocks_) h = block.forward(h, mode);
    h = global_avg_pool(h);  // [N*M, F]
    const int feat = h.size(1);
    // Mean over person slots via a second pooling pass.
    h = reshape(h, Shape{N, M, feat});
    h = permute(h, {0, 2, 1});
    h = reshape(h, Shape{N, feat, M, 1});
    h = global_avg_pool(h);  // [N, F]
    return linear(h, classifier_weight_, classifier_bias_);
  }

  const NetworkConfig& config() const { return cfg_; }
  const SkeletonTopology& topology() const { return topology_; }
  std::vector<NamedTensor<Real>>& state() { return state_; }
  const std::vector<NamedTensor<Real>>& state() const { return state_; }
  std::vector<StGcBlock<Real>>& blocks() { return blocks_; }
  BatchNorm<Real>& input_bn() { return input_bn_; }
  const Tensor<Real>& classifier_weight() const { return classifier_weight_; }
  const Tensor<Real>& classifier_bias() const { return classifier_bias_; }

  void zero_grads() {
    for (auto& p : state_) {
      if (p.trainable) p.tensor.zero_grad();
    }
  }

 private:
  NetworkConfig cfg_;
  SkeletonTopology topology_;
  BatchNorm<Real> input_bn_;
  std::vector<StGcBlock<Real>> blocks_;
  Tensor<Real> classifier_weight_, classifier_bias_;
  std::vector<NamedTensor<Real>> state_;
};

/// Validates the config (aggregating all problems into one report) and
/// constructs the network.
template <typename Real>
MstGcn<Real> build_network(const NetworkConfig& cfg) {
  auto problems = validate_network_config(cfg);
  if (!problems.empty()) {
    std::string report = "invalid network configuration:";
    for (const auto& p : problems) report += "\n  - " + p;
    throw ConfigError(report);
  }
  return MstGcn<Real>(cfg);
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParameterCountReport {
  int64_t total = 0;
  std::map<std::string, int64_t> by_group;   // weights / masks / bn / classifier
  std::map<std::string, int64_t> by_module;  // input_bn, block1..N, classifier
};

namespace detail {

inline std::string parameter_group(const std::string& name) {
  if (name.rfind("classifier.", 0) == 0) return "classifier";
  if (name.find(".mask_") != std::string::npos) return "masks";
  if (name.find("bn") != std::string::npos ||
      name.find(".scale") != std::string::npos ||
      name.find(".shift") != std::string::npos) {
    return "bn";
  }
  return "weights";
}

}  // namespace detail

/// Counts trainable scalars, grouped by module (per block) and by kind.
template <typename Real>
ParameterCountReport count_parameters(const MstGcn<Real>& net) {
  ParameterCountReport report;
  for (const auto& p : net.state()) {
    if (!p.trainable) continue;
    const int64_t n = p.tensor.numel();
    report.total += n;
    report.by_group[detail::parameter_group(p.name)] += n;
    const size_t dot = p.name.find('.');
    report.by_module[p.name.substr(0, dot)] += n;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "MGCK", u32 version, u32 entry count, then per
// entry: u32 name length, name bytes, u32 rank, u32 extents..., f32
// little-endian values. Contains every named state tensor (parameters and
// batch-norm running moments) in registration order.

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) {
    throw FormatError(path + ": truncated at byte " +
                      std::to_string(static_cast<long long>(is.tellg())));
  }
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline float read_f32(std::istream& is, const std::string& path) {
  const uint32_t bits = read_u32(is, path);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline constexpr uint32_t kCheckpointVersion = 1;

template <typename Real>
void save_checkpoint(const MstGcn<Real>& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write("MGCK", 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u32(os, static_cast<uint32_t>(net.state().size()));
  for (const auto& p : net.state()) {
    detail::write_u32(os, static_cast<uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_u32(os, static_cast<uint32_t>(p.tensor.rank()));
    for (int a = 0; a < p.tensor.rank(); ++a) {
      detail::write_u32(os, static_cast<uint32_t>(p.tensor.size(a)));
    }
    for (Real v : p.tensor.values()) {
      detail::write_f32(os, static_cast<float>(v));
    }
  }
  if (!os) throw IoError("failed writing " + path);
}

/// Loads a checkpoint into a network built from the same configuration.
/// Entry names, order and shapes must match exactly.
template <typename Real>
void load_checkpoint(MstGcn<Real>& net, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MGCK", 4) != 0) {
    throw FormatError(path + ": bad magic at byte 0 (expected \"MGCK\")");
  }
  const uint32_t version = detail::read_u32(is, path);
  if (version != kCheckpointVersion) {
    throw FormatError(path + ": unsupported version " +
                      std::to_string(version));
  }
  const uint32_t count = detail::read_u32(is, path);
  if (count != net.state().size()) {
    throw ConfigError(path + ": checkpoint has " + std::to_string(count) +
                      " entries, network has " +
                      std::to_string(net.state().size()));
  }
  for (auto& p : net.state()) {
    const uint32_t name_len = detail::read_u32(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError(path + ": truncated name");
    if (name != p.name) {
      throw ConfigError(path + ": entry \"" + name +
                        "\" does not match expected \"" + p.name + "\"");
    }
    const uint32_t rank = detail::read_u32(is, path);
    if (rank != static_cast<uint32_t>(p.tensor.rank())) {
      throw ConfigError(path + ": rank mismatch for " + name);
    }
    for (uint32_t a = 0; a < rank; ++a) {
      const uint32_t extent = detail::read_u32(is, path);
      if (extent != static_cast<uint32_t>(p.tensor.size(int(a)))) {
        throw ConfigError(path + ": shape mismatch for " + name);
      }
    }
    for (auto& v : p.tensor.values_mut()) {
      v = static_cast<Real>(detail::read_f32(is, path));
    }
  }
}

// ---------------------------------------------------------------------------
// Receptive-field probing. prepare_probe zeroes masks and biases and takes
// absolute values of all weights, so a non-negative impulse propagates with
// no cancellation and the nonzero set equals the receptive field.

template <typename Real>
void prepare_probe(SpatialGraphConv<Real>& layer) {
  for (auto& w : layer.weights) {
    for (auto& v : w.values_mut()) v = std::abs(v);
  }
  for (auto& m : layer.masks) {
    std::fill(m.values_mut().begin(), m.values_mut().end(), Real(0));
  }
  std::fill(layer.bias.values_mut().begin(), layer.bias.values_mut().end(),
            Real(0));
}

template <typename Real>
void prepare_probe(TemporalGraphConv<Real>& layer) {
  for (auto& v : layer.kernel.values_mut()) v = std::abs(v);
  std::fill(layer.bias.values_mut().begin(), layer.bias.values_mut().end(),
            Real(0));
}

template <typename Real>
void prepare_probe(MsGc<Real>& layer) {
  for (auto& frag : layer.fragments) prepare_probe(frag);
  if (layer.input_transform) {
    for (auto& v : layer.input_transform->weight.values_mut()) {
      v = std::abs(v);
    }
    std::fill(layer.input_transform->bias.values_mut().begin(),
              layer.input_transform->bias.values_mut().end(), Real(0));
  }
}

template <typename Real>
void prepare_probe(MtGc<Real>& layer) {
  for (auto& frag : layer.fragments) prepare_probe(frag);
}

template <typename Real>
void prepare_probe(StrGc<Real>& layer) {
  for (auto& frag : layer.spatial_fragments) prepare_probe(frag);
  for (auto& frag : layer.temporal_fragments) prepare_probe(frag);
}

template <typename Real>
void prepare_probe(BatchNorm<Real>& layer) {
  for (auto& v : layer.scale.values_mut()) v = std::abs(v);
  std::fill(layer.shift.values_mut().begin(), layer.shift.values_mut().end(),
            Real(0));
}

template <typename Real>
void prepare_probe(StGcBlock<Real>& block) {
  if (block.sgc) prepare_probe(*block.sgc);
  if (block.msgc) prepare_probe(*block.msgc);
  if (block.tgc) prepare_probe(*block.tgc);
  if (block.mtgc) prepare_probe(*block.mtgc);
  if (block.strgc) prepare_probe(*block.strgc);
  if (block.bn1) prepare_probe(*block.bn1);
  if (block.bn2) prepare_probe(*block.bn2);
  if (block.residual_transform) {
    for (auto& v : block.residual_transform->weight.values_mut()) {
      v = std::abs(v);
    }
    std::fill(block.residual_transform->bias.values_mut().begin(),
              block.residual_transform->bias.values_mut().end(), Real(0));
  }
}

template <typename Real>
void prepare_probe(MstGcn<Real>& net) {
  prepare_probe(net.input_bn());
  for (auto& block : net.blocks()) prepare_probe(block);
}

namespace detail {

/// Nonzero positions along one axis of the response to a unit impulse:
/// reduce |y| over every axis except `axis`.
template <typename Real>
std::vector<int> support_along_axis(const Tensor<Real>& y, int axis) {
  std::vector<int> support;
  const int extent = y.size(axis);
  const auto strides = row_major_strides(y.shape());
  const int64_t n = y.numel();
  std::vector<char> hit(extent, 0);
  const auto& v = y.values();
  for (int64_t i = 0; i < n; ++i) {
    if (v[i] != Real(0)) {
      hit[(i / strides[axis]) % extent] = 1;
    }
  }
  for (int p = 0; p < extent; ++p) {
    if (hit[p]) support.push_back(p);
  }
  return support;
}

}  // namespace detail

/// Spatial supports per fragment: impulse at source_joint (all channels,
/// all frames), nonzero joints of each fragment output.
template <typename Real>
std::vector<std::vector<int>> spatial_fragment_supports(const MsGc<Real>& m,
                                                        int frames,
                                                        int source_joint) {
  NoGradGuard guard;
  const int V = m.fragments.front().num_joints;
  if (source_joint < 0 || source_joint >= V) {
    throw IndexError("source joint " + std::to_string(source_joint) +
                     " out of range for " + std::to_string(V) + " joints");
  }
  Tensor<Real> x(Shape{1, m.in_channels, frames, V});
  auto& xv = x.values_mut();
  for (int c = 0; c < m.in_channels; ++c) {
    for (int t = 0; t < frames; ++t) {
      xv[(size_t(c) * frames + t) * V + source_joint] = Real(1);
    }
  }
  std::vector<std::vector<int>> supports;
  for (const auto& y : m.fragment_outputs(x)) {
    supports.push_back(detail::support_along_axis(y, 3));
  }
  return supports;
}

enum class ProbeAxis { spatial, temporal };

/// Network-level probe: runs an impulse through the prepared backbone and
/// reports, per block output, the nonzero joint set (spatial) or frame set
/// (temporal, at that block's frame resolution). Run prepare_probe on the
/// network first.
template <typename Real>
std::vector<std::vector<int>> block_output_supports(MstGcn<Real>& net,
                                                    ProbeAxis axis,
                                                    int frames, int source) {
  NoGradGuard guard;
  const int V = net.topology().num_joints;
  const int C = net.config().blocks.front().in_channels;
  Tensor<Real> x(Shape{1, C, frames, V});
  auto& xv = x.values_mut();
  for (int c = 0; c < C; ++c) {
    for (int t = 0; t < frames; ++t) {
      for (int v = 0; v < V; ++v) {
        const bool hit =
            axis == ProbeAxis::spatial ? v == source : t == source;
        if (hit) xv[(size_t(c) * frames + t) * V + v] = Real(1);
      }
    }
  }
  std::vector<std::vector<int>> supports;
  Tensor<Real> h = x;
  for (auto& block : net.blocks()) {
    h = block.forward(h, Mode::eval);
    supports.push_back(detail::support_along_axis(
        h, axis == ProbeAxis::spatial ? 3 : 2));
  }
  return supports;
}

/// Temporal supports per fragment: impulse at source_frame (all channels,
/// all joints), nonzero frames of each fragment output.
template <typename Real>
std::vector<std::vector<int>> temporal_fragment_supports(const MtGc<Real>& m,
                                                         int joints,
                                                         int frames,
                                                         int source_frame) {
  NoGradGuard guard;
  if (source_frame < 0 || source_frame >= frames) {
    throw IndexError("source frame " + std::to_string(source_frame) +
                     " out of range for " + std::to_string(frames) +
                     " frames");
  }
  Tensor<Real> x(Shape{1, m.in_channels, frames, joints});
  auto& xv = x.values_mut();
  for (int c = 0; c < m.in_channels; ++c) {
    for (int v = 0; v < joints; ++v) {
      xv[(size_t(c) * frames + source_frame) * joints + v] = Real(1);
    }
  }
  std::vector<std::vector<int>> supports;
  for (const auto& y : m.fragment_outputs(x)) {
    supports.push_back(detail::support_along_axis(y, 2));
  }
  return supports;
}

}  // namespace mstgcn
