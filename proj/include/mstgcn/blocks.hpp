#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mstgcn/graph.hpp"
#include "mstgcn/ops.hpp"

namespace mstgcn {

/// One entry of a network's state registry. Tensors are shared handles, so
/// the optimizer and checkpoint I/O mutate the layer storage directly.
template <typename Real>
struct NamedTensor {
  std::string name;
  Tensor<Real> tensor;
  bool trainable = true;
};

enum class SpatialKind { regular, ms };
enum class TemporalKind { regular, mt };
enum class FusedKind { none, str };

/// Declarative description of one ST-GC block.
struct BlockSpec {
  SpatialKind spatial_kind = SpatialKind::regular;
  TemporalKind temporal_kind = TemporalKind::regular;
  FusedKind fused = FusedKind::none;
  int in_channels = 0;
  int out_channels = 0;
  int s = 1;
  int kernel_t = 9;
  int stride = 1;
  bool has_residual = true;
};

namespace detail {

template <typename Real>
Tensor<Real> fan_in_uniform(const Shape& shape, int fan_in,
                            std::mt19937& rng) {
  const Real bound = Real(1) / std::sqrt(Real(fan_in));
  auto t = Tensor<Real>::uniform(shape, -bound, bound, rng);
  t.set_requires_grad(true);
  return t;
}

template <typename Real>
Tensor<Real> trainable_zeros(const Shape& shape) {
  auto t = Tensor<Real>::zeros(shape);
  t.set_requires_grad(true);
  return t;
}

}  // namespace detail

/// Batch normalization layer with running moments (momentum 0.1, eps 1e-5).
/// Fresh layers normalize with mean 0 / var 1 until the first train step.
template <typename Real>
struct BatchNorm {
  Tensor<Real> scale, shift;
  Tensor<Real> running_mean, running_var;

  explicit BatchNorm(int channels)
      : scale(Shape{channels}, Real(1)),
        shift(Shape{channels}, Real(0)),
        running_mean(Shape{channels}, Real(0)),
        running_var(Shape{channels}, Real(1)) {
    scale.set_requires_grad(true);
    shift.set_requires_grad(true);
  }

  Tensor<Real> forward(const Tensor<Real>& x, Mode mode) {
    return batch_norm(x, scale, shift, running_mean, running_var, mode);
  }

  void register_state(const std::string& prefix,
                      std::vector<NamedTensor<Real>>& out) const {
    out.push_back({prefix + ".scale", scale, true});
    out.push_back({prefix + ".shift", shift, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
  }
};

/// Learned pointwise channel map, used for residual paths that change
/// width.
template <typename Real>
struct PointwiseTransform {
  Tensor<Real> weight, bias;

  PointwiseTransform(int in_channels, int out_channels, std::mt19937& rng)
      : weight(detail::fan_in_uniform<Real>(Shape{out_channels, in_channels},
                                            in_channels, rng)),
        bias(detail::trainable_zeros<Real>(Shape{out_channels})) {}

  Tensor<Real> forward(const Tensor<Real>& x) const {
    return pointwise_conv(x, weight, bias);
  }

  void register_state(const std::string& prefix,
                      std::vector<NamedTensor<Real>>& out) const {
    out.push_back({prefix + ".weight", weight, true});
    out.push_back({prefix + ".bias", bias, true});
  }
};

/// Spatial graph convolution: per-subset 1x1 weights over the partitioned
/// adjacency, each subset's frozen normalized matrix summed with its
/// learnable additive mask. Masks start at zero so a fresh layer sees the
/// pure skeletal graph.
template <typename Real>
struct SpatialGraphConv {
  int in_channels = 0, out_channels = 0, num_joints = 0;
  std::array<Tensor<Real>, 3> weights;    // [Cout, Cin] per subset
  std::array<Tensor<Real>, 3> masks;      // [V, V], trainable
  std::array<Tensor<Real>, 3> adjacency;  // [V, V], frozen
  Tensor<Real> bias;
  Tensor<Real> zero_bias_;  // shared constant for the non-bias subsets

  SpatialGraphConv(int in_ch, int out_ch, const PartitionedAdjacency& adj,
                   std::mt19937& rng)
      : in_channels(in_ch),
        out_channels(out_ch),
        num_joints(adj.num_joints),
        bias(detail::trainable_zeros<Real>(Shape{out_ch})),
        zero_bias_(Tensor<Real>::zeros(Shape{out_ch})) {
    const int V = adj.num_joints;
    for (int p = 0; p < 3; ++p) {
      weights[p] =
          detail::fan_in_uniform<Real>(Shape{out_ch, in_ch}, in_ch, rng);
      masks[p] = detail::trainable_zeros<Real>(Shape{V, V});
      std::vector<Real> a(adj.subsets[p].begin(), adj.subsets[p].end());
      adjacency[p] = Tensor<Real>(Shape{V, V}, std::move(a));
    }
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    Tensor<Real> acc;
    for (int p = 0; p < 3; ++p) {
      auto contracted = graph_contract(x, add(adjacency[p], masks[p]));
      auto term =
          pointwise_conv(contracted, weights[p], p == 0 ? bias : zero_bias_);
      acc = p == 0 ? term : add(acc, term);
    }
    return acc;
  }

  void register_state(const std::string& prefix,
                      std::vector<NamedTensor<Real>>& out) const {
    for (int p = 0; p < 3; ++p) {
      const std::string subset = subset_name(static_cast<Subset>(p));
      out.push_back({prefix + ".w_" + subset, weights[p], true});
      out.push_back({prefix + ".mask_" + subset, masks[p], true});
    }
    out.push_back({prefix + ".bias", bias, true});
  }
};

/// Temporal graph convolution: a K_t x 1 convolution along the frame axis.
/// The kernel window plays the role of a partitioned temporal adjacency
/// without materializing T x T matrices.
template <typename Real>
struct TemporalGraphConv {
  int in_channels = 0, out_channels = 0, kernel_t = 9, stride = 1;
  Tensor<Real> kernel;  // [Cout, Cin, K_t]
  Tensor<Real> bias;

  TemporalGraphConv(int in_ch, int out_ch, int kt, int stride_,
                    std::mt19937& rng)
      : in_channels(in_ch),
        out_channels(out_ch),
        kernel_t(kt),
        stride(stride_),
        kernel(detail::fan_in_uniform<Real>(Shape{out_ch, in_ch, kt},
                                            in_ch * kt, rng)),
        bias(detail::trainable_zeros<Real>(Shape{out_ch})) {
    if (kt % 2 == 0) {
      throw ConfigError("temporal kernel size must be odd, got " +
                        std::to_string(kt));
    }
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    return temporal_conv(x, kernel, bias, stride);
  }

  void register_state(const std::string& prefix,
                      std::vector<NamedTensor<Real>>& out) const {
    out.push_back({prefix + ".kernel", kernel, true});
    out.push_back({prefix + ".bias", bias, true});
  }
};

namespace detail {

inline void check_divisible(int channels, int s, const char* what) {
  if (s < 1) throw ConfigError(std::string(what) + ": s must be >= 1");
  if (channels % s != 0) {
    throw ConfigError(std::string(what) + ": " + std::to_string(channels) +
                      " channels not divisible by s=" + std::to_string(s));
  }
}

}  // namespace detail

/// Multi-scale spatial graph convolution. The input is split into s channel
/// fragments; fragment i feeds its own sub-SGC, with a residual hand-off
/// from fragment i-1 forming the hierarchy. Output is the activated
/// concatenation plus the module residual.
///
/// The hierarchical hand-off requires fragment widths to match; when the
/// module changes channel count the fragments run in parallel instead, and
/// the module residual becomes a learned pointwise transform.
template <typename Real>
struct MsGc {
  int s = 1;
  int in_channels = 0, out_channels = 0;
  bool hierarchical = true;
  std::vector<SpatialGraphConv<Real>> fragments;
  std::optional<PointwiseTransform<Real>> input_transform;

  MsGc(int in_ch, int out_ch, int s_, const PartitionedAdjacency& adj,
       std::mt19937& rng)
      : s(s_), in_channels(in_ch), out_channels(out_ch),
        hierarchical(in_ch == out_ch) {
    detail::check_divisible(in_ch, s_, "MsGc in_channels");
    detail::check_divisible(out_ch, s_, "MsGc out_channels");
    fragments.reserve(s_);
    for (int i = 0; i < s_; ++i) {
      fragments.emplace_back(in_ch / s_, out_ch / s_, adj, rng);
    }
    if (in_ch != out_ch) input_transform.emplace(in_ch, out_ch, rng);
  }

  /// Per-fragment outputs y_1..y_s (before concatenation).
  std::vector<Tensor<Real>> fragment_outputs(const Tensor<Real>& x) const {
    const int frag = in_channels / s;
    std::vector<Tensor<Real>> ys;
    ys.reserve(s);
    for (int i = 0; i < s; ++i) {
      Tensor<Real> in = narrow_channels(x, i * frag, frag);
      if (i > 0 && hierarchical) in = add(in, ys.back());
      ys.push_back(fragments[i].forward(in));
    }
    return ys;
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    auto ys = fragment_outputs(x);
    Tensor<Real> cat = concat_channels(ys);
    Tensor<Real> res = input_transform ? input_transform->forward(x) : x;
    return relu(add(cat, res));
  }

  void register_state(const std::string& prefix,
                      std::vector<NamedTensor<Real>>& out) const {
    for (int i = 0; i < s; ++i) {
      fragments[i].register_state(
          prefix + ".frag" + std::to_string(i + 1), out);
    }
    if (input_transform) {
      input_transform->register_state(prefix + ".residual", out);
    }
  }
};

/// Multi-scale temporal graph convolution: the same fragment hierarchy with
/// sub-temporal convolutions, fused by plain concatenation (no module
/// residual, no activation). Fragment 1 carries the stride; later fragments
/// subsample their slice (every stride-th frame from 0) so the hand-off
/// stays length-consistent and run at stride 1.
template <typename Real>
struct MtGc {
  int s = 1;
  int in_channels = 0, out_channels = 0, stride = 1;
  bool hierarchical = true;
  std::vector<TemporalGraphConv<Real>> fragments;

  MtGc(int in_ch, int out_ch, int s_, int kt, int stride_, std::mt19937& rng)
      : s(s_), in_channels(in_ch), out_channels(out_ch), stride(stride_),
        hierarchical(in_ch == out_ch) {
    detail::check_divisible(in_ch, s_, "MtGc in_channels");
    detail::check_divisible(out_ch, s_, "MtGc out_channels");
    fragments.reserve(s_);
    for (int i = 0; i < s_; ++i) {
      fragments.emplace_back(in_ch / s_, out_ch / s_, kt,
                             i == 0 ? stride_ : 1, rng);
    }
  }

  std::vector<Tensor<Real>> fragment_outputs(const Tensor<Real>& x) const {
    const int frag = in_channels / s;
    std::vector<Tensor<Real>> ys;
    ys.reserve(s);
    for (int i = 0; i < s; ++i) {
      Tensor<Real> in = narrow_channels(x, i * frag, frag);
      if (i > 0) {
        if (stride > 1) in = subsample_time(in, stride);
        if (hierarchical) in = add(in, ys.back());
      }
      ys.push_back(fragments[i].forward(in));
    }
    return ys;
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    return concat_channels(fragment_outputs(x));
  }

  void register_state(const std::string& prefix,
                      std::vector<NamedTensor<Real>>& out) const {
    for (int i = 0; i < s; ++i) {
      fragments[i].register_state(
          prefix + ".frag" + std::to_string(i + 1), out);
    }
  }
};

/// Fused spatial-temporal residual module: fragment i applies its sub-SGC
/// then its sub-TGC, with the hierarchical hand-off feeding the next
/// fragment. Concatenation only; the enclosing block owns normalization,
/// residual and activation.
template <typename Real>
struct StrGc {
  int s = 1;
  int in_channels = 0, out_channels = 0, stride = 1;
  bool hierarchical = true;
  std::vector<SpatialGraphConv<Real>> spatial_fragments;
  std::vector<TemporalGraphConv<Real>> temporal_fragments;

  StrGc(int in_ch, int out_ch, int s_, const PartitionedAdjacency& adj,
        int kt, int stride_, std::mt19937& rng)
      : s(s_), in_channels(in_ch), out_channels(out_ch), stride(stride_),
        hierarchical(in_ch == out_ch) {
    detail::check_divisible(in_ch, s_, "StrGc in_channels");
    detail::check_divisible(out_ch, s_, "StrGc out_channels");
    spatial_fragments.reserve(s_);
    temporal_fragments.reserve(s_);
    for (int i = 0; i < s_; ++i) {
      spatial_fragments.emplace_back(in_ch / s_, out_ch / s_, adj, rng);
      temporal_fragments.emplace_back(out_ch / s_, out_ch / s_, kt,
                                      i == 0 ? stride_ : 1, rng);
    }
  }

  std::vector<Tensor<Real>> fragment_outputs(const Tensor<Real>& x) const {
    const int frag = in_channels / s;
    std::vector<Tensor<Real>> ys;
    ys.reserve(s);
    for (int i = 0; i < s; ++i) {
      Tensor<Real> in = narrow_channels(x, i * frag, frag);
      if (i > 0) {
        if (stride > 1) in = subsample_time(in, stride);
        if (hierarchical) in = add(in, ys.back());
      }
      ys.push_back(
          temporal_fragments[i].forward(spatial_fragments[i].forward(in)));
    }
    return ys;
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    return concat_channels(fragment_outputs(x));
  }

  void register_state(const std::string& prefix,
                      std::vector<NamedTensor<Real>>& out) const {
    for (int i = 0; i < s; ++i) {
      const std::string frag = prefix + ".frag" + std::to_string(i + 1);
      spatial_fragments[i].register_state(frag + ".sgc", out);
      temporal_fragments[i].register_state(frag + ".tgc", out);
    }
  }
};

/// One ST-GC block: spatial unit, BN, ReLU, temporal unit, BN, block
/// residual, ReLU. A fused STR unit replaces the two-unit body and keeps a
/// single BN. The residual path is the identity when shape is preserved,
/// otherwise subsample-then-project.
template <typename Real>
struct StGcBlock {
  BlockSpec spec;
  std::optional<SpatialGraphConv<Real>> sgc;
  std::optional<MsGc<Real>> msgc;
  std::optional<TemporalGraphConv<Real>> tgc;
  std::optional<MtGc<Real>> mtgc;
  std::optional<StrGc<Real>> strgc;
  std::optional<BatchNorm<Real>> bn1;
  std::optional<BatchNorm<Real>> bn2;
  std::optional<PointwiseTransform<Real>> residual_transform;

  StGcBlock(const BlockSpec& spec_, const PartitionedAdjacency& adj,
            std::mt19937& rng)
      : spec(spec_) {
    if (spec.in_channels < 1 || spec.out_channels < 1) {
      throw ConfigError("block channels must be positive");
    }
    if (spec.stride != 1 && spec.stride != 2) {
      throw ConfigError("block stride must be 1 or 2");
    }
    if (spec.fused == FusedKind::str) {
      strgc.emplace(spec.in_channels, spec.out_channels, spec.s, adj,
                    spec.kernel_t, spec.stride, rng);
      bn2.emplace(spec.out_channels);
    } else {
      if (spec.spatial_kind == SpatialKind::ms) {
        msgc.emplace(spec.in_channels, spec.out_channels, spec.s, adj, rng);
      } else {
        sgc.emplace(spec.in_channels, spec.out_channels, adj, rng);
      }
      if (spec.temporal_kind == TemporalKind::mt) {
        mtgc.emplace(spec.out_channels, spec.out_channels, spec.s,
                     spec.kernel_t, spec.stride, rng);
      } else {
        tgc.emplace(spec.out_channels, spec.out_channels, spec.kernel_t,
                    spec.stride, rng);
      }
      bn1.emplace(spec.out_channels);
      bn2.emplace(spec.out_channels);
    }
    if (spec.has_residual &&
        (spec.in_channels != spec.out_channels || spec.stride != 1)) {
      residual_transform.emplace(spec.in_channels, spec.out_channels, rng);
    }
  }

  Tensor<Real> forward(const Tensor<Real>& x, Mode mode) {
    Tensor<Real> h;
    if (spec.fused == FusedKind::str) {
      h = strgc->forward(x);
      h = bn2->forward(h, mode);
    } else {
      h = msgc ? msgc->forward(x) : sgc->forward(x);
      h = bn1->forward(h, mode);
      h = relu(h);
      h = mtgc ? mtgc->forward(h) : tgc->forward(h);
      h = bn2->forward(h, mode);
    }
    if (spec.has_residual) {
      Tensor<Real> res =
          residual_transform
              ? residual_transform->forward(subsample_time(x, spec.stride))
              : x;
      h = add(h, res);
    }
    return relu(h);
  }

  void register_state(const std::string& prefix,
                      std::vector<NamedTensor<Real>>& out) const {
    if (sgc) sgc->register_state(prefix + ".sgc", out);
    if (msgc) msgc->register_state(prefix + ".msgc", out);
    if (bn1) bn1->register_state(prefix + ".bn1", out);
    if (tgc) tgc->register_state(prefix + ".tgc", out);
    if (mtgc) mtgc->register_state(prefix + ".mtgc", out);
    if (strgc) strgc->register_state(prefix + ".strgc", out);
    if (bn2) bn2->register_state(prefix + ".bn2", out);
    if (residual_transform) {
      residual_transform->register_state(prefix + ".residual", out);
    }
  }
};

}  // namespace mstgcn
