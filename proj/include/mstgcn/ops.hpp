#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "mstgcn/tensor.hpp"

namespace mstgcn {

namespace detail {
template <typename Real>
using NodePtr = std::shared_ptr<TensorNode<Real>>;
}

/// Elementwise sum of two same-shape tensors.
template <typename Real>
Tensor<Real> add(const Tensor<Real>& x, const Tensor<Real>& y) {
  check_same_shape(x.shape(), y.shape(), "add");
  const auto& xv = x.values();
  const auto& yv = y.values();
  std::vector<Real> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[i];
  Tensor<Real> result(x.shape(), std::move(out));
  detail::check_finite(result.values(), "add");
  detail::record(result, {x, y},
                 [xn = x.node(), yn = y.node()](auto& self) {
                   for (const auto& node : {xn, yn}) {
                     if (!node->requires_grad) continue;
                     node->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i) {
                       node->grad[i] += self.grad[i];
                     }
                   }
                 });
  return result;
}

/// Elementwise product of two same-shape tensors.
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& x, const Tensor<Real>& y) {
  check_same_shape(x.shape(), y.shape(), "mul");
  const auto& xv = x.values();
  const auto& yv = y.values();
  std::vector<Real> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * yv[i];
  Tensor<Real> result(x.shape(), std::move(out));
  detail::check_finite(result.values(), "mul");
  detail::record(result, {x, y},
                 [xn = x.node(), yn = y.node()](auto& self) {
                   if (xn->requires_grad) {
                     xn->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i) {
                       xn->grad[i] += self.grad[i] * yn->values[i];
                     }
                   }
                   if (yn->requires_grad) {
                     yn->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i) {
                       yn->grad[i] += self.grad[i] * xn->values[i];
                     }
                   }
                 });
  return result;
}

/// Multiplication by a compile-time-known constant.
template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor) {
  const auto& xv = x.values();
  std::vector<Real> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  Tensor<Real> result(x.shape(), std::move(out));
  detail::check_finite(result.values(), "scale");
  detail::record(result, {x}, [xn = x.node(), factor](auto& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[i] += self.grad[i] * factor;
    }
  });
  return result;
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  const auto& xv = x.values();
  std::vector<Real> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = xv[i] > Real(0) ? xv[i] : Real(0);
  }
  Tensor<Real> result(x.shape(), std::move(out));
  detail::record(result, {x}, [xn = x.node()](auto& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (xn->values[i] > Real(0)) xn->grad[i] += self.grad[i];
    }
  });
  return result;
}

/// Sum of all elements, returned as a scalar (shape [1]).
template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real total(0);
  for (Real v : x.values()) total += v;
  Tensor<Real> result(Shape{1}, std::vector<Real>{total});
  detail::check_finite(result.values(), "sum");
  detail::record(result, {x}, [xn = x.node()](auto& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const Real g = self.grad[0];
    for (auto& gi : xn->grad) gi += g;
  });
  return result;
}

/// Reinterprets the buffer under a new shape with equal element count.
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, const Shape& shape) {
  if (shape.numel() != x.numel()) {
    throw DimensionError("reshape: cannot view " + x.shape().str() + " as " +
                         shape.str());
  }
  Tensor<Real> result(shape, x.values());
  detail::record(result, {x}, [xn = x.node()](auto& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[i] += self.grad[i];
    }
  });
  return result;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> strides(s.rank());
  int64_t acc = 1;
  for (int a = s.rank() - 1; a >= 0; --a) {
    strides[a] = acc;
    acc *= s[a];
  }
  return strides;
}

}  // namespace detail

/// Reorders axes: output axis i is input axis perm[i].
template <typename Real>
Tensor<Real> permute(const Tensor<Real>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) {
    throw DimensionError("permute: permutation length " +
                         std::to_string(perm.size()) +
                         " does not match rank " + std::to_string(r));
  }
  std::vector<bool> seen(r, false);
  std::vector<int> ext(r);
  for (int i = 0; i < r; ++i) {
    if (perm[i] < 0 || perm[i] >= r || seen[perm[i]]) {
      throw DimensionError("permute: invalid permutation");
    }
    seen[perm[i]] = true;
    ext[i] = x.size(perm[i]);
  }
  Shape out_shape(ext);
  const auto in_strides = detail::row_major_strides(x.shape());
  // in_offset = sum over output axes of out_index[i] * in_strides[perm[i]]
  std::vector<int64_t> strides(r);
  for (int i = 0; i < r; ++i) strides[i] = in_strides[perm[i]];

  const auto& xv = x.values();
  std::vector<Real> out(xv.size());
  const int64_t n = out_shape.numel();
  std::vector<int64_t> idx(r, 0);
  int64_t in_off = 0;
  for (int64_t o = 0; o < n; ++o) {
    out[o] = xv[in_off];
    for (int a = r - 1; a >= 0; --a) {
      in_off += strides[a];
      if (++idx[a] < out_shape[a]) break;
      in_off -= strides[a] * out_shape[a];
      idx[a] = 0;
    }
  }
  Tensor<Real> result(out_shape, std::move(out));
  detail::record(result, {x},
                 [xn = x.node(), strides, out_shape](auto& self) {
                   if (!xn->requires_grad) return;
                   xn->ensure_grad();
                   const int r = out_shape.rank();
                   std::vector<int64_t> idx(r, 0);
                   int64_t in_off = 0;
                   const int64_t n = out_shape.numel();
                   for (int64_t o = 0; o < n; ++o) {
                     xn->grad[in_off] += self.grad[o];
                     for (int a = r - 1; a >= 0; --a) {
                       in_off += strides[a];
                       if (++idx[a] < out_shape[a]) break;
                       in_off -= strides[a] * out_shape[a];
                       idx[a] = 0;
                     }
                   }
                 });
  return result;
}

namespace detail {

// Views a tensor of rank >= 2 as [lead, channels, inner] with the channel
// axis fixed at 1.
struct ChannelView {
  int64_t lead;
  int64_t channels;
  int64_t inner;
};

inline ChannelView channel_view(const Shape& s, const char* op) {
  if (s.rank() < 2) {
    throw DimensionError(std::string(op) + ": needs rank >= 2, got " +
                         s.str());
  }
  ChannelView v{s[0], s[1], 1};
  for (int a = 2; a < s.rank(); ++a) v.inner *= s[a];
  return v;
}

}  // namespace detail

/// Slice [start, start+count) of the channel axis (axis 1).
template <typename Real>
Tensor<Real> narrow_channels(const Tensor<Real>& x, int start, int count) {
  const auto v = detail::channel_view(x.shape(), "narrow_channels");
  if (start < 0 || count <= 0 || start + count > v.channels) {
    throw DimensionError("narrow_channels: slice [" + std::to_string(start) +
                         ", " + std::to_string(start + count) +
                         ") out of range for " + x.shape().str());
  }
  std::vector<int> ext;
  for (int a = 0; a < x.rank(); ++a) ext.push_back(x.size(a));
  ext[1] = count;
  Shape out_shape{std::vector<int>(ext)};
  const auto& xv = x.values();
  std::vector<Real> out(out_shape.numel());
  for (int64_t l = 0; l < v.lead; ++l) {
    const Real* src = xv.data() + (l * v.channels + start) * v.inner;
    Real* dst = out.data() + l * count * v.inner;
    std::copy(src, src + count * v.inner, dst);
  }
  Tensor<Real> result(out_shape, std::move(out));
  detail::record(result, {x},
                 [xn = x.node(), v, start, count](auto& self) {
                   if (!xn->requires_grad) return;
                   xn->ensure_grad();
                   for (int64_t l = 0; l < v.lead; ++l) {
                     Real* dst =
                         xn->grad.data() + (l * v.channels + start) * v.inner;
                     const Real* src = self.grad.data() + l * count * v.inner;
                     for (int64_t i = 0; i < count * v.inner; ++i) {
                       dst[i] += src[i];
                     }
                   }
                 });
  return result;
}

/// Concatenation along the channel axis (axis 1).
template <typename Real>
Tensor<Real> concat_channels(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) {
    throw DimensionError("concat_channels: no inputs");
  }
  const auto v0 = detail::channel_view(parts[0].shape(), "concat_channels");
  int total_channels = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank() || p.size(0) != parts[0].size(0)) {
      throw DimensionError("concat_channels: incompatible shapes " +
                           parts[0].shape().str() + " vs " + p.shape().str());
    }
    const auto v = detail::channel_view(p.shape(), "concat_channels");
    if (v.inner != v0.inner) {
      throw DimensionError("concat_channels: incompatible shapes " +
                           parts[0].shape().str() + " vs " + p.shape().str());
    }
    total_channels += static_cast<int>(v.channels);
  }
  std::vector<int> ext;
  for (int a = 0; a < parts[0].rank(); ++a) ext.push_back(parts[0].size(a));
  ext[1] = total_channels;
  Shape out_shape{std::vector<int>(ext)};
  std::vector<Real> out(out_shape.numel());
  int64_t channel_off = 0;
  for (const auto& p : parts) {
    const auto v = detail::channel_view(p.shape(), "concat_channels");
    const auto& pv = p.values();
    for (int64_t l = 0; l < v.lead; ++l) {
      Real* dst =
          out.data() + (l * total_channels + channel_off) * v.inner;
      const Real* src = pv.data() + l * v.channels * v.inner;
      std::copy(src, src + v.channels * v.inner, dst);
    }
    channel_off += v.channels;
  }
  Tensor<Real> result(out_shape, std::move(out));

  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (autograd_enabled() && any) {
    std::vector<detail::NodePtr<Real>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto& node = *result.node();
    node.requires_grad = true;
    node.parents.assign(nodes.begin(), nodes.end());
    const int64_t inner = v0.inner;
    const int64_t lead = v0.lead;
    node.backprop = [nodes, inner, lead, total_channels](auto& self) {
      int64_t channel_off = 0;
      for (const auto& pn : nodes) {
        const int64_t ch = pn->shape[1];
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (int64_t l = 0; l < lead; ++l) {
            const Real* src =
                self.grad.data() + (l * total_channels + channel_off) * inner;
            Real* dst = pn->grad.data() + l * ch * inner;
            for (int64_t i = 0; i < ch * inner; ++i) dst[i] += src[i];
          }
        }
        channel_off += ch;
      }
    };
  }
  return result;
}

/// Keeps every stride-th frame starting at frame 0: [N,C,T,V] ->
/// [N,C,ceil(T/stride),V].
template <typename Real>
Tensor<Real> subsample_time(const Tensor<Real>& x, int stride) {
  if (x.rank() != 4) {
    throw DimensionError("subsample_time: expected rank 4, got " +
                         x.shape().str());
  }
  if (stride < 1) throw ConfigError("subsample_time: stride must be >= 1");
  if (stride == 1) return x;
  const int N = x.size(0), C = x.size(1), T = x.size(2), V = x.size(3);
  const int To = (T + stride - 1) / stride;
  Shape out_shape{N, C, To, V};
  const auto& xv = x.values();
  std::vector<Real> out(out_shape.numel());
  for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
    for (int t = 0; t < To; ++t) {
      const Real* src = xv.data() + (nc * T + int64_t(t) * stride) * V;
      Real* dst = out.data() + (nc * To + t) * V;
      std::copy(src, src + V, dst);
    }
  }
  Tensor<Real> result(out_shape, std::move(out));
  detail::record(result, {x},
                 [xn = x.node(), N, C, T, V, To, stride](auto& self) {
                   if (!xn->requires_grad) return;
                   xn->ensure_grad();
                   for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
                     for (int t = 0; t < To; ++t) {
                       Real* dst =
                           xn->grad.data() + (nc * T + int64_t(t) * stride) * V;
                       const Real* src = self.grad.data() + (nc * To + t) * V;
                       for (int v = 0; v < V; ++v) dst[v] += src[v];
                     }
                   }
                 });
  return result;
}

/// Joint-axis contraction out[n,c,t,v] = sum_w x[n,c,t,w] * a[w,v].
/// Differentiable in both arguments.
template <typename Real>
Tensor<Real> graph_contract(const Tensor<Real>& x, const Tensor<Real>& a) {
  if (x.rank() != 4 || a.rank() != 2 || a.size(0) != a.size(1) ||
      x.size(3) != a.size(0)) {
    throw DimensionError("graph_contract: incompatible shapes " +
                         x.shape().str() + " and " + a.shape().str());
  }
  const int V = a.size(0);
  const int64_t rows = x.numel() / V;
  const auto& xv = x.values();
  const auto& av = a.values();
  std::vector<Real> out(xv.size(), Real(0));
  parallel_for(rows, 2 * V * V, [&](int64_t begin, int64_t end) {
    for (int64_t r = begin; r < end; ++r) {
      const Real* xr = xv.data() + r * V;
      Real* outr = out.data() + r * V;
      for (int w = 0; w < V; ++w) {
        const Real xw = xr[w];
        if (xw == Real(0)) continue;
        const Real* arow = av.data() + int64_t(w) * V;
        for (int v = 0; v < V; ++v) outr[v] += xw * arow[v];
      }
    }
  });
  Tensor<Real> result(x.shape(), std::move(out));
  detail::check_finite(result.values(), "graph_contract");
  detail::record(
      result, {x, a}, [xn = x.node(), an = a.node(), rows, V](auto& self) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          parallel_for(rows, 2 * V * V, [&](int64_t begin, int64_t end) {
            for (int64_t r = begin; r < end; ++r) {
              const Real* gr = self.grad.data() + r * V;
              Real* dxr = xn->grad.data() + r * V;
              for (int w = 0; w < V; ++w) {
                const Real* arow = an->values.data() + int64_t(w) * V;
                Real acc(0);
                for (int v = 0; v < V; ++v) acc += gr[v] * arow[v];
                dxr[w] += acc;
              }
            }
          });
        }
        if (an->requires_grad) {
          an->ensure_grad();
          parallel_for(V, 2 * rows * V, [&](int64_t begin, int64_t end) {
            for (int64_t w = begin; w < end; ++w) {
              Real* darow = an->grad.data() + w * V;
              for (int64_t r = 0; r < rows; ++r) {
                const Real xw = xn->values[r * V + w];
                if (xw == Real(0)) continue;
                const Real* gr = self.grad.data() + r * V;
                for (int v = 0; v < V; ++v) darow[v] += xw * gr[v];
              }
            }
          });
        }
      });
  return result;
}

/// 1x1 convolution over channels: out[n,o,t,v] = b[o] + sum_i w[o,i] *
/// x[n,i,t,v].
template <typename Real>
Tensor<Real> pointwise_conv(const Tensor<Real>& x, const Tensor<Real>& w,
                            const Tensor<Real>& b) {
  if (x.rank() != 4 || w.rank() != 2 || b.rank() != 1 ||
      w.size(1) != x.size(1) || b.size(0) != w.size(0)) {
    throw DimensionError("pointwise_conv: incompatible shapes x=" +
                         x.shape().str() + " w=" + w.shape().str() +
                         " b=" + b.shape().str());
  }
  const int N = x.size(0), Ci = x.size(1), Co = w.size(0);
  const int64_t S = int64_t(x.size(2)) * x.size(3);
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  Shape out_shape{N, Co, x.size(2), x.size(3)};
  std::vector<Real> out(out_shape.numel());
  parallel_for(N, 2 * Co * Ci * S, [&](int64_t begin, int64_t end) {
    for (int64_t n = begin; n < end; ++n) {
      const Real* xb = xv.data() + n * Ci * S;
      Real* ob = out.data() + n * Co * S;
      for (int o = 0; o < Co; ++o) {
        Real* orow = ob + int64_t(o) * S;
        std::fill(orow, orow + S, bv[o]);
        for (int i = 0; i < Ci; ++i) {
          const Real coef = wv[int64_t(o) * Ci + i];
          if (coef == Real(0)) continue;
          const Real* xrow = xb + int64_t(i) * S;
          for (int64_t s = 0; s < S; ++s) orow[s] += coef * xrow[s];
        }
      }
    }
  });
  Tensor<Real> result(out_shape, std::move(out));
  detail::check_finite(result.values(), "pointwise_conv");
  detail::record(
      result, {x, w, b},
      [xn = x.node(), wn = w.node(), bn = b.node(), N, Ci, Co, S](auto& self) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          parallel_for(N, 2 * Co * Ci * S, [&](int64_t begin, int64_t end) {
            for (int64_t n = begin; n < end; ++n) {
              const Real* gb = self.grad.data() + n * Co * S;
              Real* dxb = xn->grad.data() + n * Ci * S;
              for (int o = 0; o < Co; ++o) {
                const Real* grow = gb + int64_t(o) * S;
                for (int i = 0; i < Ci; ++i) {
                  const Real coef = wn->values[int64_t(o) * Ci + i];
                  if (coef == Real(0)) continue;
                  Real* dxrow = dxb + int64_t(i) * S;
                  for (int64_t s = 0; s < S; ++s) dxrow[s] += coef * grow[s];
                }
              }
            }
          });
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          parallel_for(Co, 2 * N * Ci * S, [&](int64_t begin, int64_t end) {
            for (int64_t o = begin; o < end; ++o) {
              for (int64_t n = 0; n < N; ++n) {
                const Real* grow = self.grad.data() + (n * Co + o) * S;
                const Real* xb = xn->values.data() + n * Ci * S;
                for (int i = 0; i < Ci; ++i) {
                  const Real* xrow = xb + int64_t(i) * S;
                  Real acc(0);
                  for (int64_t s = 0; s < S; ++s) acc += grow[s] * xrow[s];
                  wn->grad[o * Ci + i] += acc;
                }
              }
            }
          });
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t n = 0; n < N; ++n) {
            for (int o = 0; o < Co; ++o) {
              const Real* grow = self.grad.data() + (n * Co + o) * S;
              Real acc(0);
              for (int64_t s = 0; s < S; ++s) acc += grow[s];
              bn->grad[o] += acc;
            }
          }
        }
      });
  return result;
}

/// Convolution along the frame axis only, kernel K_t x 1, zero padding
/// floor(K_t/2), output length ceil(T/stride).
template <typename Real>
Tensor<Real> temporal_conv(const Tensor<Real>& x, const Tensor<Real>& w,
                           const Tensor<Real>& b, int stride) {
  if (x.rank() != 4 || w.rank() != 3 || b.rank() != 1 ||
      w.size(1) != x.size(1) || b.size(0) != w.size(0)) {
    throw DimensionError("temporal_conv: incompatible shapes x=" +
                         x.shape().str() + " w=" + w.shape().str() +
                         " b=" + b.shape().str());
  }
  const int K = w.size(2);
  if (K % 2 == 0) {
    throw ConfigError("temporal_conv: kernel size " + std::to_string(K) +
                      " must be odd");
  }
  if (stride != 1 && stride != 2) {
    throw ConfigError("temporal_conv: stride must be 1 or 2, got " +
                      std::to_string(stride));
  }
  const int N = x.size(0), Ci = x.size(1), T = x.size(2), V = x.size(3);
  const int Co = w.size(0);
  const int pad = K / 2;
  const int To = (T + stride - 1) / stride;
  Shape out_shape{N, Co, To, V};
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  std::vector<Real> out(out_shape.numel());
  const int64_t cost = 2 * int64_t(Co) * Ci * K * To * V;
  parallel_for(N, cost, [&](int64_t begin, int64_t end) {
    for (int64_t n = begin; n < end; ++n) {
      const Real* xb = xv.data() + n * Ci * T * V;
      Real* ob = out.data() + n * Co * To * V;
      for (int o = 0; o < Co; ++o) {
        Real* oplane = ob + int64_t(o) * To * V;
        std::fill(oplane, oplane + int64_t(To) * V, bv[o]);
        for (int i = 0; i < Ci; ++i) {
          const Real* xplane = xb + int64_t(i) * T * V;
          const Real* wrow = wv.data() + (int64_t(o) * Ci + i) * K;
          for (int k = 0; k < K; ++k) {
            const Real coef = wrow[k];
            if (coef == Real(0)) continue;
            for (int to = 0; to < To; ++to) {
              const int ti = to * stride + k - pad;
              if (ti < 0 || ti >= T) continue;
              const Real* src = xplane + int64_t(ti) * V;
              Real* dst = oplane + int64_t(to) * V;
              for (int v = 0; v < V; ++v) dst[v] += coef * src[v];
            }
          }
        }
      }
    }
  });
  Tensor<Real> result(out_shape, std::move(out));
  detail::check_finite(result.values(), "temporal_conv");
  detail::record(
      result, {x, w, b},
      [xn = x.node(), wn = w.node(), bn = b.node(), N, Ci, Co, T, To, V, K,
       pad, stride, cost](auto& self) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          parallel_for(N, cost, [&](int64_t begin, int64_t end) {
            for (int64_t n = begin; n < end; ++n) {
              const Real* gb = self.grad.data() + n * Co * To * V;
              Real* dxb = xn->grad.data() + n * Ci * T * V;
              for (int o = 0; o < Co; ++o) {
                const Real* gplane = gb + int64_t(o) * To * V;
                for (int i = 0; i < Ci; ++i) {
                  Real* dxplane = dxb + int64_t(i) * T * V;
                  const Real* wrow = wn->values.data() + (int64_t(o) * Ci + i) * K;
                  for (int k = 0; k < K; ++k) {
                    const Real coef = wrow[k];
                    if (coef == Real(0)) continue;
                    for (int to = 0; to < To; ++to) {
                      const int ti = to * stride + k - pad;
                      if (ti < 0 || ti >= T) continue;
                      const Real* src = gplane + int64_t(to) * V;
                      Real* dst = dxplane + int64_t(ti) * V;
                      for (int v = 0; v < V; ++v) dst[v] += coef * src[v];
                    }
                  }
                }
              }
            }
          });
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          parallel_for(Co, 2 * int64_t(N) * Ci * K * To * V,
                       [&](int64_t begin, int64_t end) {
            for (int64_t o = begin; o < end; ++o) {
              for (int64_t n = 0; n < N; ++n) {
                const Real* gplane =
                    self.grad.data() + (n * Co + o) * To * V;
                const Real* xb = xn->values.data() + n * Ci * T * V;
                for (int i = 0; i < Ci; ++i) {
                  const Real* xplane = xb + int64_t(i) * T * V;
                  Real* dwrow = wn->grad.data() + (o * Ci + i) * K;
                  for (int k = 0; k < K; ++k) {
                    Real acc(0);
                    for (int to = 0; to < To; ++to) {
                      const int ti = to * stride + k - pad;
                      if (ti < 0 || ti >= T) continue;
                      const Real* grow = gplane + int64_t(to) * V;
                      const Real* xrow = xplane + int64_t(ti) * V;
                      for (int v = 0; v < V; ++v) acc += grow[v] * xrow[v];
                    }
                    dwrow[k] += acc;
                  }
                }
              }
            }
          });
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t n = 0; n < N; ++n) {
            for (int o = 0; o < Co; ++o) {
              const Real* gplane = self.grad.data() + (n * Co + o) * To * V;
              Real acc(0);
              for (int64_t s = 0; s < int64_t(To) * V; ++s) acc += gplane[s];
              bn->grad[o] += acc;
            }
          }
        }
      });
  return result;
}

/// Batch normalization over the channel axis (axis 1) of a rank 3 or 4
/// tensor. Train mode normalizes with batch moments (population variance)
/// and folds them into the running moments with the given momentum; eval
/// mode normalizes with the running moments. running_mean/running_var are
/// plain state, not tape participants.
template <typename Real>
Tensor<Real> batch_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Tensor<Real>& running_mean,
                        Tensor<Real>& running_var, Mode mode,
                        Real momentum = Real(0.1),
                        Real eps = Real(1e-5)) {
  const auto view = detail::channel_view(x.shape(), "batch_norm");
  const int64_t C = view.channels;
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C) {
    throw DimensionError("batch_norm: parameter length does not match " +
                         std::to_string(C) + " channels of " +
                         x.shape().str());
  }
  const int64_t count = view.lead * view.inner;
  const auto& xv = x.values();
  std::vector<Real> mean(C), invstd(C);
  if (mode == Mode::train) {
    auto& rm = running_mean.values_mut();
    auto& rv = running_var.values_mut();
    for (int64_t c = 0; c < C; ++c) {
      Real m(0);
      for (int64_t l = 0; l < view.lead; ++l) {
        const Real* row = xv.data() + (l * C + c) * view.inner;
        for (int64_t i = 0; i < view.inner; ++i) m += row[i];
      }
      m /= Real(count);
      Real var(0);
      for (int64_t l = 0; l < view.lead; ++l) {
        const Real* row = xv.data() + (l * C + c) * view.inner;
        for (int64_t i = 0; i < view.inner; ++i) {
          const Real d = row[i] - m;
          var += d * d;
        }
      }
      var /= Real(count);
      mean[c] = m;
      invstd[c] = Real(1) / std::sqrt(var + eps);
      rm[c] = (Real(1) - momentum) * rm[c] + momentum * m;
      rv[c] = (Real(1) - momentum) * rv[c] + momentum * var;
    }
  } else {
    const auto& rm = running_mean.values();
    const auto& rv = running_var.values();
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      invstd[c] = Real(1) / std::sqrt(rv[c] + eps);
    }
  }

  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<Real> out(xv.size());
  for (int64_t l = 0; l < view.lead; ++l) {
    for (int64_t c = 0; c < C; ++c) {
      const Real* row = xv.data() + (l * C + c) * view.inner;
      Real* orow = out.data() + (l * C + c) * view.inner;
      const Real a = gv[c] * invstd[c];
      const Real s = bv[c] - a * mean[c];
      for (int64_t i = 0; i < view.inner; ++i) orow[i] = a * row[i] + s;
    }
  }
  Tensor<Real> result(x.shape(), std::move(out));
  detail::check_finite(result.values(), "batch_norm");
  const bool train = mode == Mode::train;
  detail::record(
      result, {x, gamma, beta},
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), view, C, count,
       mean, invstd, train](auto& self) {
        for (int64_t c = 0; c < C; ++c) {
          // Per-channel reductions of the incoming gradient.
          Real sum_g(0), sum_gxh(0);
          for (int64_t l = 0; l < view.lead; ++l) {
            const int64_t off = (l * C + c) * view.inner;
            for (int64_t i = 0; i < view.inner; ++i) {
              const Real g = self.grad[off + i];
              sum_g += g;
              sum_gxh += g * (xn->values[off + i] - mean[c]) * invstd[c];
            }
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            gn->grad[c] += sum_gxh;
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad[c] += sum_g;
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            const Real a = gn->values[c] * invstd[c];
            if (train) {
              // d/dx of ((x - mu)/sigma) with mu, sigma functions of the
              // batch: g - mean(g) - xhat * mean(g * xhat), scaled.
              const Real mg = sum_g / Real(count);
              const Real mgxh = sum_gxh / Real(count);
              for (int64_t l = 0; l < view.lead; ++l) {
                const int64_t off = (l * C + c) * view.inner;
                for (int64_t i = 0; i < view.inner; ++i) {
                  const Real xh =
                      (xn->values[off + i] - mean[c]) * invstd[c];
                  xn->grad[off + i] +=
                      a * (self.grad[off + i] - mg - xh * mgxh);
                }
              }
            } else {
              for (int64_t l = 0; l < view.lead; ++l) {
                const int64_t off = (l * C + c) * view.inner;
                for (int64_t i = 0; i < view.inner; ++i) {
                  xn->grad[off + i] += a * self.grad[off + i];
                }
              }
            }
          }
        }
      });
  return result;
}

/// Mean over the frame and joint axes: [N,C,T,V] -> [N,C].
template <typename Real>
Tensor<Real> global_avg_pool(const Tensor<Real>& x) {
  if (x.rank() != 4) {
    throw DimensionError("global_avg_pool: expected rank 4, got " +
                         x.shape().str());
  }
  const int N = x.size(0), C = x.size(1);
  const int64_t S = int64_t(x.size(2)) * x.size(3);
  const auto& xv = x.values();
  std::vector<Real> out(int64_t(N) * C);
  for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
    const Real* row = xv.data() + nc * S;
    Real acc(0);
    for (int64_t s = 0; s < S; ++s) acc += row[s];
    out[nc] = acc / Real(S);
  }
  Tensor<Real> result(Shape{N, C}, std::move(out));
  detail::check_finite(result.values(), "global_avg_pool");
  detail::record(result, {x}, [xn = x.node(), N, C, S](auto& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
      const Real g = self.grad[nc] / Real(S);
      Real* row = xn->grad.data() + nc * S;
      for (int64_t s = 0; s < S; ++s) row[s] += g;
    }
  });
  return result;
}

/// Affine map out[n,k] = b[k] + sum_f x[n,f] * w[k,f].
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 ||
      w.size(1) != x.size(1) || b.size(0) != w.size(0)) {
    throw DimensionError("linear: incompatible shapes x=" + x.shape().str() +
                         " w=" + w.shape().str() + " b=" + b.shape().str());
  }
  const int N = x.size(0), F = x.size(1), K = w.size(0);
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  std::vector<Real> out(int64_t(N) * K);
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < K; ++k) {
      const Real* xrow = xv.data() + int64_t(n) * F;
      const Real* wrow = wv.data() + int64_t(k) * F;
      Real acc = bv[k];
      for (int f = 0; f < F; ++f) acc += xrow[f] * wrow[f];
      out[int64_t(n) * K + k] = acc;
    }
  }
  Tensor<Real> result(Shape{N, K}, std::move(out));
  detail::check_finite(result.values(), "linear");
  detail::record(
      result, {x, w, b},
      [xn = x.node(), wn = w.node(), bn = b.node(), N, F, K](auto& self) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (int n = 0; n < N; ++n) {
            for (int k = 0; k < K; ++k) {
              const Real g = self.grad[int64_t(n) * K + k];
              const Real* wrow = wn->values.data() + int64_t(k) * F;
              Real* dxrow = xn->grad.data() + int64_t(n) * F;
              for (int f = 0; f < F; ++f) dxrow[f] += g * wrow[f];
            }
          }
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          for (int n = 0; n < N; ++n) {
            const Real* xrow = xn->values.data() + int64_t(n) * F;
            for (int k = 0; k < K; ++k) {
              const Real g = self.grad[int64_t(n) * K + k];
              Real* dwrow = wn->grad.data() + int64_t(k) * F;
              for (int f = 0; f < F; ++f) dwrow[f] += g * xrow[f];
            }
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int n = 0; n < N; ++n) {
            for (int k = 0; k < K; ++k) {
              bn->grad[k] += self.grad[int64_t(n) * K + k];
            }
          }
        }
      });
  return result;
}

/// Row-wise softmax of a [N,K] tensor, stabilized by max subtraction.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x) {
  if (x.rank() != 2) {
    throw DimensionError("softmax: expected rank 2, got " + x.shape().str());
  }
  const int N = x.size(0), K = x.size(1);
  const auto& xv = x.values();
  std::vector<Real> out(xv.size());
  for (int n = 0; n < N; ++n) {
    const Real* row = xv.data() + int64_t(n) * K;
    Real* orow = out.data() + int64_t(n) * K;
    Real m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    Real z(0);
    for (int k = 0; k < K; ++k) {
      orow[k] = std::exp(row[k] - m);
      z += orow[k];
    }
    for (int k = 0; k < K; ++k) orow[k] /= z;
  }
  Tensor<Real> result(x.shape(), std::move(out));
  detail::check_finite(result.values(), "softmax");
  detail::record(result, {x}, [xn = x.node(), N, K, sv = result.values()](
                                  auto& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int n = 0; n < N; ++n) {
      const Real* s = sv.data() + int64_t(n) * K;
      const Real* g = self.grad.data() + int64_t(n) * K;
      Real dot(0);
      for (int k = 0; k < K; ++k) dot += g[k] * s[k];
      Real* dx = xn->grad.data() + int64_t(n) * K;
      for (int k = 0; k < K; ++k) dx[k] += s[k] * (g[k] - dot);
    }
  });
  return result;
}

/// Mean negative log-likelihood of integer labels under softmax(logits).
/// Fused log-sum-exp keeps the op stable for large logits.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits,
                           const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: expected rank 2 logits, got " +
                         logits.shape().str());
  }
  const int N = logits.size(0), K = logits.size(1);
  if (static_cast<int>(labels.size()) != N) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(N));
  }
  const auto& xv = logits.values();
  std::vector<Real> probs(xv.size());
  Real loss(0);
  for (int n = 0; n < N; ++n) {
    if (labels[n] < 0 || labels[n] >= K) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[n]) +
                       " out of range for " + std::to_string(K) + " classes");
    }
    const Real* row = xv.data() + int64_t(n) * K;
    Real* prow = probs.data() + int64_t(n) * K;
    Real m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    Real z(0);
    for (int k = 0; k < K; ++k) {
      prow[k] = std::exp(row[k] - m);
      z += prow[k];
    }
    for (int k = 0; k < K; ++k) prow[k] /= z;
    loss += m + std::log(z) - row[labels[n]];
  }
  loss /= Real(N);
  Tensor<Real> result(Shape{1}, std::vector<Real>{loss});
  detail::check_finite(result.values(), "cross_entropy");
  detail::record(result, {logits},
                 [xn = logits.node(), probs = std::move(probs), labels, N,
                  K](auto& self) {
                   if (!xn->requires_grad) return;
                   xn->ensure_grad();
                   const Real g = self.grad[0] / Real(N);
                   for (int n = 0; n < N; ++n) {
                     const Real* prow = probs.data() + int64_t(n) * K;
                     Real* dx = xn->grad.data() + int64_t(n) * K;
                     for (int k = 0; k < K; ++k) {
                       const Real indicator =
                           (k == labels[n]) ? Real(1) : Real(0);
                       dx[k] += g * (prow[k] - indicator);
                     }
                   }
                 });
  return result;
}

}  // namespace mstgcn
