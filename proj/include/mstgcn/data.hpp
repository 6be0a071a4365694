#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "mstgcn/graph.hpp"

namespace mstgcn {

/// One raw multi-person coordinate sequence. Storage order is
/// [C][T][V][M]; absent persons and frames past valid_frames are all-zero.
struct SkeletonSequence {
  int channels = 0;      // C
  int frames = 0;        // T
  int joints = 0;        // V
  int persons = 0;       // M
  int valid_frames = 0;  // <= frames
  int label = 0;
  std::vector<float> values;

  int64_t numel() const {
    return int64_t(channels) * frames * joints * persons;
  }

  float at(int c, int t, int v, int m) const {
    return values[((size_t(c) * frames + t) * joints + v) * persons + m];
  }
  float& at(int c, int t, int v, int m) {
    return values[((size_t(c) * frames + t) * joints + v) * persons + m];
  }

  static SkeletonSequence zeros(int c, int t, int v, int m) {
    SkeletonSequence seq;
    seq.channels = c;
    seq.frames = t;
    seq.joints = v;
    seq.persons = m;
    seq.valid_frames = t;
    seq.values.assign(size_t(c) * t * v * m, 0.0f);
    return seq;
  }
};

/// Header-level description of a dataset file plus per-sample byte offsets.
struct DatasetManifest {
  uint32_t num_samples = 0;
  uint32_t num_classes = 0;
  std::string topology;
  std::vector<uint64_t> offsets;  // strictly increasing, one per sample
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SkeletonSequence> samples;
};

enum class StreamKind { joint, bone, joint_motion, bone_motion };

inline StreamKind parse_stream_kind(const std::string& name) {
  if (name == "joint") return StreamKind::joint;
  if (name == "bone") return StreamKind::bone;
  if (name == "joint_motion") return StreamKind::joint_motion;
  if (name == "bone_motion") return StreamKind::bone_motion;
  throw ConfigError("unknown stream kind \"" + name + "\"");
}

inline const char* stream_kind_name(StreamKind kind) {
  switch (kind) {
    case StreamKind::joint: return "joint";
    case StreamKind::bone: return "bone";
    case StreamKind::joint_motion: return "joint_motion";
    case StreamKind::bone_motion: return "bone_motion";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// SKL1 file format (little-endian):
//   magic "SKL1", u32 version=1, u32 num_samples, u32 num_classes,
//   u32 topology_code; per sample: u32 label, u32 C, u32 T, u32 V, u32 M,
//   u32 valid_frames, then C*T*V*M f32 values in [C][T][V][M] order.
// topology_code packs a family id in the upper 16 bits and the joint count
// in the lower 16: family 0 = ntu25, 1 = kinetics18, 2 = chain, 3 = star.

inline uint32_t topology_code(const std::string& kind) {
  const auto topo = build_topology(kind);  // validates
  uint32_t family;
  if (kind == "ntu25") family = 0;
  else if (kind == "kinetics18") family = 1;
  else if (kind.rfind("chain:", 0) == 0) family = 2;
  else family = 3;
  return (family << 16) | uint32_t(topo.num_joints);
}

inline std::string topology_from_code(uint32_t code) {
  const uint32_t family = code >> 16;
  const uint32_t joints = code & 0xffff;
  switch (family) {
    case 0: return "ntu25";
    case 1: return "kinetics18";
    case 2: return "chain:" + std::to_string(joints);
    case 3: return "star:" + std::to_string(joints);
    default:
      throw FormatError("unknown topology code " + std::to_string(code));
  }
}

namespace detail {

inline void skl_write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t skl_read_u32(std::istream& is, const std::string& path,
                             uint64_t& cursor) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) {
    throw FormatError(path + ": truncated at byte " + std::to_string(cursor));
  }
  cursor += 4;
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

}  // namespace detail

inline constexpr uint32_t kSkeletonFormatVersion = 1;

inline void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write("SKL1", 4);
  detail::skl_write_u32(os, kSkeletonFormatVersion);
  detail::skl_write_u32(os, uint32_t(data.samples.size()));
  detail::skl_write_u32(os, data.manifest.num_classes);
  detail::skl_write_u32(os, topology_code(data.manifest.topology));
  for (const auto& seq : data.samples) {
    detail::skl_write_u32(os, uint32_t(seq.label));
    detail::skl_write_u32(os, uint32_t(seq.channels));
    detail::skl_write_u32(os, uint32_t(seq.frames));
    detail::skl_write_u32(os, uint32_t(seq.joints));
    detail::skl_write_u32(os, uint32_t(seq.persons));
    detail::skl_write_u32(os, uint32_t(seq.valid_frames));
    for (float v : seq.values) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::skl_write_u32(os, bits);
    }
  }
  if (!os) throw IoError("failed writing " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  uint64_t cursor = 0;
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SKL1", 4) != 0) {
    throw FormatError(path + ": bad magic at byte 0 (expected \"SKL1\")");
  }
  cursor = 4;
  const uint32_t version = detail::skl_read_u32(is, path, cursor);
  if (version != kSkeletonFormatVersion) {
    throw FormatError(path + ": unsupported version " +
                      std::to_string(version));
  }
  Dataset data;
  const uint32_t num_samples = detail::skl_read_u32(is, path, cursor);
  data.manifest.num_samples = num_samples;
  data.manifest.num_classes = detail::skl_read_u32(is, path, cursor);
  data.manifest.topology =
      topology_from_code(detail::skl_read_u32(is, path, cursor));
  data.samples.reserve(num_samples);
  for (uint32_t i = 0; i < num_samples; ++i) {
    data.manifest.offsets.push_back(cursor);
    SkeletonSequence seq;
    seq.label = int(detail::skl_read_u32(is, path, cursor));
    seq.channels = int(detail::skl_read_u32(is, path, cursor));
    seq.frames = int(detail::skl_read_u32(is, path, cursor));
    seq.joints = int(detail::skl_read_u32(is, path, cursor));
    seq.persons = int(detail::skl_read_u32(is, path, cursor));
    seq.valid_frames = int(detail::skl_read_u32(is, path, cursor));
    if (seq.channels < 1 || seq.frames < 1 || seq.joints < 1 ||
        seq.persons < 1 || seq.valid_frames < 1 ||
        seq.valid_frames > seq.frames) {
      throw FormatError(path + ": bad sample header at byte " +
                        std::to_string(data.manifest.offsets.back()));
    }
    if (seq.label < 0 ||
        uint32_t(seq.label) >= data.manifest.num_classes) {
      throw DataError(path + ": sample " + std::to_string(i) + " label " +
                      std::to_string(seq.label) + " out of range for " +
                      std::to_string(data.manifest.num_classes) + " classes");
    }
    seq.values.resize(size_t(seq.numel()));
    for (auto& v : seq.values) {
      const uint32_t bits = detail::skl_read_u32(is, path, cursor);
      std::memcpy(&v, &bits, 4);
    }
    data.samples.push_back(std::move(seq));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Cyclically replays the valid prefix until target_frames. Sequences at or
/// beyond the target are returned unchanged.
inline SkeletonSequence pad_replay(const SkeletonSequence& seq,
                                   int target_frames = 300) {
  if (seq.valid_frames < 1) {
    throw DataError("pad_replay: sequence has no valid frames");
  }
  if (seq.valid_frames >= target_frames) return seq;
  SkeletonSequence out = SkeletonSequence::zeros(
      seq.channels, target_frames, seq.joints, seq.persons);
  out.label = seq.label;
  out.valid_frames = target_frames;
  const size_t frame_size = size_t(seq.joints) * seq.persons;
  for (int c = 0; c < seq.channels; ++c) {
    for (int t = 0; t < target_frames; ++t) {
      const int src_t = t % seq.valid_frames;
      std::copy_n(
          seq.values.begin() + (size_t(c) * seq.frames + src_t) * frame_size,
          frame_size,
          out.values.begin() + (size_t(c) * target_frames + t) * frame_size);
    }
  }
  return out;
}

enum class CropMode { random, center };

/// Contiguous window of `window` frames; random start when training,
/// centered at eval. Sequences shorter than the window are replay-padded
/// first.
inline SkeletonSequence crop_window(const SkeletonSequence& seq, int window,
                                    CropMode mode, std::mt19937& rng) {
  if (window < 1) throw ConfigError("crop_window: window must be >= 1");
  const SkeletonSequence* src = &seq;
  SkeletonSequence padded;
  if (seq.valid_frames < window) {
    padded = pad_replay(seq, window);
    src = &padded;
  }
  int start;
  if (mode == CropMode::center) {
    start = (src->valid_frames - window) / 2;
  } else {
    std::uniform_int_distribution<int> dist(0, src->valid_frames - window);
    start = dist(rng);
  }
  SkeletonSequence out = SkeletonSequence::zeros(src->channels, window,
                                                 src->joints, src->persons);
  out.label = src->label;
  out.valid_frames = window;
  const size_t frame_size = size_t(src->joints) * src->persons;
  for (int c = 0; c < src->channels; ++c) {
    std::copy_n(src->values.begin() +
                    (size_t(c) * src->frames + start) * frame_size,
                size_t(window) * frame_size,
                out.values.begin() + size_t(c) * window * frame_size);
  }
  return out;
}

/// Average energy of one person slot: the sum over coordinates and joints
/// of the population standard deviation of that coordinate's time series
/// (over the valid prefix).
inline double person_energy(const SkeletonSequence& seq, int person) {
  const int T = seq.valid_frames;
  double energy = 0.0;
  for (int c = 0; c < seq.channels; ++c) {
    for (int v = 0; v < seq.joints; ++v) {
      double mean = 0.0;
      for (int t = 0; t < T; ++t) mean += seq.at(c, t, v, person);
      mean /= T;
      double var = 0.0;
      for (int t = 0; t < T; ++t) {
        const double d = seq.at(c, t, v, person) - mean;
        var += d * d;
      }
      energy += std::sqrt(var / T);
    }
  }
  return energy;
}

/// Keeps the `keep` highest-energy person slots (energy order, ties by slot
/// index), zero-padding when fewer are present.
inline SkeletonSequence select_top_persons(const SkeletonSequence& seq,
                                           int keep = 2) {
  if (seq.persons < 1) throw DataError("select_top_persons: no person slots");
  std::vector<int> order(seq.persons);
  for (int m = 0; m < seq.persons; ++m) order[m] = m;
  std::vector<double> energy(seq.persons);
  for (int m = 0; m < seq.persons; ++m) energy[m] = person_energy(seq, m);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return energy[a] > energy[b]; });
  SkeletonSequence out =
      SkeletonSequence::zeros(seq.channels, seq.frames, seq.joints, keep);
  out.label = seq.label;
  out.valid_frames = seq.valid_frames;
  for (int slot = 0; slot < keep && slot < seq.persons; ++slot) {
    const int m = order[slot];
    for (int c = 0; c < seq.channels; ++c) {
      for (int t = 0; t < seq.frames; ++t) {
        for (int v = 0; v < seq.joints; ++v) {
          out.at(c, t, v, slot) = seq.at(c, t, v, m);
        }
      }
    }
  }
  return out;
}

/// The four input streams: joint (identity), bone (joint minus its parent
/// toward the center, zero at the center), joint motion (frame differences,
/// last valid frame zero), bone motion (motion of bone).
inline SkeletonSequence derive_stream(const SkeletonSequence& seq,
                                      StreamKind kind,
                                      const SkeletonTopology& topo) {
  if (kind == StreamKind::joint) return seq;
  if (topo.num_joints != seq.joints) {
    throw DimensionError("derive_stream: topology has " +
                         std::to_string(topo.num_joints) +
                         " joints, sequence has " +
                         std::to_string(seq.joints));
  }
  auto bone_of = [&](const SkeletonSequence& in) {
    const auto parents = parents_toward_center(topo);
    SkeletonSequence out = in;
    for (int v = 0; v < in.joints; ++v) {
      const int parent = parents[v];
      for (int c = 0; c < in.channels; ++c) {
        for (int t = 0; t < in.frames; ++t) {
          for (int m = 0; m < in.persons; ++m) {
            out.at(c, t, v, m) =
                parent < 0 ? 0.0f
                           : in.at(c, t, v, m) - in.at(c, t, parent, m);
          }
        }
      }
    }
    return out;
  };
  auto motion_of = [&](const SkeletonSequence& in) {
    SkeletonSequence out = in;
    const int T = in.valid_frames;
    for (int c = 0; c < in.channels; ++c) {
      for (int v = 0; v < in.joints; ++v) {
        for (int m = 0; m < in.persons; ++m) {
          for (int t = 0; t + 1 < T; ++t) {
            out.at(c, t, v, m) = in.at(c, t + 1, v, m) - in.at(c, t, v, m);
          }
          out.at(c, T - 1, v, m) = 0.0f;
        }
      }
    }
    return out;
  };
  switch (kind) {
    case StreamKind::bone: return bone_of(seq);
    case StreamKind::joint_motion: return motion_of(seq);
    case StreamKind::bone_motion: return motion_of(bone_of(seq));
    default: return seq;
  }
}

/// Subtracts each person's center-joint position in its first valid frame
/// from all of that person's coordinates. All-zero person slots are
/// untouched (their center is the origin already).
inline SkeletonSequence normalize_center(const SkeletonSequence& seq,
                                         const SkeletonTopology& topo) {
  if (topo.num_joints != seq.joints) {
    throw DimensionError("normalize_center: topology/sequence joint mismatch");
  }
  SkeletonSequence out = seq;
  for (int m = 0; m < seq.persons; ++m) {
    for (int c = 0; c < seq.channels; ++c) {
      const float origin = seq.at(c, 0, topo.center_joint, m);
      if (origin == 0.0f) continue;
      for (int t = 0; t < seq.frames; ++t) {
        for (int v = 0; v < seq.joints; ++v) {
          out.at(c, t, v, m) -= origin;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

inline constexpr int kMaxSyntheticClasses = 8;

/// Deterministic desk-scale dataset. Each class animates its own joint
/// group (v mod num_classes) with a class-specific frequency and phase;
/// samples vary by an amplitude jitter and coordinate noise. Classes stay
/// separable because the active joint groups are disjoint.
inline Dataset generate_synthetic(int num_classes, int samples_per_class,
                                  const std::string& topology_kind, int frames,
                                  uint64_t seed, float noise_sigma = 0.05f) {
  if (num_classes < 1 || num_classes > kMaxSyntheticClasses) {
    throw ConfigError("generate_synthetic: num_classes must be in [1, " +
                      std::to_string(kMaxSyntheticClasses) + "], got " +
                      std::to_string(num_classes));
  }
  if (samples_per_class < 1 || frames < 2) {
    throw ConfigError("generate_synthetic: need samples_per_class >= 1 and "
                      "frames >= 2");
  }
  const auto topo = build_topology(topology_kind);
  const int V = topo.num_joints;
  Dataset data;
  data.manifest.num_classes = uint32_t(num_classes);
  data.manifest.topology = topology_kind;
  std::mt19937 rng(static_cast<uint32_t>(seed));
  std::normal_distribution<float> noise(0.0f, 1.0f);
  std::uniform_real_distribution<float> jitter(0.8f, 1.2f);
  constexpr float kPi = 3.14159265358979323846f;
  for (int cls = 0; cls < num_classes; ++cls) {
    const float freq = 1.0f + float(cls);
    const float phase = kPi * float(cls) / 8.0f;
    for (int s = 0; s < samples_per_class; ++s) {
      SkeletonSequence seq = SkeletonSequence::zeros(3, frames, V, 1);
      seq.label = cls;
      const float amp = 0.5f * jitter(rng);
      for (int t = 0; t < frames; ++t) {
        const float angle = 2.0f * kPi * freq * float(t) / float(frames);
        for (int v = 0; v < V; ++v) {
          // Static layout along x; class-active joints oscillate in y/z.
          seq.at(0, t, v, 0) = 0.1f * float(v);
          if (v % num_classes == cls) {
            seq.at(1, t, v, 0) = amp * std::sin(angle + phase);
            seq.at(2, t, v, 0) = amp * std::cos(angle + phase);
          }
        }
      }
      if (noise_sigma > 0.0f) {
        for (auto& v : seq.values) v += noise_sigma * noise(rng);
      }
      data.samples.push_back(std::move(seq));
    }
  }
  data.manifest.num_samples = uint32_t(data.samples.size());
  return data;
}

}  // namespace mstgcn
