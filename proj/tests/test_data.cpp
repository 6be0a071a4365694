#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "mstgcn/data.hpp"

using namespace mstgcn;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::path(::testing::TempDir()) / name).string();
}

std::vector<unsigned char> file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is),
                                    std::istreambuf_iterator<char>());
}

uint64_t fnv1a(const std::vector<unsigned char>& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

SkeletonSequence random_sequence(int c, int t, int v, int m, int label,
                                 std::mt19937& rng) {
  auto seq = SkeletonSequence::zeros(c, t, v, m);
  seq.label = label;
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  for (auto& x : seq.values) x = dist(rng);
  std::uniform_int_distribution<int> vf(1, t);
  seq.valid_frames = vf(rng);
  return seq;
}

void push_u32(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(v & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 24) & 0xff);
}

}  // namespace

// ---------------------------------------------------------------------------
// SKL1 round trips

TEST(SklFormat, EmptyDatasetRoundTrips) {
  Dataset data;
  data.manifest.num_classes = 5;
  data.manifest.topology = "chain:4";
  const auto path = temp_path("empty.skl");
  save_dataset(data, path);
  auto loaded = load_dataset(path);
  EXPECT_EQ(loaded.samples.size(), 0u);
  EXPECT_EQ(loaded.manifest.num_classes, 5u);
  EXPECT_EQ(loaded.manifest.topology, "chain:4");
}

TEST(SklFormat, HandAssembledSingleSample) {
  // Bytes written directly from the format definition.
  std::vector<unsigned char> bytes{'S', 'K', 'L', '1'};
  push_u32(bytes, 1);                      // version
  push_u32(bytes, 1);                      // num_samples
  push_u32(bytes, 3);                      // num_classes
  push_u32(bytes, (2u << 16) | 2u);        // chain:2
  push_u32(bytes, 2);                      // label
  push_u32(bytes, 1);                      // C
  push_u32(bytes, 2);                      // T
  push_u32(bytes, 2);                      // V
  push_u32(bytes, 1);                      // M
  push_u32(bytes, 1);                      // valid_frames
  const float values[4] = {1.5f, -2.0f, 0.0f, 4.25f};
  for (float v : values) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    push_u32(bytes, bits);
  }
  const auto path = temp_path("hand.skl");
  std::ofstream(path, std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), bytes.size());

  auto data = load_dataset(path);
  ASSERT_EQ(data.samples.size(), 1u);
  const auto& seq = data.samples[0];
  EXPECT_EQ(seq.label, 2);
  EXPECT_EQ(seq.channels, 1);
  EXPECT_EQ(seq.frames, 2);
  EXPECT_EQ(seq.joints, 2);
  EXPECT_EQ(seq.persons, 1);
  EXPECT_EQ(seq.valid_frames, 1);
  EXPECT_EQ(seq.at(0, 0, 0, 0), 1.5f);
  EXPECT_EQ(seq.at(0, 1, 1, 0), 4.25f);
  EXPECT_EQ(data.manifest.topology, "chain:2");
  ASSERT_EQ(data.manifest.offsets.size(), 1u);
  EXPECT_EQ(data.manifest.offsets[0], 20u);
}

TEST(SklFormat, HundredRandomSamplesRoundTripByteExact) {
  std::mt19937 rng(99);
  Dataset data;
  data.manifest.num_classes = 7;
  data.manifest.topology = "ntu25";
  for (int i = 0; i < 100; ++i) {
    data.samples.push_back(
        random_sequence(3, 1 + int(rng() % 20), 25, 2, int(rng() % 7), rng));
  }
  const auto path_a = temp_path("rt_a.skl");
  const auto path_b = temp_path("rt_b.skl");
  save_dataset(data, path_a);
  auto loaded = load_dataset(path_a);
  save_dataset(loaded, path_b);
  EXPECT_EQ(fnv1a(file_bytes(path_a)), fnv1a(file_bytes(path_b)));
  EXPECT_EQ(file_bytes(path_a), file_bytes(path_b));
  // offsets strictly increasing
  for (size_t i = 1; i < loaded.manifest.offsets.size(); ++i) {
    EXPECT_LT(loaded.manifest.offsets[i - 1], loaded.manifest.offsets[i]);
  }
}

TEST(SklFormat, BadMagicNamesOffset) {
  const auto path = temp_path("bad.skl");
  std::ofstream(path, std::ios::binary).write("JUNKJUNKJUNK", 12);
  try {
    load_dataset(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte 0"), std::string::npos);
  }
}

TEST(SklFormat, TruncationDetected) {
  Dataset data;
  data.manifest.num_classes = 2;
  data.manifest.topology = "chain:3";
  std::mt19937 rng(5);
  data.samples.push_back(random_sequence(3, 4, 3, 1, 1, rng));
  const auto path = temp_path("trunc.skl");
  save_dataset(data, path);
  auto bytes = file_bytes(path);
  bytes.resize(bytes.size() - 6);
  std::ofstream(path, std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  EXPECT_THROW(load_dataset(path), FormatError);
}

TEST(SklFormat, OutOfRangeLabelRejected) {
  Dataset data;
  data.manifest.num_classes = 2;
  data.manifest.topology = "chain:3";
  std::mt19937 rng(6);
  data.samples.push_back(random_sequence(3, 4, 3, 1, 5, rng));  // label 5
  const auto path = temp_path("label.skl");
  save_dataset(data, path);
  EXPECT_THROW(load_dataset(path), DataError);
}

// ---------------------------------------------------------------------------
// pad_replay

TEST(PadReplay, RepeatsPrefixCyclically) {
  std::mt19937 rng(7);
  auto seq = random_sequence(2, 100, 3, 1, 0, rng);
  seq.valid_frames = 100;
  auto padded = pad_replay(seq, 300);
  EXPECT_EQ(padded.frames, 300);
  EXPECT_EQ(padded.valid_frames, 300);
  for (int c = 0; c < 2; ++c) {
    for (int t = 0; t < 300; ++t) {
      for (int v = 0; v < 3; ++v) {
        EXPECT_EQ(padded.at(c, t, v, 0), seq.at(c, t % 100, v, 0));
      }
    }
  }
}

TEST(PadReplay, FullLengthUnchanged) {
  std::mt19937 rng(8);
  auto seq = random_sequence(3, 300, 4, 2, 0, rng);
  seq.valid_frames = 300;
  auto padded = pad_replay(seq, 300);
  EXPECT_EQ(padded.values, seq.values);
}

TEST(PadReplay, PartialCycleTail) {
  std::mt19937 rng(9);
  auto seq = random_sequence(1, 80, 2, 1, 0, rng);
  seq.valid_frames = 80;
  auto padded = pad_replay(seq, 300);
  // 80 * 3 full cycles plus frames [0..59]
  for (int t = 240; t < 300; ++t) {
    for (int v = 0; v < 2; ++v) {
      EXPECT_EQ(padded.at(0, t, v, 0), seq.at(0, t - 240, v, 0));
    }
  }
}

TEST(PadReplay, IdempotentAtTarget) {
  std::mt19937 rng(10);
  auto seq = random_sequence(2, 50, 3, 1, 0, rng);
  seq.valid_frames = 50;
  auto once = pad_replay(seq, 300);
  auto twice = pad_replay(once, 300);
  EXPECT_EQ(once.values, twice.values);
}

// ---------------------------------------------------------------------------
// crop_window

TEST(CropWindow, CenterCropOf300Is75To224) {
  std::mt19937 rng(11);
  auto seq = random_sequence(1, 300, 2, 1, 0, rng);
  seq.valid_frames = 300;
  auto crop = crop_window(seq, 150, CropMode::center, rng);
  EXPECT_EQ(crop.frames, 150);
  for (int t = 0; t < 150; ++t) {
    EXPECT_EQ(crop.at(0, t, 0, 0), seq.at(0, t + 75, 0, 0));
  }
}

TEST(CropWindow, FullWindowIsIdentity) {
  std::mt19937 rng(12);
  auto seq = random_sequence(2, 64, 3, 1, 0, rng);
  seq.valid_frames = 64;
  auto crop = crop_window(seq, 64, CropMode::random, rng);
  EXPECT_EQ(crop.values, seq.values);
}

TEST(CropWindow, SeededRandomStartReproducible) {
  std::mt19937 rng_a(1234), rng_b(1234);
  std::mt19937 data_rng(13);
  auto seq = random_sequence(2, 300, 3, 1, 0, data_rng);
  seq.valid_frames = 300;
  auto a = crop_window(seq, 150, CropMode::random, rng_a);
  auto b = crop_window(seq, 150, CropMode::random, rng_b);
  EXPECT_EQ(a.values, b.values);
}

TEST(CropWindow, ShortSequencePadsFirst) {
  std::mt19937 rng(14);
  auto seq = random_sequence(1, 40, 2, 1, 0, rng);
  seq.valid_frames = 40;
  auto crop = crop_window(seq, 64, CropMode::center, rng);
  EXPECT_EQ(crop.frames, 64);
  EXPECT_EQ(crop.valid_frames, 64);
}

// ---------------------------------------------------------------------------
// person selection

TEST(SelectPersons, MovingPersonOutranksStatic) {
  auto seq = SkeletonSequence::zeros(3, 10, 2, 3);
  // person 1 moves, persons 0 and 2 are empty
  for (int t = 0; t < 10; ++t) seq.at(0, t, 0, 1) = float(t);
  auto kept = select_top_persons(seq, 2);
  EXPECT_EQ(kept.persons, 2);
  for (int t = 0; t < 10; ++t) {
    EXPECT_EQ(kept.at(0, t, 0, 0), float(t));  // mover first
    EXPECT_EQ(kept.at(0, t, 0, 1), 0.0f);      // zero pad second
  }
}

TEST(SelectPersons, EnergyOrderIsDescending) {
  // Two-frame series {0, 2a} has population std a; a single active (c, v)
  // cell gives the person energy a exactly.
  auto seq = SkeletonSequence::zeros(3, 2, 2, 3);
  seq.at(0, 1, 0, 0) = 10.0f;  // energy 5
  seq.at(0, 1, 0, 1) = 6.0f;   // energy 3
  // person 2 stays zero
  EXPECT_DOUBLE_EQ(person_energy(seq, 0), 5.0);
  EXPECT_DOUBLE_EQ(person_energy(seq, 1), 3.0);
  EXPECT_DOUBLE_EQ(person_energy(seq, 2), 0.0);
  auto kept = select_top_persons(seq, 2);
  EXPECT_EQ(kept.at(0, 1, 0, 0), 10.0f);
  EXPECT_EQ(kept.at(0, 1, 0, 1), 6.0f);
}

TEST(SelectPersons, SinglePersonPadsSecondSlot) {
  std::mt19937 rng(15);
  auto seq = random_sequence(3, 5, 4, 1, 0, rng);
  auto kept = select_top_persons(seq, 2);
  EXPECT_EQ(kept.persons, 2);
  for (int c = 0; c < 3; ++c) {
    for (int t = 0; t < 5; ++t) {
      for (int v = 0; v < 4; ++v) {
        EXPECT_EQ(kept.at(c, t, v, 0), seq.at(c, t, v, 0));
        EXPECT_EQ(kept.at(c, t, v, 1), 0.0f);
      }
    }
  }
}

TEST(SelectPersons, RankingIsPermutationEquivariant) {
  std::mt19937 rng(16);
  auto seq = SkeletonSequence::zeros(2, 6, 2, 3);
  std::uniform_real_distribution<float> dist(-1, 1);
  for (auto& v : seq.values) v = dist(rng);
  seq.valid_frames = 6;
  auto kept = select_top_persons(seq, 2);

  auto swapped = SkeletonSequence::zeros(2, 6, 2, 3);
  swapped.valid_frames = 6;
  const int perm[3] = {2, 0, 1};
  for (int c = 0; c < 2; ++c) {
    for (int t = 0; t < 6; ++t) {
      for (int v = 0; v < 2; ++v) {
        for (int m = 0; m < 3; ++m) {
          swapped.at(c, t, v, perm[m]) = seq.at(c, t, v, m);
        }
      }
    }
  }
  auto kept_swapped = select_top_persons(swapped, 2);
  EXPECT_EQ(kept.values, kept_swapped.values);
}

// ---------------------------------------------------------------------------
// stream derivation

TEST(DeriveStream, BoneIsChildMinusParent) {
  auto topo = build_topology("chain:2");
  auto seq = SkeletonSequence::zeros(3, 1, 2, 1);
  seq.at(0, 0, 1, 0) = 1.0f;
  seq.at(1, 0, 1, 0) = 2.0f;
  auto bone = derive_stream(seq, StreamKind::bone, topo);
  EXPECT_EQ(bone.at(0, 0, 1, 0), 1.0f);
  EXPECT_EQ(bone.at(1, 0, 1, 0), 2.0f);
  EXPECT_EQ(bone.at(2, 0, 1, 0), 0.0f);
  // center joint has no parent
  EXPECT_EQ(bone.at(0, 0, 0, 0), 0.0f);
}

TEST(DeriveStream, ConstantSequenceHasZeroMotion) {
  auto topo = build_topology("chain:3");
  auto seq = SkeletonSequence::zeros(3, 8, 3, 1);
  for (int c = 0; c < 3; ++c) {
    for (int t = 0; t < 8; ++t) {
      for (int v = 0; v < 3; ++v) seq.at(c, t, v, 0) = 1.0f + c + v;
    }
  }
  auto motion = derive_stream(seq, StreamKind::joint_motion, topo);
  for (float v : motion.values) EXPECT_EQ(v, 0.0f);
}

TEST(DeriveStream, MatchesDefinitionOracle) {
  auto topo = build_topology("chain:3");
  std::mt19937 rng(17);
  auto seq = random_sequence(3, 6, 3, 2, 0, rng);
  seq.valid_frames = 6;

  auto joint = derive_stream(seq, StreamKind::joint, topo);
  EXPECT_EQ(joint.values, seq.values);

  auto bone = derive_stream(seq, StreamKind::bone, topo);
  auto motion = derive_stream(seq, StreamKind::joint_motion, topo);
  auto bone_motion = derive_stream(seq, StreamKind::bone_motion, topo);
  // chain parents: 0 -> none, 1 -> 0, 2 -> 1
  for (int c = 0; c < 3; ++c) {
    for (int t = 0; t < 6; ++t) {
      for (int m = 0; m < 2; ++m) {
        EXPECT_EQ(bone.at(c, t, 0, m), 0.0f);
        EXPECT_EQ(bone.at(c, t, 1, m),
                  seq.at(c, t, 1, m) - seq.at(c, t, 0, m));
        EXPECT_EQ(bone.at(c, t, 2, m),
                  seq.at(c, t, 2, m) - seq.at(c, t, 1, m));
        for (int v = 0; v < 3; ++v) {
          const float expect_motion =
              t + 1 < 6 ? seq.at(c, t + 1, v, m) - seq.at(c, t, v, m) : 0.0f;
          EXPECT_EQ(motion.at(c, t, v, m), expect_motion);
          const float bone_now =
              v == 0 ? 0.0f : seq.at(c, t, v, m) - seq.at(c, t, v - 1, m);
          const float bone_next =
              t + 1 < 6 ? (v == 0 ? 0.0f
                                  : seq.at(c, t + 1, v, m) -
                                        seq.at(c, t + 1, v - 1, m))
                        : bone_now;
          const float expect_bm = t + 1 < 6 ? bone_next - bone_now : 0.0f;
          EXPECT_EQ(bone_motion.at(c, t, v, m), expect_bm);
        }
      }
    }
  }
}

TEST(DeriveStream, BoneTelescopesAlongPath) {
  // Summing bones from the center out to a leaf telescopes to
  // joint[leaf] - joint[center].
  auto topo = build_topology("chain:5");
  std::mt19937 rng(18);
  auto seq = random_sequence(3, 4, 5, 1, 0, rng);
  seq.valid_frames = 4;
  auto bone = derive_stream(seq, StreamKind::bone, topo);
  for (int c = 0; c < 3; ++c) {
    for (int t = 0; t < 4; ++t) {
      float total = 0.0f;
      for (int v = 1; v <= 4; ++v) total += bone.at(c, t, v, 0);
      EXPECT_NEAR(total, seq.at(c, t, 4, 0) - seq.at(c, t, 0, 0), 1e-5);
    }
  }
}

TEST(NormalizeCenter, ShiftsFirstFrameCenterToOrigin) {
  auto topo = build_topology("chain:3");
  std::mt19937 rng(19);
  auto seq = random_sequence(3, 4, 3, 2, 0, rng);
  // zero out person 1 to model an absent slot
  for (int c = 0; c < 3; ++c) {
    for (int t = 0; t < 4; ++t) {
      for (int v = 0; v < 3; ++v) seq.at(c, t, v, 1) = 0.0f;
    }
  }
  auto normalized = normalize_center(seq, topo);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(normalized.at(c, 0, topo.center_joint, 0), 0.0f);
    for (int t = 0; t < 4; ++t) {
      for (int v = 0; v < 3; ++v) {
        EXPECT_EQ(normalized.at(c, t, v, 1), 0.0f);  // absent slot untouched
      }
    }
  }
}

// ---------------------------------------------------------------------------
// synthetic data

TEST(Synthetic, SameSeedSameBytes) {
  auto a = generate_synthetic(4, 5, "chain:9", 32, 77);
  auto b = generate_synthetic(4, 5, "chain:9", 32, 77);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].values, b.samples[i].values);
    EXPECT_EQ(a.samples[i].label, b.samples[i].label);
  }
  const auto pa = temp_path("synth_a.skl");
  const auto pb = temp_path("synth_b.skl");
  save_dataset(a, pa);
  save_dataset(b, pb);
  EXPECT_EQ(file_bytes(pa), file_bytes(pb));
}

TEST(Synthetic, NoiselessArchetypesArePeriodic) {
  const int T = 32;
  auto data = generate_synthetic(4, 1, "chain:8", T, 3, 0.0f);
  // class 1 oscillates at frequency 2: period T/2
  const auto& seq = data.samples[1];
  ASSERT_EQ(seq.label, 1);
  for (int t = 0; t + T / 2 < T; ++t) {
    for (int v = 0; v < 8; ++v) {
      EXPECT_NEAR(seq.at(1, t, v, 0), seq.at(1, t + T / 2, v, 0), 2e-6);
      EXPECT_NEAR(seq.at(2, t, v, 0), seq.at(2, t + T / 2, v, 0), 2e-6);
    }
  }
}

TEST(Synthetic, ClassesHaveDisjointActiveJointGroups) {
  auto data = generate_synthetic(4, 1, "chain:8", 16, 5, 0.0f);
  for (const auto& seq : data.samples) {
    for (int v = 0; v < 8; ++v) {
      double movement = 0;
      for (int t = 0; t < 16; ++t) {
        movement += std::abs(seq.at(1, t, v, 0)) + std::abs(seq.at(2, t, v, 0));
      }
      if (v % 4 == seq.label) {
        EXPECT_GT(movement, 0.1) << "label " << seq.label << " joint " << v;
      } else {
        EXPECT_EQ(movement, 0.0) << "label " << seq.label << " joint " << v;
      }
    }
  }
}

TEST(Synthetic, NearestCentroidBaselineSeparates) {
  // Learnability floor: class centroids on raw coordinates classify a
  // held-out draw at >80%.
  const int train_per_class = 20, eval_per_class = 10, classes = 4;
  auto train = generate_synthetic(classes, train_per_class, "chain:9", 32, 21);
  auto eval = generate_synthetic(classes, eval_per_class, "chain:9", 32, 22);
  const size_t dim = train.samples[0].values.size();
  std::vector<std::vector<double>> centroids(classes,
                                             std::vector<double>(dim, 0.0));
  std::vector<int> counts(classes, 0);
  for (const auto& seq : train.samples) {
    for (size_t i = 0; i < dim; ++i) {
      centroids[seq.label][i] += seq.values[i];
    }
    counts[seq.label]++;
  }
  for (int k = 0; k < classes; ++k) {
    for (auto& v : centroids[k]) v /= counts[k];
  }
  int hits = 0;
  for (const auto& seq : eval.samples) {
    int best = -1;
    double best_dist = 1e300;
    for (int k = 0; k < classes; ++k) {
      double d = 0;
      for (size_t i = 0; i < dim; ++i) {
        const double diff = seq.values[i] - centroids[k][i];
        d += diff * diff;
      }
      if (d < best_dist) {
        best_dist = d;
        best = k;
      }
    }
    if (best == seq.label) ++hits;
  }
  EXPECT_GT(double(hits) / eval.samples.size(), 0.8);
}

TEST(Synthetic, TooManyClassesRejected) {
  EXPECT_THROW(generate_synthetic(9, 1, "chain:9", 16, 0), ConfigError);
}
