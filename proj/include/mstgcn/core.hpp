#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mstgcn {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor extents do not agree with an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configuration value (preset, block spec, config file key) is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An API precondition was violated (non-scalar loss, missing gradient, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A skeleton topology is malformed (disconnected, bad joint index).
class TopologyError : public Error {
 public:
  using Error::Error;
};

/// An index (class label, joint, frame) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Dataset contents violate their manifest (label range, sample count).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A file's bytes do not match the expected format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Dense tensor extents, rank 0..5, row-major storage order.
class Shape {
 public:
  static constexpr int kMaxRank = 5;

  Shape() = default;

  Shape(std::initializer_list<int> extents) {
    for (int e : extents) push(e);
  }

  explicit Shape(const std::vector<int>& extents) {
    for (int e : extents) push(e);
  }

  int rank() const { return rank_; }

  int operator[](int axis) const {
    if (axis < 0 || axis >= rank_) {
      throw DimensionError("axis " + std::to_string(axis) +
                           " out of range for rank " + std::to_string(rank_));
    }
    return ext_[axis];
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= ext_[i];
    return n;
  }

  bool operator==(const Shape& other) const {
    if (rank_ != other.rank_) return false;
    for (int i = 0; i < rank_; ++i) {
      if (ext_[i] != other.ext_[i]) return false;
    }
    return true;
  }
  bool operator!=(const Shape& other) const { return !(*this == other); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank_; ++i) {
      if (i) os << ", ";
      os << ext_[i];
    }
    os << ']';
    return os.str();
  }

 private:
  void push(int e) {
    if (rank_ == kMaxRank) {
      throw DimensionError("shape rank exceeds maximum rank 5");
    }
    if (e <= 0) throw DimensionError("shape extents must be positive");
    ext_[rank_++] = e;
  }

  std::array<int, kMaxRank> ext_{};
  int rank_ = 0;
};

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.str() +
                         " vs " + b.str());
  }
}

namespace detail {

inline int read_thread_cap_from_env() {
  if (const char* env = std::getenv("MSTGCN_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

inline int& thread_cap() {
  static int cap = read_thread_cap_from_env();
  return cap;
}

}  // namespace detail

/// Upper bound on threads any single op may use (MSTGCN_THREADS, else
/// hardware concurrency).
inline int max_threads() { return detail::thread_cap(); }

inline void set_max_threads(int n) { detail::thread_cap() = n < 1 ? 1 : n; }

/// Runs body(begin, end) over a fixed partition of [0, n). Each index is
/// processed exactly once and entirely by one thread, so results do not
/// depend on the thread count. cost_hint is the approximate flop count per
/// index; small loops stay serial.
inline void parallel_for(int64_t n, int64_t cost_hint,
                         const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  int threads = max_threads();
  if (threads > n) threads = static_cast<int>(n);
  if (threads <= 1 || n * cost_hint < (1 << 16)) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  for (int t = 1; t < threads; ++t) {
    int64_t begin = n * t / threads;
    int64_t end = n * (t + 1) / threads;
    if (begin < end) pool.emplace_back(body, begin, end);
  }
  body(0, n / threads);
  for (auto& th : pool) th.join();
}

}  // namespace mstgcn
