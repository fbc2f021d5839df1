// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0

#ifndef INHAND_CORE_HPP
#define INHAND_CORE_HPP

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace inhand {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

inline constexpr double kPi = 3.14159265358979323846;

constexpr double deg2rad(double d) { return d * (kPi / 180.0); }
constexpr double rad2deg(double r) { return r * (180.0 / kPi); }

/// PCG32 generator (O'Neill). Used everywhere a seed appears so that runs
/// are reproducible independent of the standard library implementation.
class Pcg32 {
 public:
  Pcg32() : Pcg32(0x853c49e6748fea9bULL, 0xda3e39cb94b95bdbULL) {}
  Pcg32(std::uint64_t seed, std::uint64_t stream = 1) { reseed(seed, stream); }

  void reseed(std::uint64_t seed, std::uint64_t stream = 1) {
    state_ = 0u;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
    has_spare_ = false;
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((~rot + 1u) & 31u));
  }

  /// Uniform in [0, 1).
  double uniform() { return next_u32() * 0x1p-32; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint32_t uniform_u32(std::uint32_t n) {
    // Lemire-style rejection to avoid modulo bias.
    std::uint64_t m = static_cast<std::uint64_t>(next_u32()) * n;
    auto lo = static_cast<std::uint32_t>(m);
    if (lo < n) {
      std::uint32_t t = (~n + 1u) % n;
      while (lo < t) {
        m = static_cast<std::uint64_t>(next_u32()) * n;
        lo = static_cast<std::uint32_t>(m);
      }
    }
    return static_cast<std::uint32_t>(m >> 32);
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }

  std::uint64_t state() const { return state_; }
  std::uint64_t inc() const { return inc_; }
  void restore(std::uint64_t state, std::uint64_t inc) {
    state_ = state;
    inc_ = inc;
    has_spare_ = false;
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// FNV-1a 64-bit hash, used for config hashes in run manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Runs fn(chunk) for chunk in [0, num_chunks) on up to max_threads workers.
/// Chunks are claimed in order; any cross-chunk reduction the caller performs
/// afterwards in chunk order is deterministic regardless of scheduling.
inline void parallel_chunks(int num_chunks, const std::function<void(int)>& fn,
                            int max_threads = 0) {
  if (max_threads <= 0) max_threads = static_cast<int>(std::thread::hardware_concurrency());
  int workers = std::min(std::max(1, max_threads), num_chunks);
  if (workers <= 1) {
    for (int c = 0; c < num_chunks; ++c) fn(c);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        int c = next.fetch_add(1);
        if (c >= num_chunks) return;
        fn(c);
      }
    });
  }
  for (auto& t : pool) t.join();
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace inhand

#endif  // INHAND_CORE_HPP
