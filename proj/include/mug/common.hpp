#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mug {

// ----------------------------------------------------------------- errors

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid dimensions, ratios or other static configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// Runtime shape mismatch between tensors.
struct ShapeError : Error {
  using Error::Error;
};

/// File format / filesystem problems.
struct IoError : Error {
  using Error::Error;
};

/// Malformed text input (manifest lines, config files, captions).
struct ParseError : Error {
  using Error::Error;
};

/// Numeric verification failures (non-finite values, checksum mismatch).
struct VerifyError : Error {
  using Error::Error;
};

// ------------------------------------------------------------------- rng

/// Deterministic 64-bit generator (splitmix64). Used everywhere instead of
/// std:: distributions so that streams are identical across platforms and
/// standard library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  size_t index(size_t n) {
    // 128-bit multiply-shift; bias is < 2^-64 and irrelevant here, what
    // matters is that the mapping is fixed.
    return static_cast<size_t>(
        (static_cast<__uint128_t>(next_u64()) * static_cast<__uint128_t>(n)) >> 64);
  }

  /// Standard normal via Box-Muller (cos branch only, stateless).
  double normal() {
    double u1 = 0.0;
    do {
      u1 = u01();
    } while (u1 <= 0.0);
    double u2 = u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Normal(0, std^2) truncated to [-2 std, 2 std], by resampling.
  double trunc_normal(double stddev) {
    for (;;) {
      double x = normal() * stddev;
      if (x >= -2.0 * stddev && x <= 2.0 * stddev) return x;
    }
  }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      size_t j = index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  uint64_t state_;
};

// ---------------------------------------------------------------- hashing

/// FNV-1a over a byte span, used to derive per-sample / per-step seeds.
inline uint64_t fnv1a(const void* bytes, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t hash_combine(uint64_t h, uint64_t v) { return fnv1a(&v, sizeof(v), h); }

inline uint64_t hash_combine(uint64_t h, const std::string& s) {
  return fnv1a(s.data(), s.size(), h);
}

/// Seed for an independent stream identified by (root seed, salt tag, ids...).
template <typename... Parts>
uint64_t derive_seed(uint64_t root, const char* salt, const Parts&... parts) {
  uint64_t h = hash_combine(0xcbf29ce484222325ull, root);
  h = hash_combine(h, std::string(salt));
  ((h = hash_combine(h, parts)), ...);
  return h;
}

// ------------------------------------------------------------- formatting

std::string shape_str(const std::vector<size_t>& shape);

/// Shortest decimal form that round-trips a float32 / float64 exactly.
std::string fmt_float(float v);
std::string fmt_float(double v);

}  // namespace mug
