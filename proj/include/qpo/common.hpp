#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qpo {

// ---------------------------------------------------------------- errors

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EncodingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Parse failures carry the line number and offending field.
struct ParseError : std::runtime_error {
  ParseError(std::string file, long line, std::string field, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": field '" + field +
                           "': " + what),
        file(std::move(file)),
        line(line),
        field(std::move(field)) {}

  std::string file;
  long line;
  std::string field;
};

// ---------------------------------------------------------------- hashing

// FNV-1a, 64-bit. Stable across platforms and runs.
inline uint64_t fnv1a_bytes(const void* data, size_t n,
                            uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a_bytes(s.data(), s.size(), h);
}

inline uint64_t fnv1a_u64(uint64_t v, uint64_t h = 0xcbf29ce484222325ull) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  return fnv1a_bytes(b, 8, h);
}

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from (master, domain tag).
inline uint64_t derive_seed(uint64_t master, std::string_view domain) {
  uint64_t s = fnv1a(domain, fnv1a_u64(master));
  return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t master, std::string_view domain, uint64_t index) {
  uint64_t s = fnv1a_u64(index, fnv1a(domain, fnv1a_u64(master)));
  return splitmix64(s);
}

// ---------------------------------------------------------------- rng

// Deterministic generator (splitmix64 stream). All distribution logic lives
// here so results never depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // Scramble so that nearby seeds give unrelated streams.
    for (int i = 0; i < 2; ++i) splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n). Debiased (Lemire).
  uint64_t below(uint64_t n) {
    if (n == 0) throw ArgumentError("Rng::below: n must be positive");
    uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto lo = static_cast<uint64_t>(m);
    if (lo < n) {
      uint64_t t = (0 - n) % n;
      while (lo < t) {
        x = next_u64();
        m = static_cast<__uint128_t>(x) * n;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  // Inclusive range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw ArgumentError("Rng::uniform_int: empty range");
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  // Box-Muller with cached spare.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in draw order.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    if (k > n) throw ArgumentError("sample_without_replacement: k > n");
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k; ++i) {
      const size_t j = i + static_cast<size_t>(below(n - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------- formatting

// Reals are serialized with 17 significant digits (round-trip exact for f64).
inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace qpo
