#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fuselm {

enum class ErrorKind {
  shape,       // tensor dimension mismatch
  index,       // out-of-range index (targets, ids)
  format,      // malformed external input (wav, json, manifest)
  config,      // invalid configuration value
  capacity,    // sequence / duration limit exceeded
  contract,    // API precondition violated
  io,          // filesystem failure
  corruption,  // checksum mismatch on stored data
  training,    // non-finite gradients, halted run
  service,     // remote endpoint unreachable or unhealthy
  judge,       // unparseable judge reply
  invalid,     // non-finite values detected by validation
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {

inline void concat_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void concat_into(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  concat_into(os, rest...);
}

}  // namespace detail

// Builds an error message from heterogeneous pieces.
template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  detail::concat_into(os, args...);
  return os.str();
}

template <typename... Args>
[[noreturn]] void fail(ErrorKind kind, const Args&... args) {
  throw Error(kind, concat(args...));
}

// splitmix64 finalizer; good avalanche, used for seed derivation and hashing.
inline uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Stateless seed derivation: the same (seed, a, b) always yields the same
// stream seed, so resumed runs reproduce augmentation and shuffling exactly.
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  uint64_t h = mix64(seed + 0x9e3779b97f4a7c15ull);
  h = mix64(h ^ (a + 0x9e3779b97f4a7c15ull));
  h = mix64(h ^ (b + 0x9e3779b97f4a7c15ull));
  return h;
}

// Minimal deterministic RNG (splitmix64 core). The standard <random>
// distributions are implementation-defined, which breaks bit-exact
// reproducibility contracts, so draws are generated directly.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    return mix64(z);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // [lo, hi)
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi <= lo) fail(ErrorKind::contract, "uniform_int: empty range [", lo, ", ", hi, ")");
    auto span = static_cast<uint64_t>(hi - lo);
    auto draw = static_cast<uint64_t>((static_cast<unsigned __int128>(next()) * span) >> 64);
    return lo + static_cast<int64_t>(draw);
  }

  // Box-Muller; the cosine branch only, so one call consumes two draws.
  double normal() {
    double u1 = static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = static_cast<double>(next() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  uint64_t state_;
};

// FNV-1a over bytes, used for transcript bucketing.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace fuselm
