#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bm {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Thrown for bad user input (config files, CLI values). Maps to exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_into(std::ostringstream& os, const A& a, const Rest&... rest) {
  os << a;
  format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string strcat(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

template <typename... Args>
void check(bool cond, const Args&... args) {
  if (!cond) throw std::runtime_error(strcat(args...));
}

// FLOP accounting. Matmuls only: a KxM by MxJ product is charged 2*K*M*J
// (multiply + add). Scoped per forward pass, never global.
struct FlopCounter {
  u64 total = 0;
  void add_matmul(i64 k, i64 m, i64 j) {
    total += 2ull * static_cast<u64>(k) * static_cast<u64>(m) * static_cast<u64>(j);
  }
};

// 64-bit FNV-1a, used to derive independent per-parameter RNG streams from
// (seed, parameter path). Identical names+seed give identical draws no matter
// what other parameters a model owns.
inline u64 fnv1a(std::string_view s, u64 h = 14695981039346656037ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::mt19937_64 rng_for(u64 seed, std::string_view name) {
  u64 h = fnv1a(name);
  return std::mt19937_64(seed ^ h);
}

}  // namespace bm
