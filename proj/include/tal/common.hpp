#pragma once

#include <cstdint>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace tal {

// Error taxonomy, mapped to CLI exit codes: ConfigError -> 1,
// DataError -> 2, everything else -> 3.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RunError : std::runtime_error {
  explicit RunError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

inline void check_data(bool ok, const std::string& msg) {
  if (!ok) throw DataError(msg);
}

inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// FNV-1a, used for parameter-group hashing and config fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::vector<double>& v,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  return v.empty() ? h : fnv1a64(v.data(), v.size() * sizeof(double), h);
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  return s.empty() ? h : fnv1a64(s.data(), s.size(), h);
}

}  // namespace tal
