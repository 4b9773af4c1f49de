// gridgemm: common error types, hashing, and byte-order helpers.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridgemm {

using WorkerId = int;

/// Reserved endpoint id for the master process. The master is never a worker.
inline constexpr WorkerId kMasterId = -1;

/// Fixed per-message envelope size (descriptor id, coordinates, version,
/// precision). Counted in every TransferRecord on top of the payload.
inline constexpr std::uint64_t kMessageHeaderBytes = 64;

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Bad arguments or API misuse (double await, double release, ...).
class UsageError : public Error {
public:
  using Error::Error;
};

/// Malformed topology/cost-model/dataset configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Operand shapes or element counts do not conform.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Violation of the master/worker wire protocol (self-send, empty payload,
/// descriptor tables diverging, ...).
class ProtocolError : public Error {
public:
  using Error::Error;
};

/// No matching message can ever arrive for a pending await.
class DeadlockError : public Error {
public:
  using Error::Error;
};

/// Checkpoint checksum or format-version mismatch.
class IntegrityError : public Error {
public:
  using Error::Error;
};

/// The requested operand layouts cannot be covered by a cyclic ring plan;
/// callers should fall back to general_gemm.
class PlanError : public Error {
public:
  using Error::Error;
};

/// A communication-free backward pass found stale or missing cached blocks.
class CacheMissError : public Error {
public:
  CacheMissError(const std::string& what, std::vector<std::pair<int, int>> missing)
      : Error(what), missing_coords(std::move(missing)) {}

  std::vector<std::pair<int, int>> missing_coords;
};

// --- hashing -----------------------------------------------------------

/// FNV-1a 64-bit, used for checkpoint integrity and descriptor digests.
class Fnv1a {
public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 1099511628211ULL;
    }
  }

  void update_u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    update(b, 8);
  }

  std::uint64_t digest() const { return state_; }

private:
  std::uint64_t state_ = 14695981039346656037ULL;
};

/// splitmix64 finalizer; the one seed-mixing primitive used everywhere
/// (worker seeds, matrix seeds, per-block fill streams).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

/// Uniform double in [0, 1) from a 64-bit state.
inline double u64_to_unit_double(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// --- little-endian serialization ---------------------------------------

inline void put_le(std::vector<unsigned char>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace gridgemm
