// gridgemm: scalar precisions and runtime dispatch over them.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "gridgemm/common.hpp"
#include "gridgemm/half.hpp"

namespace gridgemm {

enum class Precision : std::uint8_t { Half16 = 0, Single32 = 1, Double64 = 2 };

constexpr std::size_t byte_width(Precision p) {
  switch (p) {
    case Precision::Half16: return 2;
    case Precision::Single32: return 4;
    case Precision::Double64: return 8;
  }
  return 0;
}

inline const char* precision_name(Precision p) {
  switch (p) {
    case Precision::Half16: return "half";
    case Precision::Single32: return "single";
    case Precision::Double64: return "double";
  }
  return "?";
}

inline Precision precision_from_name(const std::string& s) {
  if (s == "half") return Precision::Half16;
  if (s == "single") return Precision::Single32;
  if (s == "double") return Precision::Double64;
  throw ConfigError("unknown precision: " + s);
}

template <Precision P>
struct ScalarOf;
template <>
struct ScalarOf<Precision::Half16> {
  using type = Half;
  using accum = float;  // half operands compute at single and round on store
};
template <>
struct ScalarOf<Precision::Single32> {
  using type = float;
  using accum = float;
};
template <>
struct ScalarOf<Precision::Double64> {
  using type = double;
  using accum = double;
};

/// Calls f with a std::integral_constant<Precision, ...> so the body can use
/// ScalarOf at compile time.
template <typename F>
decltype(auto) dispatch_precision(Precision p, F&& f) {
  switch (p) {
    case Precision::Half16:
      return f(std::integral_constant<Precision, Precision::Half16>{});
    case Precision::Single32:
      return f(std::integral_constant<Precision, Precision::Single32>{});
    case Precision::Double64:
    default:
      return f(std::integral_constant<Precision, Precision::Double64>{});
  }
}

inline double scalar_to_double(Precision p, const void* elem) {
  switch (p) {
    case Precision::Half16: return static_cast<double>(*static_cast<const Half*>(elem));
    case Precision::Single32: return static_cast<double>(*static_cast<const float*>(elem));
    case Precision::Double64:
    default: return *static_cast<const double*>(elem);
  }
}

inline void scalar_from_double(Precision p, double v, void* elem) {
  switch (p) {
    case Precision::Half16: *static_cast<Half*>(elem) = Half(v); break;
    case Precision::Single32: *static_cast<float*>(elem) = static_cast<float>(v); break;
    case Precision::Double64: *static_cast<double*>(elem) = v; break;
  }
}

}  // namespace gridgemm
