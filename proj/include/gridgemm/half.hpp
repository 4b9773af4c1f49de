// gridgemm: IEEE 754 binary16 storage type with round-to-nearest-even
// conversions. Arithmetic on half operands is always performed at single
// precision and rounded back on store; this type never computes.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>

namespace gridgemm {

namespace detail {

// Shared narrowing algorithm for binary32/binary64 sources. Round to
// nearest even, overflow to +-inf, gradual underflow through half
// subnormals, NaN payloads carried in the top 10 mantissa bits.
template <typename Bits, int MantBits, int ExpBits>
inline std::uint16_t narrow_to_half(Bits bits) {
  constexpr int bias = (1 << (ExpBits - 1)) - 1;
  constexpr Bits mant_mask = (Bits(1) << MantBits) - 1;
  const std::uint16_t sign =
      static_cast<std::uint16_t>(((bits >> (MantBits + ExpBits)) & 1u) << 15);
  const int exp = static_cast<int>((bits >> MantBits) & ((1u << ExpBits) - 1));
  const Bits mant = bits & mant_mask;

  if (exp == (1 << ExpBits) - 1) {  // inf or nan
    if (mant != 0) {
      auto payload = static_cast<std::uint16_t>((mant >> (MantBits - 10)) & 0x3FFu);
      if (payload == 0) payload = 0x200;  // keep NaN from collapsing to inf
      return static_cast<std::uint16_t>(sign | 0x7C00u | payload);
    }
    return static_cast<std::uint16_t>(sign | 0x7C00u);
  }
  if (exp == 0 && mant == 0) return sign;

  int e;     // unbiased exponent
  Bits sig;  // significand with MantBits fraction bits
  if (exp == 0) {
    e = 1 - bias;
    sig = mant;
  } else {
    e = exp - bias;
    sig = mant | (Bits(1) << MantBits);
  }

  const int he = e + 15;
  if (he >= 31) return static_cast<std::uint16_t>(sign | 0x7C00u);
  if (he >= 1) {
    constexpr int drop = MantBits - 10;
    auto h = static_cast<std::uint16_t>(
        sign | (he << 10) | static_cast<std::uint16_t>((sig >> drop) & 0x3FFu));
    const Bits rem = sig & ((Bits(1) << drop) - 1);
    const Bits halfway = Bits(1) << (drop - 1);
    if (rem > halfway || (rem == halfway && (h & 1u))) ++h;  // carry may reach inf
    return h;
  }

  // Subnormal target: value in units of 2^-24.
  const int rshift = MantBits - e - 24;
  if (rshift >= static_cast<int>(sizeof(Bits) * 8)) return sign;
  auto q = static_cast<std::uint16_t>(sig >> rshift);
  const Bits rem = sig & ((Bits(1) << rshift) - 1);
  const Bits halfway = Bits(1) << (rshift - 1);
  if (rem > halfway || (rem == halfway && (q & 1u))) ++q;
  return static_cast<std::uint16_t>(sign | q);  // q == 1024 lands on the smallest normal
}

}  // namespace detail

inline std::uint16_t half_bits_from_float(float v) {
  return detail::narrow_to_half<std::uint32_t, 23, 8>(std::bit_cast<std::uint32_t>(v));
}

inline std::uint16_t half_bits_from_double(double v) {
  return detail::narrow_to_half<std::uint64_t, 52, 11>(std::bit_cast<std::uint64_t>(v));
}

/// Exact widening; every half value (including NaN payloads) survives a
/// round trip through float.
inline float half_bits_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  if (exp == 31) return std::bit_cast<float>(sign | 0x7F800000u | (mant << 13));
  if (exp == 0) {
    if (mant == 0) return std::bit_cast<float>(sign);
    while ((mant & 0x400u) == 0) {  // normalize subnormal
      mant <<= 1;
      --exp;
    }
    mant &= 0x3FFu;
    ++exp;
  }
  return std::bit_cast<float>(sign | ((exp + 112u) << 23) | (mant << 13));
}

/// Binary16 storage scalar. Ordering/equality intentionally not provided;
/// compare through float.
struct Half {
  std::uint16_t bits = 0;

  Half() = default;
  explicit Half(float v) : bits(half_bits_from_float(v)) {}
  explicit Half(double v) : bits(half_bits_from_double(v)) {}

  explicit operator float() const { return half_bits_to_float(bits); }
  explicit operator double() const { return static_cast<double>(half_bits_to_float(bits)); }
};

inline constexpr float kHalfMax = 65504.0f;

}  // namespace gridgemm
