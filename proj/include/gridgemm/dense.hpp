// gridgemm: dense row-major storage, typed/untyped views, and elementwise
// precision conversion.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <vector>

#include "gridgemm/common.hpp"
#include "gridgemm/precision.hpp"

namespace gridgemm {

template <typename T>
struct MatView {
  T* data = nullptr;
  std::int64_t rows = 0;
  std::int64_t cols = 0;

  T& at(std::int64_t r, std::int64_t c) const { return data[r * cols + c]; }
  std::int64_t size() const { return rows * cols; }
};

template <typename T>
using ConstMatView = MatView<const T>;

/// Untyped view over row-major scalars of a runtime precision.
struct DynView {
  std::byte* data = nullptr;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  Precision precision = Precision::Single32;

  std::int64_t size() const { return rows * cols; }
  std::size_t bytes() const { return static_cast<std::size_t>(size()) * byte_width(precision); }

  template <typename T>
  MatView<T> typed() const {
    return {reinterpret_cast<T*>(data), rows, cols};
  }
};

struct DynConstView {
  const std::byte* data = nullptr;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  Precision precision = Precision::Single32;

  DynConstView() = default;
  DynConstView(const DynView& v) : data(v.data), rows(v.rows), cols(v.cols), precision(v.precision) {}
  DynConstView(const std::byte* d, std::int64_t r, std::int64_t c, Precision p)
      : data(d), rows(r), cols(c), precision(p) {}

  std::int64_t size() const { return rows * cols; }
  std::size_t bytes() const { return static_cast<std::size_t>(size()) * byte_width(precision); }

  template <typename T>
  ConstMatView<T> typed() const {
    return {reinterpret_cast<const T*>(data), rows, cols};
  }
};

/// Heap-backed dense matrix with runtime precision; the host-side format for
/// scatter/gather and test oracles.
class HostMatrix {
public:
  HostMatrix() = default;
  HostMatrix(std::int64_t rows, std::int64_t cols, Precision p)
      : rows_(rows), cols_(cols), precision_(p),
        bytes_(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * byte_width(p)) {}

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  Precision precision() const { return precision_; }
  std::size_t byte_size() const { return bytes_.size(); }
  const std::byte* raw() const { return bytes_.data(); }
  std::byte* raw() { return bytes_.data(); }

  DynView view() { return {bytes_.data(), rows_, cols_, precision_}; }
  DynConstView view() const { return {bytes_.data(), rows_, cols_, precision_}; }

  double get(std::int64_t r, std::int64_t c) const {
    return scalar_to_double(precision_, bytes_.data() + elem_off(r, c));
  }
  void set(std::int64_t r, std::int64_t c, double v) {
    scalar_from_double(precision_, v, bytes_.data() + elem_off(r, c));
  }

  bool bitwise_equal(const HostMatrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && precision_ == o.precision_ &&
           bytes_.size() == o.bytes_.size() &&
           std::memcmp(bytes_.data(), o.bytes_.data(), bytes_.size()) == 0;
  }

private:
  std::size_t elem_off(std::int64_t r, std::int64_t c) const {
    return static_cast<std::size_t>(r * cols_ + c) * byte_width(precision_);
  }

  std::int64_t rows_ = 0;
  std::int64_t cols_ = 0;
  Precision precision_ = Precision::Single32;
  std::vector<std::byte> bytes_;
};

struct ConversionStats {
  std::size_t overflowed = 0;  // finite values that saturated to +-inf in half
};

/// Elementwise round-to-nearest-even conversion between any two precisions.
/// Widening is exact; narrowing to half saturates to infinity past the half
/// range and reports how many elements did.
inline ConversionStats convert_precision(DynConstView src, DynView dst) {
  if (src.rows != dst.rows || src.cols != dst.cols)
    throw ShapeError("convert_precision: shape mismatch");
  ConversionStats stats;
  const std::int64_t n = src.size();
  if (src.precision == dst.precision) {
    std::memcpy(dst.data, src.data, src.bytes());
    return stats;
  }
  const std::size_t sw = byte_width(src.precision);
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = scalar_to_double(src.precision, src.data + i * sw);
    if (dst.precision == Precision::Half16) {
      const std::uint16_t h = half_bits_from_double(v);
      if (std::isfinite(v) && (h & 0x7C00u) == 0x7C00u && (h & 0x3FFu) == 0) ++stats.overflowed;
      dst.typed<Half>().data[i].bits = h;
    } else if (dst.precision == Precision::Single32) {
      dst.typed<float>().data[i] = static_cast<float>(v);
    } else {
      dst.typed<double>().data[i] = v;
    }
  }
  return stats;
}

/// Copies a rectangular region between two views of the same precision.
inline void copy_region(DynConstView src, std::int64_t sr, std::int64_t sc, DynView dst,
                        std::int64_t dr, std::int64_t dc, std::int64_t nrows, std::int64_t ncols) {
  if (src.precision != dst.precision) throw UsageError("copy_region: precision mismatch");
  const std::size_t w = byte_width(src.precision);
  for (std::int64_t r = 0; r < nrows; ++r) {
    std::memcpy(dst.data + ((dr + r) * dst.cols + dc) * static_cast<std::int64_t>(w),
                src.data + ((sr + r) * src.cols + sc) * static_cast<std::int64_t>(w),
                static_cast<std::size_t>(ncols) * w);
  }
}

}  // namespace gridgemm
