// gridgemm: sequential per-worker numerical kernels. These are the local
// BLAS stand-ins; every distributed operation bottoms out here.
//
// Determinism contract: accumulation is k-innermost ascending, row-major
// element order everywhere, so results are bitwise reproducible. Half16
// operands are widened to single, accumulated at single, and rounded back
// exactly once on store.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "gridgemm/dense.hpp"

namespace gridgemm {

enum class Axis : std::uint8_t { Rows = 0, Cols = 1 };

namespace detail {

template <typename T>
struct AccumOf {
  using type = T;
};
template <>
struct AccumOf<Half> {
  using type = float;
};
template <>
struct AccumOf<float> {
  using type = float;
};

template <typename Acc, typename T>
inline Acc widen(T v) {
  return static_cast<Acc>(v);
}

template <typename T, typename Acc>
inline T narrow_store(Acc v) {
  return static_cast<T>(v);
}
template <>
inline Half narrow_store<Half, float>(float v) {
  return Half(v);
}

template <typename T>
void gemm_typed(double alpha, ConstMatView<T> a, bool trans_a, ConstMatView<T> b, bool trans_b,
                double beta, MatView<T> c) {
  using Acc = typename AccumOf<T>::type;
  const std::int64_t m = trans_a ? a.cols : a.rows;
  const std::int64_t kk = trans_a ? a.rows : a.cols;
  const std::int64_t kb = trans_b ? b.cols : b.rows;
  const std::int64_t n = trans_b ? b.rows : b.cols;
  if (kk != kb) throw ShapeError("local_gemm: inner dimensions do not conform");
  if (c.rows != m || c.cols != n) throw ShapeError("local_gemm: output dimensions do not conform");

  const Acc al = static_cast<Acc>(alpha);
  const Acc be = static_cast<Acc>(beta);
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      Acc acc = Acc(0);
      for (std::int64_t k = 0; k < kk; ++k) {
        const Acc av = widen<Acc>(trans_a ? a.at(k, i) : a.at(i, k));
        const Acc bv = widen<Acc>(trans_b ? b.at(j, k) : b.at(k, j));
        acc += av * bv;
      }
      // beta == 0 must not read prior C contents (pooled buffers hold garbage)
      Acc out = al * acc;
      if (beta != 0.0) out += be * widen<Acc>(c.at(i, j));
      c.at(i, j) = narrow_store<T, Acc>(out);
    }
  }
}

}  // namespace detail

/// C <- alpha * op(A) * op(B) + beta * C. All three views must share one
/// precision; mix precisions with explicit convert_precision calls first.
inline void local_gemm(double alpha, DynConstView a, bool trans_a, DynConstView b, bool trans_b,
                       double beta, DynView c) {
  if (a.precision != b.precision || a.precision != c.precision)
    throw UsageError("local_gemm: operands must share a precision");
  dispatch_precision(a.precision, [&](auto tag) {
    using T = typename ScalarOf<tag.value>::type;
    detail::gemm_typed<T>(alpha, a.typed<T>(), trans_a, b.typed<T>(), trans_b, beta, c.typed<T>());
  });
}

inline void local_transpose(DynConstView in, DynView out) {
  if (in.precision != out.precision) throw UsageError("local_transpose: precision mismatch");
  if (out.rows != in.cols || out.cols != in.rows)
    throw ShapeError("local_transpose: output dimensions must be the swap of the input");
  const std::size_t w = byte_width(in.precision);
  for (std::int64_t r = 0; r < in.rows; ++r)
    for (std::int64_t c = 0; c < in.cols; ++c)
      std::memcpy(out.data + (c * out.cols + r) * static_cast<std::int64_t>(w),
                  in.data + (r * in.cols + c) * static_cast<std::int64_t>(w), w);
}

/// Axis::Rows sums each row left-to-right (result rows x 1); Axis::Cols sums
/// each column top-to-bottom (result 1 x cols). Output shares the input
/// precision; accumulation runs at the widened precision.
inline void local_row_col_sums(DynConstView in, Axis axis, DynView out) {
  if (in.precision != out.precision) throw UsageError("local_row_col_sums: precision mismatch");
  const bool rows = axis == Axis::Rows;
  if (rows && (out.rows != in.rows || out.cols != 1))
    throw ShapeError("local_row_col_sums: row-sum output must be rows x 1");
  if (!rows && (out.rows != 1 || out.cols != in.cols))
    throw ShapeError("local_row_col_sums: col-sum output must be 1 x cols");
  dispatch_precision(in.precision, [&](auto tag) {
    using T = typename ScalarOf<tag.value>::type;
    using Acc = typename detail::AccumOf<T>::type;
    auto src = in.typed<T>();
    auto dst = out.typed<T>();
    const std::int64_t outer = rows ? in.rows : in.cols;
    const std::int64_t inner = rows ? in.cols : in.rows;
    for (std::int64_t i = 0; i < outer; ++i) {
      Acc acc = Acc(0);
      for (std::int64_t k = 0; k < inner; ++k)
        acc += detail::widen<Acc>(rows ? src.at(i, k) : src.at(k, i));
      dst.data[i] = detail::narrow_store<T, Acc>(acc);
    }
  });
}

}  // namespace gridgemm
