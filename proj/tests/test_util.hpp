// Shared helpers for the test suites.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gridgemm/dense.hpp"
#include "oracle.hpp"

namespace testutil {

inline gridgemm::HostMatrix to_host(const oracle::Mat& m, gridgemm::Precision p) {
  gridgemm::HostMatrix h(m.rows, m.cols, p);
  for (std::int64_t r = 0; r < m.rows; ++r)
    for (std::int64_t c = 0; c < m.cols; ++c) h.set(r, c, m.at(r, c));
  return h;
}

inline oracle::Mat to_mat(const gridgemm::HostMatrix& h) {
  oracle::Mat m(h.rows(), h.cols());
  for (std::int64_t r = 0; r < h.rows(); ++r)
    for (std::int64_t c = 0; c < h.cols(); ++c) m.at(r, c) = h.get(r, c);
  return m;
}

}  // namespace testutil
