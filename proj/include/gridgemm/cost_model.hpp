// gridgemm: heterogeneous transport cost model. Each medium carries a
// piecewise table of (message bytes, latency us, bandwidth MB/s) sample
// points; modeled time is latency plus byte time under log-linear
// interpolation, forced monotone in bytes.
//
// The default tables are microbenchmark measurements of five interconnect
// classes on a dual-root-complex GPU server. Bandwidth MB/s is interpreted
// as MiB/s (2^20 bytes per second). Modeled time is accounting metadata
// only; it never delays execution.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gridgemm/common.hpp"

namespace gridgemm {

enum class Medium : std::uint8_t {
  SharedMemHost = 0,
  SharedMemDevice = 1,
  IntraNodeFabric = 2,
  InterNodeFabric = 3,
  PeerToPeer = 4,
};

inline constexpr int kMediumCount = 5;

inline const char* medium_name(Medium m) {
  switch (m) {
    case Medium::SharedMemHost: return "shared_mem_host";
    case Medium::SharedMemDevice: return "shared_mem_device";
    case Medium::IntraNodeFabric: return "intra_node_fabric";
    case Medium::InterNodeFabric: return "inter_node_fabric";
    case Medium::PeerToPeer: return "peer_to_peer";
  }
  return "?";
}

inline Medium medium_from_name(const std::string& s) {
  for (int i = 0; i < kMediumCount; ++i)
    if (s == medium_name(static_cast<Medium>(i))) return static_cast<Medium>(i);
  throw ConfigError("unknown medium: " + s);
}

struct CostSample {
  double bytes = 0;
  double latency_us = 0;
  double bandwidth_mbps = 0;  // MiB per second
};

namespace detail {
inline double mib_per_s_to_bytes_per_us(double mbps) { return mbps * 1048576.0 / 1e6; }

// One interpolation segment of raw_time as a sum of two power functions of
// x = bytes/left_knot: latency P*x^beta plus byte time Q*x^gamma.
struct Segment {
  double p, beta, q, gamma, ratio;

  double eval(double x) const { return p * std::pow(x, beta) + q * std::pow(x, gamma); }

  // max over [1, x_hi]; a sum of two power terms has at most one interior
  // extremum, so endpoints plus the critical point cover it
  double max_over(double x_hi) const {
    double m = std::max(eval(1.0), eval(x_hi));
    const double a = p * beta, b = q * gamma;
    if ((a > 0) != (b > 0) && a != 0 && b != 0 && beta != gamma) {
      const double xs = std::pow(-b / a, 1.0 / (beta - gamma));
      if (xs > 1.0 && xs < x_hi) m = std::max(m, eval(xs));
    }
    return m;
  }
};
}  // namespace detail

class CostModel {
public:
  CostModel() = default;

  void set_table(Medium m, std::vector<CostSample> samples) {
    if (samples.empty()) throw ConfigError("cost model: empty table");
    std::sort(samples.begin(), samples.end(),
              [](const CostSample& a, const CostSample& b) { return a.bytes < b.bytes; });
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.bytes < 1 || s.latency_us <= 0 || s.bandwidth_mbps <= 0)
        throw ConfigError("cost model: sample points must be positive (bytes >= 1)");
      if (i > 0 && samples[i - 1].bytes == s.bytes)
        throw ConfigError("cost model: duplicate byte size in table");
    }
    tables_[static_cast<int>(m)] = std::move(samples);
    build_envelope(m);
  }

  const std::vector<CostSample>& table(Medium m) const {
    const auto& t = tables_[static_cast<int>(m)];
    if (t.empty()) throw ConfigError(std::string("cost model: no table for medium ") + medium_name(m));
    return t;
  }

  double latency_us(Medium m, double bytes) const { return interp(m, bytes, true); }
  double bandwidth_mbps(Medium m, double bytes) const { return interp(m, bytes, false); }

  /// latency + bytes/bandwidth at the interpolated sample values.
  double raw_time_us(Medium m, double bytes) const {
    if (bytes < 1) throw UsageError("modeled_time: bytes must be >= 1");
    return latency_us(m, bytes) +
           bytes / detail::mib_per_s_to_bytes_per_us(bandwidth_mbps(m, bytes));
  }

  /// Monotone modeled transfer time: the running maximum of raw_time_us over
  /// (0, bytes]. The measured tables have small-message anomalies where raw
  /// time dips as size grows; a schedule comparison needs "more bytes never
  /// cost less", so the dips are flattened.
  double modeled_time_us(Medium m, double bytes) const {
    if (bytes < 1) throw UsageError("modeled_time: bytes must be >= 1");
    const auto& t = table(m);
    const auto& segs = segments_[static_cast<int>(m)];
    const auto& cum = knot_cummax_[static_cast<int>(m)];
    if (bytes <= t.front().bytes || t.size() == 1) {
      return t.front().latency_us +
             bytes / detail::mib_per_s_to_bytes_per_us(t.front().bandwidth_mbps);
    }
    if (bytes >= t.back().bytes) {
      const double tail = t.back().latency_us +
                          bytes / detail::mib_per_s_to_bytes_per_us(t.back().bandwidth_mbps);
      return std::max(cum.back(), tail);
    }
    std::size_t i = 0;
    while (bytes > t[i + 1].bytes) ++i;
    return std::max(cum[i], segs[i].max_over(bytes / t[i].bytes));
  }

  static CostModel measured_default();

  /// CSV rows: medium,bytes,latency_us,bandwidth_MBps ('#' comments allowed).
  static CostModel from_csv(std::istream& in) {
    std::map<int, std::vector<CostSample>> acc;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      std::istringstream ls(line);
      std::string medium, tok;
      CostSample s;
      try {
        if (!std::getline(ls, medium, ',')) throw ConfigError("");
        if (!std::getline(ls, tok, ',')) throw ConfigError("");
        s.bytes = std::stod(tok);
        if (!std::getline(ls, tok, ',')) throw ConfigError("");
        s.latency_us = std::stod(tok);
        if (!std::getline(ls, tok, ',')) throw ConfigError("");
        s.bandwidth_mbps = std::stod(tok);
      } catch (const std::exception&) {
        throw ConfigError("cost model CSV: parse error at line " + std::to_string(lineno));
      }
      acc[static_cast<int>(medium_from_name(medium))].push_back(s);
    }
    CostModel cm;
    for (auto& [m, samples] : acc) cm.set_table(static_cast<Medium>(m), std::move(samples));
    return cm;
  }

  void to_csv(std::ostream& out) const {
    out << "# medium,bytes,latency_us,bandwidth_MBps\n";
    for (int m = 0; m < kMediumCount; ++m) {
      for (const auto& s : tables_[m])
        out << medium_name(static_cast<Medium>(m)) << ',' << s.bytes << ',' << s.latency_us << ','
            << s.bandwidth_mbps << '\n';
    }
  }

private:
  double interp(Medium m, double bytes, bool latency) const {
    if (bytes < 1) throw UsageError("cost model: bytes must be >= 1");
    const auto& t = table(m);
    auto value = [&](const CostSample& s) { return latency ? s.latency_us : s.bandwidth_mbps; };
    if (bytes <= t.front().bytes) return value(t.front());
    if (bytes >= t.back().bytes) return value(t.back());
    std::size_t i = 0;
    while (bytes > t[i + 1].bytes) ++i;
    if (bytes == t[i].bytes) return value(t[i]);
    if (bytes == t[i + 1].bytes) return value(t[i + 1]);
    const double f =
        std::log(bytes / t[i].bytes) / std::log(t[i + 1].bytes / t[i].bytes);
    return value(t[i]) * std::pow(value(t[i + 1]) / value(t[i]), f);
  }

  void build_envelope(Medium m) {
    const auto& t = tables_[static_cast<int>(m)];
    auto& segs = segments_[static_cast<int>(m)];
    auto& cum = knot_cummax_[static_cast<int>(m)];
    segs.clear();
    cum.clear();
    cum.push_back(t.front().latency_us +
                  t.front().bytes / detail::mib_per_s_to_bytes_per_us(t.front().bandwidth_mbps));
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
      detail::Segment s;
      s.ratio = t[i + 1].bytes / t[i].bytes;
      s.p = t[i].latency_us;
      s.beta = std::log(t[i + 1].latency_us / t[i].latency_us) / std::log(s.ratio);
      s.q = t[i].bytes / detail::mib_per_s_to_bytes_per_us(t[i].bandwidth_mbps);
      s.gamma =
          1.0 - std::log(t[i + 1].bandwidth_mbps / t[i].bandwidth_mbps) / std::log(s.ratio);
      segs.push_back(s);
      cum.push_back(std::max(cum.back(), s.max_over(s.ratio)));
    }
  }

  std::vector<CostSample> tables_[kMediumCount];
  std::vector<detail::Segment> segments_[kMediumCount];
  std::vector<double> knot_cummax_[kMediumCount];
};

inline CostModel CostModel::measured_default() {
  // Measured microbenchmarks; byte sizes 1 .. 4 MiB. The 0-byte latency row
  // of the source has no bandwidth counterpart and is excluded.
  static const double kBytes[7] = {1, 128, 512, 16384, 524288, 2097152, 4194304};
  struct Row {
    Medium m;
    double lat[7];
    double bw[7];
  };
  static const Row kRows[] = {
      {Medium::SharedMemHost,
       {1.11, 1.28, 1.54, 6.95, 138.61, 501.10, 971.19},
       {1.76, 213.95, 679.82, 5269.01, 4540.58, 4901.57, 5064.01}},
      {Medium::SharedMemDevice,
       {31.70, 26.25, 26.20, 30.97, 163.39, 515.71, 936.43},
       {0.06, 9.41, 37.60, 107.76, 4081.20, 5148.11, 5266.48}},
      {Medium::IntraNodeFabric,
       {6.13, 5.83, 12.00, 16.95, 218.72, 458.22, 765.36},
       {0.58, 69.99, 226.62, 3558.15, 5298.05, 7543.43, 7758.30}},
      {Medium::InterNodeFabric,
       {5.98, 5.77, 11.58, 16.74, 157.12, 425.37, 741.60},
       {0.68, 87.41, 268.72, 3922.10, 6110.80, 8105.62, 8657.90}},
      {Medium::PeerToPeer,
       {19.41, 15.51, 15.33, 17.50, 80.91, 279.04, 541.65},
       {0.13, 16.41, 67.28, 2336.16, 8984.97, 9604.57, 9720.82}},
  };
  CostModel cm;
  for (const auto& row : kRows) {
    std::vector<CostSample> samples;
    for (int i = 0; i < 7; ++i) samples.push_back({kBytes[i], row.lat[i], row.bw[i]});
    cm.set_table(row.m, std::move(samples));
  }
  return cm;
}

}  // namespace gridgemm
