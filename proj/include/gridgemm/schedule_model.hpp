// gridgemm: modeled-makespan simulator for communication schedules.
//
// Transfers and per-block compute estimates form a dependency DAG. Each
// worker has one egress port and one ingress port: outgoing transfers leave
// strictly in posting order, and transfers streaming into the same ingress
// port at the same time share its bandwidth equally. That is what makes a
// naive broadcast schedule congest while the pairwise ring keeps every port
// at concurrency one. Times are modeled only; nothing here delays real
// execution.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "gridgemm/common.hpp"
#include "gridgemm/cost_model.hpp"
#include "gridgemm/topology.hpp"
#include "gridgemm/transport.hpp"

namespace gridgemm {

struct SimActivity {
  enum class Kind : std::uint8_t { Compute, Transfer };
  Kind kind = Kind::Compute;
  WorkerId worker = -1;  // Compute
  WorkerId src = -1;     // Transfer
  WorkerId dst = -1;
  double bytes = 0;       // Transfer: payload + header
  double compute_us = 0;  // Compute
  std::vector<int> deps;
};

struct SimReport {
  double makespan_us = 0;
  std::vector<double> start_us;
  std::vector<double> finish_us;
  int max_ingress_concurrency = 0;
  int max_egress_concurrency = 0;
  double total_transfer_us = 0;  // sum of uncontended modeled transfer times
};

namespace detail {
constexpr double kSimEps = 1e-9;
}

inline SimReport simulate_schedule(const std::vector<SimActivity>& acts, const CostModel& cost,
                                   const Topology& topo) {
  const int n = static_cast<int>(acts.size());
  const int workers = topo.worker_count();

  enum Status : std::uint8_t { Blocked, Latency, Streaming, Running, Done };
  std::vector<Status> status(n, Blocked);
  std::vector<double> start(n, -1), finish(n, -1), latency_end(n, 0), remaining(n, 0),
      nominal_rate(n, 0);

  // FIFO queues: computes per worker, transfers per source.
  std::vector<std::vector<int>> compute_q(workers), egress_q(workers);
  std::vector<std::size_t> compute_cursor(workers, 0), egress_head(workers, 0);
  std::vector<double> worker_free(workers, 0);
  std::vector<int> ingress_load(workers, 0);

  SimReport rep;
  for (int i = 0; i < n; ++i) {
    const auto& a = acts[i];
    if (a.kind == SimActivity::Kind::Compute) {
      compute_q[a.worker].push_back(i);
    } else {
      egress_q[a.src].push_back(i);
      const Medium med = topo.medium_between(a.src, a.dst);
      latency_end[i] = cost.latency_us(med, a.bytes);  // duration for now
      nominal_rate[i] = detail::mib_per_s_to_bytes_per_us(cost.bandwidth_mbps(med, a.bytes));
      remaining[i] = a.bytes;
      rep.total_transfer_us += cost.modeled_time_us(med, a.bytes);
    }
  }

  auto deps_done = [&](int i) {
    for (int d : acts[i].deps)
      if (status[d] != Done) return false;
    return true;
  };

  int done_count = 0;
  double t = 0;
  while (done_count < n) {
    // Start everything that can start at time t.
    bool changed = true;
    while (changed) {
      changed = false;
      for (int w = 0; w < workers; ++w) {
        if (compute_cursor[w] < compute_q[w].size()) {
          const int c = compute_q[w][compute_cursor[w]];
          if (worker_free[w] <= t + detail::kSimEps && deps_done(c)) {
            start[c] = t;
            finish[c] = t + acts[c].compute_us;
            worker_free[w] = finish[c];
            status[c] = Running;
            ++compute_cursor[w];
            changed = true;
          }
        }
        if (egress_head[w] < egress_q[w].size()) {
          const int x = egress_q[w][egress_head[w]];
          if (status[x] == Blocked && deps_done(x)) {
            start[x] = t;
            latency_end[x] = t + latency_end[x];
            status[x] = Latency;
            ingress_load[acts[x].dst] += 1;
            rep.max_ingress_concurrency =
                std::max(rep.max_ingress_concurrency, ingress_load[acts[x].dst]);
            rep.max_egress_concurrency = std::max(rep.max_egress_concurrency, 1);
            changed = true;
          }
        }
      }
    }

    // Bandwidth of an ingress port is shared equally among the transfers
    // streaming into it.
    std::vector<int> streaming_into(workers, 0);
    for (int i = 0; i < n; ++i)
      if (status[i] == Streaming) streaming_into[acts[i].dst] += 1;

    double next = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (status[i] == Running) next = std::min(next, finish[i]);
      else if (status[i] == Latency) next = std::min(next, latency_end[i]);
      else if (status[i] == Streaming) {
        const double rate = nominal_rate[i] / streaming_into[acts[i].dst];
        next = std::min(next, t + remaining[i] / rate);
      }
    }
    if (!std::isfinite(next))
      throw UsageError("simulate_schedule: dependency cycle or inverted queue order");

    const double dt = next - t;
    for (int i = 0; i < n; ++i)
      if (status[i] == Streaming)
        remaining[i] -= dt * nominal_rate[i] / streaming_into[acts[i].dst];
    t = next;

    for (int i = 0; i < n; ++i) {
      if (status[i] == Running && finish[i] <= t + detail::kSimEps) {
        status[i] = Done;
        ++done_count;
      } else if (status[i] == Latency && latency_end[i] <= t + detail::kSimEps) {
        status[i] = Streaming;
      } else if (status[i] == Streaming && remaining[i] <= detail::kSimEps * acts[i].bytes + detail::kSimEps) {
        status[i] = Done;
        finish[i] = t;
        ingress_load[acts[i].dst] -= 1;
        ++egress_head[acts[i].src];
        ++done_count;
      }
    }
  }

  rep.start_us = std::move(start);
  rep.finish_us = std::move(finish);
  for (double f : rep.finish_us) rep.makespan_us = std::max(rep.makespan_us, f);
  return rep;
}

/// Pipelined ring schedule: P outer stages advance the ring, B inner stages
/// walk a worker's blocks. At stage (o,i) every worker starts one GEMM and
/// one forward of its current block; a buffer is received into only after
/// the compute and send that referenced it completed (the two-buffer rule).
inline std::vector<SimActivity> build_cyclic_gemm_schedule(
    int workers, int inner_blocks, const std::function<double(int, int)>& block_bytes,
    const std::function<double(int, int, int)>& stage_compute_us) {
  const int P = workers, B = inner_blocks;
  std::vector<SimActivity> acts;
  const int computes = P * P * B;
  auto comp_id = [&](int w, int o, int i) { return (o * B + i) * P + w; };
  auto xfer_id = [&](int w, int o, int i) { return computes + (o * B + i) * P + w; };
  auto origin = [&](int w, int o) { return ((w - o) % P + P) % P; };

  for (int o = 0; o < P; ++o)
    for (int i = 0; i < B; ++i)
      for (int w = 0; w < P; ++w) {
        SimActivity a;
        a.kind = SimActivity::Kind::Compute;
        a.worker = w;
        a.compute_us = stage_compute_us(w, o, i);
        if (o > 0) a.deps.push_back(xfer_id((w - 1 + P) % P, o - 1, i));
        acts.push_back(std::move(a));
      }
  for (int o = 0; o + 1 < P; ++o)
    for (int i = 0; i < B; ++i)
      for (int w = 0; w < P; ++w) {
        SimActivity a;
        a.kind = SimActivity::Kind::Transfer;
        a.src = w;
        a.dst = (w + 1) % P;
        a.bytes = block_bytes(origin(w, o), i);
        if (o > 0) {
          a.deps.push_back(xfer_id((w - 1 + P) % P, o - 1, i));  // block arrived here
          a.deps.push_back(comp_id((w + 1) % P, o - 1, i));      // receiver buffer free
          a.deps.push_back(xfer_id((w + 1) % P, o - 1, i));
        }
        acts.push_back(std::move(a));
      }
  return acts;
}

/// Rejected-baseline broadcast schedule: every owner posts copies of each of
/// its blocks to all other workers immediately, destinations in ascending
/// id order. Sources serialize on their egress port and collide on shared
/// ingress ports.
inline std::vector<SimActivity> build_broadcast_gemm_schedule(
    int workers, int inner_blocks, const std::function<double(int, int)>& block_bytes,
    const std::function<double(int, int, int)>& stage_compute_us) {
  const int P = workers, B = inner_blocks;
  std::vector<SimActivity> acts;
  std::vector<std::vector<int>> arrival(P, std::vector<int>(P * B, -1));  // [dst][ow*B+i]

  for (int ow = 0; ow < P; ++ow)
    for (int i = 0; i < B; ++i)
      for (int dst = 0; dst < P; ++dst) {
        if (dst == ow) continue;
        SimActivity a;
        a.kind = SimActivity::Kind::Transfer;
        a.src = ow;
        a.dst = dst;
        a.bytes = block_bytes(ow, i);
        arrival[dst][ow * B + i] = static_cast<int>(acts.size());
        acts.push_back(std::move(a));
      }
  for (int w = 0; w < P; ++w) {
    int stage = 0;
    for (int ow = 0; ow < P; ++ow)
      for (int i = 0; i < B; ++i, ++stage) {
        SimActivity a;
        a.kind = SimActivity::Kind::Compute;
        a.worker = w;
        a.compute_us = stage_compute_us(w, stage / B, stage % B);
        if (arrival[w][ow * B + i] >= 0) a.deps.push_back(arrival[w][ow * B + i]);
        acts.push_back(std::move(a));
      }
  }
  return acts;
}

/// Generic comm-only schedule from a recorded trace: every transfer posted
/// at once, egress FIFO in sequence order. Used to report a makespan for
/// operations without a structural model.
inline std::vector<SimActivity> build_schedule_from_trace(
    const std::vector<TransferRecord>& records) {
  std::vector<SimActivity> acts;
  for (const auto& r : records) {
    if (r.src == kMasterId || r.dst == kMasterId) continue;  // ports model workers only
    SimActivity a;
    a.kind = SimActivity::Kind::Transfer;
    a.src = r.src;
    a.dst = r.dst;
    a.bytes = static_cast<double>(r.bytes);
    acts.push_back(std::move(a));
  }
  return acts;
}

/// Estimated microseconds for one m x n x k block GEMM at the configured
/// sustained rate.
inline double gemm_compute_us(double m, double n, double k, double flops_per_second) {
  return 2.0 * m * n * k / flops_per_second * 1e6;
}

/// Default sustained local-GEMM rate for makespan estimates. A model
/// constant chosen so the scaling table reproduces the qualitative
/// small-matrix/large-matrix crossover; not a hardware claim.
inline constexpr double kDefaultFlopsRate = 2.0e13;

}  // namespace gridgemm
