// gridgemm: point-to-point message transport between endpoints (workers
// plus the master). Delivery is lossless and FIFO per ordered endpoint
// pair; every payload send appends a TransferRecord with its modeled time.
// Two execution modes share this hub: the deterministic single-threaded
// scheduler (await requires the message to already be queued) and one
// thread per worker with blocking awaits.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

#include "gridgemm/common.hpp"
#include "gridgemm/cost_model.hpp"
#include "gridgemm/layout.hpp"
#include "gridgemm/topology.hpp"

namespace gridgemm {

enum class Provenance : std::uint8_t { Owned = 0, Cached = 1, Replica = 2, Transit = 3 };

struct TransferRecord {
  std::uint64_t seq = 0;
  WorkerId src = 0;
  WorkerId dst = 0;
  std::uint64_t bytes = 0;          // payload + message header
  std::uint64_t payload_bytes = 0;  // scalar data only
  Medium medium = Medium::PeerToPeer;
  double time_us = 0;
  std::string op_tag;
};

/// Wire unit between endpoints. Self-contained: everything a receiver needs
/// to place the payload is in the header fields. Only Owned or Transit
/// buffers may be sent; delivered payloads always carry Transit provenance.
struct Message {
  WorkerId src = 0;
  MatrixId matrix_id = 0;
  BlockCoord coord;
  std::uint64_t version = 0;
  Precision precision = Precision::Single32;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  Provenance provenance = Provenance::Transit;
  std::string op_tag;
  std::vector<std::byte> payload;
};

class TraceLog {
public:
  void append(TransferRecord rec) {
    std::lock_guard<std::mutex> lk(mu_);
    records_.push_back(std::move(rec));
  }

  std::vector<TransferRecord> snapshot() const {
    std::lock_guard<std::mutex> lk(mu_);
    return records_;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return records_.size();
  }

  void dump_jsonl(std::ostream& os) const {
    for (const auto& r : snapshot()) {
      char timebuf[40];
      std::snprintf(timebuf, sizeof timebuf, "%.6f", r.time_us);
      os << "{\"seq\":" << r.seq << ",\"src\":" << r.src << ",\"dst\":" << r.dst
         << ",\"bytes\":" << r.bytes << ",\"medium\":\"" << medium_name(r.medium)
         << "\",\"time_us\":" << timebuf << ",\"op_tag\":\"" << r.op_tag << "\"}\n";
    }
  }

private:
  mutable std::mutex mu_;
  std::vector<TransferRecord> records_;
};

struct SendHandle {
  std::uint64_t seq = 0;
  bool consumed = false;
};

struct RecvHandle {
  WorkerId dst = 0;
  WorkerId src = 0;
  bool consumed = false;
};

class TransportHub {
public:
  TransportHub(int worker_count, Topology topology, CostModel cost_model, bool deterministic)
      : worker_count_(worker_count),
        topology_(std::move(topology)),
        cost_model_(std::move(cost_model)),
        deterministic_(deterministic),
        endpoints_(static_cast<std::size_t>(worker_count) + 1) {
    for (auto& ep : endpoints_) ep.queues.resize(static_cast<std::size_t>(worker_count) + 1);
  }

  int worker_count() const { return worker_count_; }
  bool deterministic() const { return deterministic_; }
  const Topology& topology() const { return topology_; }
  const CostModel& cost_model() const { return cost_model_; }
  TraceLog& trace() { return trace_; }
  const TraceLog& trace() const { return trace_; }

  void set_await_timeout(std::chrono::milliseconds t) { await_timeout_ = t; }

  /// Test hook: flips one bit of the payload of the transfer with the given
  /// sequence number.
  void inject_fault_at(std::uint64_t seq) { fault_seq_ = seq; }

  SendHandle send_block_async(WorkerId src, WorkerId dst, Message msg) {
    if (src == dst) throw ProtocolError("send_block_async: self-send");
    if (msg.payload.empty()) throw ProtocolError("send_block_async: zero-length block");
    if (msg.provenance == Provenance::Cached || msg.provenance == Provenance::Replica)
      throw UsageError("send_block_async: cached/replica buffers are local-only");
    Endpoint& ep = endpoint(dst);  // throws on unknown destination
    msg.src = src;
    msg.provenance = Provenance::Transit;

    TransferRecord rec;
    rec.src = src;
    rec.dst = dst;
    rec.payload_bytes = msg.payload.size();
    rec.bytes = msg.payload.size() + kMessageHeaderBytes;
    rec.medium = topology_.medium_between(src, dst);
    rec.time_us = cost_model_.modeled_time_us(rec.medium, static_cast<double>(rec.bytes));
    rec.op_tag = msg.op_tag;
    rec.seq = next_seq_.fetch_add(1, std::memory_order_relaxed);
    if (rec.seq == fault_seq_) msg.payload[0] ^= std::byte{1};
    trace_.append(rec);

    {
      std::lock_guard<std::mutex> lk(ep.mu);
      ep.queues[slot(src)].push_back(std::move(msg));
    }
    ep.cv.notify_all();
    return SendHandle{rec.seq, false};
  }

  /// Sends are buffered, so completion is immediate; awaiting only checks
  /// handle hygiene.
  void await(SendHandle& h) {
    if (h.consumed) throw UsageError("await: send handle already awaited");
    h.consumed = true;
  }

  RecvHandle recv_block_async(WorkerId dst, WorkerId src) {
    endpoint(dst);
    return RecvHandle{dst, src, false};
  }

  Message await(RecvHandle& h) {
    if (h.consumed) throw UsageError("await: recv handle already awaited");
    h.consumed = true;
    Endpoint& ep = endpoint(h.dst);
    std::unique_lock<std::mutex> lk(ep.mu);
    auto& q = ep.queues[slot(h.src)];
    if (q.empty()) {
      if (deterministic_)
        throw DeadlockError("await: no matching send (deterministic scheduler)");
      if (!ep.cv.wait_for(lk, await_timeout_, [&] { return !q.empty(); }))
        throw DeadlockError("await: timed out waiting for message");
    }
    Message msg = std::move(q.front());
    q.pop_front();
    return msg;
  }

  Message recv(WorkerId dst, WorkerId src) {
    RecvHandle h = recv_block_async(dst, src);
    return await(h);
  }

private:
  struct Endpoint {
    std::mutex mu;
    std::condition_variable cv;
    std::vector<std::deque<Message>> queues;  // indexed by source slot
  };

  std::size_t slot(WorkerId id) const {
    if (id == kMasterId) return static_cast<std::size_t>(worker_count_);
    return static_cast<std::size_t>(id);
  }

  Endpoint& endpoint(WorkerId id) {
    if (id != kMasterId && (id < 0 || id >= worker_count_))
      throw ConfigError("transport: unknown endpoint " + std::to_string(id));
    return endpoints_[slot(id)];
  }

  int worker_count_;
  Topology topology_;
  CostModel cost_model_;
  bool deterministic_;
  std::vector<Endpoint> endpoints_;
  TraceLog trace_;
  std::atomic<std::uint64_t> next_seq_{0};
  std::uint64_t fault_seq_ = UINT64_MAX;
  std::chrono::milliseconds await_timeout_{30000};
};

}  // namespace gridgemm
