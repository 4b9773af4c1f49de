// gridgemm: master-worker command protocol types and per-worker state.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gridgemm/common.hpp"
#include "gridgemm/dense.hpp"
#include "gridgemm/kernels.hpp"
#include "gridgemm/layout.hpp"
#include "gridgemm/pool.hpp"
#include "gridgemm/transport.hpp"

namespace gridgemm {

enum class OpCode : std::uint8_t {
  CreateMatrix,
  DestroyMatrix,
  Scatter,
  Gather,
  Seed,
  Checkpoint,
  Restore,
  Shutdown,
  UpdateBlock,
  Replicate,
  ReplicaRead,
  Reshape,
  CyclicGemm,
  CachedBackwardGemm,
  GeneralGemm,
  BroadcastGemm,
  AddRowColSum,
  RegisterDataset,
  PrefetchBatch,
};

inline const char* op_code_name(OpCode op) {
  switch (op) {
    case OpCode::CreateMatrix: return "create_matrix";
    case OpCode::DestroyMatrix: return "destroy_matrix";
    case OpCode::Scatter: return "scatter";
    case OpCode::Gather: return "gather";
    case OpCode::Seed: return "seed";
    case OpCode::Checkpoint: return "checkpoint";
    case OpCode::Restore: return "restore";
    case OpCode::Shutdown: return "shutdown";
    case OpCode::UpdateBlock: return "update_block";
    case OpCode::Replicate: return "replicate";
    case OpCode::ReplicaRead: return "replica_read";
    case OpCode::Reshape: return "reshape";
    case OpCode::CyclicGemm: return "cyclic_gemm";
    case OpCode::CachedBackwardGemm: return "cached_backward_gemm";
    case OpCode::GeneralGemm: return "general_gemm";
    case OpCode::BroadcastGemm: return "broadcast_gemm";
    case OpCode::AddRowColSum: return "add_row_col_sum";
    case OpCode::RegisterDataset: return "register_dataset";
    case OpCode::PrefetchBatch: return "prefetch_batch";
  }
  return "?";
}

enum class FillKind : std::uint8_t { Zeros = 0, SeededRandom = 1, FromHost = 2 };

struct GemmArgs {
  double alpha = 1.0;
  double beta = 0.0;
  MatrixId a = 0;
  MatrixId b = 0;
  MatrixId c = 0;
  bool trans_a = false;
  bool trans_b = false;
  bool cache_a = false;
};

struct DatasetConfig {
  std::uint64_t element_count = 0;
  std::uint64_t batch_size = 0;
  std::uint64_t feature_dim = 0;
  std::uint64_t seed = 0;
  enum class Sampling : std::uint8_t { Sequential = 0, Random = 1 } sampling = Sampling::Sequential;
};

/// Self-contained instruction from master to workers: a worker executes one
/// using only its local state plus these fields. The master issues commands
/// in a single global order observed identically by all workers.
struct Command {
  OpCode op = OpCode::Shutdown;
  std::uint64_t ticket = 0;

  MatrixId target = 0;          // primary operand / destroy target
  MatrixDescriptor descriptor;  // new descriptor for create/reshape/prefetch/sum
  FillKind fill = FillKind::Zeros;
  GemmArgs gemm;
  MatrixId source = 0;  // reshape source
  Axis axis = Axis::Rows;
  bool deterministic_reduce = true;
  std::uint64_t nondet_salt = 0;
  bool enable = false;   // replicate
  WorkerId reader = 0;   // replica_read
  BlockCoord coord;      // update_block
  std::uint64_t seed = 0;
  bool restore_scatter = false;  // scatter payload restores a version instead of bumping
  std::uint64_t dataset_id = 0;
  DatasetConfig dataset;
};

struct Ack {
  std::uint64_t ticket = 0;
  WorkerId worker = 0;
  bool ok = true;
  std::string error;
  std::uint64_t descriptor_digest = 0;
};

struct BlockKeyFull {
  MatrixId matrix = 0;
  BlockCoord coord;

  friend auto operator<=>(const BlockKeyFull&, const BlockKeyFull&) = default;
};

/// One block held by a worker, backed by pooled memory.
struct StoredBlock {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  Precision precision = Precision::Single32;
  Provenance provenance = Provenance::Owned;
  std::uint64_t version_seen = 0;
  PoolBuffer mem;

  DynView view() { return {mem.data(), rows, cols, precision}; }
  DynConstView view() const { return {mem.data(), rows, cols, precision}; }
};

struct DatasetState {
  DatasetConfig config;
  std::uint64_t cursor = 0;
  std::vector<std::uint64_t> order;  // identity for sequential, seeded shuffle for random
};

inline double dataset_value(std::uint64_t seed, std::uint64_t sample, std::uint64_t feature,
                            std::uint64_t feature_dim) {
  return 2.0 * u64_to_unit_double(mix64(seed, sample * feature_dim + feature)) - 1.0;
}

inline std::vector<std::uint64_t> dataset_order(const DatasetConfig& cfg) {
  std::vector<std::uint64_t> order(cfg.element_count);
  std::iota(order.begin(), order.end(), 0);
  if (cfg.sampling == DatasetConfig::Sampling::Random) {
    std::uint64_t state = mix64(cfg.seed, 0xDA7A5E7ULL);
    for (std::size_t i = order.size(); i > 1; --i) {
      state = mix64(state);
      std::swap(order[i - 1], order[state % i]);
    }
  }
  return order;
}

/// Per-worker runtime state: the globally identical descriptor table plus
/// this worker's owned blocks, block cache, replicas, and memory pool.
class WorkerContext {
public:
  explicit WorkerContext(WorkerId id) : id_(id) {}

  WorkerId id() const { return id_; }
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t s) { seed_ = s; }

  Pool& pool() { return pool_; }
  std::map<MatrixId, MatrixDescriptor>& descriptors() { return descriptors_; }
  std::map<BlockKeyFull, StoredBlock>& owned() { return owned_; }
  std::map<BlockKeyFull, StoredBlock>& cache() { return cache_; }
  std::map<BlockKeyFull, StoredBlock>& replicas() { return replicas_; }
  std::map<std::uint64_t, DatasetState>& datasets() { return datasets_; }

  MatrixDescriptor& descriptor(MatrixId id) {
    auto it = descriptors_.find(id);
    if (it == descriptors_.end())
      throw UsageError("unknown matrix id " + std::to_string(id));
    return it->second;
  }

  StoredBlock make_block(const LayoutSpec& layout, BlockCoord c, Precision p, Provenance prov,
                         std::uint64_t version) {
    auto [r, cc] = block_extent(layout.grid, c);
    StoredBlock b;
    b.rows = r;
    b.cols = cc;
    b.precision = p;
    b.provenance = prov;
    b.version_seen = version;
    b.mem = pool_.acquire(static_cast<std::size_t>(r) * static_cast<std::size_t>(cc) * byte_width(p));
    return b;
  }

  void fill_zeros(StoredBlock& b) {
    std::memset(b.mem.data(), 0, static_cast<std::size_t>(b.rows * b.cols) * byte_width(b.precision));
  }

  /// Seeded fill keyed by (matrix seed, block coordinate): block contents do
  /// not depend on which worker owns the block.
  static void fill_seeded(StoredBlock& b, std::uint64_t matrix_seed, BlockCoord c) {
    const std::uint64_t key =
        mix64(matrix_seed, (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.row)) << 32) |
                               static_cast<std::uint32_t>(c.col));
    DynView v = b.view();
    const std::size_t w = byte_width(b.precision);
    for (std::int64_t e = 0; e < v.size(); ++e) {
      const double val = 2.0 * u64_to_unit_double(mix64(key, static_cast<std::uint64_t>(e))) - 1.0;
      scalar_from_double(b.precision, val, v.data + static_cast<std::size_t>(e) * w);
    }
  }

  /// Blocks of one matrix owned by this worker, in block-row-major order.
  std::vector<BlockCoord> owned_coords(const MatrixDescriptor& d) const {
    std::vector<BlockCoord> out;
    const int nbr = d.layout.grid.n_block_rows(), nbc = d.layout.grid.n_block_cols();
    for (int r = 0; r < nbr; ++r)
      for (int c = 0; c < nbc; ++c)
        if (d.layout.owner({r, c}) == id_) out.push_back({r, c});
    return out;
  }

  void drop_matrix(MatrixId id) {
    auto erase_range = [&](std::map<BlockKeyFull, StoredBlock>& m) {
      auto it = m.lower_bound({id, {0, 0}});
      while (it != m.end() && it->first.matrix == id) it = m.erase(it);
    };
    erase_range(owned_);
    erase_range(cache_);
    erase_range(replicas_);
    descriptors_.erase(id);
  }

  void drop_all() {
    owned_.clear();
    cache_.clear();
    replicas_.clear();
    descriptors_.clear();
    datasets_.clear();
  }

  std::uint64_t descriptor_digest() const;

private:
  WorkerId id_;
  std::uint64_t seed_ = 0;
  Pool pool_;
  std::map<MatrixId, MatrixDescriptor> descriptors_;
  std::map<BlockKeyFull, StoredBlock> owned_;
  std::map<BlockKeyFull, StoredBlock> cache_;
  std::map<BlockKeyFull, StoredBlock> replicas_;
  std::map<std::uint64_t, DatasetState> datasets_;
};

/// Canonical serialization digest of a descriptor table; the coherence
/// assertion compares this across master and all workers after each command.
inline std::uint64_t descriptor_table_digest(const std::map<MatrixId, MatrixDescriptor>& table) {
  Fnv1a h;
  for (const auto& [id, d] : table) hash_descriptor(h, d);
  return h.digest();
}

inline std::uint64_t WorkerContext::descriptor_digest() const {
  return descriptor_table_digest(descriptors_);
}

/// Descriptor-table mutation applied identically by the master and every
/// worker when a command completes; keeping it in one place is what makes
/// the coherence digests agree.
inline void apply_descriptor_effects(std::map<MatrixId, MatrixDescriptor>& table,
                                     const Command& cmd) {
  switch (cmd.op) {
    case OpCode::CreateMatrix:
    case OpCode::Reshape:
    case OpCode::AddRowColSum:
    case OpCode::PrefetchBatch:
      table[cmd.descriptor.matrix_id] = cmd.descriptor;
      break;
    case OpCode::DestroyMatrix:
      table.erase(cmd.target);
      break;
    case OpCode::Scatter:
      if (cmd.restore_scatter) table.at(cmd.target).version = cmd.descriptor.version;
      else table.at(cmd.target).version += 1;
      break;
    case OpCode::UpdateBlock:
      table.at(cmd.target).version += 1;
      break;
    case OpCode::CyclicGemm:
    case OpCode::GeneralGemm:
    case OpCode::BroadcastGemm:
    case OpCode::CachedBackwardGemm:
      table.at(cmd.gemm.c).version += 1;
      break;
    case OpCode::Replicate: {
      auto& d = table.at(cmd.target);
      d.replicated = cmd.enable;
      d.replica_version = cmd.enable ? d.version : 0;
      break;
    }
    case OpCode::ReplicaRead: {
      auto& d = table.at(cmd.target);
      if (d.replicated) d.replica_version = d.version;  // lazy sync happened
      break;
    }
    default:
      break;
  }
}

}  // namespace gridgemm
