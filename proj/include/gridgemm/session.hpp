// gridgemm: master-side session facade. Library calls are synchronous:
// each one issues a self-contained command to every worker in a single
// global order, moves any master payloads through the transport, and waits
// for acknowledgments. Workers either run their loops on dedicated threads
// (blocking awaits) or are driven phase-by-phase from the master thread by
// the deterministic scheduler.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

#include "gridgemm/checkpoint.hpp"
#include "gridgemm/ops.hpp"

namespace gridgemm {

namespace detail {

template <typename T>
class SyncQueue {
public:
  void push(T v) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      q_.push_back(std::move(v));
    }
    cv_.notify_one();
  }

  T pop() {
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [&] { return !q_.empty(); });
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> q_;
};

}  // namespace detail

class Session {
public:
  struct Config {
    int worker_count = 1;
    std::optional<Topology> topology;     // default: groups of 4, 2 groups per node
    std::optional<CostModel> cost_model;  // default: the built-in measured tables
    std::uint64_t root_seed = 0;
    bool deterministic = true;  // GRIDGEMM_DETERMINISTIC=1 forces this on
    bool coherence_checks = true;
  };

  explicit Session(Config cfg) : cfg_(std::move(cfg)), hub_(make_hub(cfg_)) {
    for (WorkerId w = 0; w < cfg_.worker_count; ++w)
      workers_.push_back(std::make_unique<WorkerContext>(w));
    if (!deterministic()) {
      queues_.resize(static_cast<std::size_t>(cfg_.worker_count));
      for (WorkerId w = 0; w < cfg_.worker_count; ++w) {
        queues_[static_cast<std::size_t>(w)] = std::make_unique<detail::SyncQueue<Command>>();
        threads_.emplace_back([this, w] { worker_main(w); });
      }
    }
    live_ = true;
    seed_workers(cfg_.root_seed);
  }

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  ~Session() {
    try {
      shutdown();
    } catch (...) {
    }
  }

  // --- introspection ----------------------------------------------------

  int worker_count() const { return cfg_.worker_count; }
  bool deterministic() const { return hub_.deterministic(); }
  std::uint64_t root_seed() const { return root_seed_; }
  TransportHub& hub() { return hub_; }
  const TraceLog& trace() const { return hub_.trace(); }

  const MatrixDescriptor& descriptor(MatrixId id) const {
    auto it = table_.find(id);
    if (it == table_.end()) throw UsageError("unknown matrix id " + std::to_string(id));
    return it->second;
  }

  Pool::Stats worker_pool_stats(WorkerId w) const { return worker(w).pool().stats(); }
  std::uint64_t worker_seed(WorkerId w) const { return worker(w).seed(); }

  std::vector<std::uint64_t> descriptor_digests() const {
    std::vector<std::uint64_t> out{descriptor_table_digest(table_)};
    for (const auto& w : workers_) out.push_back(w->descriptor_digest());
    return out;
  }

  // --- seeds ------------------------------------------------------------

  /// Distributes per-worker seeds derived from the root by a 64-bit mix
  /// split; identical roots give identical seed vectors.
  std::vector<std::uint64_t> seed_workers(std::uint64_t root) {
    root_seed_ = root;
    Command cmd;
    cmd.op = OpCode::Seed;
    cmd.seed = root;
    dispatch(cmd);
    std::vector<std::uint64_t> seeds;
    for (WorkerId w = 0; w < worker_count(); ++w)
      seeds.push_back(mix64(root, static_cast<std::uint64_t>(w)));
    return seeds;
  }

  // --- matrix lifecycle ---------------------------------------------------

  MatrixId create_matrix(const LayoutSpec& layout, Precision precision, FillKind fill,
                         const HostMatrix* host = nullptr) {
    require_live();
    validate_layout_workers(layout);
    if (fill == FillKind::FromHost) {
      if (host == nullptr) throw UsageError("create_matrix: FromHost requires host data");
      if (host->rows() != layout.grid.global_rows || host->cols() != layout.grid.global_cols)
        throw ShapeError("create_matrix: host data shape does not match the layout");
    }
    MatrixDescriptor d;
    d.matrix_id = next_matrix_id_++;
    d.layout = layout;
    d.precision = precision;
    d.seed = mix64(root_seed_, d.matrix_id);
    Command cmd;
    cmd.op = OpCode::CreateMatrix;
    cmd.descriptor = d;
    cmd.fill = fill;
    dispatch(cmd);
    if (fill == FillKind::FromHost) scatter(d.matrix_id, *host);
    return d.matrix_id;
  }

  void destroy_matrix(MatrixId id) {
    require_live();
    descriptor(id);
    Command cmd;
    cmd.op = OpCode::DestroyMatrix;
    cmd.target = id;
    dispatch(cmd);
    cache_meta_.erase(id);
  }

  // --- scatter / gather ---------------------------------------------------

  void scatter(MatrixId id, const HostMatrix& host) {
    require_live();
    const MatrixDescriptor d = descriptor(id);
    if (host.rows() != d.layout.grid.global_rows || host.cols() != d.layout.grid.global_cols)
      throw ShapeError("scatter: host data shape does not match the matrix");
    Command cmd;
    cmd.op = OpCode::Scatter;
    cmd.target = id;
    MasterIO io;
    io.pre = [&] { scatter_payloads(d, host, d.version + 1, "scatter"); };
    dispatch(cmd, io);
  }

  /// Reassembles the matrix from owned blocks only; caches and replicas are
  /// never consulted.
  HostMatrix gather(MatrixId id) {
    require_live();
    const MatrixDescriptor d = descriptor(id);
    HostMatrix out(d.layout.grid.global_rows, d.layout.grid.global_cols, d.precision);
    Command cmd;
    cmd.op = OpCode::Gather;
    cmd.target = id;
    MasterIO io;
    io.post = [&] {
      const auto& g = d.layout.grid;
      for (int r = 0; r < g.n_block_rows(); ++r)
        for (int c = 0; c < g.n_block_cols(); ++c) {
          Message msg = hub_.recv(kMasterId, d.layout.owner({r, c}));
          if (msg.matrix_id != id || !(msg.coord == BlockCoord{r, c}))
            throw ProtocolError("gather: unexpected block delivery");
          copy_region(message_view(msg), 0, 0, out.view(),
                      static_cast<std::int64_t>(r) * g.block_rows,
                      static_cast<std::int64_t>(c) * g.block_cols, msg.rows, msg.cols);
        }
    };
    dispatch(cmd, io);
    return out;
  }

  void update_block(MatrixId id, BlockCoord coord, const HostMatrix& data) {
    require_live();
    const MatrixDescriptor d = descriptor(id);
    auto [br, bc] = block_extent(d.layout.grid, coord);
    if (data.rows() != br || data.cols() != bc)
      throw ShapeError("update_block: data shape does not match the block extent");
    Command cmd;
    cmd.op = OpCode::UpdateBlock;
    cmd.target = id;
    cmd.coord = coord;
    MasterIO io;
    io.pre = [&] {
      HostMatrix conv(br, bc, d.precision);
      convert_precision(data.view(), conv.view());
      Message m = make_block_message(kMasterId, id, coord, d.version + 1, conv.view(), "update_block");
      auto h = hub_.send_block_async(kMasterId, d.layout.owner(coord), std::move(m));
      hub_.await(h);
    };
    dispatch(cmd, io);
  }

  // --- distributed operations ----------------------------------------------

  void cyclic_gemm(double alpha, MatrixId a, MatrixId b, double beta, MatrixId c, bool trans_a,
                   bool trans_b, bool cache_a) {
    require_live();
    Command cmd = gemm_command(OpCode::CyclicGemm, alpha, a, b, beta, c, trans_a, trans_b, cache_a);
    build_cyclic_plan(table_, cmd.gemm, worker_count());  // master-side validation
    dispatch(cmd);
    if (cache_a) cache_meta_[a] = table_.at(a).version;
    else cache_meta_.erase(a);
  }

  void broadcast_gemm_reference(double alpha, MatrixId a, MatrixId b, double beta, MatrixId c,
                                bool trans_a, bool trans_b) {
    require_live();
    Command cmd = gemm_command(OpCode::BroadcastGemm, alpha, a, b, beta, c, trans_a, trans_b, false);
    build_cyclic_plan(table_, cmd.gemm, worker_count());
    dispatch(cmd);
  }

  void general_gemm(double alpha, MatrixId a, MatrixId b, double beta, MatrixId c, bool trans_a,
                    bool trans_b) {
    require_live();
    Command cmd = gemm_command(OpCode::GeneralGemm, alpha, a, b, beta, c, trans_a, trans_b, false);
    validate_general_gemm(cmd.gemm);
    dispatch(cmd);
  }

  /// dX <- W * dY entirely from owned plus cached W blocks; a stale or
  /// missing cache raises instead of silently re-fetching.
  void cached_backward_gemm(MatrixId w_id, MatrixId dy, MatrixId dx) {
    require_live();
    Command cmd =
        gemm_command(OpCode::CachedBackwardGemm, 1.0, w_id, dy, 0.0, dx, false, false, false);
    const CyclicPlan plan = build_cyclic_plan(table_, cmd.gemm, worker_count());
    std::vector<std::pair<int, int>> missing = backward_missing_coords(plan, w_id);
    if (!missing.empty())
      throw CacheMissError("cached_backward_gemm: blocks not cached at the current version",
                           std::move(missing));
    dispatch(cmd);
  }

  void replicate(MatrixId id, bool enable) {
    require_live();
    descriptor(id);
    Command cmd;
    cmd.op = OpCode::Replicate;
    cmd.target = id;
    cmd.enable = enable;
    dispatch(cmd);
  }

  /// Full-matrix read served from one worker's replica set, re-synchronizing
  /// stale replicas first (lazy, version-checked refresh).
  HostMatrix replica_read(MatrixId id, WorkerId reader) {
    require_live();
    const MatrixDescriptor d = descriptor(id);
    if (!d.replicated) throw UsageError("replica_read: matrix is not replicated");
    worker(reader);
    Command cmd;
    cmd.op = OpCode::ReplicaRead;
    cmd.target = id;
    cmd.reader = reader;
    HostMatrix out(d.layout.grid.global_rows, d.layout.grid.global_cols, d.precision);
    MasterIO io;
    io.post = [&] {
      Message msg = hub_.recv(kMasterId, reader);
      if (msg.matrix_id != id || msg.rows != out.rows() || msg.cols != out.cols())
        throw ProtocolError("replica_read: unexpected reply");
      std::memcpy(out.raw(), msg.payload.data(), msg.payload.size());
    };
    dispatch(cmd, io);
    return out;
  }

  MatrixId reshape(MatrixId src, const LayoutSpec& new_layout, Precision new_precision) {
    require_live();
    const MatrixDescriptor d = descriptor(src);
    validate_layout_workers(new_layout);
    if (d.layout.grid.global_rows * d.layout.grid.global_cols !=
        new_layout.grid.global_rows * new_layout.grid.global_cols)
      throw ShapeError("reshape: element count must be preserved");
    MatrixDescriptor nd;
    nd.matrix_id = next_matrix_id_++;
    nd.layout = new_layout;
    nd.precision = new_precision;
    nd.seed = mix64(root_seed_, nd.matrix_id);
    Command cmd;
    cmd.op = OpCode::Reshape;
    cmd.source = src;
    cmd.descriptor = nd;
    dispatch(cmd);
    return nd.matrix_id;
  }

  /// Distributed row/column sums. The output is a distributed vector whose
  /// segments live with the first block of each row (or column) strip.
  MatrixId add_row_col_sum(MatrixId id, Axis axis, bool deterministic_reduce) {
    require_live();
    const MatrixDescriptor d = descriptor(id);
    const auto& g = d.layout.grid;
    MatrixDescriptor od;
    od.matrix_id = next_matrix_id_++;
    od.precision = d.precision;
    od.seed = mix64(root_seed_, od.matrix_id);
    std::vector<WorkerId> owners;
    if (axis == Axis::Rows) {
      for (int s = 0; s < g.n_block_rows(); ++s) owners.push_back(d.layout.owner({s, 0}));
      od.layout = make_custom_layout(make_grid(g.global_rows, 1, g.block_rows, 1),
                                     d.layout.worker_count, owners);
    } else {
      for (int s = 0; s < g.n_block_cols(); ++s) owners.push_back(d.layout.owner({0, s}));
      od.layout = make_custom_layout(make_grid(1, g.global_cols, 1, g.block_cols),
                                     d.layout.worker_count, owners);
    }
    Command cmd;
    cmd.op = OpCode::AddRowColSum;
    cmd.target = id;
    cmd.descriptor = od;
    cmd.axis = axis;
    cmd.deterministic_reduce = deterministic_reduce;
    cmd.nondet_salt = mix64(root_seed_, ++nondet_counter_);
    dispatch(cmd);
    return od.matrix_id;
  }

  // --- datasets -------------------------------------------------------------

  std::uint64_t register_dataset(const DatasetConfig& cfg) {
    require_live();
    if (cfg.batch_size == 0 || cfg.feature_dim == 0)
      throw ConfigError("dataset: batch size and feature dimension must be positive");
    Command cmd;
    cmd.op = OpCode::RegisterDataset;
    cmd.dataset_id = next_dataset_id_++;
    cmd.dataset = cfg;
    dispatch(cmd);
    DatasetState st;
    st.config = cfg;
    st.order = dataset_order(cfg);
    datasets_[cmd.dataset_id] = std::move(st);
    return cmd.dataset_id;
  }

  /// Loads the next batch as a new column-blocked matrix, each worker
  /// filling its own shard; returns nothing once the dataset is exhausted.
  std::optional<MatrixId> prefetch_next_batch(std::uint64_t dataset_id) {
    require_live();
    auto it = datasets_.find(dataset_id);
    if (it == datasets_.end()) throw UsageError("prefetch: dataset not registered");
    DatasetState& ds = it->second;
    if (ds.cursor + ds.config.batch_size > ds.config.element_count) return std::nullopt;
    const std::int64_t fdim = static_cast<std::int64_t>(ds.config.feature_dim);
    const std::int64_t batch = static_cast<std::int64_t>(ds.config.batch_size);
    const std::int64_t strip = (batch + worker_count() - 1) / worker_count();
    MatrixDescriptor d;
    d.matrix_id = next_matrix_id_++;
    d.layout = make_layout(LayoutKind::ColBlocks1D, fdim, batch, fdim, strip, worker_count());
    d.precision = Precision::Single32;
    d.seed = mix64(root_seed_, d.matrix_id);
    Command cmd;
    cmd.op = OpCode::PrefetchBatch;
    cmd.descriptor = d;
    cmd.dataset_id = dataset_id;
    dispatch(cmd);
    ds.cursor += ds.config.batch_size;
    return d.matrix_id;
  }

  // --- checkpoint / restore ---------------------------------------------------

  void checkpoint(const std::string& path) {
    require_live();
    CheckpointImage img;
    img.worker_count = worker_count();
    img.root_seed = root_seed_;
    img.next_matrix_id = next_matrix_id_;
    Command cmd;
    cmd.op = OpCode::Checkpoint;
    MasterIO io;
    io.post = [&] {
      for (const auto& [id, d] : table_) {
        CheckpointMatrix m;
        m.desc = d;
        const auto& g = d.layout.grid;
        for (WorkerId w = 0; w < worker_count(); ++w)
          for (int r = 0; r < g.n_block_rows(); ++r)
            for (int c = 0; c < g.n_block_cols(); ++c) {
              if (d.layout.owner({r, c}) != w) continue;
              Message msg = hub_.recv(kMasterId, w);
              if (msg.matrix_id != id || !(msg.coord == BlockCoord{r, c}))
                throw ProtocolError("checkpoint: unexpected block delivery");
              m.blocks[r * g.n_block_cols() + c] = std::move(msg.payload);
            }
        img.matrices.push_back(std::move(m));
      }
    };
    dispatch(cmd, io);
    write_checkpoint_file(img, path);
  }

  static std::unique_ptr<Session> restore(const std::string& path) { return restore(path, Config{}); }

  static std::unique_ptr<Session> restore(const std::string& path, Config base) {
    const CheckpointImage img = read_checkpoint_file(path);
    base.worker_count = img.worker_count;
    base.root_seed = img.root_seed;
    auto s = std::make_unique<Session>(base);
    for (const auto& m : img.matrices) {
      MatrixDescriptor d = m.desc;
      const bool was_replicated = d.replicated;
      d.replicated = false;
      d.replica_version = 0;
      Command create;
      create.op = OpCode::CreateMatrix;
      create.descriptor = d;
      create.fill = FillKind::Zeros;
      s->dispatch(create);

      Command load;
      load.op = OpCode::Scatter;
      load.target = d.matrix_id;
      load.restore_scatter = true;
      load.descriptor.version = d.version;
      MasterIO io;
      io.pre = [&] {
        const auto& g = d.layout.grid;
        for (int r = 0; r < g.n_block_rows(); ++r)
          for (int c = 0; c < g.n_block_cols(); ++c) {
            auto [br, bc] = block_extent(g, {r, c});
            DynConstView v{m.blocks.at(r * g.n_block_cols() + c).data(), br, bc, d.precision};
            Message msg = make_block_message(kMasterId, d.matrix_id, {r, c}, d.version, v, "restore");
            auto h = s->hub_.send_block_async(kMasterId, d.layout.owner({r, c}), std::move(msg));
            s->hub_.await(h);
          }
      };
      s->dispatch(load, io);
      if (was_replicated) s->replicate(d.matrix_id, true);
    }
    s->next_matrix_id_ = img.next_matrix_id;
    return s;
  }

  // --- shutdown ----------------------------------------------------------------

  /// Stops the run loops and releases all pooled memory. Idempotent.
  void shutdown() {
    if (!live_) return;
    Command cmd;
    cmd.op = OpCode::Shutdown;
    dispatch(cmd, {}, /*coherence=*/false);
    if (!deterministic()) {
      for (auto& t : threads_) t.join();
      threads_.clear();
    }
    table_.clear();
    cache_meta_.clear();
    datasets_.clear();
    live_ = false;
  }

  bool live() const { return live_; }

private:
  struct MasterIO {
    std::function<void()> pre;
    std::function<void()> post;
  };

  static TransportHub make_hub(Config& cfg) {
    if (cfg.worker_count < 1) throw UsageError("init: worker_count must be >= 1");
    const char* env = std::getenv("GRIDGEMM_DETERMINISTIC");
    if (env != nullptr && std::string(env) == "1") cfg.deterministic = true;
    Topology topo = cfg.topology ? *cfg.topology : Topology::default_grouped(cfg.worker_count);
    if (topo.worker_count() != cfg.worker_count)
      throw ConfigError("init: topology does not cover the session worker count");
    CostModel cost = cfg.cost_model ? *cfg.cost_model : CostModel::measured_default();
    return TransportHub(cfg.worker_count, std::move(topo), std::move(cost), cfg.deterministic);
  }

  WorkerContext& worker(WorkerId w) const {
    if (w < 0 || w >= cfg_.worker_count) throw UsageError("unknown worker id");
    return *workers_[static_cast<std::size_t>(w)];
  }

  void require_live() const {
    if (!live_) throw UsageError("session has been shut down");
  }

  void validate_layout_workers(const LayoutSpec& layout) const {
    if (layout.worker_count < 1) throw UsageError("layout: worker set must not be empty");
    const auto& g = layout.grid;
    for (int r = 0; r < g.n_block_rows(); ++r)
      for (int c = 0; c < g.n_block_cols(); ++c)
        if (layout.owner({r, c}) < 0 || layout.owner({r, c}) >= cfg_.worker_count)
          throw UsageError("layout: block owner outside the session worker set");
  }

  static Command gemm_command(OpCode op, double alpha, MatrixId a, MatrixId b, double beta,
                              MatrixId c, bool trans_a, bool trans_b, bool cache_a) {
    if (c == a || c == b) throw UsageError("gemm: destination must be distinct from the operands");
    Command cmd;
    cmd.op = op;
    cmd.gemm = {alpha, beta, a, b, c, trans_a, trans_b, cache_a};
    return cmd;
  }

  void validate_general_gemm(const GemmArgs& g) {
    const MatrixDescriptor& da = descriptor(g.a);
    const MatrixDescriptor& db = descriptor(g.b);
    const MatrixDescriptor& dc = descriptor(g.c);
    if (da.precision != db.precision || da.precision != dc.precision)
      throw UsageError("gemm: operands must share a precision; reshape to convert first");
    if (dc.replicated) throw UsageError("gemm: destination matrix may not be replicated");
    const std::int64_t m = g.trans_a ? da.layout.grid.global_cols : da.layout.grid.global_rows;
    const std::int64_t kk = g.trans_a ? da.layout.grid.global_rows : da.layout.grid.global_cols;
    const std::int64_t kb = g.trans_b ? db.layout.grid.global_cols : db.layout.grid.global_rows;
    const std::int64_t n = g.trans_b ? db.layout.grid.global_rows : db.layout.grid.global_cols;
    if (kk != kb) throw ShapeError("gemm: inner dimensions do not conform");
    if (dc.layout.grid.global_rows != m || dc.layout.grid.global_cols != n)
      throw ShapeError("gemm: output dimensions do not conform");
  }

  std::vector<std::pair<int, int>> backward_missing_coords(const CyclicPlan& plan, MatrixId w_id) {
    const std::uint64_t version = table_.at(w_id).version;
    auto meta = cache_meta_.find(w_id);
    const bool cache_fresh = meta != cache_meta_.end() && meta->second == version;
    std::set<std::pair<int, int>> missing;
    const auto& layout = table_.at(w_id).layout;
    std::set<WorkerId> compute_owners;
    for (const auto& st : plan.strips) compute_owners.insert(st.owner);
    for (WorkerId cw : compute_owners)
      for (int r = 0; r < layout.grid.n_block_rows(); ++r)
        if (layout.owner({r, 0}) != cw && !cache_fresh) missing.insert({r, 0});
    return {missing.begin(), missing.end()};
  }

  void scatter_payloads(const MatrixDescriptor& d, const HostMatrix& host, std::uint64_t version,
                        const std::string& tag) {
    const auto& g = d.layout.grid;
    for (int r = 0; r < g.n_block_rows(); ++r)
      for (int c = 0; c < g.n_block_cols(); ++c) {
        auto [br, bc] = block_extent(g, {r, c});
        HostMatrix block(br, bc, d.precision);
        if (host.precision() == d.precision) {
          copy_region(host.view(), static_cast<std::int64_t>(r) * g.block_rows,
                      static_cast<std::int64_t>(c) * g.block_cols, block.view(), 0, 0, br, bc);
        } else {
          // convert before transmission; narrowing sends the smaller payload
          for (std::int64_t i = 0; i < br; ++i)
            for (std::int64_t j = 0; j < bc; ++j)
              block.set(i, j, host.get(r * g.block_rows + i, c * g.block_cols + j));
        }
        Message msg = make_block_message(kMasterId, d.matrix_id, {r, c}, version, block.view(), tag);
        auto h = hub_.send_block_async(kMasterId, d.layout.owner({r, c}), std::move(msg));
        hub_.await(h);
      }
  }

  // --- dispatch ------------------------------------------------------------

  void dispatch(Command& cmd, const MasterIO& io = {}, bool coherence = true) {
    cmd.ticket = next_ticket_++;
    if (deterministic()) {
      if (io.pre) io.pre();
      run_deterministic(cmd);
      if (io.post) io.post();
    } else {
      for (auto& q : queues_) q->push(cmd);
      if (io.pre) io.pre();
      if (io.post) io.post();
      std::vector<Ack> acks;
      for (int i = 0; i < worker_count(); ++i) acks.push_back(acks_.pop());
      for (const auto& a : acks) {
        if (a.ticket != cmd.ticket) throw ProtocolError("dispatch: acknowledgment ticket mismatch");
        if (!a.ok)
          throw ProtocolError("worker " + std::to_string(a.worker) + " failed: " + a.error);
      }
    }
    apply_descriptor_effects(table_, cmd);
    if (coherence && cfg_.coherence_checks) verify_coherence(cmd);
  }

  void run_deterministic(const Command& cmd) {
    const int P = worker_count();
    switch (cmd.op) {
      case OpCode::CyclicGemm: {
        std::vector<std::unique_ptr<CyclicGemmExec>> execs;
        for (WorkerId w = 0; w < P; ++w)
          execs.push_back(std::make_unique<CyclicGemmExec>(*workers_[w], hub_, cmd));
        for (auto& e : execs) e->prepare();
        const auto& plan = execs.front()->plan();
        for (int o = 0; o < plan.workers; ++o)
          for (int i = 0; i < plan.inner; ++i) {
            for (auto& e : execs) e->stage_send(o, i);
            for (auto& e : execs) e->stage_recv(o, i);
          }
        for (auto& e : execs) e->finish();
        break;
      }
      case OpCode::GeneralGemm: {
        std::vector<std::unique_ptr<GeneralGemmExec>> execs;
        for (WorkerId w = 0; w < P; ++w)
          execs.push_back(std::make_unique<GeneralGemmExec>(*workers_[w], hub_, cmd));
        for (auto& e : execs) e->prepare();
        for (auto& e : execs) e->send_phase();
        for (auto& e : execs) e->recv_phase();
        for (auto& e : execs) e->finish();
        break;
      }
      case OpCode::BroadcastGemm: {
        std::vector<std::unique_ptr<BroadcastGemmExec>> execs;
        for (WorkerId w = 0; w < P; ++w)
          execs.push_back(std::make_unique<BroadcastGemmExec>(*workers_[w], hub_, cmd));
        for (auto& e : execs) e->prepare();
        for (auto& e : execs) e->send_phase();
        for (auto& e : execs) e->recv_phase();
        for (auto& e : execs) e->finish();
        break;
      }
      case OpCode::Replicate:
      case OpCode::ReplicaRead: {
        std::vector<std::unique_ptr<ReplicateExec>> execs;
        for (WorkerId w = 0; w < P; ++w)
          execs.push_back(std::make_unique<ReplicateExec>(*workers_[w], hub_, cmd));
        for (auto& e : execs) e->send_phase();
        for (auto& e : execs) e->recv_phase();
        for (auto& e : execs) e->finish();
        break;
      }
      case OpCode::Reshape: {
        std::vector<std::unique_ptr<ReshapeExec>> execs;
        for (WorkerId w = 0; w < P; ++w)
          execs.push_back(std::make_unique<ReshapeExec>(*workers_[w], hub_, cmd));
        for (auto& e : execs) e->prepare();
        for (auto& e : execs) e->send_phase();
        for (auto& e : execs) e->recv_phase();
        for (auto& e : execs) e->finish();
        break;
      }
      case OpCode::AddRowColSum: {
        std::vector<std::unique_ptr<RowColSumExec>> execs;
        for (WorkerId w = 0; w < P; ++w)
          execs.push_back(std::make_unique<RowColSumExec>(*workers_[w], hub_, cmd));
        for (auto& e : execs) e->prepare();
        for (auto& e : execs) e->send_phase();
        for (auto& e : execs) e->recv_phase();
        for (auto& e : execs) e->finish();
        break;
      }
      default:
        // local ops and master-coupled exchanges share the autonomous path
        for (WorkerId w = 0; w < P; ++w) execute_command_on_worker(*workers_[w], hub_, cmd);
        break;
    }
  }

  void verify_coherence(const Command& cmd) {
    const std::uint64_t expect = descriptor_table_digest(table_);
    for (const auto& w : workers_)
      if (w->descriptor_digest() != expect)
        throw ProtocolError(std::string("descriptor tables diverged after ") + op_code_name(cmd.op));
  }

  void worker_main(WorkerId w) {
    auto& q = *queues_[static_cast<std::size_t>(w)];
    WorkerContext& ctx = *workers_[static_cast<std::size_t>(w)];
    for (;;) {
      Command cmd = q.pop();
      Ack ack;
      ack.ticket = cmd.ticket;
      ack.worker = w;
      try {
        execute_command_on_worker(ctx, hub_, cmd);
        ack.descriptor_digest = ctx.descriptor_digest();
      } catch (const std::exception& e) {
        ack.ok = false;
        ack.error = e.what();
      }
      acks_.push(ack);
      if (cmd.op == OpCode::Shutdown) return;
    }
  }

  Config cfg_;
  TransportHub hub_;
  std::vector<std::unique_ptr<WorkerContext>> workers_;
  std::vector<std::unique_ptr<detail::SyncQueue<Command>>> queues_;
  std::vector<std::thread> threads_;
  detail::SyncQueue<Ack> acks_;
  std::map<MatrixId, MatrixDescriptor> table_;
  std::map<MatrixId, std::uint64_t> cache_meta_;  // matrix -> version fully cached everywhere
  std::map<std::uint64_t, DatasetState> datasets_;
  std::uint64_t next_matrix_id_ = 1;
  std::uint64_t next_dataset_id_ = 1;
  std::uint64_t next_ticket_ = 1;
  std::uint64_t nondet_counter_ = 0;
  std::uint64_t root_seed_ = 0;
  bool live_ = false;
};

}  // namespace gridgemm
