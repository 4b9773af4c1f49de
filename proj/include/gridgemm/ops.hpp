// gridgemm: worker-side implementations of the distributed operations.
//
// Every operation is built from at most four phases: prepare, post sends,
// await receives, finish. Phase bodies are shared between the two execution
// modes; only the interleaving differs. The deterministic scheduler drives
// all workers' phases from the master thread in a canonical order, while
// threaded workers run the same phases autonomously (sends are buffered, so
// posting before awaiting is deadlock-free). Data movement plans are pure
// functions of the globally replicated descriptor tables, which is what
// lets workers pair their sends and receives without master arbitration.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gridgemm/runtime_types.hpp"
#include "gridgemm/schedule_model.hpp"

namespace gridgemm {

inline Message make_block_message(WorkerId src, MatrixId mid, BlockCoord c, std::uint64_t version,
                                  DynConstView v, std::string tag) {
  Message m;
  m.src = src;
  m.matrix_id = mid;
  m.coord = c;
  m.version = version;
  m.precision = v.precision;
  m.rows = v.rows;
  m.cols = v.cols;
  m.op_tag = std::move(tag);
  m.payload.resize(v.bytes());
  std::memcpy(m.payload.data(), v.data, v.bytes());
  return m;
}

inline DynConstView message_view(const Message& m) {
  return {m.payload.data(), m.rows, m.cols, m.precision};
}

// ---------------------------------------------------------------------
// Ring plan for the pipelined cyclic GEMM
// ---------------------------------------------------------------------

/// Stationary strip: one column slice of C and the op(B) block that feeds it.
struct PlanStrip {
  std::int64_t col0 = 0;
  std::int64_t width = 0;
  WorkerId owner = 0;
  BlockCoord b_coord;
  BlockCoord c_coord;
};

/// Schedule for the ring variant: the rolling operand A is 1D row-blocked
/// with exactly `inner` block-rows per worker; B and C are stationary column
/// strips co-located so each worker computes its own output slice. Worker w
/// sends to (w+1) mod P; over P-1 rotations every A block visits every
/// worker exactly once.
struct CyclicPlan {
  int workers = 1;  // P
  int inner = 1;    // B
  double alpha = 1.0, beta = 0.0;
  bool trans_a = false, trans_b = false, cache_a = false;
  MatrixId a = 0, b = 0, c = 0;
  Precision precision = Precision::Single32;
  std::int64_t m = 0, n = 0, kk = 0;       // op() dimensions
  std::int64_t a_rows = 0, a_cols = 0;     // A storage dimensions
  std::vector<std::vector<int>> row_of;    // [origin worker][inner] -> A block row
  std::vector<PlanStrip> strips;
  std::uint64_t a_version = 0;

  std::int64_t a_block_rows(int block_row) const {
    const std::int64_t r0 = static_cast<std::int64_t>(block_row) * a_block_nominal;
    return std::min(a_block_nominal, a_rows - r0);
  }
  std::int64_t a_block_nominal = 0;
};

inline CyclicPlan build_cyclic_plan(std::map<MatrixId, MatrixDescriptor>& table,
                                    const GemmArgs& g, int session_workers) {
  auto find = [&](MatrixId id) -> MatrixDescriptor& {
    auto it = table.find(id);
    if (it == table.end()) throw UsageError("gemm: unknown matrix id " + std::to_string(id));
    return it->second;
  };
  MatrixDescriptor& da = find(g.a);
  MatrixDescriptor& db = find(g.b);
  MatrixDescriptor& dc = find(g.c);
  if (da.precision != db.precision || da.precision != dc.precision)
    throw UsageError("gemm: operands must share a precision; reshape to convert first");
  if (dc.replicated) throw UsageError("gemm: destination matrix may not be replicated");

  CyclicPlan p;
  p.workers = session_workers;
  p.alpha = g.alpha;
  p.beta = g.beta;
  p.trans_a = g.trans_a;
  p.trans_b = g.trans_b;
  p.cache_a = g.cache_a;
  p.a = g.a;
  p.b = g.b;
  p.c = g.c;
  p.precision = da.precision;
  p.a_version = da.version;
  p.a_rows = da.layout.grid.global_rows;
  p.a_cols = da.layout.grid.global_cols;
  p.a_block_nominal = da.layout.grid.block_rows;

  p.m = g.trans_a ? p.a_cols : p.a_rows;
  p.kk = g.trans_a ? p.a_rows : p.a_cols;
  const std::int64_t kb = g.trans_b ? db.layout.grid.global_cols : db.layout.grid.global_rows;
  p.n = g.trans_b ? db.layout.grid.global_rows : db.layout.grid.global_cols;
  if (p.kk != kb) throw ShapeError("gemm: inner dimensions do not conform");
  if (dc.layout.grid.global_rows != p.m || dc.layout.grid.global_cols != p.n)
    throw ShapeError("gemm: output dimensions do not conform");

  // Rolling operand: 1D row blocks, equal count per worker.
  const auto& ga = da.layout.grid;
  if ((da.layout.kind != LayoutKind::RowBlocks1D && da.layout.kind != LayoutKind::RowCyclic1D) ||
      ga.n_block_cols() != 1)
    throw PlanError("cyclic_gemm: A must use a 1D row-blocked decomposition");
  if (da.layout.worker_count != session_workers)
    throw PlanError("cyclic_gemm: A must be laid out over all session workers");
  const int nbr = ga.n_block_rows();
  if (nbr % session_workers != 0)
    throw PlanError("cyclic_gemm: A block-rows must divide evenly over the ring");
  p.inner = nbr / session_workers;
  p.row_of.assign(session_workers, {});
  for (int w = 0; w < session_workers; ++w)
    for (int i = 0; i < p.inner; ++i)
      p.row_of[w].push_back(da.layout.kind == LayoutKind::RowBlocks1D ? w * p.inner + i
                                                                      : w + i * session_workers);
  for (int w = 0; w < session_workers; ++w)
    for (int i = 0; i < p.inner; ++i)
      if (da.layout.owner({p.row_of[w][i], 0}) != w)
        throw PlanError("cyclic_gemm: A assignment does not match the ring plan");

  // Stationary strips of op(B), matched one-to-one with C column strips.
  const auto& gb = db.layout.grid;
  const int strips = g.trans_b ? gb.n_block_rows() : gb.n_block_cols();
  if ((g.trans_b ? gb.n_block_cols() : gb.n_block_rows()) != 1)
    throw PlanError("cyclic_gemm: B must be a single line of stationary strips");
  const auto& gc = dc.layout.grid;
  if (gc.n_block_rows() != 1 || gc.n_block_cols() != strips)
    throw PlanError("cyclic_gemm: C strips must match op(B) strips");
  std::int64_t col0 = 0;
  for (int s = 0; s < strips; ++s) {
    PlanStrip st;
    st.b_coord = g.trans_b ? BlockCoord{s, 0} : BlockCoord{0, s};
    auto [br, bc] = block_extent(gb, st.b_coord);
    st.width = g.trans_b ? br : bc;
    st.col0 = col0;
    st.owner = db.layout.owner(st.b_coord);
    st.c_coord = {0, s};
    auto [cr, cc] = block_extent(gc, st.c_coord);
    if (cc != st.width || cr != p.m)
      throw PlanError("cyclic_gemm: C strip extents must match op(B) strips");
    if (dc.layout.owner(st.c_coord) != st.owner)
      throw PlanError("cyclic_gemm: C strips must be co-located with op(B) strips");
    col0 += st.width;
    p.strips.push_back(st);
  }
  return p;
}

// ---------------------------------------------------------------------
// Panel assembly
// ---------------------------------------------------------------------

/// Copies one stored A block (full width) into the assembled A panel at its
/// global row offset.
inline void place_block_in_panel(DynView panel, DynConstView block, std::int64_t row0) {
  copy_region(block, 0, 0, panel, row0, 0, block.rows, block.cols);
}

/// Writes op(M) rows [r0, r0+mrows) x cols [0, kcols) into `panel` from the
/// distributed blocks of M, fetching block views through `lookup`.
template <typename Lookup>
void assemble_op_rows(const MatrixDescriptor& d, bool trans, std::int64_t r0, std::int64_t mrows,
                      DynView panel, Lookup&& lookup) {
  const auto& grid = d.layout.grid;
  const std::size_t w = byte_width(d.precision);
  for (int br = 0; br < grid.n_block_rows(); ++br) {
    for (int bc = 0; bc < grid.n_block_cols(); ++bc) {
      const std::int64_t ar0 = br * grid.block_rows, ac0 = bc * grid.block_cols;
      auto [arows, acols] = block_extent(grid, {br, bc});
      // op-space footprint of this block
      const std::int64_t or0 = trans ? ac0 : ar0;
      const std::int64_t orows = trans ? acols : arows;
      const std::int64_t lo = std::max(r0, or0), hi = std::min(r0 + mrows, or0 + orows);
      if (lo >= hi) continue;
      DynConstView bv = lookup(BlockCoord{br, bc});
      if (!trans) {
        copy_region(bv, lo - ar0, 0, panel, lo - r0, ac0, hi - lo, acols);
      } else {
        for (std::int64_t i = lo; i < hi; ++i)
          for (std::int64_t k = 0; k < arows; ++k)
            std::memcpy(panel.data + ((i - r0) * panel.cols + (ar0 + k)) * static_cast<std::int64_t>(w),
                        bv.data + ((k)*bv.cols + (i - ac0)) * static_cast<std::int64_t>(w), w);
      }
    }
  }
}

// ---------------------------------------------------------------------
// Cyclic GEMM (ring rotation, double buffering, optional block caching)
// ---------------------------------------------------------------------

class CyclicGemmExec {
public:
  CyclicGemmExec(WorkerContext& w, TransportHub& hub, const Command& cmd)
      : w_(w), hub_(hub), cmd_(cmd), plan_(build_cyclic_plan(w.descriptors(), cmd.gemm, hub.worker_count())) {}

  const CyclicPlan& plan() const { return plan_; }

  void prepare() {
    const std::size_t esize = byte_width(plan_.precision);
    panel_ = w_.pool().acquire(static_cast<std::size_t>(plan_.a_rows * plan_.a_cols) * esize);
    const std::size_t slot_bytes =
        static_cast<std::size_t>(plan_.a_block_nominal * plan_.a_cols) * esize;
    slots_.resize(plan_.inner);
    for (int i = 0; i < plan_.inner; ++i) {
      auto& s = slots_[i];
      s.front = w_.pool().acquire(slot_bytes);
      s.back = w_.pool().acquire(slot_bytes);
      s.front_row = plan_.row_of[w_.id()][i];
      const auto& own = w_.owned().at({plan_.a, {s.front_row, 0}});
      std::memcpy(s.front.data(), own.mem.data(), own.view().bytes());
      place_block_in_panel(panel_view(), own.view(), static_cast<std::int64_t>(s.front_row) *
                                                         plan_.a_block_nominal);
    }
  }

  void stage_send(int outer, int inner) {
    if (outer >= plan_.workers - 1) return;  // final rotation: nothing to forward
    auto& s = slots_[inner];
    const std::int64_t rows = plan_.a_block_rows(s.front_row);
    DynConstView v{s.front.data(), rows, plan_.a_cols, plan_.precision};
    const WorkerId next = (w_.id() + 1) % plan_.workers;
    auto h = hub_.send_block_async(
        w_.id(), next,
        make_block_message(w_.id(), plan_.a, {s.front_row, 0}, plan_.a_version, v,
                           stage_tag(outer, inner)));
    hub_.await(h);
  }

  void stage_recv(int outer, int inner) {
    if (outer >= plan_.workers - 1) return;
    auto& s = slots_[inner];
    const WorkerId prev = (w_.id() - 1 + plan_.workers) % plan_.workers;
    const int origin = (w_.id() - outer - 1 + plan_.workers) % plan_.workers;
    const int expect_row = plan_.row_of[origin][inner];
    Message msg = hub_.recv(w_.id(), prev);
    if (msg.matrix_id != plan_.a || msg.coord.row != expect_row)
      throw ProtocolError("cyclic_gemm: ring delivered an unexpected block");
    std::memcpy(s.back.data(), msg.payload.data(), msg.payload.size());
    place_block_in_panel(panel_view(), message_view(msg),
                         static_cast<std::int64_t>(expect_row) * plan_.a_block_nominal);
    // two-buffer swap at the stage boundary
    std::swap(s.front, s.back);
    s.front_row = expect_row;
  }

  void finish() {
    for (const auto& st : plan_.strips) {
      if (st.owner != w_.id()) continue;
      const auto& bblk = w_.owned().at({plan_.b, st.b_coord});
      auto& cblk = w_.owned().at({plan_.c, st.c_coord});
      local_gemm(plan_.alpha, panel_view(), plan_.trans_a, bblk.view(), plan_.trans_b, plan_.beta,
                 cblk.view());
      cblk.version_seen = w_.descriptor(plan_.c).version + 1;
    }
    if (plan_.cache_a) {
      for (int origin = 0; origin < plan_.workers; ++origin) {
        if (origin == w_.id()) continue;
        for (int i = 0; i < plan_.inner; ++i) {
          const int row = plan_.row_of[origin][i];
          StoredBlock blk = w_.make_block(w_.descriptor(plan_.a).layout, {row, 0}, plan_.precision,
                                          Provenance::Cached, plan_.a_version);
          copy_region(panel_view(), static_cast<std::int64_t>(row) * plan_.a_block_nominal, 0,
                      blk.view(), 0, 0, blk.rows, blk.cols);
          w_.cache().insert_or_assign({plan_.a, {row, 0}}, std::move(blk));
        }
      }
    } else {
      // caching disabled for this matrix: hold no entries for it
      auto it = w_.cache().lower_bound({plan_.a, {0, 0}});
      while (it != w_.cache().end() && it->first.matrix == plan_.a) it = w_.cache().erase(it);
    }
    apply_descriptor_effects(w_.descriptors(), cmd_);
    slots_.clear();
    panel_ = PoolBuffer();
  }

  void run_autonomous() {
    prepare();
    for (int o = 0; o < plan_.workers; ++o)
      for (int i = 0; i < plan_.inner; ++i) {
        stage_send(o, i);
        stage_recv(o, i);
      }
    finish();
  }

  static std::string stage_tag(int outer, int inner) {
    return "cyclic_gemm:" + std::to_string(outer) + "." + std::to_string(inner);
  }

private:
  DynView panel_view() {
    return {panel_.data(), plan_.a_rows, plan_.a_cols, plan_.precision};
  }

  struct Slot {
    PoolBuffer front, back;
    int front_row = 0;
  };

  WorkerContext& w_;
  TransportHub& hub_;
  Command cmd_;
  CyclicPlan plan_;
  std::vector<Slot> slots_;
  PoolBuffer panel_;
};

// ---------------------------------------------------------------------
// Communication-free backward GEMM from cached forward blocks
// ---------------------------------------------------------------------

class CachedBackwardExec {
public:
  CachedBackwardExec(WorkerContext& w, TransportHub& hub, const Command& cmd)
      : w_(w), cmd_(cmd), plan_(build_cyclic_plan(w.descriptors(), cmd.gemm, hub.worker_count())) {}

  void run_local() {
    bool computes = false;
    for (const auto& st : plan_.strips) computes |= st.owner == w_.id();
    if (computes) {
      std::vector<std::pair<int, int>> missing;
      auto lookup = [&](BlockCoord c) -> DynConstView {
        auto own = w_.owned().find({plan_.a, c});
        if (own != w_.owned().end()) return own->second.view();
        auto hit = w_.cache().find({plan_.a, c});
        if (hit != w_.cache().end() && hit->second.version_seen == plan_.a_version)
          return hit->second.view();
        missing.emplace_back(c.row, c.col);
        return {};
      };
      const int nbr = w_.descriptor(plan_.a).layout.grid.n_block_rows();
      for (int r = 0; r < nbr; ++r) lookup({r, 0});
      if (!missing.empty())
        throw CacheMissError("cached_backward_gemm: stale or missing cached blocks", missing);

      const std::size_t esize = byte_width(plan_.precision);
      PoolBuffer panel =
          w_.pool().acquire(static_cast<std::size_t>(plan_.a_rows * plan_.a_cols) * esize);
      DynView pv{panel.data(), plan_.a_rows, plan_.a_cols, plan_.precision};
      for (int r = 0; r < nbr; ++r)
        place_block_in_panel(pv, lookup({r, 0}),
                             static_cast<std::int64_t>(r) * plan_.a_block_nominal);
      for (const auto& st : plan_.strips) {
        if (st.owner != w_.id()) continue;
        const auto& bblk = w_.owned().at({plan_.b, st.b_coord});
        auto& cblk = w_.owned().at({plan_.c, st.c_coord});
        local_gemm(plan_.alpha, pv, plan_.trans_a, bblk.view(), plan_.trans_b, plan_.beta,
                   cblk.view());
        cblk.version_seen = w_.descriptor(plan_.c).version + 1;
      }
    }
    apply_descriptor_effects(w_.descriptors(), cmd_);
  }

private:
  WorkerContext& w_;
  Command cmd_;
  CyclicPlan plan_;
};

// ---------------------------------------------------------------------
// Layout-independent general GEMM
// ---------------------------------------------------------------------

/// Data movement entry: one block pushed from its owner to a worker that
/// needs it. Entries are globally ordered so both sides of every pair agree
/// on FIFO order without negotiation.
struct PushEntry {
  WorkerId src = 0;
  WorkerId dst = 0;
  MatrixId matrix = 0;
  BlockCoord coord;

  friend auto operator<=>(const PushEntry&, const PushEntry&) = default;
};

class GeneralGemmExec {
public:
  GeneralGemmExec(WorkerContext& w, TransportHub& hub, const Command& cmd)
      : w_(w), hub_(hub), cmd_(cmd) {}

  void prepare() {
    auto& table = w_.descriptors();
    const GemmArgs& g = cmd_.gemm;
    da_ = &w_.descriptor(g.a);
    db_ = &w_.descriptor(g.b);
    dc_ = &w_.descriptor(g.c);
    if (da_->precision != db_->precision || da_->precision != dc_->precision)
      throw UsageError("gemm: operands must share a precision; reshape to convert first");
    if (dc_->replicated) throw UsageError("gemm: destination matrix may not be replicated");
    m_ = g.trans_a ? da_->layout.grid.global_cols : da_->layout.grid.global_rows;
    kk_ = g.trans_a ? da_->layout.grid.global_rows : da_->layout.grid.global_cols;
    const std::int64_t kb = g.trans_b ? db_->layout.grid.global_cols : db_->layout.grid.global_rows;
    n_ = g.trans_b ? db_->layout.grid.global_rows : db_->layout.grid.global_cols;
    if (kk_ != kb) throw ShapeError("gemm: inner dimensions do not conform");
    if (dc_->layout.grid.global_rows != m_ || dc_->layout.grid.global_cols != n_)
      throw ShapeError("gemm: output dimensions do not conform");
    (void)table;

    // Owner-of-C data movement plan, deduplicated per (destination, block).
    std::set<PushEntry> entries;
    const auto& gc = dc_->layout.grid;
    for (int br = 0; br < gc.n_block_rows(); ++br) {
      for (int bc = 0; bc < gc.n_block_cols(); ++bc) {
        const WorkerId cw = dc_->layout.owner({br, bc});
        const std::int64_t r0 = br * gc.block_rows, c0 = bc * gc.block_cols;
        auto [mb, nb] = block_extent(gc, {br, bc});
        add_needed(entries, *da_, cmd_.gemm.trans_a, r0, mb, true, cw);
        add_needed(entries, *db_, cmd_.gemm.trans_b, c0, nb, false, cw);
      }
    }
    plan_.assign(entries.begin(), entries.end());
  }

  void send_phase() {
    for (const auto& e : plan_) {
      if (e.src != w_.id()) continue;
      const auto& blk = w_.owned().at({e.matrix, e.coord});
      auto h = hub_.send_block_async(
          w_.id(), e.dst,
          make_block_message(w_.id(), e.matrix, e.coord,
                             w_.descriptor(e.matrix).version, blk.view(), "general_gemm"));
      hub_.await(h);
    }
  }

  void recv_phase() {
    for (const auto& e : plan_) {
      if (e.dst != w_.id()) continue;
      Message msg = hub_.recv(w_.id(), e.src);
      if (msg.matrix_id != e.matrix || !(msg.coord == e.coord))
        throw ProtocolError("general_gemm: unexpected block delivery");
      StoredBlock blk;
      blk.rows = msg.rows;
      blk.cols = msg.cols;
      blk.precision = msg.precision;
      blk.provenance = Provenance::Transit;
      blk.version_seen = msg.version;
      blk.mem = w_.pool().acquire(msg.payload.size());
      std::memcpy(blk.mem.data(), msg.payload.data(), msg.payload.size());
      scratch_.insert_or_assign({e.matrix, e.coord}, std::move(blk));
    }
  }

  void finish() {
    const GemmArgs& g = cmd_.gemm;
    const std::size_t esize = byte_width(da_->precision);
    const auto& gc = dc_->layout.grid;
    for (int br = 0; br < gc.n_block_rows(); ++br) {
      for (int bc = 0; bc < gc.n_block_cols(); ++bc) {
        if (dc_->layout.owner({br, bc}) != w_.id()) continue;
        const std::int64_t r0 = br * gc.block_rows, c0 = bc * gc.block_cols;
        auto [mb, nb] = block_extent(gc, {br, bc});
        PoolBuffer pa = w_.pool().acquire(static_cast<std::size_t>(mb * kk_) * esize);
        PoolBuffer pb = w_.pool().acquire(static_cast<std::size_t>(kk_ * nb) * esize);
        DynView va{pa.data(), mb, kk_, da_->precision};
        DynView vb{pb.data(), kk_, nb, da_->precision};
        assemble_op_rows(*da_, g.trans_a, r0, mb, va, [&](BlockCoord c) { return block_view(g.a, c); });
        assemble_op_cols(*db_, g.trans_b, c0, nb, vb);
        auto& cblk = w_.owned().at({g.c, {br, bc}});
        local_gemm(g.alpha, va, false, vb, false, g.beta, cblk.view());
        cblk.version_seen = w_.descriptor(g.c).version + 1;
      }
    }
    scratch_.clear();
    apply_descriptor_effects(w_.descriptors(), cmd_);
  }

  void run_autonomous() {
    prepare();
    send_phase();
    recv_phase();
    finish();
  }

private:
  // Blocks of `d` whose op() rows (along_rows) or cols intersect the given
  // range; pushes entries for those not already on the C owner.
  void add_needed(std::set<PushEntry>& entries, const MatrixDescriptor& d, bool trans,
                  std::int64_t lo, std::int64_t len, bool along_rows, WorkerId cw) {
    const auto& grid = d.layout.grid;
    for (int br = 0; br < grid.n_block_rows(); ++br) {
      for (int bc = 0; bc < grid.n_block_cols(); ++bc) {
        const std::int64_t ar0 = br * grid.block_rows, ac0 = bc * grid.block_cols;
        auto [arows, acols] = block_extent(grid, {br, bc});
        // footprint along the constrained op axis
        std::int64_t o0, olen;
        if (along_rows) {  // op(A) rows
          o0 = trans ? ac0 : ar0;
          olen = trans ? acols : arows;
        } else {  // op(B) cols
          o0 = trans ? ar0 : ac0;
          olen = trans ? arows : acols;
        }
        if (o0 + olen <= lo || o0 >= lo + len) continue;
        const WorkerId ow = d.layout.owner({br, bc});
        if (ow != cw) entries.insert({ow, cw, d.matrix_id, {br, bc}});
      }
    }
  }

  DynConstView block_view(MatrixId mid, BlockCoord c) {
    auto own = w_.owned().find({mid, c});
    if (own != w_.owned().end()) return own->second.view();
    return scratch_.at({mid, c}).view();
  }

  // op(B) columns [c0, c0+ncols) x rows [0, kk): assembled via the row
  // helper on the transposed question.
  void assemble_op_cols(const MatrixDescriptor& d, bool trans, std::int64_t c0, std::int64_t ncols,
                        DynView panel) {
    const auto& grid = d.layout.grid;
    const std::size_t w = byte_width(d.precision);
    for (int br = 0; br < grid.n_block_rows(); ++br) {
      for (int bc = 0; bc < grid.n_block_cols(); ++bc) {
        const std::int64_t ar0 = br * grid.block_rows, ac0 = bc * grid.block_cols;
        auto [arows, acols] = block_extent(grid, {br, bc});
        const std::int64_t oc0 = trans ? ar0 : ac0;           // op cols covered
        const std::int64_t oclen = trans ? arows : acols;
        const std::int64_t lo = std::max(c0, oc0), hi = std::min(c0 + ncols, oc0 + oclen);
        if (lo >= hi) continue;
        DynConstView bv = block_view(d.matrix_id, {br, bc});
        if (!trans) {
          copy_region(bv, 0, lo - ac0, panel, ar0, lo - c0, arows, hi - lo);
        } else {
          for (std::int64_t j = lo; j < hi; ++j)
            for (std::int64_t k = 0; k < acols; ++k)
              std::memcpy(
                  panel.data + ((ac0 + k) * panel.cols + (j - c0)) * static_cast<std::int64_t>(w),
                  bv.data + ((j - ar0) * bv.cols + k) * static_cast<std::int64_t>(w), w);
        }
      }
    }
  }

  WorkerContext& w_;
  TransportHub& hub_;
  Command cmd_;
  const MatrixDescriptor* da_ = nullptr;
  const MatrixDescriptor* db_ = nullptr;
  const MatrixDescriptor* dc_ = nullptr;
  std::int64_t m_ = 0, n_ = 0, kk_ = 0;
  std::vector<PushEntry> plan_;
  std::map<BlockKeyFull, StoredBlock> scratch_;
};

// ---------------------------------------------------------------------
// Broadcast GEMM reference (the rejected baseline)
// ---------------------------------------------------------------------

/// Same preconditions and numerical result as the cyclic variant, but each
/// owner sends every one of its A blocks to all other workers directly.
/// Exists so the harness can compare modeled schedules.
class BroadcastGemmExec {
public:
  BroadcastGemmExec(WorkerContext& w, TransportHub& hub, const Command& cmd)
      : w_(w), hub_(hub), cmd_(cmd), plan_(build_cyclic_plan(w.descriptors(), cmd.gemm, hub.worker_count())) {}

  void prepare() {
    const std::size_t esize = byte_width(plan_.precision);
    panel_ = w_.pool().acquire(static_cast<std::size_t>(plan_.a_rows * plan_.a_cols) * esize);
    for (int i = 0; i < plan_.inner; ++i) {
      const int row = plan_.row_of[w_.id()][i];
      const auto& own = w_.owned().at({plan_.a, {row, 0}});
      place_block_in_panel(panel_view(), own.view(),
                           static_cast<std::int64_t>(row) * plan_.a_block_nominal);
    }
  }

  void send_phase() {
    for (int i = 0; i < plan_.inner; ++i) {
      const int row = plan_.row_of[w_.id()][i];
      const auto& own = w_.owned().at({plan_.a, {row, 0}});
      for (WorkerId dst = 0; dst < plan_.workers; ++dst) {
        if (dst == w_.id()) continue;
        auto h = hub_.send_block_async(
            w_.id(), dst,
            make_block_message(w_.id(), plan_.a, {row, 0}, plan_.a_version, own.view(),
                               "broadcast_gemm:r" + std::to_string(row)));
        hub_.await(h);
      }
    }
  }

  void recv_phase() {
    for (WorkerId src = 0; src < plan_.workers; ++src) {
      if (src == w_.id()) continue;
      for (int i = 0; i < plan_.inner; ++i) {
        Message msg = hub_.recv(w_.id(), src);
        const int expect_row = plan_.row_of[src][i];
        if (msg.matrix_id != plan_.a || msg.coord.row != expect_row)
          throw ProtocolError("broadcast_gemm: unexpected block delivery");
        place_block_in_panel(panel_view(), message_view(msg),
                             static_cast<std::int64_t>(expect_row) * plan_.a_block_nominal);
      }
    }
  }

  void finish() {
    for (const auto& st : plan_.strips) {
      if (st.owner != w_.id()) continue;
      const auto& bblk = w_.owned().at({plan_.b, st.b_coord});
      auto& cblk = w_.owned().at({plan_.c, st.c_coord});
      local_gemm(plan_.alpha, panel_view(), plan_.trans_a, bblk.view(), plan_.trans_b, plan_.beta,
                 cblk.view());
      cblk.version_seen = w_.descriptor(plan_.c).version + 1;
    }
    panel_ = PoolBuffer();
    apply_descriptor_effects(w_.descriptors(), cmd_);
  }

  void run_autonomous() {
    prepare();
    send_phase();
    recv_phase();
    finish();
  }

private:
  DynView panel_view() { return {panel_.data(), plan_.a_rows, plan_.a_cols, plan_.precision}; }

  WorkerContext& w_;
  TransportHub& hub_;
  Command cmd_;
  CyclicPlan plan_;
  PoolBuffer panel_;
};

// ---------------------------------------------------------------------
// Replication
// ---------------------------------------------------------------------

/// Owners push their blocks to every other worker; each worker ends up with
/// a full Replica copy stamped at the current version. The same exchange
/// re-synchronizes stale replicas before a replica read.
class ReplicateExec {
public:
  ReplicateExec(WorkerContext& w, TransportHub& hub, const Command& cmd)
      : w_(w), hub_(hub), cmd_(cmd) {}

  bool exchange_needed() const {
    const auto& d = const_cast<WorkerContext&>(w_).descriptor(cmd_.target);
    if (cmd_.op == OpCode::Replicate) return cmd_.enable && hub_.worker_count() > 1;
    return d.replicated && d.replica_version < d.version && hub_.worker_count() > 1;
  }

  void send_phase() {
    if (!exchange_needed()) return;
    const auto& d = w_.descriptor(cmd_.target);
    for (BlockCoord c : w_.owned_coords(d)) {
      const auto& blk = w_.owned().at({cmd_.target, c});
      for (WorkerId dst = 0; dst < hub_.worker_count(); ++dst) {
        if (dst == w_.id()) continue;
        auto h = hub_.send_block_async(
            w_.id(), dst,
            make_block_message(w_.id(), cmd_.target, c, d.version, blk.view(), tag()));
        hub_.await(h);
      }
    }
  }

  void recv_phase() {
    if (!exchange_needed()) return;
    auto& d = w_.descriptor(cmd_.target);
    const int nbr = d.layout.grid.n_block_rows(), nbc = d.layout.grid.n_block_cols();
    for (int r = 0; r < nbr; ++r) {
      for (int c = 0; c < nbc; ++c) {
        const WorkerId owner = d.layout.owner({r, c});
        if (owner == w_.id()) continue;
        Message msg = hub_.recv(w_.id(), owner);
        if (msg.matrix_id != cmd_.target || !(msg.coord == BlockCoord{r, c}))
          throw ProtocolError("replicate: unexpected block delivery");
        StoredBlock blk = w_.make_block(d.layout, {r, c}, d.precision, Provenance::Replica, d.version);
        std::memcpy(blk.mem.data(), msg.payload.data(), msg.payload.size());
        w_.replicas().insert_or_assign({cmd_.target, {r, c}}, std::move(blk));
      }
    }
  }

  void finish() {
    if (cmd_.op == OpCode::Replicate && !cmd_.enable) {
      auto it = w_.replicas().lower_bound({cmd_.target, {0, 0}});
      while (it != w_.replicas().end() && it->first.matrix == cmd_.target)
        it = w_.replicas().erase(it);
    }
    if (cmd_.op == OpCode::ReplicaRead && w_.id() == cmd_.reader) send_full_matrix_to_master();
    apply_descriptor_effects(w_.descriptors(), cmd_);
  }

  void run_autonomous() {
    send_phase();
    recv_phase();
    finish();
  }

private:
  std::string tag() const {
    return cmd_.op == OpCode::Replicate ? "replicate" : "replica_read:sync";
  }

  void send_full_matrix_to_master() {
    auto& d = w_.descriptor(cmd_.target);
    if (!d.replicated) throw UsageError("replica_read: matrix is not replicated");
    const auto& g = d.layout.grid;
    std::vector<std::byte> full(static_cast<std::size_t>(g.global_rows * g.global_cols) *
                                byte_width(d.precision));
    DynView fv{full.data(), g.global_rows, g.global_cols, d.precision};
    for (int r = 0; r < g.n_block_rows(); ++r) {
      for (int c = 0; c < g.n_block_cols(); ++c) {
        const BlockKeyFull key{cmd_.target, {r, c}};
        const StoredBlock* blk;
        if (d.layout.owner({r, c}) == w_.id()) {
          blk = &w_.owned().at(key);
        } else {
          blk = &w_.replicas().at(key);
          if (blk->version_seen < d.version)
            throw ProtocolError("replica_read: stale replica after sync");
        }
        copy_region(blk->view(), 0, 0, fv, static_cast<std::int64_t>(r) * g.block_rows,
                    static_cast<std::int64_t>(c) * g.block_cols, blk->rows, blk->cols);
      }
    }
    Message m;
    m.matrix_id = cmd_.target;
    m.version = d.version;
    m.precision = d.precision;
    m.rows = g.global_rows;
    m.cols = g.global_cols;
    m.op_tag = "replica_read";
    m.payload = std::move(full);
    auto h = hub_.send_block_async(w_.id(), kMasterId, std::move(m));
    hub_.await(h);
  }

  WorkerContext& w_;
  TransportHub& hub_;
  Command cmd_;
};

// ---------------------------------------------------------------------
// Reshape / remap, with optional precision change
// ---------------------------------------------------------------------

/// Remaps a matrix onto a new layout, precision, and worker set. Elements
/// correspond by row-major linear index, so any same-element-count global
/// shape is legal. Narrowing conversions run before transmission (half the
/// payload bytes when going single -> half); widening runs at the receiver.
class ReshapeExec {
public:
  ReshapeExec(WorkerContext& w, TransportHub& hub, const Command& cmd)
      : w_(w), hub_(hub), cmd_(cmd) {}

  void prepare() {
    src_ = &w_.descriptor(cmd_.source);
    dst_ = cmd_.descriptor;
    const auto& gs = src_->layout.grid;
    const auto& gd = dst_.layout.grid;
    if (gs.global_rows * gs.global_cols != gd.global_rows * gd.global_cols)
      throw ShapeError("reshape: element count must be preserved");
    payload_precision_ = byte_width(src_->precision) > byte_width(dst_.precision)
                             ? dst_.precision
                             : src_->precision;
    // destination blocks this worker will own
    for (int r = 0; r < gd.n_block_rows(); ++r)
      for (int c = 0; c < gd.n_block_cols(); ++c)
        if (dst_.layout.owner({r, c}) == w_.id()) {
          StoredBlock blk = w_.make_block(dst_.layout, {r, c}, dst_.precision, Provenance::Owned,
                                          dst_.version);
          w_.fill_zeros(blk);
          w_.owned().insert_or_assign({dst_.matrix_id, {r, c}}, std::move(blk));
        }
  }

  void send_phase() {
    const auto& gs = src_->layout.grid;
    for (int r = 0; r < gs.n_block_rows(); ++r) {
      for (int c = 0; c < gs.n_block_cols(); ++c) {
        if (src_->layout.owner({r, c}) != w_.id()) continue;
        route_source_block({r, c}, /*deliver_local=*/true, /*send_remote=*/true);
      }
    }
  }

  void recv_phase() {
    const auto& gs = src_->layout.grid;
    // canonical order: source blocks in block-row-major order
    for (int r = 0; r < gs.n_block_rows(); ++r) {
      for (int c = 0; c < gs.n_block_cols(); ++c) {
        const WorkerId owner = src_->layout.owner({r, c});
        if (owner == w_.id()) continue;
        for (BlockCoord d : dst_blocks_of_source({r, c})) {
          if (dst_.layout.owner(d) != w_.id()) continue;
          Message msg = hub_.recv(w_.id(), owner);
          if (msg.matrix_id != cmd_.source || !(msg.coord == BlockCoord{r, c}))
            throw ProtocolError("reshape: unexpected fragment delivery");
          place_fragment({r, c}, d, {msg.payload.data(), msg.rows, msg.cols, msg.precision});
        }
      }
    }
  }

  void finish() { apply_descriptor_effects(w_.descriptors(), cmd_); }

  void run_autonomous() {
    prepare();
    send_phase();
    recv_phase();
    finish();
  }

private:
  // Linear-index mapping from a source element to (dst block, offset).
  struct DstElem {
    BlockCoord block;
    std::int64_t row, col;  // inside the destination block
  };
  DstElem map_elem(std::int64_t sr, std::int64_t sc) const {
    const auto& gs = src_->layout.grid;
    const auto& gd = dst_.layout.grid;
    const std::int64_t lin = sr * gs.global_cols + sc;
    const std::int64_t dr = lin / gd.global_cols, dc = lin % gd.global_cols;
    const BlockCoord b{static_cast<int>(dr / gd.block_rows), static_cast<int>(dc / gd.block_cols)};
    return {b, dr - static_cast<std::int64_t>(b.row) * gd.block_rows,
            dc - static_cast<std::int64_t>(b.col) * gd.block_cols};
  }

  std::vector<BlockCoord> dst_blocks_of_source(BlockCoord s) const {
    const auto& gs = src_->layout.grid;
    const std::int64_t r0 = static_cast<std::int64_t>(s.row) * gs.block_rows;
    const std::int64_t c0 = static_cast<std::int64_t>(s.col) * gs.block_cols;
    auto [nr, nc] = block_extent(gs, s);
    std::set<BlockCoord> seen;
    std::vector<BlockCoord> order;
    for (std::int64_t r = 0; r < nr; ++r)
      for (std::int64_t c = 0; c < nc; ++c) {
        const BlockCoord b = map_elem(r0 + r, c0 + c).block;
        if (seen.insert(b).second) order.push_back(b);
      }
    return order;
  }

  // Walks one owned source block, converting and bucketing its elements per
  // destination block; local fragments are written directly, remote ones
  // sent as one message per (source block, destination block).
  void route_source_block(BlockCoord s, bool deliver_local, bool send_remote) {
    const auto& blk = w_.owned().at({cmd_.source, s});
    const auto& gs = src_->layout.grid;
    const std::int64_t r0 = static_cast<std::int64_t>(s.row) * gs.block_rows;
    const std::int64_t c0 = static_cast<std::int64_t>(s.col) * gs.block_cols;
    std::map<BlockCoord, std::vector<std::byte>> buckets;
    std::vector<BlockCoord> order = dst_blocks_of_source(s);
    const std::size_t pw = byte_width(payload_precision_);
    const std::size_t sw = byte_width(src_->precision);
    DynConstView sv = blk.view();
    for (std::int64_t r = 0; r < blk.rows; ++r) {
      for (std::int64_t c = 0; c < blk.cols; ++c) {
        const DstElem de = map_elem(r0 + r, c0 + c);
        auto& buf = buckets[de.block];
        const std::size_t off = buf.size();
        buf.resize(off + pw);
        const double v = scalar_to_double(src_->precision, sv.data + (r * sv.cols + c) * sw);
        scalar_from_double(payload_precision_, v, buf.data() + off);
      }
    }
    for (BlockCoord d : order) {
      const WorkerId target = dst_.layout.owner(d);
      auto& buf = buckets.at(d);
      if (target == w_.id()) {
        if (deliver_local)
          place_fragment(s, d,
                         {buf.data(), static_cast<std::int64_t>(buf.size() / pw), 1,
                          payload_precision_});
        continue;
      }
      if (!send_remote) continue;
      Message m;
      m.matrix_id = cmd_.source;
      m.coord = s;
      m.version = src_->version;
      m.precision = payload_precision_;
      m.rows = static_cast<std::int64_t>(buf.size() / pw);
      m.cols = 1;
      m.op_tag = "reshape";
      m.payload = std::move(buf);
      auto h = hub_.send_block_async(w_.id(), target, std::move(m));
      hub_.await(h);
    }
  }

  // Replays the source block's element walk to place a fragment's scalars.
  void place_fragment(BlockCoord s, BlockCoord d, DynConstView fragment) {
    auto& dblk = w_.owned().at({dst_.matrix_id, d});
    DynView dv = dblk.view();
    const auto& gs = src_->layout.grid;
    const std::int64_t r0 = static_cast<std::int64_t>(s.row) * gs.block_rows;
    const std::int64_t c0 = static_cast<std::int64_t>(s.col) * gs.block_cols;
    auto [nr, nc] = block_extent(gs, s);
    const std::size_t pw = byte_width(fragment.precision);
    const std::size_t dw = byte_width(dst_.precision);
    std::int64_t next = 0;
    for (std::int64_t r = 0; r < nr; ++r) {
      for (std::int64_t c = 0; c < nc; ++c) {
        const DstElem de = map_elem(r0 + r, c0 + c);
        if (!(de.block == d)) continue;
        const double v =
            scalar_to_double(fragment.precision, fragment.data + next * static_cast<std::int64_t>(pw));
        scalar_from_double(dst_.precision, v, dv.data + (de.row * dv.cols + de.col) * static_cast<std::int64_t>(dw));
        ++next;
      }
    }
    if (next != fragment.size()) throw ProtocolError("reshape: fragment size mismatch");
  }

  WorkerContext& w_;
  TransportHub& hub_;
  Command cmd_;
  const MatrixDescriptor* src_ = nullptr;
  MatrixDescriptor dst_;
  Precision payload_precision_ = Precision::Single32;
};

// ---------------------------------------------------------------------
// Distributed row/column sums
// ---------------------------------------------------------------------

/// Per-segment partial sums flow to the segment owner. Deterministic mode
/// reduces contributions in worker-id-ascending order and is bitwise
/// reproducible; the fast mode reduces in a permuted (arrival-like) order
/// and only promises the usual reassociation tolerance.
class RowColSumExec {
public:
  RowColSumExec(WorkerContext& w, TransportHub& hub, const Command& cmd)
      : w_(w), hub_(hub), cmd_(cmd) {}

  void prepare() {
    src_ = &w_.descriptor(cmd_.target);
    out_ = cmd_.descriptor;
    const auto& g = src_->layout.grid;
    rows_axis_ = cmd_.axis == Axis::Rows;
    segments_ = rows_axis_ ? g.n_block_rows() : g.n_block_cols();
    lanes_ = rows_axis_ ? g.n_block_cols() : g.n_block_rows();
    for (int s = 0; s < segments_; ++s) {
      if (segment_owner(s) != w_.id()) continue;
      const BlockCoord oc = rows_axis_ ? BlockCoord{s, 0} : BlockCoord{0, s};
      StoredBlock blk = w_.make_block(out_.layout, oc, out_.precision, Provenance::Owned, 0);
      w_.fill_zeros(blk);
      w_.owned().insert_or_assign({out_.matrix_id, oc}, std::move(blk));
    }
  }

  void send_phase() {
    for (int s = 0; s < segments_; ++s) {
      std::vector<std::byte> partial = local_partial(s);
      if (partial.empty()) continue;
      const WorkerId owner = segment_owner(s);
      if (owner == w_.id()) continue;
      Message m;
      m.matrix_id = cmd_.target;
      m.coord = rows_axis_ ? BlockCoord{s, 0} : BlockCoord{0, s};
      m.version = src_->version;
      m.precision = src_->precision;
      m.rows = static_cast<std::int64_t>(partial.size() / byte_width(src_->precision));
      m.cols = 1;
      m.op_tag = "add_row_col_sum";
      m.payload = std::move(partial);
      auto h = hub_.send_block_async(w_.id(), owner, std::move(m));
      hub_.await(h);
    }
  }

  void recv_phase() {
    for (int s = 0; s < segments_; ++s) {
      if (segment_owner(s) != w_.id()) continue;
      std::vector<WorkerId> contribs = contributors(s);
      std::map<WorkerId, std::vector<std::byte>> partials;
      for (WorkerId c : contribs) {
        if (c == w_.id()) {
          partials[c] = local_partial(s);
        } else {
          Message msg = hub_.recv(w_.id(), c);
          if (msg.matrix_id != cmd_.target) throw ProtocolError("add_row_col_sum: bad delivery");
          partials[c] = std::move(msg.payload);
        }
      }
      reduce_segment(s, contribs, partials);
    }
  }

  void finish() { apply_descriptor_effects(w_.descriptors(), cmd_); }

  void run_autonomous() {
    prepare();
    send_phase();
    recv_phase();
    finish();
  }

private:
  WorkerId segment_owner(int s) const {
    return src_->layout.owner(rows_axis_ ? BlockCoord{s, 0} : BlockCoord{0, s});
  }

  std::vector<WorkerId> contributors(int s) const {
    std::vector<WorkerId> out;
    for (int lane = 0; lane < lanes_; ++lane) {
      const BlockCoord c = rows_axis_ ? BlockCoord{s, lane} : BlockCoord{lane, s};
      const WorkerId o = src_->layout.owner(c);
      if (std::find(out.begin(), out.end(), o) == out.end()) out.push_back(o);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  std::int64_t segment_len(int s) const {
    const auto& g = src_->layout.grid;
    const BlockCoord c = rows_axis_ ? BlockCoord{s, 0} : BlockCoord{0, s};
    auto [r, cc] = block_extent(g, c);
    return rows_axis_ ? r : cc;
  }

  // This worker's partial for segment s: its blocks along the lane axis,
  // lane-ascending, summed left-to-right at the accumulation precision and
  // stored at the matrix precision. Empty if the worker holds no block.
  std::vector<std::byte> local_partial(int s) const {
    const std::int64_t len = segment_len(s);
    std::vector<double> acc(static_cast<std::size_t>(len), 0.0);
    std::vector<float> accf(static_cast<std::size_t>(len), 0.0f);
    const bool dbl = src_->precision == Precision::Double64;
    bool any = false;
    for (int lane = 0; lane < lanes_; ++lane) {
      const BlockCoord c = rows_axis_ ? BlockCoord{s, lane} : BlockCoord{lane, s};
      auto it = w_.owned().find({cmd_.target, c});
      if (it == w_.owned().end() || src_->layout.owner(c) != w_.id()) continue;
      any = true;
      DynConstView v = it->second.view();
      const std::size_t sw = byte_width(v.precision);
      for (std::int64_t i = 0; i < len; ++i) {
        const std::int64_t inner = rows_axis_ ? v.cols : v.rows;
        for (std::int64_t k = 0; k < inner; ++k) {
          const std::int64_t off = rows_axis_ ? i * v.cols + k : k * v.cols + i;
          const double x = scalar_to_double(v.precision, v.data + off * static_cast<std::int64_t>(sw));
          if (dbl) acc[static_cast<std::size_t>(i)] += x;
          else accf[static_cast<std::size_t>(i)] += static_cast<float>(x);
        }
      }
    }
    if (!any) return {};
    std::vector<std::byte> out(static_cast<std::size_t>(len) * byte_width(src_->precision));
    for (std::int64_t i = 0; i < len; ++i)
      scalar_from_double(src_->precision, dbl ? acc[static_cast<std::size_t>(i)] : static_cast<double>(accf[static_cast<std::size_t>(i)]),
                         out.data() + static_cast<std::size_t>(i) * byte_width(src_->precision));
    return out;
  }

  void reduce_segment(int s, std::vector<WorkerId> order,
                      std::map<WorkerId, std::vector<std::byte>>& partials) {
    if (!cmd_.deterministic_reduce) {
      // permuted fold order stands in for arrival order
      std::uint64_t st = mix64(cmd_.nondet_salt, static_cast<std::uint64_t>(s));
      for (std::size_t i = order.size(); i > 1; --i) {
        st = mix64(st);
        std::swap(order[i - 1], order[st % i]);
      }
    }
    const std::int64_t len = segment_len(s);
    const bool dbl = src_->precision == Precision::Double64;
    std::vector<double> acc(static_cast<std::size_t>(len), 0.0);
    std::vector<float> accf(static_cast<std::size_t>(len), 0.0f);
    const std::size_t sw = byte_width(src_->precision);
    for (WorkerId wid : order) {
      const auto& part = partials.at(wid);
      for (std::int64_t i = 0; i < len; ++i) {
        const double x = scalar_to_double(src_->precision, part.data() + static_cast<std::size_t>(i) * sw);
        if (dbl) acc[static_cast<std::size_t>(i)] += x;
        else accf[static_cast<std::size_t>(i)] += static_cast<float>(x);
      }
    }
    const BlockCoord oc = rows_axis_ ? BlockCoord{s, 0} : BlockCoord{0, s};
    auto& blk = w_.owned().at({out_.matrix_id, oc});
    DynView dv = blk.view();
    const std::size_t dw = byte_width(out_.precision);
    for (std::int64_t i = 0; i < len; ++i)
      scalar_from_double(out_.precision, dbl ? acc[static_cast<std::size_t>(i)] : static_cast<double>(accf[static_cast<std::size_t>(i)]),
                         dv.data + static_cast<std::size_t>(i) * dw);
  }

  WorkerContext& w_;
  TransportHub& hub_;
  Command cmd_;
  const MatrixDescriptor* src_ = nullptr;
  MatrixDescriptor out_;
  bool rows_axis_ = true;
  int segments_ = 0;
  int lanes_ = 0;
};

// ---------------------------------------------------------------------
// Local commands (no peer traffic)
// ---------------------------------------------------------------------

inline void exec_create_matrix(WorkerContext& w, const Command& cmd) {
  const MatrixDescriptor& d = cmd.descriptor;
  for (BlockCoord c : w.owned_coords(d)) {
    StoredBlock blk = w.make_block(d.layout, c, d.precision, Provenance::Owned, d.version);
    if (cmd.fill == FillKind::SeededRandom) WorkerContext::fill_seeded(blk, d.seed, c);
    else w.fill_zeros(blk);
    w.owned().insert_or_assign({d.matrix_id, c}, std::move(blk));
  }
  apply_descriptor_effects(w.descriptors(), cmd);
}

inline void exec_destroy_matrix(WorkerContext& w, const Command& cmd) {
  w.drop_matrix(cmd.target);
}

inline void exec_seed(WorkerContext& w, const Command& cmd) {
  w.set_seed(mix64(cmd.seed, static_cast<std::uint64_t>(w.id())));
}

inline void exec_register_dataset(WorkerContext& w, const Command& cmd) {
  DatasetState st;
  st.config = cmd.dataset;
  st.order = dataset_order(cmd.dataset);
  w.datasets()[cmd.dataset_id] = std::move(st);
}

/// Each worker loads its own shard of the batch: no peer traffic, so the
/// load can overlap other work. The batch matrix is column-blocked over the
/// workers; sample j of the batch fills column j.
inline void exec_prefetch_batch(WorkerContext& w, const Command& cmd) {
  auto it = w.datasets().find(cmd.dataset_id);
  if (it == w.datasets().end()) throw UsageError("prefetch: dataset not registered");
  DatasetState& ds = it->second;
  const MatrixDescriptor& d = cmd.descriptor;
  const std::uint64_t fdim = ds.config.feature_dim;
  for (BlockCoord c : w.owned_coords(d)) {
    StoredBlock blk = w.make_block(d.layout, c, d.precision, Provenance::Owned, d.version);
    DynView v = blk.view();
    const std::int64_t col0 = static_cast<std::int64_t>(c.col) * d.layout.grid.block_cols;
    const std::size_t sw = byte_width(d.precision);
    for (std::int64_t j = 0; j < v.cols; ++j) {
      const std::uint64_t sample = ds.order[ds.cursor + static_cast<std::uint64_t>(col0 + j)];
      for (std::int64_t f = 0; f < v.rows; ++f)
        scalar_from_double(d.precision,
                           dataset_value(ds.config.seed, sample, static_cast<std::uint64_t>(f), fdim),
                           v.data + (f * v.cols + j) * static_cast<std::int64_t>(sw));
    }
    w.owned().insert_or_assign({d.matrix_id, c}, std::move(blk));
  }
  ds.cursor += ds.config.batch_size;
  apply_descriptor_effects(w.descriptors(), cmd);
}

inline void exec_shutdown(WorkerContext& w) {
  w.drop_all();
  w.pool().trim();
}

// ---------------------------------------------------------------------
// Master-coupled exchanges (scatter / gather / update / checkpoint)
// ---------------------------------------------------------------------

inline void exec_scatter_recv(WorkerContext& w, TransportHub& hub, const Command& cmd) {
  MatrixDescriptor& d = w.descriptor(cmd.target);
  const std::uint64_t new_version = cmd.restore_scatter ? cmd.descriptor.version : d.version + 1;
  for (BlockCoord c : w.owned_coords(d)) {
    Message msg = hub.recv(w.id(), kMasterId);
    if (msg.matrix_id != cmd.target || !(msg.coord == c))
      throw ProtocolError("scatter: unexpected block delivery");
    auto& blk = w.owned().at({cmd.target, c});
    std::memcpy(blk.mem.data(), msg.payload.data(), msg.payload.size());
    blk.version_seen = new_version;
  }
  apply_descriptor_effects(w.descriptors(), cmd);
}

inline void exec_gather_send(WorkerContext& w, TransportHub& hub, const Command& cmd) {
  MatrixDescriptor& d = w.descriptor(cmd.target);
  for (BlockCoord c : w.owned_coords(d)) {
    const auto& blk = w.owned().at({cmd.target, c});
    auto h = hub.send_block_async(
        w.id(), kMasterId, make_block_message(w.id(), cmd.target, c, d.version, blk.view(), "gather"));
    hub.await(h);
  }
}

inline void exec_update_block_recv(WorkerContext& w, TransportHub& hub, const Command& cmd) {
  MatrixDescriptor& d = w.descriptor(cmd.target);
  if (d.layout.owner(cmd.coord) == w.id()) {
    Message msg = hub.recv(w.id(), kMasterId);
    if (msg.matrix_id != cmd.target || !(msg.coord == cmd.coord))
      throw ProtocolError("update_block: unexpected delivery");
    auto& blk = w.owned().at({cmd.target, cmd.coord});
    std::memcpy(blk.mem.data(), msg.payload.data(), msg.payload.size());
    blk.version_seen = d.version + 1;
  }
  apply_descriptor_effects(w.descriptors(), cmd);
}

/// Checkpoint payload push: every owned block of every matrix, matrices in
/// id order and blocks block-row-major, which is also the file order
/// restricted to this worker.
inline void exec_checkpoint_send(WorkerContext& w, TransportHub& hub, const Command& cmd) {
  (void)cmd;
  for (const auto& [id, d] : w.descriptors()) {
    for (BlockCoord c : w.owned_coords(d)) {
      const auto& blk = w.owned().at({id, c});
      auto h = hub.send_block_async(
          w.id(), kMasterId, make_block_message(w.id(), id, c, d.version, blk.view(), "checkpoint"));
      hub.await(h);
    }
  }
}

/// Autonomous dispatch for threaded worker run loops.
inline void execute_command_on_worker(WorkerContext& w, TransportHub& hub, const Command& cmd) {
  switch (cmd.op) {
    case OpCode::CreateMatrix: exec_create_matrix(w, cmd); break;
    case OpCode::DestroyMatrix: exec_destroy_matrix(w, cmd); break;
    case OpCode::Seed: exec_seed(w, cmd); break;
    case OpCode::RegisterDataset: exec_register_dataset(w, cmd); break;
    case OpCode::PrefetchBatch: exec_prefetch_batch(w, cmd); break;
    case OpCode::Scatter: exec_scatter_recv(w, hub, cmd); break;
    case OpCode::Gather: exec_gather_send(w, hub, cmd); break;
    case OpCode::UpdateBlock: exec_update_block_recv(w, hub, cmd); break;
    case OpCode::Checkpoint: exec_checkpoint_send(w, hub, cmd); break;
    case OpCode::Shutdown: exec_shutdown(w); break;
    case OpCode::CyclicGemm: CyclicGemmExec(w, hub, cmd).run_autonomous(); break;
    case OpCode::CachedBackwardGemm: CachedBackwardExec(w, hub, cmd).run_local(); break;
    case OpCode::GeneralGemm: GeneralGemmExec(w, hub, cmd).run_autonomous(); break;
    case OpCode::BroadcastGemm: BroadcastGemmExec(w, hub, cmd).run_autonomous(); break;
    case OpCode::Replicate:
    case OpCode::ReplicaRead: ReplicateExec(w, hub, cmd).run_autonomous(); break;
    case OpCode::Reshape: ReshapeExec(w, hub, cmd).run_autonomous(); break;
    case OpCode::AddRowColSum: RowColSumExec(w, hub, cmd).run_autonomous(); break;
    case OpCode::Restore: break;  // master-side only
  }
}

}  // namespace gridgemm
