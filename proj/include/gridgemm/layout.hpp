// gridgemm: block geometry, worker assignment, and matrix descriptors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gridgemm/common.hpp"
#include "gridgemm/precision.hpp"

namespace gridgemm {

struct BlockCoord {
  int row = 0;
  int col = 0;

  friend bool operator==(const BlockCoord&, const BlockCoord&) = default;
  friend auto operator<=>(const BlockCoord&, const BlockCoord&) = default;
};

/// Uniform tiling of a global index space. All blocks have the nominal
/// size except those in the last block-row/column, which may be trimmed;
/// no block is empty.
struct BlockGrid {
  std::int64_t global_rows = 0;
  std::int64_t global_cols = 0;
  std::int64_t block_rows = 0;
  std::int64_t block_cols = 0;
  bool clamped = false;  // nominal block size exceeded the global extent

  int n_block_rows() const {
    return static_cast<int>((global_rows + block_rows - 1) / block_rows);
  }
  int n_block_cols() const {
    return static_cast<int>((global_cols + block_cols - 1) / block_cols);
  }
  int n_blocks() const { return n_block_rows() * n_block_cols(); }

  bool contains(BlockCoord c) const {
    return c.row >= 0 && c.row < n_block_rows() && c.col >= 0 && c.col < n_block_cols();
  }

  friend bool operator==(const BlockGrid&, const BlockGrid&) = default;
};

inline BlockGrid make_grid(std::int64_t gr, std::int64_t gc, std::int64_t br, std::int64_t bc) {
  if (gr <= 0 || gc <= 0 || br <= 0 || bc <= 0)
    throw UsageError("make_grid: dimensions must be positive");
  BlockGrid g;
  g.global_rows = gr;
  g.global_cols = gc;
  g.clamped = br > gr || bc > gc;
  g.block_rows = br > gr ? gr : br;
  g.block_cols = bc > gc ? gc : bc;
  return g;
}

/// Exact (possibly trimmed) dimensions of one block.
inline std::pair<std::int64_t, std::int64_t> block_extent(const BlockGrid& g, BlockCoord c) {
  if (!g.contains(c)) throw UsageError("block_extent: coordinate out of range");
  const std::int64_t r0 = static_cast<std::int64_t>(c.row) * g.block_rows;
  const std::int64_t c0 = static_cast<std::int64_t>(c.col) * g.block_cols;
  return {std::min(g.block_rows, g.global_rows - r0), std::min(g.block_cols, g.global_cols - c0)};
}

enum class LayoutKind : std::uint8_t {
  RowBlocks1D = 0,
  ColBlocks1D = 1,
  RowCyclic1D = 2,
  Checkerboard2D = 3,
  Custom = 4,
};

inline const char* layout_kind_name(LayoutKind k) {
  switch (k) {
    case LayoutKind::RowBlocks1D: return "rowblocks";
    case LayoutKind::ColBlocks1D: return "colblocks";
    case LayoutKind::RowCyclic1D: return "rowcyclic";
    case LayoutKind::Checkerboard2D: return "checkerboard";
    case LayoutKind::Custom: return "custom";
  }
  return "?";
}

inline LayoutKind layout_kind_from_name(const std::string& s) {
  if (s == "rowblocks") return LayoutKind::RowBlocks1D;
  if (s == "colblocks") return LayoutKind::ColBlocks1D;
  if (s == "rowcyclic") return LayoutKind::RowCyclic1D;
  if (s == "checkerboard") return LayoutKind::Checkerboard2D;
  if (s == "custom") return LayoutKind::Custom;
  throw ConfigError("unknown layout kind: " + s);
}

namespace detail {
// Process grid for the 2D round-robin assignment: pr is the largest
// divisor of w not exceeding sqrt(w).
inline std::pair<int, int> checkerboard_dims(int workers) {
  int pr = 1;
  for (int d = 1; static_cast<std::int64_t>(d) * d <= workers; ++d)
    if (workers % d == 0) pr = d;
  return {pr, workers / pr};
}

// Balanced contiguous split of n items over w owners.
inline int contiguous_owner(int index, int n, int w) {
  return static_cast<int>((static_cast<std::int64_t>(index) * w) / n);
}
}  // namespace detail

/// Total map from block coordinates to owning workers. Every worker knows
/// the layout of every matrix, so assignment is computed from the kind (or
/// an explicit table) rather than queried.
struct LayoutSpec {
  BlockGrid grid;
  LayoutKind kind = LayoutKind::RowBlocks1D;
  int worker_count = 1;
  std::vector<WorkerId> custom;  // row-major n_block_rows x n_block_cols, Custom only

  WorkerId owner(BlockCoord c) const {
    if (!grid.contains(c)) throw UsageError("owner_of: coordinate out of range");
    switch (kind) {
      case LayoutKind::RowBlocks1D:
        return detail::contiguous_owner(c.row, grid.n_block_rows(), worker_count);
      case LayoutKind::ColBlocks1D:
        return detail::contiguous_owner(c.col, grid.n_block_cols(), worker_count);
      case LayoutKind::RowCyclic1D:
        return c.row % worker_count;
      case LayoutKind::Checkerboard2D: {
        auto [pr, pc] = detail::checkerboard_dims(worker_count);
        return (c.row % pr) * pc + (c.col % pc);
      }
      case LayoutKind::Custom:
        return custom[static_cast<std::size_t>(c.row) * grid.n_block_cols() + c.col];
    }
    throw UsageError("owner_of: bad layout kind");
  }

  friend bool operator==(const LayoutSpec&, const LayoutSpec&) = default;
};

inline WorkerId owner_of(const LayoutSpec& layout, BlockCoord c) { return layout.owner(c); }

inline LayoutSpec make_layout(LayoutKind kind, std::int64_t gr, std::int64_t gc, std::int64_t br,
                              std::int64_t bc, int worker_count) {
  if (worker_count < 1) throw UsageError("make_layout: worker_count must be >= 1");
  LayoutSpec s;
  s.grid = make_grid(gr, gc, br, bc);
  s.kind = kind;
  s.worker_count = worker_count;
  if (kind == LayoutKind::Custom)
    s.custom.assign(static_cast<std::size_t>(s.grid.n_blocks()), 0);
  return s;
}

inline LayoutSpec make_custom_layout(const BlockGrid& grid, int worker_count,
                                     std::vector<WorkerId> table) {
  if (static_cast<int>(table.size()) != grid.n_blocks())
    throw UsageError("make_custom_layout: table size does not match grid");
  for (WorkerId w : table)
    if (w < 0 || w >= worker_count) throw UsageError("make_custom_layout: owner out of range");
  LayoutSpec s;
  s.grid = grid;
  s.kind = LayoutKind::Custom;
  s.worker_count = worker_count;
  s.custom = std::move(table);
  return s;
}

/// Canonical text form `kind:gRxgC:bRxbC:W`, used in checkpoints and on the
/// command line. Custom layouts append the full owner table.
inline std::string layout_to_string(const LayoutSpec& s) {
  std::ostringstream os;
  os << layout_kind_name(s.kind) << ':' << s.grid.global_rows << 'x' << s.grid.global_cols << ':'
     << s.grid.block_rows << 'x' << s.grid.block_cols << ':' << s.worker_count;
  if (s.kind == LayoutKind::Custom) {
    os << ':';
    for (std::size_t i = 0; i < s.custom.size(); ++i) {
      if (i) os << ',';
      os << s.custom[i];
    }
  }
  return os.str();
}

inline LayoutSpec layout_from_string(const std::string& text) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : text) {
    if (ch == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  if (parts.size() < 4) throw ConfigError("bad layout string: " + text);

  auto parse_pair = [&](const std::string& p) {
    auto x = p.find('x');
    if (x == std::string::npos) throw ConfigError("bad layout string: " + text);
    return std::pair<std::int64_t, std::int64_t>{std::stoll(p.substr(0, x)),
                                                 std::stoll(p.substr(x + 1))};
  };
  const LayoutKind kind = layout_kind_from_name(parts[0]);
  auto [gr, gc] = parse_pair(parts[1]);
  auto [br, bc] = parse_pair(parts[2]);
  const int workers = std::stoi(parts[3]);
  if (kind != LayoutKind::Custom) return make_layout(kind, gr, gc, br, bc, workers);

  if (parts.size() != 5) throw ConfigError("custom layout string missing owner table");
  std::vector<WorkerId> table;
  std::istringstream is(parts[4]);
  std::string tok;
  while (std::getline(is, tok, ',')) table.push_back(std::stoi(tok));
  return make_custom_layout(make_grid(gr, gc, br, bc), workers, std::move(table));
}

using MatrixId = std::uint64_t;

struct MatrixDescriptor {
  MatrixId matrix_id = 0;
  LayoutSpec layout;
  Precision precision = Precision::Single32;
  bool replicated = false;
  std::uint64_t version = 0;
  // Version at which replicas were last synchronized. Advanced identically
  // on all workers, so staleness is global knowledge.
  std::uint64_t replica_version = 0;
  std::uint64_t seed = 0;  // fill stream key, derived from the session root seed

  friend bool operator==(const MatrixDescriptor&, const MatrixDescriptor&) = default;
};

inline void hash_descriptor(Fnv1a& h, const MatrixDescriptor& d) {
  h.update_u64(d.matrix_id);
  const std::string ls = layout_to_string(d.layout);
  h.update(ls.data(), ls.size());
  h.update_u64(static_cast<std::uint64_t>(d.precision));
  h.update_u64(d.replicated ? 1 : 0);
  h.update_u64(d.version);
  h.update_u64(d.replica_version);
  h.update_u64(d.seed);
}

}  // namespace gridgemm
