// gridgemm: checkpoint file format.
//
//   magic "DMTH" | u32 format version | u32 worker count | u64 root seed
//   u64 next matrix id | u32 matrix count
//   per matrix: u64 id | u64 version | u64 seed | u8 replicated
//               u8 precision | u16 layout string length | layout string
//               u32 block count | blocks in owner-major, block-row-major
//               order, each u32 payload length + raw little-endian scalars
//   trailer: u64 FNV-1a of everything before it
//
// Restoring reproduces every owned block bitwise and every descriptor field;
// trace state is not part of the image.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gridgemm/common.hpp"
#include "gridgemm/layout.hpp"

namespace gridgemm {

struct CheckpointMatrix {
  MatrixDescriptor desc;
  std::map<int, std::vector<std::byte>> blocks;  // key: block_row * nbc + block_col
};

struct CheckpointImage {
  std::uint32_t format_version = 1;
  int worker_count = 0;
  std::uint64_t root_seed = 0;
  std::uint64_t next_matrix_id = 1;
  std::vector<CheckpointMatrix> matrices;  // ascending matrix id
};

namespace detail {

inline void append_bytes(std::vector<unsigned char>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  out.insert(out.end(), b, b + n);
}

/// File order for one matrix's blocks: owners ascending, block-row-major
/// within each owner.
inline std::vector<int> checkpoint_block_order(const LayoutSpec& layout) {
  const int nbr = layout.grid.n_block_rows(), nbc = layout.grid.n_block_cols();
  std::vector<int> order;
  for (WorkerId w = 0; w < layout.worker_count; ++w)
    for (int r = 0; r < nbr; ++r)
      for (int c = 0; c < nbc; ++c)
        if (layout.owner({r, c}) == w) order.push_back(r * nbc + c);
  return order;
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const CheckpointImage& img) {
  std::vector<unsigned char> out;
  detail::append_bytes(out, "DMTH", 4);
  put_le(out, img.format_version, 4);
  put_le(out, static_cast<std::uint64_t>(img.worker_count), 4);
  put_le(out, img.root_seed, 8);
  put_le(out, img.next_matrix_id, 8);
  put_le(out, img.matrices.size(), 4);
  for (const auto& m : img.matrices) {
    put_le(out, m.desc.matrix_id, 8);
    put_le(out, m.desc.version, 8);
    put_le(out, m.desc.seed, 8);
    out.push_back(m.desc.replicated ? 1 : 0);
    out.push_back(static_cast<unsigned char>(m.desc.precision));
    const std::string ls = layout_to_string(m.desc.layout);
    put_le(out, ls.size(), 2);
    detail::append_bytes(out, ls.data(), ls.size());
    const auto order = detail::checkpoint_block_order(m.desc.layout);
    put_le(out, order.size(), 4);
    for (int key : order) {
      const auto& payload = m.blocks.at(key);
      put_le(out, payload.size(), 4);
      detail::append_bytes(out, payload.data(), payload.size());
    }
  }
  Fnv1a h;
  h.update(out.data(), out.size());
  put_le(out, h.digest(), 8);
  return out;
}

inline CheckpointImage decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 + 4 + 8 || std::memcmp(bytes.data(), "DMTH", 4) != 0)
    throw IntegrityError("checkpoint: bad magic or truncated file");
  Fnv1a h;
  h.update(bytes.data(), bytes.size() - 8);
  if (h.digest() != get_le(bytes.data() + bytes.size() - 8, 8))
    throw IntegrityError("checkpoint: checksum mismatch");

  std::size_t pos = 4;
  const std::size_t limit = bytes.size() - 8;
  auto need = [&](std::size_t n) {
    if (pos + n > limit) throw IntegrityError("checkpoint: truncated record");
  };
  auto read_u = [&](int n) {
    need(static_cast<std::size_t>(n));
    const std::uint64_t v = get_le(bytes.data() + pos, n);
    pos += static_cast<std::size_t>(n);
    return v;
  };

  CheckpointImage img;
  img.format_version = static_cast<std::uint32_t>(read_u(4));
  if (img.format_version != 1)
    throw IntegrityError("checkpoint: unsupported format version " +
                         std::to_string(img.format_version));
  img.worker_count = static_cast<int>(read_u(4));
  img.root_seed = read_u(8);
  img.next_matrix_id = read_u(8);
  const std::uint64_t nmat = read_u(4);
  for (std::uint64_t i = 0; i < nmat; ++i) {
    CheckpointMatrix m;
    m.desc.matrix_id = read_u(8);
    m.desc.version = read_u(8);
    m.desc.seed = read_u(8);
    m.desc.replicated = read_u(1) != 0;
    m.desc.precision = static_cast<Precision>(read_u(1));
    const std::uint64_t lslen = read_u(2);
    need(lslen);
    m.desc.layout = layout_from_string(
        std::string(reinterpret_cast<const char*>(bytes.data() + pos), lslen));
    pos += lslen;
    m.desc.replica_version = m.desc.replicated ? m.desc.version : 0;
    const auto order = detail::checkpoint_block_order(m.desc.layout);
    const std::uint64_t nblocks = read_u(4);
    if (nblocks != order.size()) throw IntegrityError("checkpoint: block count mismatch");
    for (int key : order) {
      const std::uint64_t plen = read_u(4);
      need(plen);
      m.blocks[key].assign(reinterpret_cast<const std::byte*>(bytes.data() + pos),
                           reinterpret_cast<const std::byte*>(bytes.data() + pos + plen));
      pos += plen;
    }
    img.matrices.push_back(std::move(m));
  }
  if (pos != limit) throw IntegrityError("checkpoint: trailing bytes");
  return img;
}

inline void write_checkpoint_file(const CheckpointImage& img, const std::string& path) {
  const auto bytes = encode_checkpoint(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("checkpoint: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("checkpoint: write failed for " + path);
}

inline CheckpointImage read_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("checkpoint: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace gridgemm
