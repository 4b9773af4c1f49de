// Session lifecycle, command protocol coherence, scatter/gather, seeds,
// checkpoint/restore, synthetic datasets, replication, and parity between
// the deterministic scheduler and threaded run loops.
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "gridgemm/session.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace gridgemm;

namespace {

Session::Config det_config(int workers, std::uint64_t seed = 42) {
  Session::Config cfg;
  cfg.worker_count = workers;
  cfg.root_seed = seed;
  cfg.deterministic = true;
  return cfg;
}

std::size_t count_tagged(const TraceLog& trace, const std::string& prefix,
                         std::size_t from_seq = 0) {
  std::size_t n = 0;
  for (const auto& r : trace.snapshot())
    if (r.seq >= from_seq && r.op_tag.rfind(prefix, 0) == 0) ++n;
  return n;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/gridgemm_test_") + name + "_" + std::to_string(::getpid());
}

}  // namespace

TEST_CASE("init validation and degenerate cluster") {
  CHECK_THROWS_AS(Session{det_config(0)}, UsageError);
  Session one(det_config(1));
  CHECK(one.worker_count() == 1);
  Session::Config bad = det_config(3);
  bad.topology = Topology::single_group(2);
  CHECK_THROWS_AS(Session{bad}, ConfigError);

  // four workers in one group: every pair is peer-to-peer
  Session::Config quad = det_config(4, 7);
  quad.topology = Topology::single_group(4);
  Session s(quad);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      if (a != b) CHECK(s.hub().topology().medium_between(a, b) == Medium::PeerToPeer);
}

TEST_CASE("seed distribution is deterministic, distinct, and root-sensitive") {
  Session s(det_config(4, 42));
  auto seeds = s.seed_workers(42);
  REQUIRE(seeds.size() == 4);
  for (int w = 0; w < 4; ++w) {
    CHECK(seeds[static_cast<std::size_t>(w)] == s.worker_seed(w));
    for (int v = w + 1; v < 4; ++v)
      CHECK(seeds[static_cast<std::size_t>(w)] != seeds[static_cast<std::size_t>(v)]);
  }
  Session s2(det_config(4, 42));
  CHECK(s2.seed_workers(42) == seeds);
  CHECK(s2.seed_workers(43) != seeds);
}

TEST_CASE("create zeros / seeded-random / from-host") {
  Session s(det_config(2));
  auto layout = make_layout(LayoutKind::RowBlocks1D, 4, 4, 2, 4, 2);
  MatrixId z = s.create_matrix(layout, Precision::Single32, FillKind::Zeros);
  HostMatrix hz = s.gather(z);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j) CHECK(hz.get(i, j) == 0.0);

  MatrixId r1 = s.create_matrix(layout, Precision::Double64, FillKind::SeededRandom);
  Session s2(det_config(2));
  s2.create_matrix(layout, Precision::Single32, FillKind::Zeros);  // keep id allocation aligned
  MatrixId r2 = s2.create_matrix(layout, Precision::Double64, FillKind::SeededRandom);
  CHECK(s.gather(r1).bitwise_equal(s2.gather(r2)));

  // block contents are keyed by coordinate, not by owner
  Session s3(det_config(2));
  auto cyclic = make_layout(LayoutKind::RowCyclic1D, 4, 4, 2, 4, 2);
  s3.create_matrix(layout, Precision::Single32, FillKind::Zeros);
  MatrixId r3 = s3.create_matrix(cyclic, Precision::Double64, FillKind::SeededRandom);
  CHECK(s.gather(r1).bitwise_equal(s3.gather(r3)));

  oracle::Mat eye(3, 3);
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  HostMatrix host_eye = testutil::to_host(eye, Precision::Single32);
  auto l3 = make_layout(LayoutKind::RowBlocks1D, 3, 3, 2, 3, 2);
  MatrixId m = s.create_matrix(l3, Precision::Single32, FillKind::FromHost, &host_eye);
  CHECK(s.gather(m).bitwise_equal(host_eye));
  CHECK(s.descriptor(m).version == 1);  // creation + host load

  HostMatrix wrong(2, 2, Precision::Single32);
  CHECK_THROWS_AS(s.create_matrix(l3, Precision::Single32, FillKind::FromHost, &wrong), ShapeError);
}

TEST_CASE("scatter/gather round trips bitwise; narrowing scatter rounds once") {
  const oracle::HalfRounder ref;
  for (auto kind : {LayoutKind::RowBlocks1D, LayoutKind::ColBlocks1D, LayoutKind::RowCyclic1D,
                    LayoutKind::Checkerboard2D}) {
    Session s(det_config(4, 9));
    auto layout = make_layout(kind, 7, 5, 2, 2, 4);
    oracle::Mat data = oracle::random_mat(7, 5, 77);
    for (Precision p : {Precision::Single32, Precision::Double64}) {
      HostMatrix host = testutil::to_host(data, p);
      MatrixId m = s.create_matrix(layout, p, FillKind::Zeros);
      s.scatter(m, host);
      CHECK(s.gather(m).bitwise_equal(host));
    }
  }

  // single-precision data into a half matrix: gather equals the elementwise
  // rounded input
  Session s(det_config(2));
  auto layout = make_layout(LayoutKind::RowBlocks1D, 4, 4, 2, 4, 2);
  oracle::Mat data = oracle::random_mat(4, 4, 5, -3.0, 3.0);
  HostMatrix host = testutil::to_host(data, Precision::Single32);
  MatrixId m = s.create_matrix(layout, Precision::Half16, FillKind::Zeros);
  s.scatter(m, host);
  HostMatrix got = s.gather(m);
  CHECK(got.precision() == Precision::Half16);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j) {
      const std::uint16_t want = ref.round(static_cast<double>(static_cast<float>(data.at(i, j))));
      CHECK(got.view().typed<Half>().at(i, j).bits == want);
    }

  HostMatrix bad(3, 3, Precision::Single32);
  CHECK_THROWS_AS(s.scatter(m, bad), ShapeError);
  s.destroy_matrix(m);
  CHECK_THROWS_AS(s.gather(m), UsageError);
}

TEST_CASE("gather moves every block to the master exactly once") {
  Session s(det_config(3));
  auto layout = make_layout(LayoutKind::RowBlocks1D, 6, 6, 2, 6, 3);
  MatrixId m = s.create_matrix(layout, Precision::Single32, FillKind::SeededRandom);
  const std::size_t before = s.trace().size();
  s.gather(m);
  CHECK(count_tagged(s.trace(), "gather", before) == 3);  // one per block, no worker is the master
}

TEST_CASE("update_block overwrites one block and bumps the version") {
  Session s(det_config(2));
  auto layout = make_layout(LayoutKind::RowBlocks1D, 4, 4, 2, 4, 2);
  MatrixId m = s.create_matrix(layout, Precision::Double64, FillKind::Zeros);
  const auto v0 = s.descriptor(m).version;
  oracle::Mat blk(2, 4);
  for (auto& x : blk.v) x = 3.25;
  s.update_block(m, {1, 0}, testutil::to_host(blk, Precision::Double64));
  CHECK(s.descriptor(m).version == v0 + 1);
  HostMatrix g = s.gather(m);
  CHECK(g.get(0, 0) == 0.0);
  CHECK(g.get(2, 1) == 3.25);
  CHECK(g.get(3, 3) == 3.25);
  HostMatrix tiny(1, 1, Precision::Double64);
  CHECK_THROWS_AS(s.update_block(m, {0, 0}, tiny), ShapeError);
  CHECK_THROWS_AS(s.update_block(m, {5, 0}, tiny), UsageError);
}

TEST_CASE("descriptor tables stay identical across master and workers") {
  Session s(det_config(3, 11));
  auto layout = make_layout(LayoutKind::RowCyclic1D, 6, 6, 1, 6, 3);
  MatrixId a = s.create_matrix(layout, Precision::Double64, FillKind::SeededRandom);
  s.replicate(a, true);
  s.add_row_col_sum(a, Axis::Rows, true);
  s.destroy_matrix(a);
  auto digests = s.descriptor_digests();
  for (auto d : digests) CHECK(d == digests[0]);
}

TEST_CASE("checkpoint/restore: bitwise round trip, integrity, continuation") {
  const std::string path = temp_path("ckpt");
  std::vector<HostMatrix> gathers;
  {
    Session s(det_config(3, 123));
    auto l1 = make_layout(LayoutKind::RowBlocks1D, 6, 4, 2, 4, 3);
    auto l2 = make_layout(LayoutKind::Checkerboard2D, 5, 5, 2, 2, 3);
    MatrixId m1 = s.create_matrix(l1, Precision::Half16, FillKind::SeededRandom);
    MatrixId m2 = s.create_matrix(l2, Precision::Double64, FillKind::SeededRandom);
    MatrixId m3 = s.create_matrix(l1, Precision::Single32, FillKind::SeededRandom);
    s.replicate(m2, true);
    s.checkpoint(path);
    gathers.push_back(s.gather(m1));
    gathers.push_back(s.gather(m2));
    gathers.push_back(s.gather(m3));
  }
  {
    auto r = Session::restore(path);
    CHECK(r->worker_count() == 3);
    MatrixId ids[3] = {1, 2, 3};
    for (int i = 0; i < 3; ++i)
      CHECK(r->gather(ids[i]).bitwise_equal(gathers[static_cast<std::size_t>(i)]));
    CHECK(r->descriptor(2).replicated);
    // restored sessions keep allocating fresh ids
    auto l = make_layout(LayoutKind::RowBlocks1D, 2, 2, 2, 2, 1);
    CHECK(r->create_matrix(l, Precision::Single32, FillKind::Zeros) == 4);
  }

  // flip one payload byte: integrity check must fail
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes[bytes.size() - 16] ^= 1;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(Session::restore(path), IntegrityError);
  std::remove(path.c_str());
}

TEST_CASE("restore then continue produces the same results as an uninterrupted run") {
  const std::string path = temp_path("resume");
  auto layout_a = make_layout(LayoutKind::RowBlocks1D, 6, 6, 3, 6, 2);
  auto layout_bc = make_layout(LayoutKind::ColBlocks1D, 6, 6, 6, 3, 2);

  Session full(det_config(2, 99));
  MatrixId a = full.create_matrix(layout_a, Precision::Double64, FillKind::SeededRandom);
  MatrixId b = full.create_matrix(layout_bc, Precision::Double64, FillKind::SeededRandom);
  MatrixId c = full.create_matrix(layout_bc, Precision::Double64, FillKind::Zeros);
  full.cyclic_gemm(1.0, a, b, 0.0, c, false, false, false);

  Session part(det_config(2, 99));
  MatrixId pa = part.create_matrix(layout_a, Precision::Double64, FillKind::SeededRandom);
  MatrixId pb = part.create_matrix(layout_bc, Precision::Double64, FillKind::SeededRandom);
  MatrixId pc = part.create_matrix(layout_bc, Precision::Double64, FillKind::Zeros);
  part.checkpoint(path);
  part.shutdown();

  auto resumed = Session::restore(path);
  resumed->cyclic_gemm(1.0, pa, pb, 0.0, pc, false, false, false);
  CHECK(resumed->gather(pc).bitwise_equal(full.gather(c)));
  CHECK(resumed->gather(pa).bitwise_equal(full.gather(a)));
  std::remove(path.c_str());
}

TEST_CASE("shutdown releases all pooled memory and is idempotent") {
  Session s(det_config(2, 5));
  auto layout = make_layout(LayoutKind::RowBlocks1D, 8, 8, 2, 8, 2);
  MatrixId a = s.create_matrix(layout, Precision::Single32, FillKind::SeededRandom);
  s.replicate(a, true);  // live matrices are allowed at shutdown
  s.shutdown();
  for (int w = 0; w < 2; ++w) {
    const auto st = s.worker_pool_stats(w);
    CHECK(st.bytes_live == 0);
    CHECK(st.bytes_pooled == 0);
    CHECK(st.high_water > 0);
  }
  s.shutdown();  // second call is a no-op
  CHECK_FALSE(s.live());
  CHECK_THROWS_AS(s.gather(a), UsageError);
}

TEST_CASE("synthetic dataset: batches, shards, exhaustion, random sampling") {
  Session s(det_config(3, 31));
  DatasetConfig cfg;
  cfg.element_count = 40;
  cfg.batch_size = 4;
  cfg.feature_dim = 5;
  cfg.seed = 1234;
  cfg.sampling = DatasetConfig::Sampling::Sequential;
  const auto ds = s.register_dataset(cfg);

  for (int batch = 0; batch < 10; ++batch) {
    auto id = s.prefetch_next_batch(ds);
    REQUIRE(id.has_value());
    HostMatrix got = s.gather(*id);
    REQUIRE(got.rows() == 5);
    REQUIRE(got.cols() == 4);
    // oracle: direct slice of the synthetic dataset definition
    for (std::int64_t j = 0; j < 4; ++j) {
      const std::uint64_t sample = static_cast<std::uint64_t>(batch) * 4 + static_cast<std::uint64_t>(j);
      for (std::int64_t f = 0; f < 5; ++f) {
        const float want = static_cast<float>(
            dataset_value(cfg.seed, sample, static_cast<std::uint64_t>(f), cfg.feature_dim));
        CHECK(got.view().typed<float>().at(f, j) == want);
      }
    }
  }
  CHECK_FALSE(s.prefetch_next_batch(ds).has_value());  // end of data

  // random access sampling: deterministic across sessions, covers each
  // sample once per epoch
  cfg.sampling = DatasetConfig::Sampling::Random;
  Session r1(det_config(2, 8));
  Session r2(det_config(2, 8));
  const auto d1 = r1.register_dataset(cfg);
  const auto d2 = r2.register_dataset(cfg);
  std::vector<HostMatrix> b1, b2;
  for (int i = 0; i < 10; ++i) {
    auto m1 = r1.prefetch_next_batch(d1);
    auto m2 = r2.prefetch_next_batch(d2);
    REQUIRE(m1.has_value());
    REQUIRE(m2.has_value());
    b1.push_back(r1.gather(*m1));
    b2.push_back(r2.gather(*m2));
  }
  bool any_diff_from_sequential = false;
  for (int i = 0; i < 10; ++i) {
    CHECK(b1[static_cast<std::size_t>(i)].bitwise_equal(b2[static_cast<std::size_t>(i)]));
    for (std::int64_t j = 0; j < 4 && !any_diff_from_sequential; ++j)
      if (b1[static_cast<std::size_t>(i)].get(0, j) !=
          static_cast<double>(static_cast<float>(dataset_value(
              cfg.seed, static_cast<std::uint64_t>(i) * 4 + static_cast<std::uint64_t>(j), 0,
              cfg.feature_dim))))
        any_diff_from_sequential = true;
  }
  CHECK(any_diff_from_sequential);  // the shuffle actually permuted
}

TEST_CASE("replication: local reads equal gather; lazy resync after mutation") {
  Session s(det_config(3, 17));
  auto layout = make_layout(LayoutKind::RowBlocks1D, 6, 4, 2, 4, 3);
  MatrixId m = s.create_matrix(layout, Precision::Double64, FillKind::SeededRandom);
  CHECK_THROWS_AS(s.replica_read(m, 0), UsageError);  // not replicated yet

  const std::size_t before = s.trace().size();
  s.replicate(m, true);
  // each of the 3 blocks goes to the 2 non-owners
  CHECK(count_tagged(s.trace(), "replicate", before) == 6);
  HostMatrix ref = s.gather(m);
  for (int w = 0; w < 3; ++w) CHECK(s.replica_read(m, w).bitwise_equal(ref));

  // mutate one block: replicas are stale, the next read re-synchronizes
  oracle::Mat blk(2, 4);
  for (auto& x : blk.v) x = -1.5;
  s.update_block(m, {0, 0}, testutil::to_host(blk, Precision::Double64));
  const std::size_t before_read = s.trace().size();
  HostMatrix after = s.replica_read(m, 2);
  CHECK(count_tagged(s.trace(), "replica_read:sync", before_read) == 6);
  CHECK(after.bitwise_equal(s.gather(m)));
  CHECK(after.get(0, 0) == -1.5);
  // a second read needs no further sync
  const std::size_t before_read2 = s.trace().size();
  s.replica_read(m, 1);
  CHECK(count_tagged(s.trace(), "replica_read:sync", before_read2) == 0);

  s.replicate(m, false);
  CHECK_THROWS_AS(s.replica_read(m, 0), UsageError);

  // single-worker replication moves nothing
  Session one(det_config(1));
  auto l1 = make_layout(LayoutKind::RowBlocks1D, 4, 4, 2, 4, 1);
  MatrixId m1 = one.create_matrix(l1, Precision::Single32, FillKind::SeededRandom);
  const std::size_t t0 = one.trace().size();
  one.replicate(m1, true);
  CHECK(one.trace().size() == t0);
  CHECK(one.replica_read(m1, 0).bitwise_equal(one.gather(m1)));
}

TEST_CASE("deterministic runs produce identical traces and gathers") {
  auto run = [](std::string& trace_out) {
    Session s(det_config(3, 2024));
    auto la = make_layout(LayoutKind::RowBlocks1D, 6, 6, 2, 6, 3);
    auto lbc = make_layout(LayoutKind::ColBlocks1D, 6, 6, 6, 2, 3);
    MatrixId a = s.create_matrix(la, Precision::Double64, FillKind::SeededRandom);
    MatrixId b = s.create_matrix(lbc, Precision::Double64, FillKind::SeededRandom);
    MatrixId c = s.create_matrix(lbc, Precision::Double64, FillKind::Zeros);
    s.cyclic_gemm(1.0, a, b, 0.0, c, false, false, true);
    s.replicate(b, true);
    HostMatrix g = s.gather(c);
    std::ostringstream os;
    s.trace().dump_jsonl(os);
    trace_out = os.str();
    return g;
  };
  std::string t1, t2;
  HostMatrix g1 = run(t1);
  HostMatrix g2 = run(t2);
  CHECK(g1.bitwise_equal(g2));
  CHECK(t1 == t2);
  CHECK_FALSE(t1.empty());
}

TEST_CASE("threaded run loops produce the same numbers as the deterministic scheduler") {
  ::unsetenv("GRIDGEMM_DETERMINISTIC");
  auto run = [](bool deterministic) {
    Session::Config cfg = det_config(3, 555);
    cfg.deterministic = deterministic;
    Session s(cfg);
    auto la = make_layout(LayoutKind::RowBlocks1D, 12, 6, 2, 6, 3);  // two inner blocks per worker
    auto lbc = make_layout(LayoutKind::ColBlocks1D, 6, 8, 6, 3, 3);
    auto lc = make_layout(LayoutKind::ColBlocks1D, 12, 8, 12, 3, 3);
    MatrixId a = s.create_matrix(la, Precision::Double64, FillKind::SeededRandom);
    MatrixId b = s.create_matrix(lbc, Precision::Double64, FillKind::SeededRandom);
    MatrixId c = s.create_matrix(lc, Precision::Double64, FillKind::Zeros);
    s.cyclic_gemm(1.0, a, b, 0.0, c, false, false, true);
    MatrixId g = s.create_matrix(make_layout(LayoutKind::Checkerboard2D, 12, 8, 3, 3, 3),
                                 Precision::Double64, FillKind::Zeros);
    s.general_gemm(1.0, a, b, 0.0, g, false, false);
    s.replicate(b, true);
    MatrixId rs = s.reshape(a, make_layout(LayoutKind::RowCyclic1D, 12, 6, 3, 6, 3),
                            Precision::Single32);
    MatrixId sums = s.add_row_col_sum(a, Axis::Rows, true);
    std::vector<HostMatrix> out;
    out.push_back(s.gather(c));
    out.push_back(s.gather(g));
    out.push_back(s.gather(rs));
    out.push_back(s.gather(sums));
    out.push_back(s.replica_read(b, 1));
    s.shutdown();
    return out;
  };
  auto det = run(true);
  auto thr = run(false);
  REQUIRE(det.size() == thr.size());
  for (std::size_t i = 0; i < det.size(); ++i) CHECK(det[i].bitwise_equal(thr[i]));
}

TEST_CASE("GRIDGEMM_DETERMINISTIC environment forces the deterministic scheduler") {
  ::setenv("GRIDGEMM_DETERMINISTIC", "1", 1);
  Session::Config cfg = det_config(2, 1);
  cfg.deterministic = false;
  Session s(cfg);
  CHECK(s.deterministic());
  ::unsetenv("GRIDGEMM_DETERMINISTIC");
}
