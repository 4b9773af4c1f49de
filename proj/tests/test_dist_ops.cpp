// Distributed operations: cyclic/broadcast/general GEMM against the
// sequential triple-loop oracle, the cached communication-free backward
// pass, reshape/remap, and the distributed row/column sums.
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

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

struct GemmFixture {
  MatrixId a = 0, b = 0, c = 0;
  oracle::Mat A, B, C0;  // host values after precision rounding
};

// Ring-eligible operand set: A row-blocked into P*inner block-rows, op(B)
// and C in P matching stationary column strips.
GemmFixture make_cyclic_fixture(Session& s, std::int64_t m, std::int64_t k, std::int64_t n, int P,
                                int inner, bool trans_a, bool trans_b, Precision prec,
                                std::uint64_t seed) {
  const std::int64_t a_rows = trans_a ? k : m;
  const std::int64_t a_cols = trans_a ? m : k;
  REQUIRE(a_rows % (static_cast<std::int64_t>(P) * inner) == 0);
  const std::int64_t abr = a_rows / (P * inner);
  auto la = make_layout(LayoutKind::RowBlocks1D, a_rows, a_cols, abr, a_cols, P);

  const std::int64_t strip = (n + P - 1) / P;
  LayoutSpec lb = trans_b ? make_layout(LayoutKind::RowBlocks1D, n, k, strip, k, P)
                          : make_layout(LayoutKind::ColBlocks1D, k, n, k, strip, P);
  auto lc = make_layout(LayoutKind::ColBlocks1D, m, n, m, strip, P);

  GemmFixture f;
  HostMatrix ha = testutil::to_host(oracle::random_mat(a_rows, a_cols, seed), prec);
  HostMatrix hb = testutil::to_host(
      oracle::random_mat(trans_b ? n : k, trans_b ? k : n, seed + 1), prec);
  HostMatrix hc = testutil::to_host(oracle::random_mat(m, n, seed + 2), prec);
  f.a = s.create_matrix(la, prec, FillKind::FromHost, &ha);
  f.b = s.create_matrix(lb, prec, FillKind::FromHost, &hb);
  f.c = s.create_matrix(lc, prec, FillKind::FromHost, &hc);
  f.A = testutil::to_mat(ha);
  f.B = testutil::to_mat(hb);
  f.C0 = testutil::to_mat(hc);
  return f;
}

}  // namespace

TEST_CASE("cyclic_gemm: oracle equality and exact ring transfer count") {
  Session s(det_config(3));
  GemmFixture f = make_cyclic_fixture(s, 6, 6, 6, 3, 1, false, false, Precision::Double64, 100);
  const std::size_t before = s.trace().size();
  s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, false);

  oracle::Mat want = oracle::gemm(1.0, f.A, false, f.B, false, 0.0, f.C0);
  CHECK(oracle::max_abs_diff(testutil::to_mat(s.gather(f.c)), want) == 0.0);

  std::size_t ring_transfers = 0;
  for (const auto& r : s.trace().snapshot()) {
    if (r.seq < before || r.op_tag.rfind("cyclic_gemm:", 0) != 0) continue;
    ++ring_transfers;
    CHECK(r.dst == (r.src + 1) % 3);  // ring successor, single destination
  }
  CHECK(ring_transfers == 3 * 2 * 1);
}

TEST_CASE("cyclic_gemm: every A block visits every worker exactly once") {
  const int P = 4, B = 2;
  Session s(det_config(P));
  GemmFixture f = make_cyclic_fixture(s, 8, 8, 8, P, B, false, false, Precision::Double64, 200);
  const std::size_t before = s.trace().size();
  s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, false);
  const auto recs = s.trace().snapshot();

  // block (origin w, inner i) must be forwarded at stage (o, i) by worker
  // (w+o) mod P to its ring successor, for o = 0..P-2
  for (int w = 0; w < P; ++w)
    for (int i = 0; i < B; ++i)
      for (int o = 0; o + 1 < P; ++o) {
        const std::string tag =
            "cyclic_gemm:" + std::to_string(o) + "." + std::to_string(i);
        const WorkerId src = (w + o) % P;
        int found = 0;
        for (const auto& r : recs)
          if (r.seq >= before && r.op_tag == tag && r.src == src && r.dst == (src + 1) % P)
            ++found;
        CHECK(found == 1);
      }
  std::size_t total = 0;
  for (const auto& r : recs)
    if (r.seq >= before && r.op_tag.rfind("cyclic_gemm:", 0) == 0) ++total;
  CHECK(total == static_cast<std::size_t>(P * (P - 1) * B));
}

TEST_CASE("cyclic_gemm: stage tags interleave like the pipelined schedule") {
  // three workers, three inner stages: 0.0 0.0 0.0 / 0.1 x3 / 0.2 x3 / 1.0 ...
  Session s(det_config(3));
  GemmFixture f = make_cyclic_fixture(s, 9, 6, 6, 3, 3, false, false, Precision::Double64, 300);
  const std::size_t before = s.trace().size();
  s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, false);
  std::vector<std::string> tags;
  for (const auto& r : s.trace().snapshot())
    if (r.seq >= before && r.op_tag.rfind("cyclic_gemm:", 0) == 0) tags.push_back(r.op_tag);
  REQUIRE(tags.size() == 3 * 2 * 3);
  const char* expect[] = {"0.0", "0.1", "0.2", "1.0", "1.1", "1.2"};
  for (std::size_t g = 0; g < 6; ++g)
    for (int rep = 0; rep < 3; ++rep)
      CHECK(tags[g * 3 + static_cast<std::size_t>(rep)] ==
            std::string("cyclic_gemm:") + expect[g]);
}

TEST_CASE("cyclic_gemm: single worker degenerates to the local case") {
  Session s(det_config(1));
  GemmFixture f = make_cyclic_fixture(s, 4, 4, 4, 1, 2, false, false, Precision::Double64, 400);
  const std::size_t before = s.trace().size();
  s.cyclic_gemm(2.0, f.a, f.b, 1.0, f.c, false, false, false);
  CHECK(s.trace().size() == before);  // no peers, no transfers
  oracle::Mat want = oracle::gemm(2.0, f.A, false, f.B, false, 1.0, f.C0);
  CHECK(oracle::max_abs_diff(testutil::to_mat(s.gather(f.c)), want) == 0.0);
}

TEST_CASE("cyclic_gemm transpose variants match the oracle") {
  for (int variant = 0; variant < 4; ++variant) {
    const bool ta = variant & 1, tb = variant & 2;
    Session s(det_config(2, 50 + static_cast<std::uint64_t>(variant)));
    GemmFixture f =
        make_cyclic_fixture(s, 8, 4, 6, 2, 2, ta, tb, Precision::Double64,
                            500 + static_cast<std::uint64_t>(variant));
    s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, ta, tb, false);
    oracle::Mat want = oracle::gemm(1.0, f.A, ta, f.B, tb, 0.0, f.C0);
    CHECK(oracle::max_abs_diff(testutil::to_mat(s.gather(f.c)), want) == 0.0);
  }
}

TEST_CASE("cyclic_gemm at single precision stays within the relative error bound") {
  Session s(det_config(4));
  GemmFixture f = make_cyclic_fixture(s, 16, 32, 12, 4, 2, false, false, Precision::Single32, 600);
  s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, false);
  oracle::Mat want = oracle::gemm(1.0, f.A, false, f.B, false, 0.0, f.C0);
  CHECK(oracle::rel_frobenius_err(testutil::to_mat(s.gather(f.c)), want) <= 1e-5);
}

TEST_CASE("cyclic_gemm at half precision follows the widened-compute rule") {
  // distributed result == round-to-half of the single-precision triple loop
  // over the widened half inputs
  Session s(det_config(3));
  GemmFixture f = make_cyclic_fixture(s, 6, 6, 6, 3, 2, false, false, Precision::Half16, 650);
  s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, false);
  HostMatrix got = s.gather(f.c);

  std::vector<float> fa, fb;
  for (std::int64_t i = 0; i < 36; ++i) {
    fa.push_back(static_cast<float>(f.A.v[static_cast<std::size_t>(i)]));  // exact: half values
    fb.push_back(static_cast<float>(f.B.v[static_cast<std::size_t>(i)]));
  }
  auto fc = oracle::gemm_f32(1.0f, fa, 6, 6, false, fb, 6, 6, false, 0.0f, {});
  for (std::int64_t i = 0; i < 36; ++i)
    CHECK(got.view().typed<Half>().data[i].bits ==
          half_bits_from_float(fc[static_cast<std::size_t>(i)]));
}

TEST_CASE("cyclic_gemm rejects plans it cannot cover and bad shapes") {
  Session s(det_config(2));
  auto cb = make_layout(LayoutKind::Checkerboard2D, 4, 4, 2, 2, 2);
  auto strip = make_layout(LayoutKind::ColBlocks1D, 4, 4, 4, 2, 2);
  MatrixId a_cb = s.create_matrix(cb, Precision::Double64, FillKind::SeededRandom);
  MatrixId b = s.create_matrix(strip, Precision::Double64, FillKind::SeededRandom);
  MatrixId c = s.create_matrix(strip, Precision::Double64, FillKind::Zeros);
  CHECK_THROWS_AS(s.cyclic_gemm(1.0, a_cb, b, 0.0, c, false, false, false), PlanError);

  auto rb3 = make_layout(LayoutKind::RowBlocks1D, 6, 4, 2, 4, 2);  // 3 block-rows over 2 workers
  MatrixId a3 = s.create_matrix(rb3, Precision::Double64, FillKind::SeededRandom);
  MatrixId c64 = s.create_matrix(make_layout(LayoutKind::ColBlocks1D, 6, 4, 6, 2, 2),
                                 Precision::Double64, FillKind::Zeros);
  CHECK_THROWS_AS(s.cyclic_gemm(1.0, a3, b, 0.0, c64, false, false, false), PlanError);

  auto rb = make_layout(LayoutKind::RowBlocks1D, 4, 4, 2, 4, 2);
  MatrixId a = s.create_matrix(rb, Precision::Double64, FillKind::SeededRandom);
  MatrixId cbad = s.create_matrix(make_layout(LayoutKind::ColBlocks1D, 3, 4, 3, 2, 2),
                                  Precision::Double64, FillKind::Zeros);
  CHECK_THROWS_AS(s.cyclic_gemm(1.0, a, b, 0.0, cbad, false, false, false), ShapeError);

  MatrixId half_b = s.create_matrix(strip, Precision::Half16, FillKind::SeededRandom);
  MatrixId cc = s.create_matrix(strip, Precision::Double64, FillKind::Zeros);
  CHECK_THROWS_AS(s.cyclic_gemm(1.0, a, half_b, 0.0, cc, false, false, false), UsageError);
  CHECK_THROWS_AS(s.cyclic_gemm(1.0, a, b, 0.0, b, false, false, false), UsageError);

  s.replicate(cc, true);
  CHECK_THROWS_AS(s.cyclic_gemm(1.0, a, b, 0.0, cc, false, false, false), UsageError);
}

TEST_CASE("forward/backward fully-connected pair: cached backward moves zero bytes") {
  for (int P : {2, 3, 4}) {
    Session s(det_config(P, 70 + static_cast<std::uint64_t>(P)));
    // W is [in x out] row-blocked; forward Y = W^T X with X, Y column strips
    const std::int64_t in = 2 * P, out = 2 * P, batch = 8;
    auto lw = make_layout(LayoutKind::RowBlocks1D, in, out, in / P, out, P);
    const std::int64_t strip = (batch + P - 1) / P;
    auto lx = make_layout(LayoutKind::ColBlocks1D, in, batch, in, strip, P);
    auto ly = make_layout(LayoutKind::ColBlocks1D, out, batch, out, strip, P);

    HostMatrix hw = testutil::to_host(oracle::random_mat(in, out, 1), Precision::Double64);
    HostMatrix hx = testutil::to_host(oracle::random_mat(in, batch, 2), Precision::Double64);
    MatrixId w = s.create_matrix(lw, Precision::Double64, FillKind::FromHost, &hw);
    MatrixId x = s.create_matrix(lx, Precision::Double64, FillKind::FromHost, &hx);
    MatrixId y = s.create_matrix(ly, Precision::Double64, FillKind::Zeros);
    s.cyclic_gemm(1.0, w, x, 0.0, y, true, false, true);  // forward, caching W

    oracle::Mat Y = oracle::gemm(1.0, testutil::to_mat(hw), true, testutil::to_mat(hx), false, 0.0,
                                 oracle::Mat(out, batch));
    CHECK(oracle::max_abs_diff(testutil::to_mat(s.gather(y)), Y) == 0.0);

    HostMatrix hdy = testutil::to_host(oracle::random_mat(out, batch, 3), Precision::Double64);
    MatrixId dy = s.create_matrix(ly, Precision::Double64, FillKind::FromHost, &hdy);
    MatrixId dx = s.create_matrix(lx, Precision::Double64, FillKind::Zeros);

    const std::size_t before = s.trace().size();
    s.cached_backward_gemm(w, dy, dx);
    CHECK(s.trace().size() == before);  // communication-free backward pass

    oracle::Mat dX = oracle::gemm(1.0, testutil::to_mat(hw), false, testutil::to_mat(hdy), false,
                                  0.0, oracle::Mat(in, batch));
    CHECK(oracle::max_abs_diff(testutil::to_mat(s.gather(dx)), dX) <= 1e-12);

    // mutating W bumps its version: the cache is stale and the op refuses
    HostMatrix blk = testutil::to_host(oracle::random_mat(in / P, out, 4), Precision::Double64);
    s.update_block(w, {0, 0}, blk);
    CHECK_THROWS_AS(s.cached_backward_gemm(w, dy, dx), CacheMissError);
    try {
      s.cached_backward_gemm(w, dy, dx);
    } catch (const CacheMissError& e) {
      CHECK_FALSE(e.missing_coords.empty());
    }
  }
}

TEST_CASE("cached backward without a caching forward raises; disabling clears the cache") {
  Session s(det_config(2));
  GemmFixture f = make_cyclic_fixture(s, 4, 4, 4, 2, 1, false, false, Precision::Double64, 800);
  MatrixId dx = s.create_matrix(make_layout(LayoutKind::ColBlocks1D, 4, 4, 4, 2, 2),
                                Precision::Double64, FillKind::Zeros);
  CHECK_THROWS_AS(s.cached_backward_gemm(f.a, f.b, dx), CacheMissError);

  s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, true);  // populates the cache
  s.cached_backward_gemm(f.a, f.b, dx);                        // fine now

  MatrixId c2 = s.create_matrix(make_layout(LayoutKind::ColBlocks1D, 4, 4, 4, 2, 2),
                                Precision::Double64, FillKind::Zeros);
  s.cyclic_gemm(1.0, f.a, f.b, 0.0, c2, false, false, false);  // cache_a=false drops entries
  CHECK_THROWS_AS(s.cached_backward_gemm(f.a, f.b, dx), CacheMissError);
}

TEST_CASE("general_gemm handles arbitrary layout mixes") {
  Session s(det_config(4));
  auto la = make_layout(LayoutKind::Checkerboard2D, 8, 8, 2, 2, 4);
  auto lb = make_layout(LayoutKind::RowBlocks1D, 8, 8, 2, 8, 4);
  auto lc = make_layout(LayoutKind::ColBlocks1D, 8, 8, 8, 2, 4);
  HostMatrix ha = testutil::to_host(oracle::random_mat(8, 8, 11), Precision::Double64);
  HostMatrix hb = testutil::to_host(oracle::random_mat(8, 8, 12), Precision::Double64);
  HostMatrix hc = testutil::to_host(oracle::random_mat(8, 8, 13), Precision::Double64);
  MatrixId a = s.create_matrix(la, Precision::Double64, FillKind::FromHost, &ha);
  MatrixId b = s.create_matrix(lb, Precision::Double64, FillKind::FromHost, &hb);
  MatrixId c = s.create_matrix(lc, Precision::Double64, FillKind::FromHost, &hc);
  s.general_gemm(1.5, a, b, -0.5, c, false, false);
  oracle::Mat want = oracle::gemm(1.5, testutil::to_mat(ha), false, testutil::to_mat(hb), false,
                                  -0.5, testutil::to_mat(hc));
  CHECK(oracle::max_abs_diff(testutil::to_mat(s.gather(c)), want) == 0.0);
}

TEST_CASE("general_gemm is data-distribution independent, bitwise at double") {
  HostMatrix ha = testutil::to_host(oracle::random_mat(7, 5, 21), Precision::Double64);
  HostMatrix hb = testutil::to_host(oracle::random_mat(5, 9, 22), Precision::Double64);
  std::vector<HostMatrix> results;
  const LayoutKind kinds[] = {LayoutKind::RowBlocks1D, LayoutKind::ColBlocks1D,
                              LayoutKind::RowCyclic1D, LayoutKind::Checkerboard2D};
  for (int combo = 0; combo < 4; ++combo) {
    Session s(det_config(3, 1000 + static_cast<std::uint64_t>(combo)));
    auto la = make_layout(kinds[combo], 7, 5, 2, 3, 3);
    auto lb = make_layout(kinds[(combo + 1) % 4], 5, 9, 3, 2, 3);
    auto lc = make_layout(kinds[(combo + 2) % 4], 7, 9, 3, 3, 3);
    MatrixId a = s.create_matrix(la, Precision::Double64, FillKind::FromHost, &ha);
    MatrixId b = s.create_matrix(lb, Precision::Double64, FillKind::FromHost, &hb);
    MatrixId c = s.create_matrix(lc, Precision::Double64, FillKind::Zeros);
    s.general_gemm(1.0, a, b, 0.0, c, false, false);
    results.push_back(s.gather(c));
  }
  for (std::size_t i = 1; i < results.size(); ++i)
    CHECK(results[i].bitwise_equal(results[0]));
  oracle::Mat want = oracle::gemm(1.0, testutil::to_mat(ha), false, testutil::to_mat(hb), false,
                                  0.0, oracle::Mat(7, 9));
  CHECK(oracle::max_abs_diff(testutil::to_mat(results[0]), want) == 0.0);
}

TEST_CASE("general_gemm: 1x1 blocks, transposes, and half precision") {
  Session s(det_config(2));
  auto l1 = make_layout(LayoutKind::RowCyclic1D, 3, 3, 1, 1, 2);
  HostMatrix ha = testutil::to_host(oracle::random_mat(3, 3, 31), Precision::Double64);
  HostMatrix hb = testutil::to_host(oracle::random_mat(3, 3, 32), Precision::Double64);
  MatrixId a = s.create_matrix(l1, Precision::Double64, FillKind::FromHost, &ha);
  MatrixId b = s.create_matrix(l1, Precision::Double64, FillKind::FromHost, &hb);
  MatrixId c = s.create_matrix(l1, Precision::Double64, FillKind::Zeros);
  s.general_gemm(1.0, a, b, 0.0, c, true, true);
  oracle::Mat want = oracle::gemm(1.0, testutil::to_mat(ha), true, testutil::to_mat(hb), true, 0.0,
                                  oracle::Mat(3, 3));
  CHECK(oracle::max_abs_diff(testutil::to_mat(s.gather(c)), want) == 0.0);

  // half: result equals round-to-half of the single-precision triple loop
  auto lh = make_layout(LayoutKind::RowBlocks1D, 4, 4, 2, 2, 2);
  HostMatrix hha = testutil::to_host(oracle::random_mat(4, 4, 41), Precision::Half16);
  HostMatrix hhb = testutil::to_host(oracle::random_mat(4, 4, 42), Precision::Half16);
  MatrixId aa = s.create_matrix(lh, Precision::Half16, FillKind::FromHost, &hha);
  MatrixId bb = s.create_matrix(lh, Precision::Half16, FillKind::FromHost, &hhb);
  MatrixId cc = s.create_matrix(lh, Precision::Half16, FillKind::Zeros);
  s.general_gemm(1.0, aa, bb, 0.0, cc, false, false);
  std::vector<float> fa, fb;
  for (std::int64_t i = 0; i < 16; ++i) {
    fa.push_back(half_bits_to_float(hha.view().typed<Half>().data[i].bits));
    fb.push_back(half_bits_to_float(hhb.view().typed<Half>().data[i].bits));
  }
  auto fc = oracle::gemm_f32(1.0f, fa, 4, 4, false, fb, 4, 4, false, 0.0f, {});
  HostMatrix got = s.gather(cc);
  for (std::int64_t i = 0; i < 16; ++i)
    CHECK(got.view().typed<Half>().data[i].bits ==
          half_bits_from_float(fc[static_cast<std::size_t>(i)]));
}

TEST_CASE("broadcast reference computes the same C as cyclic, with fan-out sends") {
  Session s(det_config(3));
  GemmFixture f = make_cyclic_fixture(s, 6, 6, 6, 3, 2, false, false, Precision::Double64, 900);
  s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, false);
  HostMatrix cyc = s.gather(f.c);

  Session s2(det_config(3));
  GemmFixture f2 = make_cyclic_fixture(s2, 6, 6, 6, 3, 2, false, false, Precision::Double64, 900);
  const std::size_t before = s2.trace().size();
  s2.broadcast_gemm_reference(1.0, f2.a, f2.b, 0.0, f2.c, false, false);
  CHECK(s2.gather(f2.c).bitwise_equal(cyc));  // same math either way

  // each of the 6 blocks fans out to both other workers
  std::map<std::string, std::set<WorkerId>> dsts;
  std::size_t total = 0;
  for (const auto& r : s2.trace().snapshot()) {
    if (r.seq < before || r.op_tag.rfind("broadcast_gemm:", 0) != 0) continue;
    ++total;
    dsts[r.op_tag].insert(r.dst);
  }
  CHECK(total == 3 * 2 * 2);
  CHECK(dsts.size() == 6);
  for (const auto& [tag, d] : dsts) CHECK(d.size() == 2);  // multi-destination fan-out
}

TEST_CASE("double-buffer rule: no receive lands before the previous stage released the slot") {
  const CostModel cm = CostModel::measured_default();
  for (int P : {3, 4})
    for (int B : {1, 3}) {
      auto acts = build_cyclic_gemm_schedule(P, B, [](int, int) { return 262144.0; },
                                             [](int, int, int) { return 120.0; });
      const auto rep = simulate_schedule(acts, cm, Topology::single_group(P));
      const int computes = P * P * B;
      auto comp_id = [&](int w, int o, int i) { return (o * B + i) * P + w; };
      auto xfer_id = [&](int w, int o, int i) { return computes + (o * B + i) * P + w; };
      for (int o = 1; o + 1 < P; ++o)
        for (int i = 0; i < B; ++i)
          for (int w = 0; w < P; ++w) {
            // the transfer into w's slot (o,i) may not start before w's
            // stage (o-1, i) compute and send both finished
            const int incoming = xfer_id((w - 1 + P) % P, o, i);
            CHECK(rep.start_us[incoming] >=
                  rep.finish_us[comp_id(w, o - 1, i)] - 1e-9);
            CHECK(rep.start_us[incoming] >= rep.finish_us[xfer_id(w, o - 1, i)] - 1e-9);
          }
    }
}

TEST_CASE("reshape: layout remap, worker-subset change, and value equality") {
  Session s(det_config(4));
  auto src_layout = make_layout(LayoutKind::RowBlocks1D, 8, 8, 2, 8, 4);
  HostMatrix h = testutil::to_host(oracle::random_mat(8, 8, 51), Precision::Single32);
  MatrixId src = s.create_matrix(src_layout, Precision::Single32, FillKind::FromHost, &h);

  auto dst_layout = make_layout(LayoutKind::ColBlocks1D, 8, 8, 8, 4, 2);  // two workers
  MatrixId dst = s.reshape(src, dst_layout, Precision::Single32);
  CHECK(s.gather(dst).bitwise_equal(h));
  CHECK(s.gather(src).bitwise_equal(h));  // source untouched

  // global shape change preserving element count: row-major linear order
  auto wide = make_layout(LayoutKind::RowBlocks1D, 4, 16, 1, 16, 4);
  MatrixId flat = s.reshape(src, wide, Precision::Single32);
  HostMatrix hf = s.gather(flat);
  for (std::int64_t idx = 0; idx < 64; ++idx)
    CHECK(hf.get(idx / 16, idx % 16) == h.get(idx / 8, idx % 8));

  CHECK_THROWS_AS(s.reshape(src, make_layout(LayoutKind::RowBlocks1D, 3, 3, 1, 3, 2),
                            Precision::Single32),
                  ShapeError);
}

TEST_CASE("reshape narrowing halves the payload and rounds once") {
  const oracle::HalfRounder ref;
  Session s(det_config(3));
  auto src_layout = make_layout(LayoutKind::RowBlocks1D, 6, 6, 2, 6, 3);
  auto dst_layout = make_layout(LayoutKind::ColBlocks1D, 6, 6, 6, 2, 3);
  HostMatrix h = testutil::to_host(oracle::random_mat(6, 6, 61), Precision::Single32);
  MatrixId src = s.create_matrix(src_layout, Precision::Single32, FillKind::FromHost, &h);

  auto payload_sum = [&](std::size_t from) {
    std::uint64_t sum = 0;
    for (const auto& r : s.trace().snapshot())
      if (r.seq >= from && r.op_tag == "reshape") sum += r.payload_bytes;
    return sum;
  };
  const std::size_t t0 = s.trace().size();
  s.reshape(src, dst_layout, Precision::Single32);
  const std::uint64_t same_precision_payload = payload_sum(t0);
  const std::size_t t1 = s.trace().size();
  MatrixId half_dst = s.reshape(src, dst_layout, Precision::Half16);
  const std::uint64_t narrowed_payload = payload_sum(t1);
  CHECK(same_precision_payload > 0);
  CHECK(narrowed_payload * 2 == same_precision_payload);  // headers excluded

  HostMatrix got = s.gather(half_dst);
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t j = 0; j < 6; ++j)
      CHECK(got.view().typed<Half>().at(i, j).bits ==
            ref.round(static_cast<double>(static_cast<float>(h.view().typed<float>().at(i, j)))));

  // identity reshape detects that nothing needs to move
  const std::size_t t2 = s.trace().size();
  MatrixId same = s.reshape(src, src_layout, Precision::Single32);
  CHECK(s.trace().size() == t2);
  CHECK(s.gather(same).bitwise_equal(h));

  // widening reshape transmits the narrow source payload
  const std::size_t t3 = s.trace().size();
  MatrixId widened = s.reshape(half_dst, src_layout, Precision::Double64);
  std::uint64_t widen_payload = 0;
  for (const auto& r : s.trace().snapshot())
    if (r.seq >= t3 && r.op_tag == "reshape") widen_payload += r.payload_bytes;
  CHECK(widen_payload * 2 == same_precision_payload);  // half-precision wire format
  HostMatrix wide = s.gather(widened);
  for (std::int64_t i = 0; i < 36; ++i)
    CHECK(wide.view().typed<double>().data[i] ==
          static_cast<double>(half_bits_to_float(got.view().typed<Half>().data[i].bits)));
}

TEST_CASE("add_row_col_sum: values, determinism, and the reassociation bound") {
  Session s(det_config(3, 77));
  auto layout = make_layout(LayoutKind::Checkerboard2D, 6, 6, 2, 2, 3);

  // reassociation-immune input: all ones
  oracle::Mat ones(6, 6);
  for (auto& x : ones.v) x = 1.0;
  HostMatrix hones = testutil::to_host(ones, Precision::Single32);
  MatrixId m1 = s.create_matrix(layout, Precision::Single32, FillKind::FromHost, &hones);
  for (bool det : {true, false}) {
    MatrixId v = s.add_row_col_sum(m1, Axis::Rows, det);
    HostMatrix g = s.gather(v);
    REQUIRE(g.rows() == 6);
    REQUIRE(g.cols() == 1);
    for (int i = 0; i < 6; ++i) CHECK(g.get(i, 0) == 6.0);
  }

  HostMatrix h = testutil::to_host(oracle::random_mat(6, 6, 78), Precision::Single32);
  MatrixId m = s.create_matrix(layout, Precision::Single32, FillKind::FromHost, &h);

  // deterministic mode is bitwise reproducible across repeated runs
  HostMatrix d1 = s.gather(s.add_row_col_sum(m, Axis::Rows, true));
  HostMatrix d2 = s.gather(s.add_row_col_sum(m, Axis::Rows, true));
  CHECK(d1.bitwise_equal(d2));

  // both modes stay within the summation error bound of the exact result
  const oracle::Mat hm = testutil::to_mat(h);
  for (bool det : {true, false}) {
    HostMatrix rows = s.gather(s.add_row_col_sum(m, Axis::Rows, det));
    for (int i = 0; i < 6; ++i) {
      double exact = 0, sum_abs = 0;
      for (int j = 0; j < 6; ++j) {
        exact += hm.at(i, j);
        sum_abs += std::abs(hm.at(i, j));
      }
      // partials plus the cross-worker fold: at most 2x the addend count
      const double bound = oracle::reassociation_bound(12, sum_abs, 0x1.0p-24);
      CHECK(std::abs(rows.get(i, 0) - exact) <= bound);
    }
    HostMatrix cols = s.gather(s.add_row_col_sum(m, Axis::Cols, det));
    REQUIRE(cols.rows() == 1);
    REQUIRE(cols.cols() == 6);
    for (int j = 0; j < 6; ++j) {
      double exact = 0, sum_abs = 0;
      for (int i = 0; i < 6; ++i) {
        exact += hm.at(i, j);
        sum_abs += std::abs(hm.at(i, j));
      }
      CHECK(std::abs(cols.get(0, j) - exact) <=
            oracle::reassociation_bound(12, sum_abs, 0x1.0p-24));
    }
  }

  // single strip of blocks: the owner is the only contributor, no traffic
  Session s1(det_config(2));
  auto rb = make_layout(LayoutKind::RowBlocks1D, 4, 4, 2, 4, 2);
  MatrixId mm = s1.create_matrix(rb, Precision::Double64, FillKind::SeededRandom);
  const std::size_t t0 = s1.trace().size();
  s1.add_row_col_sum(mm, Axis::Rows, true);
  CHECK(s1.trace().size() == t0);
}

TEST_CASE("cyclic_gemm supports more stationary strips than workers") {
  Session s(det_config(2));
  auto la = make_layout(LayoutKind::RowBlocks1D, 4, 6, 2, 6, 2);
  auto lb = make_layout(LayoutKind::ColBlocks1D, 6, 8, 6, 1, 2);  // eight one-column strips
  auto lc = make_layout(LayoutKind::ColBlocks1D, 4, 8, 4, 1, 2);
  HostMatrix ha = testutil::to_host(oracle::random_mat(4, 6, 71), Precision::Double64);
  HostMatrix hb = testutil::to_host(oracle::random_mat(6, 8, 72), Precision::Double64);
  MatrixId a = s.create_matrix(la, Precision::Double64, FillKind::FromHost, &ha);
  MatrixId b = s.create_matrix(lb, Precision::Double64, FillKind::FromHost, &hb);
  MatrixId c = s.create_matrix(lc, Precision::Double64, FillKind::Zeros);
  s.cyclic_gemm(1.0, a, b, 0.0, c, false, false, false);
  oracle::Mat want = oracle::gemm(1.0, testutil::to_mat(ha), false, testutil::to_mat(hb), false,
                                  0.0, oracle::Mat(4, 8));
  CHECK(oracle::max_abs_diff(testutil::to_mat(s.gather(c)), want) == 0.0);
}

TEST_CASE("degenerate 1x1 matrices work through every operation") {
  Session s(det_config(1, 3));
  auto l = make_layout(LayoutKind::RowBlocks1D, 1, 1, 1, 1, 1);
  oracle::Mat one(1, 1);
  one.at(0, 0) = 2.5;
  HostMatrix h = testutil::to_host(one, Precision::Double64);
  MatrixId a = s.create_matrix(l, Precision::Double64, FillKind::FromHost, &h);
  MatrixId b = s.create_matrix(l, Precision::Double64, FillKind::SeededRandom);
  MatrixId c = s.create_matrix(l, Precision::Double64, FillKind::Zeros);
  s.cyclic_gemm(1.0, a, b, 0.0, c, false, false, false);
  CHECK(s.gather(c).get(0, 0) == 2.5 * s.gather(b).get(0, 0));
  s.general_gemm(1.0, a, b, 1.0, c, true, true);
  CHECK(s.gather(c).get(0, 0) == 2.0 * 2.5 * s.gather(b).get(0, 0));
  s.replicate(a, true);
  CHECK(s.replica_read(a, 0).get(0, 0) == 2.5);
  MatrixId sums = s.add_row_col_sum(a, Axis::Cols, false);
  CHECK(s.gather(sums).get(0, 0) == 2.5);
  MatrixId r = s.reshape(a, l, Precision::Single32);
  CHECK(s.gather(r).get(0, 0) == 2.5);
}

TEST_CASE("pool: double-buffered ring allocations do not scale with stage count") {
  // same per-worker working set while the ring length grows
  std::vector<std::uint64_t> fresh;
  for (int P : {3, 6, 12}) {
    Session s(det_config(P));
    const std::int64_t k = 8, n = 2 * P, m = 2 * P;
    GemmFixture f = make_cyclic_fixture(s, m, k, n, P, 1, false, false, Precision::Single32,
                                        1100 + static_cast<std::uint64_t>(P));
    const auto before = s.worker_pool_stats(0).fresh_allocations;
    s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, false);
    fresh.push_back(s.worker_pool_stats(0).fresh_allocations - before);
  }
  CHECK(fresh[0] > 0);
  CHECK(fresh[1] <= fresh[0] + 1);  // panel class may differ once
  CHECK(fresh[2] <= fresh[0] + 2);
}

TEST_CASE("pool: repeated cyclic gemm reaches a 100% reuse steady state") {
  Session s(det_config(3));
  GemmFixture f = make_cyclic_fixture(s, 6, 6, 6, 3, 2, false, false, Precision::Single32, 1200);
  s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, false);
  std::vector<std::uint64_t> fresh_counts;
  for (int w = 0; w < 3; ++w) fresh_counts.push_back(s.worker_pool_stats(w).fresh_allocations);
  for (int rep = 0; rep < 10; ++rep) {
    s.cyclic_gemm(1.0, f.a, f.b, 0.0, f.c, false, false, false);
    for (int w = 0; w < 3; ++w)
      CHECK(s.worker_pool_stats(w).fresh_allocations ==
            fresh_counts[static_cast<std::size_t>(w)]);
  }
}
