// gridgemm: correctness-suite and cost-model harness behind the CLI.
// Each run spins up a fresh session, executes one operation configuration,
// checks it against the sequential reference, and emits one JSON report
// line. Identical seeded runs produce identical reports except wall time.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gridgemm/session.hpp"

namespace gridgemm::harness {

using nlohmann::json;

struct RunConfig {
  int workers = 4;
  std::string topology_file;    // empty: groups of 4, two groups per node
  std::string cost_model_file;  // empty: built-in measured tables
  std::vector<std::int64_t> sizes = {8, 16, 32};
  std::vector<std::int64_t> blocks = {2};
  LayoutKind layout = LayoutKind::RowBlocks1D;
  Precision precision = Precision::Single32;
  std::uint64_t seed = 42;
  std::vector<std::string> ops;  // empty: every op
  bool deterministic = true;
  std::string trace_path;
  std::string report_path;
  double flops_rate = kDefaultFlopsRate;
  std::uint64_t inject_fault_seq = UINT64_MAX;  // per-session transfer sequence to corrupt
};

inline const std::vector<std::string>& all_ops() {
  static const std::vector<std::string> ops = {
      "cyclic_gemm",   "broadcast_gemm", "general_gemm",       "cached_backward_gemm",
      "replicate",     "reshape",        "add_row_col_sum",    "scatter_gather",
      "checkpoint_restore", "prefetch"};
  return ops;
}

struct SuiteResult {
  std::vector<json> reports;
  std::string trace_jsonl;
  int exit_code = 0;
};

namespace detail {

inline Topology load_topology(const RunConfig& cfg) {
  if (cfg.topology_file.empty()) return Topology::default_grouped(cfg.workers);
  std::ifstream f(cfg.topology_file);
  if (!f) throw ConfigError("cannot open topology file " + cfg.topology_file);
  return Topology::parse(f, cfg.workers);
}

inline CostModel load_cost_model(const RunConfig& cfg) {
  if (cfg.cost_model_file.empty()) return CostModel::measured_default();
  std::ifstream f(cfg.cost_model_file);
  if (!f) throw ConfigError("cannot open cost model file " + cfg.cost_model_file);
  return CostModel::from_csv(f);
}

inline std::unique_ptr<Session> make_session(const RunConfig& cfg, std::uint64_t salt) {
  Session::Config sc;
  sc.worker_count = cfg.workers;
  sc.topology = load_topology(cfg);
  sc.cost_model = load_cost_model(cfg);
  sc.root_seed = mix64(cfg.seed, salt);
  sc.deterministic = cfg.deterministic;
  auto s = std::make_unique<Session>(sc);
  if (cfg.inject_fault_seq != UINT64_MAX) s->hub().inject_fault_at(cfg.inject_fault_seq);
  return s;
}

inline HostMatrix to_double_host(const HostMatrix& h) {
  HostMatrix out(h.rows(), h.cols(), Precision::Double64);
  convert_precision(h.view(), out.view());
  return out;
}

inline double max_abs_diff(const HostMatrix& a, const HostMatrix& b) {
  double m = 0;
  for (std::int64_t r = 0; r < a.rows(); ++r)
    for (std::int64_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a.get(r, c) - b.get(r, c)));
  return m;
}

inline double rel_frobenius(const HostMatrix& got, const HostMatrix& want) {
  double num = 0, den = 0;
  for (std::int64_t r = 0; r < got.rows(); ++r)
    for (std::int64_t c = 0; c < got.cols(); ++c) {
      const double d = got.get(r, c) - want.get(r, c);
      num += d * d;
      den += want.get(r, c) * want.get(r, c);
    }
  return den == 0 ? std::sqrt(num) : std::sqrt(num / den);
}

/// Sequential reference for a distributed GEMM: the same alpha/beta formula
/// evaluated by the local kernel on the gathered operands.
inline HostMatrix sequential_gemm(double alpha, const HostMatrix& a, bool ta, const HostMatrix& b,
                                  bool tb, double beta, const HostMatrix& c0) {
  HostMatrix c(c0.rows(), c0.cols(), c0.precision());
  std::memcpy(c.raw(), c0.raw(), c0.byte_size());
  local_gemm(alpha, a.view(), ta, b.view(), tb, beta, c.view());
  return c;
}

inline bool gemm_matches(const HostMatrix& got, const HostMatrix& want, Precision p,
                         double& err_out, bool& used_rel) {
  if (p == Precision::Single32) {
    err_out = rel_frobenius(got, want);
    used_rel = true;
    return err_out <= 1e-5;
  }
  err_out = max_abs_diff(got, want);
  used_rel = false;
  if (p == Precision::Double64) return got.bitwise_equal(want);
  return got.bitwise_equal(want);  // half follows the widened-compute rule exactly
}

inline json pool_json(const Session& s) {
  json arr = json::array();
  for (int w = 0; w < s.worker_count(); ++w) {
    const auto st = s.worker_pool_stats(w);
    arr.push_back({{"fresh", st.fresh_allocations},
                   {"reused", st.reuses},
                   {"high_water_bytes", st.high_water}});
  }
  return arr;
}

struct GemmSetup {
  MatrixId a, b, c;
  HostMatrix ha, hb, hc;
  int inner;
};

inline GemmSetup make_ring_operands(Session& s, std::int64_t size, std::int64_t block,
                                    Precision prec) {
  const int P = s.worker_count();
  const int nbr = static_cast<int>((size + block - 1) / block);
  GemmSetup g{0, 0, 0, HostMatrix(), HostMatrix(), HostMatrix(), nbr / P};
  auto la = make_layout(LayoutKind::RowBlocks1D, size, size, block, size, P);
  const std::int64_t strip = (size + P - 1) / P;
  auto lbc = make_layout(LayoutKind::ColBlocks1D, size, size, size, strip, P);
  g.a = s.create_matrix(la, prec, FillKind::SeededRandom);
  g.b = s.create_matrix(lbc, prec, FillKind::SeededRandom);
  g.c = s.create_matrix(lbc, prec, FillKind::Zeros);
  g.ha = s.gather(g.a);
  g.hb = s.gather(g.b);
  g.hc = s.gather(g.c);
  return g;
}

inline bool ring_eligible(std::int64_t size, std::int64_t block, int workers) {
  const int nbr = static_cast<int>((size + block - 1) / block);
  return nbr % workers == 0;
}

/// Modeled makespan of the executed ring schedule with the session's cost
/// model and the configured sustained compute rate.
inline double ring_makespan(const RunConfig& cfg, std::int64_t size, std::int64_t block, int inner,
                            Precision prec, bool broadcast) {
  const int P = cfg.workers;
  const double esize = static_cast<double>(byte_width(prec));
  const double strip = static_cast<double>((size + P - 1) / P);
  auto bytes = [&](int, int) {
    return static_cast<double>(block) * static_cast<double>(size) * esize + kMessageHeaderBytes;
  };
  auto compute = [&](int, int, int) {
    return gemm_compute_us(static_cast<double>(block), strip, static_cast<double>(size),
                           cfg.flops_rate);
  };
  const auto acts = broadcast ? build_broadcast_gemm_schedule(P, inner, bytes, compute)
                              : build_cyclic_gemm_schedule(P, inner, bytes, compute);
  return simulate_schedule(acts, load_cost_model(cfg), load_topology(cfg)).makespan_us;
}

inline double trace_makespan(const RunConfig& cfg, const std::vector<TransferRecord>& recs) {
  const auto acts = build_schedule_from_trace(recs);
  if (acts.empty()) return 0;
  return simulate_schedule(acts, load_cost_model(cfg), load_topology(cfg)).makespan_us;
}

}  // namespace detail

/// Runs one (op, size, block) configuration in a fresh session and reports.
inline json run_one(const RunConfig& cfg, const std::string& op, std::int64_t size,
                    std::int64_t block, std::string* trace_out) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  json rep = {{"op", op},
              {"workers", cfg.workers},
              {"size", size},
              {"block", block},
              {"layout", layout_kind_name(cfg.layout)},
              {"precision", precision_name(cfg.precision)},
              {"seed", cfg.seed},
              {"deterministic", cfg.deterministic}};
  auto s = detail::make_session(cfg, mix64(static_cast<std::uint64_t>(size),
                                           static_cast<std::uint64_t>(block)));
  bool pass = true;
  const int P = cfg.workers;

  if (op == "cyclic_gemm" || op == "broadcast_gemm") {
    if (!detail::ring_eligible(size, block, P)) {
      rep["skipped"] = "layout not coverable by a ring plan";
    } else {
      auto g = detail::make_ring_operands(*s, size, block, cfg.precision);
      if (op == "cyclic_gemm") s->cyclic_gemm(1.0, g.a, g.b, 0.0, g.c, false, false, false);
      else s->broadcast_gemm_reference(1.0, g.a, g.b, 0.0, g.c, false, false);
      const HostMatrix got = s->gather(g.c);
      const HostMatrix want = detail::sequential_gemm(1.0, g.ha, false, g.hb, false, 0.0, g.hc);
      double err = 0;
      bool rel = false;
      pass = detail::gemm_matches(got, want, cfg.precision, err, rel);
      rep[rel ? "rel_fro_err" : "max_abs_err"] = err;
      rep["modeled_makespan_us"] =
          detail::ring_makespan(cfg, size, block, g.inner, cfg.precision, op == "broadcast_gemm");
    }
  } else if (op == "general_gemm") {
    const LayoutKind kinds[] = {LayoutKind::RowBlocks1D, LayoutKind::ColBlocks1D,
                                LayoutKind::RowCyclic1D, LayoutKind::Checkerboard2D};
    auto next = [&](LayoutKind k, int step) {
      for (int i = 0; i < 4; ++i)
        if (kinds[i] == k) return kinds[(i + step) % 4];
      return kinds[step % 4];
    };
    auto la = make_layout(cfg.layout, size, size, block, block, P);
    auto lb = make_layout(next(cfg.layout, 1), size, size, block, block, P);
    auto lc = make_layout(next(cfg.layout, 2), size, size, block, block, P);
    MatrixId a = s->create_matrix(la, cfg.precision, FillKind::SeededRandom);
    MatrixId b = s->create_matrix(lb, cfg.precision, FillKind::SeededRandom);
    MatrixId c = s->create_matrix(lc, cfg.precision, FillKind::Zeros);
    HostMatrix ha = s->gather(a), hb = s->gather(b), hc = s->gather(c);
    s->general_gemm(1.0, a, b, 0.0, c, false, false);
    const HostMatrix got = s->gather(c);
    const HostMatrix want = detail::sequential_gemm(1.0, ha, false, hb, false, 0.0, hc);
    double err = 0;
    bool rel = false;
    pass = detail::gemm_matches(got, want, cfg.precision, err, rel);
    rep[rel ? "rel_fro_err" : "max_abs_err"] = err;
    rep["modeled_makespan_us"] = detail::trace_makespan(cfg, s->trace().snapshot());
  } else if (op == "cached_backward_gemm") {
    if (!detail::ring_eligible(size, block, P)) {
      rep["skipped"] = "layout not coverable by a ring plan";
    } else {
      auto g = detail::make_ring_operands(*s, size, block, cfg.precision);
      s->cyclic_gemm(1.0, g.a, g.b, 0.0, g.c, false, false, true);  // forward pass, caching A
      const std::int64_t strip = (size + P - 1) / P;
      auto lbc = make_layout(LayoutKind::ColBlocks1D, size, size, size, strip, P);
      MatrixId dy = s->create_matrix(lbc, cfg.precision, FillKind::SeededRandom);
      MatrixId dx = s->create_matrix(lbc, cfg.precision, FillKind::Zeros);
      HostMatrix hdy = s->gather(dy);
      const std::size_t before = s->trace().size();
      s->cached_backward_gemm(g.a, dy, dx);
      const std::size_t backward_transfers = s->trace().size() - before;
      rep["backward_transfers"] = backward_transfers;
      const HostMatrix got = s->gather(dx);
      const HostMatrix want =
          detail::sequential_gemm(1.0, g.ha, false, hdy, false, 0.0, s->gather(dx));
      double err = 0;
      bool rel = false;
      const bool value_ok = detail::gemm_matches(got, want, cfg.precision, err, rel);
      rep[rel ? "rel_fro_err" : "max_abs_err"] = err;
      pass = value_ok && backward_transfers == 0;
      rep["modeled_makespan_us"] = 0.0;
    }
  } else if (op == "replicate") {
    auto layout = make_layout(cfg.layout, size, size, block, block, P);
    MatrixId m = s->create_matrix(layout, cfg.precision, FillKind::SeededRandom);
    s->replicate(m, true);
    const HostMatrix ref = s->gather(m);
    for (int w = 0; w < P && pass; ++w) pass = s->replica_read(m, w).bitwise_equal(ref);
    rep["modeled_makespan_us"] = detail::trace_makespan(cfg, s->trace().snapshot());
  } else if (op == "reshape") {
    auto src_layout = make_layout(cfg.layout, size, size, block, block, P);
    auto dst_layout =
        make_layout(LayoutKind::ColBlocks1D, size, size, size, (size + P - 1) / P, P);
    MatrixId src = s->create_matrix(src_layout, cfg.precision, FillKind::SeededRandom);
    const HostMatrix before = s->gather(src);
    MatrixId dst = s->reshape(src, dst_layout, cfg.precision);
    pass = s->gather(dst).bitwise_equal(before);
    if (cfg.precision == Precision::Single32) {
      // narrowing remap: half the payload of the same-layout remap
      auto payload_since = [&](std::size_t from) {
        std::uint64_t sum = 0;
        for (const auto& r : s->trace().snapshot())
          if (r.seq >= from && r.op_tag == "reshape") sum += r.payload_bytes;
        return sum;
      };
      const std::size_t t0n = s->trace().size();
      MatrixId redo = s->reshape(src, dst_layout, Precision::Single32);
      const std::uint64_t full = payload_since(t0n);
      const std::size_t t1n = s->trace().size();
      MatrixId narrow = s->reshape(src, dst_layout, Precision::Half16);
      const std::uint64_t halfp = payload_since(t1n);
      pass = pass && (halfp * 2 == full);
      HostMatrix rounded(size, size, Precision::Half16);
      convert_precision(before.view(), rounded.view());
      pass = pass && s->gather(narrow).bitwise_equal(rounded);
      (void)redo;
      rep["narrow_payload_bytes"] = halfp;
      rep["full_payload_bytes"] = full;
    }
    rep["modeled_makespan_us"] = detail::trace_makespan(cfg, s->trace().snapshot());
  } else if (op == "add_row_col_sum") {
    auto layout = make_layout(cfg.layout, size, size, block, block, P);
    MatrixId m = s->create_matrix(layout, cfg.precision, FillKind::SeededRandom);
    const HostMatrix host = s->gather(m);
    const HostMatrix d1 = s->gather(s->add_row_col_sum(m, Axis::Rows, true));
    const HostMatrix d2 = s->gather(s->add_row_col_sum(m, Axis::Rows, true));
    pass = d1.bitwise_equal(d2);
    const HostMatrix nd = s->gather(s->add_row_col_sum(m, Axis::Rows, false));
    double max_err = 0;
    for (std::int64_t i = 0; i < size && pass; ++i) {
      double exact = 0, sum_abs = 0;
      for (std::int64_t j = 0; j < size; ++j) {
        exact += host.get(i, j);
        sum_abs += std::abs(host.get(i, j));
      }
      // float accumulation plus roundings of the stored/transferred partials
      const double acc_unit = cfg.precision == Precision::Double64 ? 0x1.0p-53 : 0x1.0p-24;
      const double store_unit = cfg.precision == Precision::Half16 ? 0x1.0p-11 : acc_unit;
      const double bound = (2.0 * static_cast<double>(size) * acc_unit + 4.0 * store_unit) * sum_abs;
      max_err = std::max(max_err, std::abs(nd.get(i, 0) - exact));
      pass = pass && std::abs(d1.get(i, 0) - exact) <= bound &&
             std::abs(nd.get(i, 0) - exact) <= bound;
    }
    rep["max_abs_err"] = max_err;
    rep["modeled_makespan_us"] = detail::trace_makespan(cfg, s->trace().snapshot());
  } else if (op == "scatter_gather") {
    auto layout = make_layout(cfg.layout, size, size, block, block, P);
    MatrixId m = s->create_matrix(layout, cfg.precision, FillKind::Zeros);
    HostMatrix host(size, size, cfg.precision);
    std::uint64_t st = mix64(cfg.seed, 0xAB);
    for (std::int64_t i = 0; i < size * size; ++i) {
      st = mix64(st);
      host.set(i / size, i % size, 2.0 * u64_to_unit_double(st) - 1.0);
    }
    s->scatter(m, host);
    pass = s->gather(m).bitwise_equal(host);
    rep["modeled_makespan_us"] = 0.0;
  } else if (op == "checkpoint_restore") {
    auto layout = make_layout(cfg.layout, size, size, block, block, P);
    MatrixId m1 = s->create_matrix(layout, cfg.precision, FillKind::SeededRandom);
    MatrixId m2 = s->create_matrix(layout, Precision::Double64, FillKind::SeededRandom);
    const std::string path = "/tmp/gridgemm_harness_" + std::to_string(size) + "_" +
                             std::to_string(block) + ".ckpt";
    s->checkpoint(path);
    auto r = Session::restore(path);
    pass = r->gather(m1).bitwise_equal(s->gather(m1)) && r->gather(m2).bitwise_equal(s->gather(m2));
    std::remove(path.c_str());
    rep["modeled_makespan_us"] = 0.0;
  } else if (op == "prefetch") {
    DatasetConfig dc;
    dc.feature_dim = static_cast<std::uint64_t>(size);
    dc.batch_size = static_cast<std::uint64_t>(2 * P);
    dc.element_count = dc.batch_size * 4;
    dc.seed = cfg.seed;
    const auto ds = s->register_dataset(dc);
    int batches = 0;
    while (auto id = s->prefetch_next_batch(ds)) {
      const HostMatrix got = s->gather(*id);
      for (std::int64_t j = 0; j < got.cols() && pass; ++j)
        for (std::int64_t f = 0; f < got.rows() && pass; ++f) {
          const std::uint64_t sample =
              static_cast<std::uint64_t>(batches) * dc.batch_size + static_cast<std::uint64_t>(j);
          const float want = static_cast<float>(
              dataset_value(dc.seed, sample, static_cast<std::uint64_t>(f), dc.feature_dim));
          pass = pass && got.view().typed<float>().at(f, j) == want;
        }
      ++batches;
    }
    pass = pass && batches == 4;
    rep["batches"] = batches;
    rep["modeled_makespan_us"] = 0.0;
  } else {
    throw ConfigError("unknown op: " + op);
  }

  std::uint64_t bytes_moved = 0;
  for (const auto& r : s->trace().snapshot()) bytes_moved += r.bytes;
  rep["transfers"] = s->trace().size();
  rep["bytes_moved"] = bytes_moved;
  rep["pool"] = detail::pool_json(*s);
  if (trace_out != nullptr) {
    std::ostringstream os;
    s->trace().dump_jsonl(os);
    *trace_out += os.str();
  }
  rep["pass"] = pass && !rep.contains("skipped");
  if (rep.contains("skipped")) rep["pass"] = true;  // skips are not failures
  const auto t1 = clock::now();
  rep["wall_ms"] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return rep;
}

inline SuiteResult run_suite(const RunConfig& cfg) {
  SuiteResult result;
  const auto& ops = cfg.ops.empty() ? all_ops() : cfg.ops;
  for (const auto& op : ops)
    for (std::int64_t size : cfg.sizes)
      for (std::int64_t block : cfg.blocks) {
        json rep = run_one(cfg, op, size, block, &result.trace_jsonl);
        if (!rep["pass"].get<bool>()) result.exit_code = 1;
        result.reports.push_back(std::move(rep));
      }
  return result;
}

/// Modeled cyclic-vs-broadcast comparison at one problem size.
inline json compare_schedules(const RunConfig& cfg, std::int64_t size, int inner) {
  const int P = cfg.workers;
  const double esize = static_cast<double>(byte_width(cfg.precision));
  const std::int64_t block_rows =
      std::max<std::int64_t>(1, size / (static_cast<std::int64_t>(P) * inner));
  const double block_bytes = static_cast<double>(block_rows * size) * esize + kMessageHeaderBytes;
  auto bytes = [&](int, int) { return block_bytes; };
  auto compute = [&](int, int, int) {
    return gemm_compute_us(static_cast<double>(block_rows),
                           static_cast<double>((size + P - 1) / P), static_cast<double>(size),
                           cfg.flops_rate);
  };
  const CostModel cost = detail::load_cost_model(cfg);
  const Topology topo = detail::load_topology(cfg);
  const auto cyc = simulate_schedule(build_cyclic_gemm_schedule(P, inner, bytes, compute), cost, topo);
  const auto bc =
      simulate_schedule(build_broadcast_gemm_schedule(P, inner, bytes, compute), cost, topo);
  return {{"size", size},
          {"workers", P},
          {"inner_blocks", inner},
          {"block_payload_bytes", block_bytes - kMessageHeaderBytes},
          {"cyclic_makespan_us", cyc.makespan_us},
          {"broadcast_makespan_us", bc.makespan_us},
          {"cyclic_max_link_concurrency", std::max(cyc.max_ingress_concurrency, 1)},
          {"broadcast_max_link_concurrency", std::max(bc.max_ingress_concurrency, 1)},
          {"cyclic_not_slower", cyc.makespan_us <= bc.makespan_us}};
}

/// Rows are matrix sizes, columns worker counts, entries modeled makespan of
/// the ring schedule. Flags size crossovers between worker counts: small
/// sizes favor fewer workers while large sizes favor more.
inline json emit_scaling_table(const RunConfig& cfg, const std::vector<std::int64_t>& sizes,
                               const std::vector<int>& worker_counts) {
  const CostModel cost = detail::load_cost_model(cfg);
  const double esize = static_cast<double>(byte_width(cfg.precision));
  json table = json::array();
  std::vector<std::vector<double>> mk(sizes.size());
  for (std::size_t si = 0; si < sizes.size(); ++si) {
    const auto size = static_cast<double>(sizes[si]);
    json row = {{"size", sizes[si]}};
    json cols = json::array();
    for (int P : worker_counts) {
      const double block_rows = size / P;
      auto bytes = [&](int, int) { return block_rows * size * esize + kMessageHeaderBytes; };
      auto compute = [&](int, int, int) {
        return gemm_compute_us(block_rows, size / P, size, cfg.flops_rate);
      };
      const auto r = simulate_schedule(build_cyclic_gemm_schedule(P, 1, bytes, compute), cost,
                                       Topology::single_group(P));
      mk[si].push_back(r.makespan_us);
      cols.push_back({{"workers", P}, {"makespan_us", r.makespan_us}});
    }
    row["entries"] = cols;
    table.push_back(row);
  }
  json crossovers = json::array();
  for (std::size_t i = 0; i < worker_counts.size(); ++i)
    for (std::size_t j = i + 1; j < worker_counts.size(); ++j) {
      bool small_favors_fewer = false, large_favors_more = false;
      for (std::size_t si = 0; si < sizes.size(); ++si) {
        if (mk[si][i] < mk[si][j]) small_favors_fewer = true;
        if (small_favors_fewer && mk[si][j] < mk[si][i]) large_favors_more = true;
      }
      crossovers.push_back({{"p_small", worker_counts[i]},
                            {"p_large", worker_counts[j]},
                            {"crossover", small_favors_fewer && large_favors_more}});
    }
  return {{"flops_rate", cfg.flops_rate},
          {"precision", precision_name(cfg.precision)},
          {"table", table},
          {"crossovers", crossovers}};
}

inline void write_reports(const SuiteResult& result, const RunConfig& cfg) {
  if (!cfg.report_path.empty()) {
    std::ofstream f(cfg.report_path, std::ios::trunc);
    if (!f) throw ConfigError("cannot open report file " + cfg.report_path);
    for (const auto& r : result.reports) f << r.dump() << '\n';
  }
  if (!cfg.trace_path.empty()) {
    std::ofstream f(cfg.trace_path, std::ios::trunc);
    if (!f) throw ConfigError("cannot open trace file " + cfg.trace_path);
    f << result.trace_jsonl;
  }
}

}  // namespace gridgemm::harness
