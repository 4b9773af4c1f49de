// gridgemm command-line harness: correctness suites, cyclic-vs-broadcast
// schedule comparisons, and cost-model scaling sweeps.
// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "gridgemm/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"gridgemm: desk-scale distributed dense linear algebra runtime"};

  gridgemm::harness::RunConfig cfg;
  cfg.deterministic = false;  // GRIDGEMM_DETERMINISTIC=1 or --deterministic force the scheduler
  std::string layout_name = "rowblocks";
  std::string precision_name = "single";
  std::string compare_spec;
  std::string dump_cost_model;
  std::vector<int> scaling_workers = {1, 2, 4, 8};
  bool scaling_table = false;
  std::int64_t fault_seq = -1;

  app.add_option("--workers", cfg.workers, "number of workers")->check(CLI::PositiveNumber);
  app.add_option("--topology", cfg.topology_file, "topology config file");
  app.add_option("--cost-model", cfg.cost_model_file, "cost model CSV file");
  app.add_option("--sizes", cfg.sizes, "matrix sizes")->delimiter(',');
  app.add_option("--blocks", cfg.blocks, "block sizes")->delimiter(',');
  app.add_option("--layout", layout_name, "layout kind (rowblocks|colblocks|rowcyclic|checkerboard)");
  app.add_option("--precision", precision_name, "half|single|double");
  app.add_option("--seed", cfg.seed, "root seed");
  app.add_option("--op", cfg.ops, "operation(s) to run; default: all")->delimiter(',');
  app.add_flag("--deterministic", cfg.deterministic, "single-threaded deterministic scheduler");
  app.add_option("--trace", cfg.trace_path, "write the transfer trace (JSON lines)");
  app.add_option("--report", cfg.report_path, "write per-run reports (JSON lines)");
  app.add_option("--compare", compare_spec, "compare modeled schedules, e.g. cyclic,broadcast");
  app.add_flag("--scaling-table", scaling_table, "emit the modeled makespan scaling table");
  app.add_option("--scaling-workers", scaling_workers, "worker counts for the scaling table")
      ->delimiter(',');
  app.add_option("--flops-rate", cfg.flops_rate, "sustained local GEMM flops/s for makespans");
  app.add_option("--inject-fault", fault_seq, "flip one payload bit at this transfer sequence");
  app.add_option("--write-default-cost-model", dump_cost_model,
                 "write the built-in cost model tables as CSV and exit");

  CLI11_PARSE(app, argc, argv);

  try {
    cfg.layout = gridgemm::layout_kind_from_name(layout_name);
    cfg.precision = gridgemm::precision_from_name(precision_name);
    if (fault_seq >= 0) cfg.inject_fault_seq = static_cast<std::uint64_t>(fault_seq);

    if (!dump_cost_model.empty()) {
      std::ofstream f(dump_cost_model, std::ios::trunc);
      if (!f) throw gridgemm::ConfigError("cannot open " + dump_cost_model);
      gridgemm::CostModel::measured_default().to_csv(f);
      std::cout << "wrote " << dump_cost_model << "\n";
      return 0;
    }

    if (!compare_spec.empty()) {
      if (compare_spec != "cyclic,broadcast" && compare_spec != "broadcast,cyclic")
        throw gridgemm::ConfigError("--compare supports cyclic,broadcast");
      int exit_code = 0;
      for (std::int64_t size : cfg.sizes) {
        const auto row = gridgemm::harness::compare_schedules(cfg, size, 1);
        std::cout << row.dump() << "\n";
        if (!row["cyclic_not_slower"].get<bool>()) exit_code = 1;
      }
      return exit_code;
    }

    if (scaling_table) {
      const auto table = gridgemm::harness::emit_scaling_table(cfg, cfg.sizes, scaling_workers);
      std::cout << table.dump(2) << "\n";
      return 0;
    }

    const auto result = gridgemm::harness::run_suite(cfg);
    for (const auto& rep : result.reports) std::cout << rep.dump() << "\n";
    gridgemm::harness::write_reports(result, cfg);
    return result.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
