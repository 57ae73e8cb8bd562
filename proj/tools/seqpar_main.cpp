#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "seqpar/model.hpp"
#include "seqpar/report.hpp"

namespace {

using namespace seqpar;

struct Args {
  std::string config;
  std::string out;
  std::string engines;
  std::string layout;
  int64_t seed = -1;  // -1 keeps the config's seeds
  int sp = 0;         // 0 keeps the default sweep
};

RunConfig resolve_config(const Args& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.seed >= 0) {
    rc.model.seed = static_cast<uint64_t>(a.seed);
    rc.trainer.seed = static_cast<uint64_t>(a.seed);
  }
  return rc;
}

std::vector<Engine> parse_engine_list(const std::string& csv) {
  std::vector<Engine> out;
  size_t pos = 0;
  while (true) {
    const size_t comma = csv.find(',', pos);
    const std::string name =
        comma == std::string::npos ? csv.substr(pos) : csv.substr(pos, comma - pos);
    if (name.empty()) throw ConfigError("--engines has an empty entry");
    out.push_back(engine_from_string(name));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::ofstream open_out(const std::filesystem::path& dir, const std::string& name) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw ConfigError("cannot create output directory '" + dir.string() +
                      "': " + ec.message());
  }
  const std::filesystem::path path = dir / name;
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write '" + path.string() + "'");
  return os;
}

void print_failures(const std::vector<ReportRow>& rows) {
  for (const ReportRow& r : rows) {
    if (r.pass) continue;
    std::cout << "FAIL [" << r.engine << " sp=" << r.sp << "] " << r.metric << ": measured "
              << format_g17(r.measured) << ", expected " << format_g17(r.expected) << " +- "
              << format_g17(r.tolerance) << "\n";
  }
}

double max_loss_gap(const std::vector<StepReport>& a, const std::vector<StepReport>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i].loss - b[i].loss));
  return m;
}

int cmd_verify(const Args& a) {
  RunConfig rc = resolve_config(a);
  VerifyOptions opt;
  opt.seed = rc.trainer.seed;
  opt.scheduler = rc.trainer.scheduler;
  if (!a.engines.empty()) opt.engines = parse_engine_list(a.engines);
  if (a.sp > 0) opt.sps = {a.sp};
  const std::vector<ReportRow> rows = run_verify_suites(opt);
  {
    std::ofstream os = open_out(a.out, "verify_report.csv");
    write_report_csv(os, rows);
  }
  const int failures = count_failures(rows);
  std::cout << "verify: " << rows.size() << " checks, " << failures << " failed -> "
            << (std::filesystem::path(a.out) / "verify_report.csv").string() << "\n";
  print_failures(rows);
  return failures ? 1 : 0;
}

int cmd_train(const Args& a) {
  RunConfig rc = resolve_config(a);
  const std::vector<TrainBatch> dataset =
      build_dataset(rc.data, rc.trainer.task, rc.model.vocab, rc.trainer.seed);
  const std::vector<Engine> engines =
      a.engines.empty() ? parallel_engines() : parse_engine_list(a.engines);
  std::vector<int> sps;
  if (a.sp > 0) {
    sps = {a.sp};
  } else if (rc.trainer.sp > 1) {
    sps = {rc.trainer.sp};
  } else {
    sps = {2, 4};
  }

  TrainerConfig base = rc.trainer;
  if (!a.layout.empty()) base.layout = split_mode_from_string(a.layout);

  TrainerConfig ref_tc = base;
  ref_tc.engine = Engine::oracle;
  ref_tc.sp = 1;
  ref_tc.layout = SplitMode::naive;
  ref_tc.ulysses_degree = 0;
  ref_tc.ring_degree = 0;
  const TrainResult ref = run_training(rc.model, ref_tc, dataset);
  {
    std::ofstream os = open_out(a.out, "train_oracle_sp1.csv");
    write_loss_curve_csv(os, ref.steps);
  }
  std::vector<NamedCurve> curves{{"oracle sp=1", ref.steps}};

  int ran = 0;
  for (Engine e : engines) {
    if (e == Engine::oracle) continue;  // that is the baseline above
    for (int sp : sps) {
      TrainerConfig tc = base;
      tc.engine = e;
      tc.sp = sp;
      tc.ulysses_degree = 0;
      tc.ring_degree = 0;
      if (e == Engine::ring) {
        tc.layout = SplitMode::zigzag;
      } else if (e == Engine::usp) {
        tc.layout = SplitMode::usp;
        default_usp_degrees(sp, tc.ulysses_degree, tc.ring_degree);
      }
      TrainResult res;
      try {
        res = run_training(rc.model, tc, dataset);
      } catch (const ConfigError& err) {
        std::cout << "train: skip " << engine_name(e) << " sp=" << sp << ": " << err.what()
                  << "\n";
        continue;
      }
      const std::string label = std::string(engine_name(e)) + " sp=" + std::to_string(sp);
      const std::string file =
          std::string("train_") + engine_name(e) + "_sp" + std::to_string(sp) + ".csv";
      std::ofstream os = open_out(a.out, file);
      write_loss_curve_csv(os, res.steps);
      std::cout << "train: " << label
                << " max loss gap vs sp=1: " << format_g17(max_loss_gap(ref.steps, res.steps))
                << "\n";
      curves.push_back({label, res.steps});
      ++ran;
    }
  }
  {
    std::ofstream os = open_out(a.out, "train_overlay.svg");
    write_loss_overlay_svg(os, std::string(task_name(base.task)) + " loss overlay", curves);
  }
  std::cout << "train: " << (ran + 1) << " runs -> " << a.out << "\n";
  return ran > 0 ? 0 : 2;
}

int cmd_pitfall(const Args& a) {
  RunConfig rc = resolve_config(a);
  const std::vector<int> sps = a.sp > 0 ? std::vector<int>{a.sp} : std::vector<int>{2, 4};
  const std::vector<ReportRow> rows =
      pitfall_demo_rows(sps, rc.trainer.seed, rc.trainer.scheduler);
  {
    std::ofstream os = open_out(a.out, "pitfall_demo.csv");
    write_report_csv(os, rows);
  }
  const char* headline[] = {"grad-aware rank0 grad", "grad-aware rank1 grad",
                            "plain rank0 grad",      "plain rank1 grad",
                            "local oracle grad",     "sharded loss"};
  for (const char* metric : headline) {
    for (const ReportRow& r : rows) {
      if (r.metric == metric) {
        std::cout << metric << " = " << format_g17(r.measured) << "\n";
        break;
      }
    }
  }
  const int failures = count_failures(rows);
  std::cout << "pitfall-demo: " << rows.size() << " checks, " << failures << " failed\n";
  print_failures(rows);
  return failures ? 1 : 0;
}

int cmd_comm(const Args& a) {
  RunConfig rc = resolve_config(a);
  CommReport rep = comm_report(rc.trainer.seed, rc.trainer.scheduler);
  if (a.sp > 0) {
    std::erase_if(rep.grid, [&](const CommGridRow& r) { return r.sp != a.sp; });
    std::erase_if(rep.orderings, [&](const ReportRow& r) { return r.sp != a.sp; });
  }
  if (!a.engines.empty()) {
    std::set<std::string> keep;
    for (Engine e : parse_engine_list(a.engines)) keep.insert(engine_name(e));
    std::erase_if(rep.grid,
                  [&](const CommGridRow& r) { return keep.find(r.engine) == keep.end(); });
  }
  {
    std::ofstream os = open_out(a.out, "comm_report.csv");
    write_comm_csv(os, rep);
  }
  {
    std::ofstream os = open_out(a.out, "comm_assertions.csv");
    write_report_csv(os, rep.orderings);
  }
  {
    std::ofstream os = open_out(a.out, "comm_stats.csv");
    write_engine_stats_csv(os, rc.trainer.seed, rc.trainer.scheduler);
  }
  int mismatches = 0;
  for (const CommGridRow& r : rep.grid) {
    if (!r.pass) {
      ++mismatches;
      std::cout << "FAIL [" << r.engine << " sp=" << r.sp << " L=" << r.seq_len
                << "] measured " << r.measured_bytes << " bytes, closed form "
                << r.analytic_bytes << "\n";
    }
  }
  const int failed_orderings = count_failures(rep.orderings);
  std::cout << "comm-report: " << rep.grid.size() << " grid points (" << mismatches
            << " mismatches), " << rep.orderings.size() << " assertions (" << failed_orderings
            << " failed) -> " << a.out << "\n";
  print_failures(rep.orderings);
  return (mismatches + failed_orderings) ? 1 : 0;
}

int cmd_balance(const Args& a) {
  RunConfig rc = resolve_config(a);
  const std::vector<int64_t> lens{8, 16, 32, 64};
  std::vector<int> sps{1, 2, 4};
  if (a.sp > 0) {
    sps = a.sp == 1 ? std::vector<int>{1} : std::vector<int>{1, a.sp};
  }
  std::vector<BalanceRow> rows =
      balance_report(lens, sps, rc.model.heads, rc.model.head_dim);
  if (!a.layout.empty()) {
    const std::string name = split_mode_name(split_mode_from_string(a.layout));
    std::erase_if(rows, [&](const BalanceRow& r) { return r.layout != name && r.sp != 1; });
  }
  {
    std::ofstream os = open_out(a.out, "balance_report.csv");
    write_balance_csv(os, rows);
  }
  // zigzag rows must carry identical work per rank at each grid point
  std::map<std::pair<int, int64_t>, std::pair<int64_t, int64_t>> spread;
  for (const BalanceRow& r : rows) {
    if (r.layout != "zigzag") continue;
    auto key = std::make_pair(r.sp, r.seq_len);
    auto it = spread.find(key);
    if (it == spread.end()) {
      spread.emplace(key, std::make_pair(r.causal_pairs, r.causal_pairs));
    } else {
      it->second.first = std::min(it->second.first, r.causal_pairs);
      it->second.second = std::max(it->second.second, r.causal_pairs);
    }
  }
  int failures = 0;
  for (const auto& [key, mm] : spread) {
    if (mm.first != mm.second) {
      ++failures;
      std::cout << "FAIL zigzag imbalance at sp=" << key.first << " L=" << key.second << ": "
                << mm.first << ".." << mm.second << " pairs\n";
    }
  }
  std::cout << "balance-report: " << rows.size() << " rows, zigzag balanced at "
            << (spread.size() - static_cast<size_t>(failures)) << " of " << spread.size()
            << " grid points -> "
            << (std::filesystem::path(a.out) / "balance_report.csv").string() << "\n";
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic desk-scale simulator of sequence-parallel transformer training"};
  app.require_subcommand(1);

  Args a;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", a.config, "JSON run config with model/trainer/data sections")
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", a.out, "directory for CSV/SVG artifacts")->required();
    cmd->add_option("--seed", a.seed, "override the model and trainer seeds")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--engines", a.engines,
                    "comma-separated subset of ulysses,dummy_head,xtuner,ring,usp");
    cmd->add_option("--sp", a.sp, "restrict to one sequence-parallel degree")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--layout", a.layout, "shard layout: naive or zigzag");
  };

  CLI::App* verify =
      app.add_subcommand("verify", "parity, gradient, loss, and round-trip checks");
  CLI::App* train = app.add_subcommand(
      "train", "train unsharded and sharded on the same data, emit loss curves");
  CLI::App* pitfall =
      app.add_subcommand("pitfall-demo", "gradient numbers for both reduction wirings");
  CLI::App* comm =
      app.add_subcommand("comm-report", "measured vs closed-form communication bytes");
  CLI::App* balance =
      app.add_subcommand("balance-report", "per-rank causal work by shard layout");
  for (CLI::App* cmd : {verify, train, pitfall, comm, balance}) add_common(cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const auto t0 = std::chrono::steady_clock::now();
    int code = 0;
    if (verify->parsed()) {
      code = cmd_verify(a);
    } else if (train->parsed()) {
      code = cmd_train(a);
    } else if (pitfall->parsed()) {
      code = cmd_pitfall(a);
    } else if (comm->parsed()) {
      code = cmd_comm(a);
    } else if (balance->parsed()) {
      code = cmd_balance(a);
    }
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    std::fprintf(stderr, "elapsed %.2fs\n", dt.count());
    return code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
