#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "adaptrial/study.hpp"

namespace {

int default_jobs() {
  if (const char* env = std::getenv("ADAPTRIAL_JOBS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end && *end == '\0' && v >= 1 && v <= 1024) return static_cast<int>(v);
    std::cerr << "warning: ignoring invalid ADAPTRIAL_JOBS value '" << env << "'\n";
  }
  return 1;
}

int cmd_run(const std::string& config_path, const adaptrial::RunOptions& opt) {
  adaptrial::StudyConfig cfg = adaptrial::parse_config_file(config_path);
  adaptrial::StudyResult result = adaptrial::run_study(cfg, opt);
  if (opt.format == "table")
    adaptrial::write_summary_table(std::cout, result.summaries);
  else
    adaptrial::write_summary_csv(std::cout, result.summaries);
  std::cerr << "wrote " << result.out_dir << "/summary.csv and " << result.summaries.size()
            << " scenario file(s)\n";
  if (result.exit_code != 0)
    std::cerr << "warning: " << result.invalid_cells
              << " cell(s) exceeded the estimation failure budget\n";
  return result.exit_code;
}

int cmd_validate(const std::string& config_path) {
  adaptrial::StudyConfig cfg = adaptrial::parse_config_file(config_path);
  auto scenarios = adaptrial::expand_grid(cfg);
  std::size_t cells = 0;
  for (const auto& sc : scenarios)
    for (const auto& de : sc.designs) cells += de.estimators.size();
  std::cout << "ok: study '" << cfg.name << "', " << scenarios.size() << " scenario(s), "
            << cfg.designs.size() << " design(s), " << cells << " summary cell(s), hash "
            << adaptrial::config_hash(cfg) << "\n";
  return 0;
}

int cmd_true_values(const std::string& config_path, bool force_mc, long long budget) {
  adaptrial::StudyConfig cfg = adaptrial::parse_config_file(config_path);
  adaptrial::TrueValueOptions opts;
  opts.force_mc = force_mc;
  if (budget > 0) opts.budget = budget;
  adaptrial::write_truth_table(std::cout, cfg, opts);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation engine for response-adaptive randomized trial designs"};
  app.require_subcommand(1);

  std::string config_path;
  adaptrial::RunOptions opt;
  opt.jobs = default_jobs();
  long long seed = -1;
  int reps = -1;

  auto* run = app.add_subcommand("run", "Run every scenario of a study and write summaries");
  run->add_option("config", config_path, "Study definition (TOML)")->required();
  run->add_option("--seed", seed, "Override the study seed");
  run->add_option("--reps", reps, "Override the replication count");
  run->add_option("--jobs", opt.jobs, "Worker threads (default ADAPTRIAL_JOBS or 1)");
  run->add_option("--out", opt.out_dir, "Output directory (default: out)");
  run->add_option("--format", opt.format, "Console report format: csv or table")
      ->check(CLI::IsMember({"csv", "table"}));

  auto* validate = app.add_subcommand("validate", "Check a study definition and report its shape");
  validate->add_option("config", config_path, "Study definition (TOML)")->required();

  bool force_mc = false;
  long long budget = 0;
  auto* truev = app.add_subcommand("true-values", "Print population-level targets for the grid");
  truev->add_option("config", config_path, "Study definition (TOML)")->required();
  truev->add_flag("--mc", force_mc, "Force Monte Carlo integration");
  truev->add_option("--budget", budget, "Monte Carlo draw budget");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(run)) {
      if (seed >= 0) opt.seed_override = static_cast<std::uint64_t>(seed);
      if (reps >= 1) opt.reps_override = reps;
      if (opt.jobs < 1) opt.jobs = 1;
      opt.log = &std::cerr;
      return cmd_run(config_path, opt);
    }
    if (app.got_subcommand(validate)) return cmd_validate(config_path);
    return cmd_true_values(config_path, force_mc, budget);
  } catch (const adaptrial::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
