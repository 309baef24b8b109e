#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "iontrace/scenario.hpp"

namespace {

constexpr const char* kEnvPrefix = "IONTRACE_";

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw iontrace::ParameterError("cannot read file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

iontrace::scenario::Scenario load(const std::string& scenario_path) {
  if (scenario_path.empty())
    throw iontrace::ParameterError("--scenario is required (or " +
                                   std::string(kEnvPrefix) + "SCENARIO)");
  // A preset name is accepted in place of a file path.
  for (const auto& name : iontrace::scenario::preset_names())
    if (name == scenario_path)
      return iontrace::scenario::parse_scenario(
          iontrace::scenario::preset(name));
  return iontrace::scenario::parse_scenario(read_file(scenario_path));
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"iontrace: deterministic single-ion source simulator"};
  app.footer("Environment overrides: " + std::string(kEnvPrefix) +
             "SCENARIO, " + kEnvPrefix + "OUT, " + kEnvPrefix + "SEED, " +
             kEnvPrefix + "WORKERS, " + kEnvPrefix + "CACHE.\n"
             "Exit codes: 0 success, 2 scenario schema error, 3 solver error.");
  app.require_subcommand(1);

  std::string scenario_path, out_dir = ".", cache_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int workers = 1;

  auto add_common = [&](CLI::App* cmd, bool needs_scenario) {
    if (needs_scenario)
      cmd->add_option("--scenario", scenario_path,
                      "scenario file path or preset name")
          ->envname(std::string(kEnvPrefix) + "SCENARIO");
    cmd->add_option("--out", out_dir, "output directory")
        ->envname(std::string(kEnvPrefix) + "OUT");
    cmd->add_option("--seed", seed, "override the scenario seed")
        ->envname(std::string(kEnvPrefix) + "SEED")
        ->each([&](const std::string&) { seed_set = true; });
    cmd->add_option("--workers", workers, "worker thread count")
        ->envname(std::string(kEnvPrefix) + "WORKERS");
    cmd->add_option("--cache", cache_dir, "field-basis cache directory")
        ->envname(std::string(kEnvPrefix) + "CACHE");
  };

  auto* solve = app.add_subcommand("solve", "solve and cache field bases");
  add_common(solve, true);
  auto* run = app.add_subcommand("run", "run the scenario ensemble and study");
  add_common(run, true);
  auto* sweep = app.add_subcommand("sweep", "run the scenario's sweep study");
  add_common(sweep, true);
  auto* optimize =
      app.add_subcommand("optimize", "run the scenario's optimize study");
  add_common(optimize, true);

  auto* preset = app.add_subcommand("preset", "print a named preset scenario");
  std::string preset_name;
  preset->add_option("name", preset_name, "preset name (empty lists all)");

  auto* report = app.add_subcommand("report", "print the summary of a run");
  add_common(report, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (preset->parsed()) {
      if (preset_name.empty()) {
        for (const auto& n : iontrace::scenario::preset_names())
          std::puts(n.c_str());
        return 0;
      }
      std::fputs(iontrace::scenario::preset(preset_name).c_str(), stdout);
      return 0;
    }
    if (report->parsed()) {
      std::fputs(read_file(out_dir + "/summary.txt").c_str(), stdout);
      return 0;
    }

    iontrace::scenario::Scenario s = load(scenario_path);
    iontrace::scenario::RunOptions opts;
    opts.out_dir = out_dir;
    opts.workers = workers;
    opts.cache_dir = cache_dir;
    if (seed_set) opts.seed = seed;

    if (solve->parsed()) {
      const auto rep = iontrace::scenario::solve_only(s, opts);
      std::fputs(rep.summary.c_str(), stdout);
      return 0;
    }
    if (sweep->parsed() &&
        s.study.kind != iontrace::scenario::Study::Kind::Sweep)
      throw iontrace::ParameterError("scenario has no sweep study");
    if (optimize->parsed() &&
        s.study.kind != iontrace::scenario::Study::Kind::Optimize)
      throw iontrace::ParameterError("scenario has no optimize study");

    const auto rep = iontrace::scenario::run(s, opts);
    std::fputs(rep.summary.c_str(), stdout);
    return 0;
  } catch (const iontrace::scenario::ScenarioError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const iontrace::ParameterError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const iontrace::SolverError& e) {
    std::fprintf(stderr, "solver error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
