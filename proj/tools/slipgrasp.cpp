// slipgrasp: run single trials, learning runs, baselines and sweeps; summarize runs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "slipgrasp/config.hpp"
#include "slipgrasp/harness.hpp"

namespace fs = std::filesystem;
using namespace slipgrasp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitTrialFailure = 2;
constexpr int kExitInternal = 3;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  int jobs = 1;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg = load_config(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'", 0);
    set_config_value(cfg, detail::trim(std::string_view(kv).substr(0, eq)),
                     detail::trim(std::string_view(kv).substr(eq + 1)));
  }
  apply_seed_override(cfg);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what(), 0);
  }
  return cfg;
}

std::vector<MotionKind> parse_motions(const std::vector<std::string>& names) {
  std::vector<MotionKind> out;
  for (const auto& n : names) {
    if (n == "all") return {MotionKind::ZLift, MotionKind::XZCircle, MotionKind::YRotate};
    out.push_back(parse_motion(n));
  }
  return out;
}

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  body(os);
}

fs::path seed_dir(const fs::path& root, std::uint64_t seed) {
  return root / ("seed_" + std::to_string(seed));
}

int cmd_simulate(const Common& common, double force, int trial, const std::string& out) {
  RunConfig cfg = resolve_config(common);
  const double clamped = std::clamp(force, cfg.plan.force_min, cfg.plan.force_max);
  if (clamped != force)
    std::cerr << "warning: force " << force << " N outside [" << cfg.plan.force_min << ", "
              << cfg.plan.force_max << "] N, clamped to " << clamped << " N\n";
  cfg.controller = ControllerKind::Fixed;
  cfg.fixed_force = clamped;
  FixedForceController ctl(clamped, cfg.plan);
  const TrialRecord rec = run_trial(cfg, ctl, trial, cfg.seed);
  if (out.empty() || out == "-") {
    write_trial_csv(std::cout, rec);
  } else {
    write_file(out, [&](std::ostream& os) { write_trial_csv(os, rec); });
  }
  std::cerr << to_string(rec.outcome) << " after " << rec.duration << " s, slippage "
            << rec.slippage_mm() << " mm\n";
  return rec.outcome == Outcome::Success ? kExitOk : kExitTrialFailure;
}

int cmd_learn(const Common& common, const std::string& out, const std::string& controller,
              const std::optional<double>& gamma, int seeds) {
  RunConfig cfg = resolve_config(common);
  if (!controller.empty()) cfg.controller = parse_controller(controller);
  if (gamma) cfg.gamma = *gamma;
  if (seeds > 0) cfg.seeds = seeds;
  cfg.validate();

  RunStorage base;
  base.config_text = format_config(cfg);
  base.config_hash = config_hash(cfg);
  std::vector<RunSummary> results(cfg.seeds);
  parallel_for(cfg.seeds, common.jobs, [&](int i) {
    const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(i);
    RunStorage st = base;
    st.dir = seed_dir(out, seed);
    results[i] = run_mbrl(cfg, seed, &st);
  });

  for (const auto& r : results) {
    const auto& last = r.trials.back();
    std::printf("seed %llu: %zu trials, %d samples, last trial %s after %.1f s\n",
                static_cast<unsigned long long>(r.seed), r.trials.size(), r.samples,
                to_string(last.outcome), last.duration);
  }
  return kExitOk;
}

int cmd_baseline(const Common& common, const std::string& out, const std::vector<double>& gammas,
                 const std::vector<std::string>& motion_names, int trials) {
  const RunConfig cfg = resolve_config(common);
  const auto motions = parse_motions(motion_names);
  struct Job {
    double gamma;
    MotionKind motion;
    int trial;
  };
  std::vector<Job> jobs;
  for (double g : gammas)
    for (MotionKind m : motions)
      for (int t = 1; t <= trials; ++t) jobs.push_back({g, m, t});
  std::vector<TrialRecord> recs(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), common.jobs, [&](int i) {
    RunConfig c = cfg;
    c.controller = ControllerKind::Feedback;
    c.gamma = jobs[i].gamma;
    c.motion.kind = jobs[i].motion;
    FeedbackController ctl(c.gamma, c.plan, c.explore_force_max);
    const std::uint64_t seed = derive_seed({cfg.seed, static_cast<std::uint64_t>(c.motion.kind)});
    recs[i] = run_trial(c, ctl, jobs[i].trial, seed);
  });
  write_file(fs::path(out) / "baseline.csv", [&](std::ostream& os) {
    os << "gamma,motion,trial,outcome,duration_s,slip_mm,median_mass_kg\n";
    for (std::size_t i = 0; i < jobs.size(); ++i)
      os << format_number(jobs[i].gamma) << ',' << to_string(jobs[i].motion) << ',' << jobs[i].trial
         << ',' << to_string(recs[i].outcome) << ',' << format_number(recs[i].duration) << ','
         << format_number(recs[i].slippage_mm()) << ','
         << format_number(recs[i].median_mass.value_or(kNaN)) << '\n';
  });
  for (double g : gammas) {
    std::printf("gamma %g:", g);
    for (MotionKind m : motions) {
      int ok = 0, n = 0;
      for (std::size_t i = 0; i < jobs.size(); ++i)
        if (jobs[i].gamma == g && jobs[i].motion == m) {
          ++n;
          ok += recs[i].outcome == Outcome::Success;
        }
      std::printf("  %s %d/%d", to_string(m), ok, n);
    }
    std::printf("\n");
  }
  return kExitOk;
}

int cmd_sweep(const Common& common, const std::string& out, const std::vector<double>& masses,
              const std::vector<std::string>& motion_names, std::vector<double> forces, int trials) {
  const RunConfig cfg = resolve_config(common);
  if (forces.empty()) forces = default_sweep_forces();
  const auto motions = parse_motions(motion_names);
  const SweepTable table = fixed_force_sweep(cfg, masses, motions, forces, trials, common.jobs);
  const fs::path dir(out);
  write_file(dir / "sweep_cells.csv", [&](std::ostream& os) { write_sweep_cells(os, table); });
  write_file(dir / "sweep_trials.csv", [&](std::ostream& os) { write_sweep_trials(os, table); });
  const auto report = mass_vs_slip_analysis(table.trials);
  write_file(dir / "mass_report.csv", [&](std::ostream& os) { write_mass_report(os, report); });
  for (double m : masses)
    for (MotionKind k : motions)
      if (const auto f = table.minimizing_force(m, k))
        std::printf("%g kg %s: slippage minimized at %g N\n", m, to_string(k), *f);
  for (const auto& r : report)
    for (const auto& n : r.notes) std::fprintf(stderr, "%g kg: %s\n", r.mass, n.c_str());
  return kExitOk;
}

int cmd_analyze(const std::vector<std::string>& dirs, const std::string& out, double step) {
  std::vector<std::string> missing;
  std::vector<RunCurves> runs;
  for (const auto& d : dirs) {
    // A learn output root holds one directory per seed.
    if (!fs::exists(fs::path(d) / "manifest.json") && fs::is_directory(d)) {
      std::vector<fs::path> sub;
      for (const auto& e : fs::directory_iterator(d))
        if (e.is_directory() && fs::exists(e.path() / "manifest.json")) sub.push_back(e.path());
      std::sort(sub.begin(), sub.end());
      if (!sub.empty()) {
        for (const auto& s : sub) runs.push_back(load_run_curves(s, missing));
        continue;
      }
    }
    runs.push_back(load_run_curves(d, missing));
  }
  for (const auto& m : missing) std::cerr << "missing: " << m << '\n';
  std::erase_if(runs, [](const RunCurves& r) { return r.trials.empty(); });
  if (runs.empty()) {
    std::cerr << "no readable runs\n";
    return kExitUsage;
  }
  const auto keys = analysis_grid(runs, step);
  const fs::path dir(out);
  write_file(dir / "duration.csv", [&](std::ostream& os) {
    write_curve_table(os, runs, keys, &RunTrialStats::duration, "duration_s");
  });
  write_file(dir / "mass_error.csv", [&](std::ostream& os) {
    write_curve_table(os, runs, keys, &RunTrialStats::mass_error, "mass_error_kg");
  });
  write_file(dir / "force.csv", [&](std::ostream& os) { write_force_table(os, runs, keys); });
  std::printf("%zu runs, %zu keys, tables in %s\n", runs.size(), keys.size(), dir.string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tactile grasp-force learning experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("-c,--config", common.config_path, "key = value config file");
  app.add_option("--set", common.overrides, "override one key (key=value), repeatable");
  app.add_option("-j,--jobs", common.jobs, "parallel runs")->check(CLI::PositiveNumber);

  auto* print_defaults = app.add_subcommand("print-defaults", "print every key with its default");

  auto* simulate = app.add_subcommand("simulate", "one fixed-force trial to CSV");
  double force = 15.0;
  int trial = 1;
  std::string sim_out;
  simulate->add_option("--force", force, "grasp force, N")->required();
  simulate->add_option("--trial", trial, "trial index (selects the physics seed)");
  simulate->add_option("-o,--out", sim_out, "CSV path, default stdout");

  auto* learn = app.add_subcommand("learn", "learn-from-scratch runs, one directory per seed");
  std::string learn_out = "runs";
  std::string controller;
  std::optional<double> gamma;
  int seeds = 0;
  learn->add_option("-o,--out", learn_out, "output root");
  learn->add_option("--controller", controller, "mbrl | feedback | fixed");
  learn->add_option("--gamma", gamma, "feedback gain");
  learn->add_option("--seeds", seeds, "number of runs (default run.seeds)");

  auto* baseline = app.add_subcommand("baseline", "feedback controller over gains and motions");
  std::string base_out = "baseline";
  std::vector<double> gammas{1, 2, 3, 4, 5};
  std::vector<std::string> base_motions{"all"};
  int base_trials = 3;
  baseline->add_option("-o,--out", base_out, "output directory");
  baseline->add_option("--gammas", gammas, "gains")->delimiter(',');
  baseline->add_option("--motions", base_motions, "motions or 'all'")->delimiter(',');
  baseline->add_option("--trials", base_trials, "trials per cell");

  auto* sweep = app.add_subcommand("sweep", "fixed-force slippage sweep");
  std::string sweep_out = "sweep";
  std::vector<double> masses{0.1, 0.5, 0.9};
  std::vector<std::string> sweep_motions{"all"};
  std::vector<double> forces;
  int sweep_trials = 10;
  sweep->add_option("-o,--out", sweep_out, "output directory");
  sweep->add_option("--masses", masses, "kg")->delimiter(',');
  sweep->add_option("--motions", sweep_motions, "motions or 'all'")->delimiter(',');
  sweep->add_option("--forces", forces, "N, default 1,3,...,29")->delimiter(',');
  sweep->add_option("--trials", sweep_trials, "trials per cell");

  auto* analyze = app.add_subcommand("analyze", "learning-curve tables from run directories");
  std::vector<std::string> run_dirs;
  std::string analyze_out = "analysis";
  double step = 10.0;
  analyze->add_option("runs", run_dirs, "run directories or learn output roots")->required();
  analyze->add_option("-o,--out", analyze_out, "output directory");
  analyze->add_option("--step", step, "key spacing, seconds of collected data")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*print_defaults) {
      std::cout << format_config(resolve_config(common), true);
      return kExitOk;
    }
    if (*simulate) return cmd_simulate(common, force, trial, sim_out);
    if (*learn) return cmd_learn(common, learn_out, controller, gamma, seeds);
    if (*baseline) return cmd_baseline(common, base_out, gammas, base_motions, base_trials);
    if (*sweep) return cmd_sweep(common, sweep_out, masses, sweep_motions, forces, sweep_trials);
    if (*analyze) return cmd_analyze(run_dirs, analyze_out, step);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitUsage;
}
