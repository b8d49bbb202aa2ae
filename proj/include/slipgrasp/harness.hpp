#pragma once

// Experiment orchestration: single trials under a force controller, learn-from-
// scratch MBRL runs, fixed-force sweeps and the mass-vs-slip analysis.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "slipgrasp/dynamics.hpp"
#include "slipgrasp/energy.hpp"
#include "slipgrasp/planner.hpp"
#include "slipgrasp/sim.hpp"

namespace slipgrasp {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Seeds

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

// Stream tags so that each consumer of randomness draws from its own sequence.
enum SeedStream : std::uint64_t {
  kStreamPhysics = 1,
  kStreamReadout = 2,
  kStreamController = 3,
  kStreamFeatures = 4,
  kStreamPlanner = 5,
};

// ---------------------------------------------------------------------------
// Configuration

enum class ControllerKind { Mbrl, Fixed, Feedback };

inline const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::Mbrl: return "mbrl";
    case ControllerKind::Fixed: return "fixed";
    case ControllerKind::Feedback: return "feedback";
  }
  return "?";
}

inline ControllerKind parse_controller(const std::string& s) {
  if (s == "mbrl") return ControllerKind::Mbrl;
  if (s == "fixed") return ControllerKind::Fixed;
  if (s == "feedback") return ControllerKind::Feedback;
  throw std::invalid_argument("unknown controller '" + s + "'");
}

struct RunConfig {
  double mass = 0.5;
  MotionSpec motion;
  SimConfig sim;
  ModelConfig model;
  PlanConfig plan;

  ControllerKind controller = ControllerKind::Mbrl;
  double fixed_force = 15.0;
  double gamma = 3.0;

  std::uint64_t seed = 1;
  int seeds = 5;
  int budget = 1200;            // transitions per MBRL run
  int max_trials = 200;
  double target_duration = kTargetDuration;
  double noise_std = 0.0;       // N, readout force noise
  double initial_force = 5.0;   // N, held until the first plan arrives
  bool warm_start = true;       // MBRL trials open at the previous trial's median force
  double explore_force_max = 20.0;
  double deadline_ms = 100.0;
  bool enforce_deadline = false;

  void validate() const {
    if (!(mass > 0)) throw std::invalid_argument("object mass must be positive");
    motion.validate();
    sim.validate();
    plan.validate();
    if (budget < 1) throw std::invalid_argument("run budget must be >= 1");
    if (seeds < 1) throw std::invalid_argument("run seeds must be >= 1");
    if (!(target_duration > 0)) throw std::invalid_argument("target duration must be positive");
    if (!(noise_std >= 0)) throw std::invalid_argument("noise std must be >= 0");
    if (controller == ControllerKind::Feedback && !(gamma > 0))
      throw std::invalid_argument("feedback gamma must be positive");
  }
};

// ---------------------------------------------------------------------------
// Controllers

/// Everything a controller may see at one control tick. Built from the tactile
/// readout only.
struct TickContext {
  int tick = 0;
  double t_a = 0.0;
  Phase phase = Phase::Approach;
  std::optional<StateVec> state;
  double previous_force = 0.0;
  std::optional<double> mass_estimate;
  std::optional<double> median;
  std::vector<MotionCommand> nominal;  // ticks k .. k+H
};

struct Decision {
  double force = 0.0;
  double expected_loss = kNaN;
  bool fallback = false;
  bool deadline_miss = false;
  double plan_ms = 0.0;
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual void begin_trial(int /*trial*/, std::uint64_t /*seed*/) {}
  virtual Decision decide(const TickContext& ctx) = 0;
  virtual void end_trial() {}
};

inline double feedback_ctrl_step(double previous, double mass_estimate, double median, double gamma,
                                 const PlanConfig& cfg) {
  return clamp_force(previous + gamma * (mass_estimate - median) * 3.0, previous, cfg);
}

class FixedForceController : public Controller {
 public:
  FixedForceController(double force, const PlanConfig& cfg)
      : force_(std::clamp(force, cfg.force_min, cfg.force_max)) {}
  Decision decide(const TickContext&) override { return {force_}; }

 private:
  double force_;
};

class FeedbackController : public Controller {
 public:
  FeedbackController(double gamma, const PlanConfig& cfg, double initial_max)
      : gamma_(gamma), cfg_(cfg), initial_max_(initial_max) {}

  void begin_trial(int, std::uint64_t seed) override {
    std::mt19937_64 rng(seed);
    initial_ = std::uniform_real_distribution<double>(0.0, initial_max_)(rng);
  }

  Decision decide(const TickContext& ctx) override {
    if (ctx.tick == 0) return {initial_};
    if (ctx.mass_estimate && ctx.median)
      return {feedback_ctrl_step(ctx.previous_force, *ctx.mass_estimate, *ctx.median, gamma_, cfg_)};
    return {ctx.previous_force};
  }

 private:
  double gamma_;
  PlanConfig cfg_;
  double initial_max_;
  double initial_ = 0.0;
};

/// Random exploration on the first trial, ahead-planned pMPC afterwards.
class MbrlController : public Controller {
 public:
  MbrlController(const PlanConfig& cfg, double initial_force, double explore_max,
                 double deadline_ms, bool enforce)
      : cfg_(cfg),
        initial_force_(initial_force),
        explore_max_(explore_max),
        deadline_(std::chrono::microseconds(static_cast<std::int64_t>(deadline_ms * 1000.0))),
        enforce_(enforce) {}

  void set_model(std::shared_ptr<const LgmFfModel> model) { model_ = std::move(model); }
  void set_initial_force(double f) { initial_force_ = f; }
  bool exploring() const { return !model_; }

  void begin_trial(int, std::uint64_t seed) override {
    seed_ = seed;
    std::mt19937_64 rng(seed);
    explore_force_ = std::uniform_real_distribution<double>(0.0, explore_max_)(rng);
    ahead_ = std::make_unique<AheadPlanner>(deadline_, enforce_);
  }

  void end_trial() override { ahead_.reset(); }

  Decision decide(const TickContext& ctx) override {
    if (exploring()) return {explore_force_};

    Decision d;
    d.force = ctx.tick == 0 ? clamp_force(initial_force_, initial_force_, cfg_) : ctx.previous_force;
    if (ahead_->pending()) {
      const auto planned = ahead_->take();
      d.plan_ms = ahead_->last_elapsed_ms();
      if (!planned) {
        d.deadline_miss = true;
      } else {
        d.expected_loss = planned->expected_loss;
        d.fallback = planned->fallback;
        if (!planned->fallback) d.force = planned->applied;
      }
    }

    if (ctx.state && ctx.median && ctx.nominal.size() >= 2) {
      const MotionCommand& now = ctx.nominal.front();
      const StateVec next =
          model_->predict(*ctx.state, build_control(now.velocity, now.angular_velocity, d.force)).mean;
      std::vector<MotionCommand> ahead(ctx.nominal.begin() + 1, ctx.nominal.end());
      auto model = model_;
      const double prev = d.force;
      const double med = *ctx.median;
      const PlanConfig cfg = cfg_;
      const std::uint64_t seed = derive_seed({seed_, kStreamPlanner, static_cast<std::uint64_t>(ctx.tick)});
      ahead_->start([model, next, ahead = std::move(ahead), prev, med, cfg, seed] {
        return plan(*model, next, ahead, prev, med, cfg, seed);
      });
    }
    return d;
  }

 private:
  PlanConfig cfg_;
  double initial_force_;
  double explore_max_;
  std::chrono::microseconds deadline_;
  bool enforce_;
  std::shared_ptr<const LgmFfModel> model_;
  std::unique_ptr<AheadPlanner> ahead_;
  std::uint64_t seed_ = 0;
  double explore_force_ = 0.0;
};

// ---------------------------------------------------------------------------
// Trials

struct TickRow {
  double t_a = 0.0;
  Phase phase = Phase::Approach;
  std::array<Vec3, kFingers> forces{};
  double force = 0.0;
  double mass_estimate = kNaN;
  double median = kNaN;
  double slip_mm = 0.0;
  Outcome outcome = Outcome::Running;
  bool valid = false;
  int contacts = 0;
  std::array<double, kFingers> finger_slip_mm{};
  double expected_loss = kNaN;
  bool fallback = false;
  bool deadline_miss = false;
  double plan_ms = 0.0;
};

struct TrialRecord {
  std::vector<TickRow> rows;
  std::vector<Transition> transitions;
  Outcome outcome = Outcome::Failure;
  double duration = 0.0;
  std::string reason;
  std::optional<double> median_mass;

  double slippage_mm() const { return rows.empty() ? 0.0 : rows.back().slip_mm; }
};

/// Rotation for roll/pitch/yaw in the same ZYX convention as `roll_pitch_yaw`.
inline Mat3 rotation_from_rpy(const Vec3& rpy) {
  return (Eigen::AngleAxisd(rpy.z(), Vec3::UnitZ()) * Eigen::AngleAxisd(rpy.y(), Vec3::UnitY()) *
          Eigen::AngleAxisd(rpy.x(), Vec3::UnitX()))
      .toRotationMatrix();
}

inline std::vector<MotionCommand> nominal_window(double t_a, int count, double control_dt,
                                                 const MotionSpec& motion) {
  std::vector<MotionCommand> out;
  out.reserve(count);
  for (int k = 0; k < count; ++k) {
    const NominalMotion n = nominal_motion(t_a + k * control_dt, motion);
    out.push_back({n.velocity, n.angular_velocity});
  }
  return out;
}

/// Optional per-tick hook for tests: runs after the readout and before the
/// controller decides.
using TickHook = std::function<void(World&, int tick)>;

/// Runs one trial. Mass estimates always feed a per-trial median (recorded);
/// when `run_median` is given, control uses that longer-lived median instead.
inline TrialRecord run_trial(const RunConfig& cfg, Controller& controller, int trial,
                             std::uint64_t run_seed, MassEstimator* run_median = nullptr,
                             const TickHook& hook = {}) {
  TrialRecord rec;
  SimConfig sc = cfg.sim;
  sc.seed = derive_seed({run_seed, static_cast<std::uint64_t>(trial), kStreamPhysics});
  World world(sc, cfg.mass);
  std::mt19937_64 readout_rng(derive_seed({run_seed, static_cast<std::uint64_t>(trial), kStreamReadout}));
  controller.begin_trial(trial, derive_seed({run_seed, static_cast<std::uint64_t>(trial), kStreamController}));

  const double dtc = sc.control_dt;
  const double dtp = sc.physics_dt;
  const int substeps = sc.steps_per_tick();
  const int horizon = cfg.plan.horizon;

  auto finish = [&](Outcome o, const std::string& why) {
    rec.outcome = o;
    rec.reason = why;
    rec.duration = rec.rows.empty() ? 0.0 : rec.rows.back().t_a;
    controller.end_trial();
  };

  if (!world.approach()) {
    TickRow row;
    row.outcome = Outcome::Failure;
    row.contacts = world.contact_count();
    rec.rows.push_back(row);
    finish(Outcome::Failure, "approach timeout");
    return rec;
  }
  world.mark_grasp_start();

  auto contacts = contact_readout(world, cfg.noise_std, readout_rng);
  const GraspCentroid start = grasp_centroid(contacts);
  std::array<Vec3, kFingers> offsets;
  for (int i = 0; i < kFingers; ++i) offsets[i] = contacts[i].position - start.position;

  EnergyLedger ledger;
  MassEstimator estimator;
  MassEstimator& control_median = run_median ? *run_median : estimator;
  std::optional<GraspCentroid> prev_centroid = start;
  std::optional<StateVec> prev_state;
  ControlVec prev_control = ControlVec::Zero();
  double force = cfg.initial_force;
  std::array<FingerCommand, kFingers> cmds;
  for (int i = 0; i < kFingers; ++i) cmds[i].target = contacts[i].position;

  for (int tick = 0;; ++tick) {
    const double t_a = tick * dtc;
    TickRow row;
    row.t_a = t_a;
    row.phase = nominal_motion(t_a, cfg.motion).phase;

    if (tick > 0) contacts = contact_readout(world, cfg.noise_std, readout_rng);
    const auto centroid = try_grasp_centroid(contacts);
    std::optional<StateVec> state;
    std::optional<double> estimate;
    if (tick > 0) {
      const Vec3 applied = ledger.take_tick();
      if (centroid && prev_centroid) {
        const Vec4 retained = retained_power_massless(*prev_centroid, *centroid, sc.gravity, dtc);
        state = build_energy_state(applied, retained, centroid->orientation);
        if (const auto est = estimate_mass(applied, retained, cfg.plan.guard_eps)) {
          estimator.update(est->kg);
          if (run_median) run_median->update(est->kg);
          estimate = est->kg;
        }
      }
    }
    if (state && prev_state) rec.transitions.push_back({*prev_state, prev_control, *state});
    prev_centroid = centroid;

    for (int i = 0; i < kFingers; ++i) row.forces[i] = contacts[i].force;
    row.valid = state.has_value();
    row.contacts = world.contact_count();
    row.mass_estimate = estimate.value_or(kNaN);
    row.median = control_median.median().value_or(kNaN);
    row.slip_mm = world.slippage_mm();
    row.finger_slip_mm = world.finger_slip_mm();

    const Outcome outcome = check_outcome(world, t_a, cfg.target_duration);
    if (outcome != Outcome::Running) {
      row.force = force;
      row.outcome = outcome;
      rec.rows.push_back(row);
      rec.median_mass = estimator.median();
      finish(outcome, outcome == Outcome::Success ? "" : "object dropped");
      return rec;
    }

    if (hook) hook(world, tick);

    TickContext ctx;
    ctx.tick = tick;
    ctx.t_a = t_a;
    ctx.phase = row.phase;
    ctx.state = state;
    ctx.previous_force = force;
    ctx.mass_estimate = estimate;
    ctx.median = control_median.median();
    ctx.nominal = nominal_window(t_a, horizon + 1, dtc, cfg.motion);
    const Decision d = controller.decide(ctx);
    force = d.force;
    row.force = force;
    row.expected_loss = d.expected_loss;
    row.fallback = d.fallback;
    row.deadline_miss = d.deadline_miss;
    row.plan_ms = d.plan_ms;
    rec.rows.push_back(row);

    const MotionCommand& now = ctx.nominal.front();
    prev_control = build_control(now.velocity, now.angular_velocity, force);
    prev_state = state;

    if (centroid) {
      const auto ff = distribute_force(force, contacts, *centroid);
      for (int i = 0; i < kFingers; ++i)
        if (contacts[i].in_contact) cmds[i].feedforward = ff[i];
    }

    try {
      for (int s = 0; s < substeps; ++s) {
        const double t = t_a + s * dtp;
        if (cfg.sim.support_release >= 0.0 && t >= cfg.sim.support_release - 1e-12)
          world.retract_support();
        const NominalMotion n = nominal_motion(t, cfg.motion);
        const Mat3 rot = rotation_from_rpy(n.orientation);
        for (int i = 0; i < kFingers; ++i) {
          const Vec3 arm = rot * offsets[i];
          cmds[i].target = start.position + n.position + arm;
          cmds[i].target_velocity = n.velocity + n.angular_velocity.cross(arm);
        }
        world.step(cmds);
        ledger.integrate(contact_readout(world, cfg.noise_std, readout_rng), dtp);
      }
    } catch (const SimulationDiverged& e) {
      TickRow last = row;
      last.t_a = t_a + dtc;
      last.outcome = Outcome::Failure;
      rec.rows.push_back(last);
      rec.median_mass = estimator.median();
      finish(Outcome::Failure, e.what());
      return rec;
    }
  }
}

inline std::unique_ptr<Controller> make_controller(const RunConfig& cfg) {
  switch (cfg.controller) {
    case ControllerKind::Fixed:
      return std::make_unique<FixedForceController>(cfg.fixed_force, cfg.plan);
    case ControllerKind::Feedback:
      return std::make_unique<FeedbackController>(cfg.gamma, cfg.plan, cfg.explore_force_max);
    case ControllerKind::Mbrl:
      return std::make_unique<MbrlController>(cfg.plan, cfg.initial_force, cfg.explore_force_max,
                                              cfg.deadline_ms, cfg.enforce_deadline);
  }
  throw std::logic_error("unknown controller");
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr int kTrialSchemaVersion = 1;

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_trial_header(std::ostream& os) {
  os << "# slipgrasp trial schema " << kTrialSchemaVersion << '\n';
  os << "t_a,phase";
  for (int i = 1; i <= kFingers; ++i) os << ",f" << i << "x,f" << i << "y,f" << i << "z";
  os << ",F_star,m_tilde,med,slip_mm,outcome,valid,contacts";
  for (int i = 1; i <= kFingers; ++i) os << ",slip" << i << "_mm";
  os << ",expected_loss,plan_fallback,deadline_miss,plan_ms\n";
}

inline void write_trial_row(std::ostream& os, const TickRow& r) {
  os << format_number(r.t_a) << ',' << static_cast<int>(r.phase);
  for (const auto& f : r.forces)
    os << ',' << format_number(f.x()) << ',' << format_number(f.y()) << ',' << format_number(f.z());
  os << ',' << format_number(r.force) << ',' << format_number(r.mass_estimate) << ','
     << format_number(r.median) << ',' << format_number(r.slip_mm) << ',' << to_string(r.outcome)
     << ',' << (r.valid ? 1 : 0) << ',' << r.contacts;
  for (double s : r.finger_slip_mm) os << ',' << format_number(s);
  os << ',' << format_number(r.expected_loss) << ',' << (r.fallback ? 1 : 0) << ','
     << (r.deadline_miss ? 1 : 0) << ',' << format_number(r.plan_ms) << '\n';
}

inline void write_trial_csv(std::ostream& os, const TrialRecord& rec) {
  write_trial_header(os);
  for (const auto& r : rec.rows) write_trial_row(os, r);
}

inline void write_trial_csv(const std::filesystem::path& path, const TrialRecord& rec) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_trial_csv(os, rec);
}

/// Minimal reader for trial CSVs: header names mapped to numeric columns.
struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> cells;

  int index(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw std::runtime_error("missing column " + name);
    return static_cast<int>(it - columns.begin());
  }
  double number(std::size_t row, const std::string& name) const {
    const std::string& s = cells.at(row).at(index(name));
    if (s == "nan") return kNaN;
    return std::stod(s);
  }
  std::string text(std::size_t row, const std::string& name) const { return cells.at(row).at(index(name)); }
  std::size_t size() const { return cells.size(); }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(std::istream& is) {
  CsvTable t;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      t.columns = split_csv_line(line);
      header = true;
    } else {
      t.cells.push_back(split_csv_line(line));
    }
  }
  return t;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_csv(is);
}

// ---------------------------------------------------------------------------
// Datasets

inline void write_transitions(std::ostream& os, std::span<const Transition> data) {
  char buf[40];
  os << "slipgrasp-dataset 1 " << data.size() << '\n';
  auto put = [&](const auto& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%a", v(i));
      os << buf << ' ';
    }
  };
  for (const auto& t : data) {
    put(t.x);
    put(t.u);
    put(t.next);
    os << '\n';
  }
}

inline std::vector<Transition> read_transitions(std::istream& is) {
  std::string magic;
  int version = 0;
  std::size_t n = 0;
  if (!(is >> magic >> version >> n) || magic != "slipgrasp-dataset" || version != 1)
    throw std::runtime_error("not a slipgrasp dataset");
  std::vector<Transition> out(n);
  std::string tok;
  auto get = [&](auto& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (!(is >> tok)) throw std::runtime_error("truncated dataset");
      v(i) = std::strtod(tok.c_str(), nullptr);
    }
  };
  for (auto& t : out) {
    get(t.x);
    get(t.u);
    get(t.next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// MBRL runs

struct TrialSummary {
  int trial = 0;
  Outcome outcome = Outcome::Failure;
  double duration = 0.0;
  int samples = 0;
  int cumulative_samples = 0;
  double accumulated_s = 0.0;
  double median_mass = kNaN;
  double median_force = kNaN;
  double final_force = kNaN;
  double slip_mm = 0.0;
  std::string reason;
};

inline double median_of(std::vector<double> v) {
  std::erase_if(v, [](double x) { return std::isnan(x); });
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Linear-interpolated quantile of the non-NaN values.
inline double quantile_of(std::vector<double> v, double q) {
  std::erase_if(v, [](double x) { return std::isnan(x); });
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline TrialSummary summarize_trial(const TrialRecord& rec, int trial, int cumulative_before,
                                    double control_dt) {
  TrialSummary s;
  s.trial = trial;
  s.outcome = rec.outcome;
  s.duration = rec.duration;
  s.samples = static_cast<int>(rec.transitions.size());
  s.cumulative_samples = cumulative_before + s.samples;
  s.accumulated_s = s.cumulative_samples * control_dt;
  s.median_mass = rec.median_mass.value_or(kNaN);
  std::vector<double> forces;
  for (const auto& r : rec.rows) forces.push_back(r.force);
  s.median_force = median_of(forces);
  s.final_force = rec.rows.empty() ? kNaN : rec.rows.back().force;
  s.slip_mm = rec.slippage_mm();
  s.reason = rec.reason;
  return s;
}

struct RunSummary {
  std::uint64_t seed = 0;
  double mass = 0.0;
  std::vector<TrialSummary> trials;
  int samples = 0;
  TrialRecord last_trial;
};

inline void write_summary_header(std::ostream& os) {
  os << "trial,outcome,duration_s,samples,cumulative_samples,accumulated_s,median_mass_kg,"
        "median_force_N,final_force_N,slip_mm,reason\n";
}

inline void write_summary_row(std::ostream& os, const TrialSummary& s) {
  os << s.trial << ',' << to_string(s.outcome) << ',' << format_number(s.duration) << ','
     << s.samples << ',' << s.cumulative_samples << ',' << format_number(s.accumulated_s) << ','
     << format_number(s.median_mass) << ',' << format_number(s.median_force) << ','
     << format_number(s.final_force) << ',' << format_number(s.slip_mm) << ',' << s.reason << '\n';
}

inline nlohmann::json to_json(const TrialSummary& s) {
  return {{"trial", s.trial},          {"outcome", to_string(s.outcome)},
          {"duration", s.duration},    {"samples", s.samples},
          {"cumulative_samples", s.cumulative_samples},
          {"accumulated_s", s.accumulated_s},
          {"median_mass", std::isnan(s.median_mass) ? nlohmann::json() : nlohmann::json(s.median_mass)},
          {"median_force", std::isnan(s.median_force) ? nlohmann::json() : nlohmann::json(s.median_force)},
          {"final_force", std::isnan(s.final_force) ? nlohmann::json() : nlohmann::json(s.final_force)},
          {"slip_mm", s.slip_mm},      {"reason", s.reason}};
}

inline TrialSummary trial_summary_from_json(const nlohmann::json& j) {
  auto num = [&](const char* k) { return j.at(k).is_null() ? kNaN : j.at(k).get<double>(); };
  TrialSummary s;
  s.trial = j.at("trial").get<int>();
  const auto o = j.at("outcome").get<std::string>();
  s.outcome = o == "success" ? Outcome::Success : o == "running" ? Outcome::Running : Outcome::Failure;
  s.duration = j.at("duration").get<double>();
  s.samples = j.at("samples").get<int>();
  s.cumulative_samples = j.at("cumulative_samples").get<int>();
  s.accumulated_s = j.at("accumulated_s").get<double>();
  s.median_mass = num("median_mass");
  s.median_force = num("median_force");
  s.final_force = num("final_force");
  s.slip_mm = j.at("slip_mm").get<double>();
  s.reason = j.at("reason").get<std::string>();
  return s;
}

/// Where a run persists its progress. With an empty directory nothing is written.
struct RunStorage {
  std::filesystem::path dir;
  std::string config_text;
  std::string config_hash;
};

inline std::string trial_file_name(int trial) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "trial_%03d.csv", trial);
  return buf;
}

/// Learn-from-scratch loop: trial, append transitions, refit, until the sample
/// budget is met. Non-MBRL controllers run the same loop without a model.
/// With storage set, a manifest is rewritten after every completed trial and a
/// matching manifest found on entry resumes the run after its last trial.
inline RunSummary run_mbrl(const RunConfig& cfg, std::uint64_t run_seed,
                           const RunStorage* storage = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  RunSummary summary;
  summary.seed = run_seed;
  summary.mass = cfg.mass;

  std::vector<Transition> dataset;
  int first_trial = 1;
  if (storage && !storage->dir.empty()) {
    fs::create_directories(storage->dir);
    const fs::path manifest = storage->dir / "manifest.json";
    if (fs::exists(manifest)) {
      std::ifstream is(manifest);
      const auto j = nlohmann::json::parse(is);
      if (j.at("config_hash").get<std::string>() != storage->config_hash ||
          j.at("seed").get<std::uint64_t>() != run_seed)
        throw std::runtime_error("manifest in " + storage->dir.string() +
                                 " belongs to a different config or seed");
      for (const auto& t : j.at("trials")) summary.trials.push_back(trial_summary_from_json(t));
      std::ifstream ds(storage->dir / "dataset.txt");
      if (!ds) throw std::runtime_error("manifest present but dataset.txt missing");
      dataset = read_transitions(ds);
      first_trial = static_cast<int>(summary.trials.size()) + 1;
    }
  }

  // Control uses the median of every estimate collected in the run so far.
  MassEstimator run_median;
  if (first_trial > 1) {
    std::ifstream es(storage->dir / "mass_estimates.txt");
    if (!es) throw std::runtime_error("manifest present but mass_estimates.txt missing");
    std::string tok;
    while (es >> tok) run_median.update(std::strtod(tok.c_str(), nullptr));
  }
  auto controller = make_controller(cfg);
  auto* mbrl = dynamic_cast<MbrlController*>(controller.get());
  auto refit = [&] {
    if (!mbrl || dataset.empty()) return;
    ModelConfig mc = cfg.model;
    mc.seed = derive_seed({run_seed, kStreamFeatures});
    mbrl->set_model(std::make_shared<const LgmFfModel>(train(dataset, mc)));
  };
  refit();
  auto warm = [&] {
    if (mbrl && cfg.warm_start && !summary.trials.empty() && std::isfinite(summary.trials.back().median_force))
      mbrl->set_initial_force(summary.trials.back().median_force);
  };
  warm();

  auto persist = [&] {
    if (!storage || storage->dir.empty()) return;
    nlohmann::json j;
    j["format"] = "slipgrasp-run";
    j["version"] = 1;
    j["config_hash"] = storage->config_hash;
    j["seed"] = run_seed;
    j["mass_kg"] = cfg.mass;
    j["motion"] = to_string(cfg.motion.kind);
    j["controller"] = to_string(cfg.controller);
    j["control_dt"] = cfg.sim.control_dt;
    j["budget"] = cfg.budget;
    j["samples"] = static_cast<int>(dataset.size());
    j["complete"] = static_cast<int>(dataset.size()) >= cfg.budget;
    j["trials"] = nlohmann::json::array();
    for (const auto& t : summary.trials) j["trials"].push_back(to_json(t));
    {
      std::ofstream ds(storage->dir / "dataset.txt.tmp");
      write_transitions(ds, dataset);
    }
    fs::rename(storage->dir / "dataset.txt.tmp", storage->dir / "dataset.txt");
    {
      std::ofstream es(storage->dir / "mass_estimates.txt.tmp");
      char buf[40];
      for (double v : run_median.history()) {
        std::snprintf(buf, sizeof buf, "%a", v);
        es << buf << '\n';
      }
    }
    fs::rename(storage->dir / "mass_estimates.txt.tmp", storage->dir / "mass_estimates.txt");
    {
      std::ofstream os(storage->dir / "manifest.json.tmp");
      os << j.dump(2) << '\n';
    }
    fs::rename(storage->dir / "manifest.json.tmp", storage->dir / "manifest.json");
    std::ofstream sum(storage->dir / "summary.csv");
    write_summary_header(sum);
    for (const auto& t : summary.trials) write_summary_row(sum, t);
    std::ofstream conf(storage->dir / "config.txt");
    conf << storage->config_text;
  };

  for (int trial = first_trial;
       static_cast<int>(dataset.size()) < cfg.budget && trial <= cfg.max_trials; ++trial) {
    TrialRecord rec = run_trial(cfg, *controller, trial, run_seed, &run_median);
    const int before = static_cast<int>(dataset.size());
    dataset.insert(dataset.end(), rec.transitions.begin(), rec.transitions.end());
    summary.trials.push_back(summarize_trial(rec, trial, before, cfg.sim.control_dt));
    if (storage && !storage->dir.empty()) write_trial_csv(storage->dir / trial_file_name(trial), rec);
    refit();
    warm();
    persist();
    summary.last_trial = std::move(rec);
  }
  summary.samples = static_cast<int>(dataset.size());
  return summary;
}

// ---------------------------------------------------------------------------
// Parallel helpers

inline void parallel_for(int n, int jobs, const std::function<void(int)>& body) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Fixed-force sweep

struct SweepTrial {
  double mass = 0.0;
  MotionKind motion = MotionKind::ZLift;
  double force = 0.0;
  int trial = 0;
  Outcome outcome = Outcome::Failure;
  double duration = 0.0;
  double slip_mm = 0.0;
  double median_mass = kNaN;
};

struct SweepCell {
  double mass = 0.0;
  MotionKind motion = MotionKind::ZLift;
  double force = 0.0;
  std::vector<double> slips;
  int successes = 0;
  double median_slip = kNaN;
  double min_slip = kNaN;
  double max_slip = kNaN;
  double success_rate = 0.0;
};

struct SweepTable {
  std::vector<SweepCell> cells;
  std::vector<SweepTrial> trials;

  /// Force with the lowest median slippage for one (mass, motion) pair.
  std::optional<double> minimizing_force(double mass, MotionKind motion) const {
    std::optional<double> best;
    double best_slip = std::numeric_limits<double>::infinity();
    for (const auto& c : cells)
      if (c.mass == mass && c.motion == motion && c.median_slip < best_slip) {
        best_slip = c.median_slip;
        best = c.force;
      }
    return best;
  }

  const SweepCell* cell(double mass, MotionKind motion, double force) const {
    for (const auto& c : cells)
      if (c.mass == mass && c.motion == motion && c.force == force) return &c;
    return nullptr;
  }
};

inline std::vector<double> default_sweep_forces() {
  std::vector<double> f;
  for (int v = 1; v <= 29; v += 2) f.push_back(v);
  return f;
}

inline SweepTable fixed_force_sweep(const RunConfig& base, std::span<const double> masses,
                                    std::span<const MotionKind> motions, std::span<const double> forces,
                                    int trials_per_cell, int jobs = 1) {
  SweepTable table;
  for (double m : masses)
    for (MotionKind k : motions)
      for (double f : forces) {
        SweepCell c;
        c.mass = m;
        c.motion = k;
        c.force = f;
        table.cells.push_back(c);
      }
  const int n_cells = static_cast<int>(table.cells.size());
  table.trials.resize(static_cast<std::size_t>(n_cells) * trials_per_cell);

  parallel_for(n_cells * trials_per_cell, jobs, [&](int idx) {
    const int ci = idx / trials_per_cell;
    const int t = idx % trials_per_cell;
    const SweepCell& c = table.cells[ci];
    RunConfig cfg = base;
    cfg.mass = c.mass;
    cfg.motion.kind = c.motion;
    cfg.controller = ControllerKind::Fixed;
    cfg.fixed_force = c.force;
    FixedForceController ctl(c.force, cfg.plan);
    // Trials share seeds across forces so cells differ only by the force.
    const std::uint64_t seed =
        derive_seed({base.seed, static_cast<std::uint64_t>(std::llround(c.mass * 1e6)),
                     static_cast<std::uint64_t>(c.motion), static_cast<std::uint64_t>(t)});
    const TrialRecord rec = run_trial(cfg, ctl, 1, seed);
    SweepTrial& out = table.trials[idx];
    out.mass = c.mass;
    out.motion = c.motion;
    out.force = c.force;
    out.trial = t;
    out.outcome = rec.outcome;
    out.duration = rec.duration;
    out.slip_mm = rec.slippage_mm();
    out.median_mass = rec.median_mass.value_or(kNaN);
  });

  for (int ci = 0; ci < n_cells; ++ci) {
    SweepCell& c = table.cells[ci];
    for (int t = 0; t < trials_per_cell; ++t) {
      const SweepTrial& tr = table.trials[ci * trials_per_cell + t];
      c.slips.push_back(tr.slip_mm);
      c.successes += tr.outcome == Outcome::Success ? 1 : 0;
    }
    c.median_slip = median_of(c.slips);
    c.min_slip = *std::min_element(c.slips.begin(), c.slips.end());
    c.max_slip = *std::max_element(c.slips.begin(), c.slips.end());
    c.success_rate = static_cast<double>(c.successes) / trials_per_cell;
  }
  return table;
}

inline void write_sweep_cells(std::ostream& os, const SweepTable& t) {
  os << "mass_kg,motion,force_N,trials,successes,success_rate,median_slip_mm,min_slip_mm,max_slip_mm\n";
  for (const auto& c : t.cells)
    os << format_number(c.mass) << ',' << to_string(c.motion) << ',' << format_number(c.force) << ','
       << c.slips.size() << ',' << c.successes << ',' << format_number(c.success_rate) << ','
       << format_number(c.median_slip) << ',' << format_number(c.min_slip) << ','
       << format_number(c.max_slip) << '\n';
}

inline void write_sweep_trials(std::ostream& os, const SweepTable& t) {
  os << "mass_kg,motion,force_N,trial,outcome,duration_s,slip_mm,median_mass_kg\n";
  for (const auto& r : t.trials)
    os << format_number(r.mass) << ',' << to_string(r.motion) << ',' << format_number(r.force) << ','
       << r.trial << ',' << to_string(r.outcome) << ',' << format_number(r.duration) << ','
       << format_number(r.slip_mm) << ',' << format_number(r.median_mass) << '\n';
}

// ---------------------------------------------------------------------------
// Mass estimate vs slippage

struct ClassStats {
  int count = 0;
  Eigen::Vector2d mean = Eigen::Vector2d::Constant(kNaN);  // (median m~, slip mm)
  Eigen::Matrix2d cov = Eigen::Matrix2d::Constant(kNaN);
  double mean_abs_error = kNaN;  // mean |m~ - m|
};

struct MassClassReport {
  double mass = 0.0;
  std::optional<ClassStats> success;
  std::optional<ClassStats> failure;
  std::vector<std::string> notes;

  /// Set only when both classes are populated.
  std::optional<bool> success_more_accurate() const {
    if (!success || !failure) return std::nullopt;
    return success->mean_abs_error < failure->mean_abs_error;
  }
};

inline constexpr int kMinClassSamples = 3;

inline ClassStats class_stats(const std::vector<Eigen::Vector2d>& pts, double true_mass) {
  ClassStats s;
  s.count = static_cast<int>(pts.size());
  s.mean.setZero();
  for (const auto& p : pts) s.mean += p;
  s.mean /= s.count;
  s.cov.setZero();
  for (const auto& p : pts) s.cov += (p - s.mean) * (p - s.mean).transpose();
  s.cov /= std::max(1, s.count - 1);
  s.mean_abs_error = 0.0;
  for (const auto& p : pts) s.mean_abs_error += std::abs(p(0) - true_mass);
  s.mean_abs_error /= s.count;
  return s;
}

inline std::vector<MassClassReport> mass_vs_slip_analysis(std::span<const SweepTrial> trials) {
  std::vector<double> masses;
  for (const auto& t : trials)
    if (std::find(masses.begin(), masses.end(), t.mass) == masses.end()) masses.push_back(t.mass);
  std::sort(masses.begin(), masses.end());

  std::vector<MassClassReport> out;
  for (double m : masses) {
    MassClassReport rep;
    rep.mass = m;
    std::vector<Eigen::Vector2d> ok, bad;
    int missing = 0;
    for (const auto& t : trials) {
      if (t.mass != m) continue;
      if (std::isnan(t.median_mass)) {
        ++missing;
        continue;
      }
      (t.outcome == Outcome::Success ? ok : bad).emplace_back(t.median_mass, t.slip_mm);
    }
    if (missing > 0) rep.notes.push_back(std::to_string(missing) + " trials without a mass estimate");
    if (static_cast<int>(ok.size()) >= kMinClassSamples)
      rep.success = class_stats(ok, m);
    else
      rep.notes.push_back("success class skipped (" + std::to_string(ok.size()) + " samples)");
    if (static_cast<int>(bad.size()) >= kMinClassSamples)
      rep.failure = class_stats(bad, m);
    else
      rep.notes.push_back("failure class skipped (" + std::to_string(bad.size()) + " samples)");
    out.push_back(std::move(rep));
  }
  return out;
}

inline void write_mass_report(std::ostream& os, std::span<const MassClassReport> reports) {
  os << "mass_kg,class,count,mean_mass_kg,mean_slip_mm,cov_mm,cov_ms,cov_ss,mean_abs_error_kg\n";
  for (const auto& r : reports) {
    auto put = [&](const char* name, const std::optional<ClassStats>& s) {
      if (!s) return;
      os << format_number(r.mass) << ',' << name << ',' << s->count << ',' << format_number(s->mean(0))
         << ',' << format_number(s->mean(1)) << ',' << format_number(s->cov(0, 0)) << ','
         << format_number(s->cov(0, 1)) << ',' << format_number(s->cov(1, 1)) << ','
         << format_number(s->mean_abs_error) << '\n';
    };
    put("success", r.success);
    put("failure", r.failure);
  }
}

// ---------------------------------------------------------------------------
// Run analysis (learning curves keyed by accumulated sample seconds)

struct RunTrialStats {
  double accumulated_s = 0.0;  // collected data at the end of the trial
  double duration = 0.0;
  double mass_error = kNaN;    // |median m~ - m|
  double force_q25 = kNaN;
  double force_q50 = kNaN;
  double force_q75 = kNaN;
};

struct RunCurves {
  std::filesystem::path dir;
  double mass = 0.0;
  std::vector<RunTrialStats> trials;
};

/// Recomputes per-trial statistics from the raw trial CSVs of one run directory.
/// Missing trial files are appended to `missing`.
inline RunCurves load_run_curves(const std::filesystem::path& dir, std::vector<std::string>& missing) {
  RunCurves rc;
  rc.dir = dir;
  const auto manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) {
    missing.push_back(manifest_path.string());
    return rc;
  }
  const auto j = nlohmann::json::parse(is);
  rc.mass = j.at("mass_kg").get<double>();
  const double dtc = j.value("control_dt", 0.1);
  const int n_trials = static_cast<int>(j.at("trials").size());
  int cumulative = 0;
  for (int trial = 1; trial <= n_trials; ++trial) {
    const auto path = dir / trial_file_name(trial);
    if (!std::filesystem::exists(path)) {
      missing.push_back(path.string());
      continue;
    }
    const CsvTable t = read_csv(path);
    if (t.size() == 0) continue;
    RunTrialStats s;
    int samples = 0;
    std::vector<double> forces;
    for (std::size_t r = 0; r < t.size(); ++r) {
      if (r > 0 && t.number(r, "valid") == 1.0 && t.number(r - 1, "valid") == 1.0) ++samples;
      forces.push_back(t.number(r, "F_star"));
    }
    cumulative += samples;
    s.accumulated_s = cumulative * dtc;
    s.duration = t.number(t.size() - 1, "t_a");
    const double med = t.number(t.size() - 1, "med");
    s.mass_error = std::isnan(med) ? kNaN : std::abs(med - rc.mass);
    s.force_q25 = quantile_of(forces, 0.25);
    s.force_q50 = quantile_of(forces, 0.50);
    s.force_q75 = quantile_of(forces, 0.75);
    rc.trials.push_back(s);
  }
  return rc;
}

/// Value of the latest trial finished by `key` seconds of collected data.
inline double curve_value_at(const RunCurves& rc, double key, double RunTrialStats::*field) {
  double v = kNaN;
  for (const auto& t : rc.trials)
    if (t.accumulated_s <= key + 1e-9) v = t.*field;
  return v;
}

inline std::vector<double> analysis_grid(std::span<const RunCurves> runs, double step) {
  double top = 0.0;
  for (const auto& r : runs)
    for (const auto& t : r.trials) top = std::max(top, t.accumulated_s);
  std::vector<double> keys;
  for (int k = 1; k * step <= top + step - 1e-9; ++k) keys.push_back(k * step);
  return keys;
}

/// One learning-curve table: per key, the median and IQR of the per-run values.
inline void write_curve_table(std::ostream& os, std::span<const RunCurves> runs,
                              std::span<const double> keys, double RunTrialStats::*field,
                              const std::string& name) {
  os << "accumulated_s,runs," << name << "_median," << name << "_q25," << name << "_q75";
  for (std::size_t r = 0; r < runs.size(); ++r) os << ",run" << r;
  os << '\n';
  for (double key : keys) {
    std::vector<double> vals;
    for (const auto& r : runs) vals.push_back(curve_value_at(r, key, field));
    const auto present = std::count_if(vals.begin(), vals.end(), [](double v) { return !std::isnan(v); });
    os << format_number(key) << ',' << present << ',' << format_number(median_of(vals)) << ','
       << format_number(quantile_of(vals, 0.25)) << ',' << format_number(quantile_of(vals, 0.75));
    for (double v : vals) os << ',' << format_number(v);
    os << '\n';
  }
}

inline void write_force_table(std::ostream& os, std::span<const RunCurves> runs,
                              std::span<const double> keys) {
  os << "accumulated_s,runs,force_q25_N,force_q50_N,force_q75_N\n";
  for (double key : keys) {
    std::vector<double> q25, q50, q75;
    for (const auto& r : runs) {
      q25.push_back(curve_value_at(r, key, &RunTrialStats::force_q25));
      q50.push_back(curve_value_at(r, key, &RunTrialStats::force_q50));
      q75.push_back(curve_value_at(r, key, &RunTrialStats::force_q75));
    }
    const auto present = std::count_if(q50.begin(), q50.end(), [](double v) { return !std::isnan(v); });
    os << format_number(key) << ',' << present << ',' << format_number(median_of(q25)) << ','
       << format_number(median_of(q50)) << ',' << format_number(median_of(q75)) << '\n';
  }
}

}  // namespace slipgrasp
