#pragma once

// Flat `key = value` experiment configuration.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "slipgrasp/harness.hpp"

namespace slipgrasp {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, int line)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("expected a number, got '" + std::string(v) + "'");
  return out;
}

template <class Int>
Int parse_int(std::string_view v) {
  Int out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("expected an integer, got '" + std::string(v) + "'");
  return out;
}

inline bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + std::string(v) + "'");
}

inline std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Ref>
ConfigKey number_key(std::string name, std::string help, Ref ref) {
  return {std::move(name), std::move(help),
          [ref](RunConfig& c, std::string_view v) { ref(c) = parse_double(v); },
          [ref](const RunConfig& c) { return format_double(ref(c)); }};
}

template <class Int, class Ref>
ConfigKey int_key(std::string name, std::string help, Ref ref) {
  return {std::move(name), std::move(help),
          [ref](RunConfig& c, std::string_view v) { ref(c) = parse_int<Int>(v); },
          [ref](const RunConfig& c) { return std::to_string(ref(c)); }};
}

template <class Ref>
ConfigKey bool_key(std::string name, std::string help, Ref ref) {
  return {std::move(name), std::move(help),
          [ref](RunConfig& c, std::string_view v) { ref(c) = parse_bool(v); },
          [ref](const RunConfig& c) {
            return std::string(ref(c) ? "true" : "false");
          }};
}

}  // namespace detail

/// Every accepted key, in the order `print-defaults` lists them.
inline const std::vector<detail::ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(number_key("object.mass_kg", "object mass",
                           [](auto& c) -> auto& { return c.mass; }));

    k.push_back({"motion.kind", "z-lift | xz-circle | y-rotate",
                 [](RunConfig& c, std::string_view v) { c.motion.kind = parse_motion(std::string(v)); },
                 [](const RunConfig& c) { return std::string(to_string(c.motion.kind)); }});
    k.push_back(number_key("motion.omega", "rad/s, manipulation frequency",
                           [](auto& c) -> auto& { return c.motion.omega; }));
    k.push_back(number_key("motion.l_lift", "m, z-lift amplitude",
                           [](auto& c) -> auto& { return c.motion.l_lift; }));
    k.push_back(number_key("motion.l_circ", "m, xz-circle radius",
                           [](auto& c) -> auto& { return c.motion.l_circ; }));
    k.push_back(number_key("motion.theta_rot", "rad, y-rotate amplitude",
                           [](auto& c) -> auto& { return c.motion.theta_rot; }));
    k.push_back(number_key("motion.l_init", "m, lift height reached at the end of P2",
                           [](auto& c) -> auto& { return c.motion.l_init; }));

    k.push_back(number_key("sim.physics_dt", "s",
                           [](auto& c) -> auto& { return c.sim.physics_dt; }));
    k.push_back(number_key("sim.control_dt", "s",
                           [](auto& c) -> auto& { return c.sim.control_dt; }));
    k.push_back(number_key("sim.friction", "Coulomb coefficient",
                           [](auto& c) -> auto& { return c.sim.friction; }));
    k.push_back(number_key("sim.noise_std", "N, tactile force readout noise",
                           [](auto& c) -> auto& { return c.noise_std; }));
    k.push_back(int_key<std::uint64_t>("sim.seed", "run seed (SLIPGRASP_SEED overrides)",
                                       [](auto& c) -> auto& { return c.seed; }));
    k.push_back(number_key("sim.contact_stiffness", "N/m",
                           [](auto& c) -> auto& { return c.sim.contact_stiffness; }));
    k.push_back(number_key("sim.contact_damping", "N s/m, negative for critical",
                           [](auto& c) -> auto& { return c.sim.contact_damping; }));
    k.push_back(number_key("sim.finger_mass", "kg",
                           [](auto& c) -> auto& { return c.sim.finger_mass; }));
    k.push_back(number_key("sim.finger_stiffness", "N/m, tangential tracking",
                           [](auto& c) -> auto& { return c.sim.finger_stiffness; }));
    k.push_back(number_key("sim.squeeze_stiffness", "N/m, along the squeeze direction",
                           [](auto& c) -> auto& { return c.sim.squeeze_stiffness; }));
    k.push_back(number_key("sim.actuator_tau", "s, squeeze force lag",
                           [](auto& c) -> auto& { return c.sim.actuator_tau; }));
    k.push_back(number_key("sim.direction_noise", "rad, squeeze direction error std",
                           [](auto& c) -> auto& { return c.sim.direction_noise; }));
    k.push_back(number_key("sim.direction_noise_tau", "s",
                           [](auto& c) -> auto& { return c.sim.direction_noise_tau; }));
    k.push_back(number_key("sim.support_release", "s, floor removal time; negative keeps it",
                           [](auto& c) -> auto& { return c.sim.support_release; }));
    k.push_back(int_key<int>("sim.substeps", "integration substeps per physics step",
                             [](auto& c) -> auto& { return c.sim.substeps; }));
    k.push_back(number_key("sim.approach_force", "N per finger",
                           [](auto& c) -> auto& { return c.sim.approach_force; }));
    k.push_back(number_key("sim.contact_loss_time", "s",
                           [](auto& c) -> auto& { return c.sim.contact_loss_time; }));
    k.push_back(number_key("sim.drop_distance", "m",
                           [](auto& c) -> auto& { return c.sim.drop_distance; }));
    k.push_back(number_key("sim.target_duration", "s, success time",
                           [](auto& c) -> auto& { return c.target_duration; }));

    k.push_back(int_key<int>("model.features", "M",
                             [](auto& c) -> auto& { return c.model.features; }));
    k.push_back(number_key("model.noise_var", "normalized units",
                           [](auto& c) -> auto& { return c.model.noise_var; }));
    k.push_back(number_key("model.prior_var", "",
                           [](auto& c) -> auto& { return c.model.prior_var; }));
    k.push_back(number_key("model.lengthscale_scale", "lengthscale in input standard deviations",
                           [](auto& c) -> auto& { return c.model.lengthscale_scale; }));
    k.push_back(number_key("model.scale_floor", "",
                           [](auto& c) -> auto& { return c.model.scale_floor; }));
    k.push_back(number_key("model.force_scale_floor", "N",
                           [](auto& c) -> auto& { return c.model.force_scale_floor; }));
    k.push_back(bool_key("model.predict_delta", "",
                         [](auto& c) -> auto& { return c.model.predict_delta; }));

    k.push_back(int_key<int>("plan.horizon", "H",
                             [](auto& c) -> auto& { return c.plan.horizon; }));
    k.push_back(int_key<int>("plan.candidates", "S",
                             [](auto& c) -> auto& { return c.plan.candidates; }));
    k.push_back(number_key("plan.alpha", "loss sharpness",
                           [](auto& c) -> auto& { return c.plan.alpha; }));
    k.push_back(number_key("plan.window", "N",
                           [](auto& c) -> auto& { return c.plan.window; }));
    k.push_back(number_key("plan.fmin", "N",
                           [](auto& c) -> auto& { return c.plan.force_min; }));
    k.push_back(number_key("plan.fmax", "N",
                           [](auto& c) -> auto& { return c.plan.force_max; }));
    k.push_back(number_key("plan.hold_margin", "",
                           [](auto& c) -> auto& { return c.plan.hold_margin; }));
    k.push_back({"plan.expectation", "sigma | analytic",
                 [](RunConfig& c, std::string_view v) { c.plan.expectation = parse_expectation(std::string(v)); },
                 [](const RunConfig& c) { return std::string(to_string(c.plan.expectation)); }});
    k.push_back(number_key("plan.deadline_ms", "",
                           [](auto& c) -> auto& { return c.deadline_ms; }));
    k.push_back(bool_key("plan.enforce_deadline", "drop late plans instead of waiting",
                         [](auto& c) -> auto& { return c.enforce_deadline; }));

    k.push_back({"run.controller", "mbrl | fixed | feedback",
                 [](RunConfig& c, std::string_view v) { c.controller = parse_controller(std::string(v)); },
                 [](const RunConfig& c) { return std::string(to_string(c.controller)); }});
    k.push_back(number_key("run.force", "N, fixed controller force",
                           [](auto& c) -> auto& { return c.fixed_force; }));
    k.push_back(number_key("run.gamma", "feedback gain",
                           [](auto& c) -> auto& { return c.gamma; }));
    k.push_back(int_key<int>("run.budget", "transitions per run",
                             [](auto& c) -> auto& { return c.budget; }));
    k.push_back(int_key<int>("run.seeds", "runs per learn/baseline invocation",
                             [](auto& c) -> auto& { return c.seeds; }));
    k.push_back(int_key<int>("run.max_trials", "",
                             [](auto& c) -> auto& { return c.max_trials; }));
    k.push_back(number_key("run.initial_force", "N, force at grasp start",
                           [](auto& c) -> auto& { return c.initial_force; }));
    k.push_back(bool_key("run.warm_start", "open MBRL trials at the previous trial's median force",
                         [](auto& c) -> auto& { return c.warm_start; }));
    k.push_back(number_key("run.explore_force_max", "N, first-trial force drawn from [0, this]",
                           [](auto& c) -> auto& { return c.explore_force_max; }));
    return k;
  }();
  return keys;
}

/// Applies one assignment. Throws ConfigError for unknown keys or bad values.
inline void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value,
                             int line = 0) {
  for (const auto& k : config_keys()) {
    if (k.name != key) continue;
    try {
      k.set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(key) + ": " + e.what(), line);
    } catch (const std::out_of_range&) {
      throw ConfigError(std::string(key) + ": value out of range", line);
    }
    return;
  }
  throw ConfigError("unknown key '" + std::string(key) + "'", line);
}

/// Parses `key = value` lines on top of `base`. `#` starts a comment; blank
/// lines are ignored; a key may appear only once.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::map<std::string, int, std::less<>> seen;
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string_view s = raw;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw ConfigError("expected 'key = value'", line);
    const std::string_view key = detail::trim(s.substr(0, eq));
    const std::string_view value = detail::trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError("missing key", line);
    if (value.empty()) throw ConfigError("missing value for '" + std::string(key) + "'", line);
    if (const auto it = seen.find(key); it != seen.end())
      throw ConfigError("duplicate key '" + std::string(key) + "' (first on line " +
                            std::to_string(it->second) + ")",
                        line);
    seen.emplace(std::string(key), line);
    set_config_value(base, key, value, line);
  }
  try {
    base.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what(), 0);
  }
  return base;
}

inline RunConfig parse_config_string(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  return parse_config(in, std::move(base));
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'", 0);
  return parse_config(in, std::move(base));
}

/// SLIPGRASP_SEED, when set, replaces the configured seed.
inline void apply_seed_override(RunConfig& cfg) {
  const char* v = std::getenv("SLIPGRASP_SEED");
  if (!v || !*v) return;
  try {
    cfg.seed = detail::parse_int<std::uint64_t>(detail::trim(v));
  } catch (const std::invalid_argument&) {
    throw ConfigError(std::string("SLIPGRASP_SEED: expected an integer, got '") + v + "'", 0);
  }
}

/// Canonical text of every key; parsing it reproduces `cfg` exactly.
inline std::string format_config(const RunConfig& cfg, bool with_help = false) {
  std::string out;
  for (const auto& k : config_keys()) {
    out += k.name + " = " + k.get(cfg);
    if (with_help && !k.help.empty()) out += "  # " + k.help;
    out += '\n';
  }
  return out;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of the canonical text with the seed left out, so runs of one
/// configuration under different seeds share it.
inline std::string config_hash(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.seed = 0;
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(format_config(c))));
  return buf;
}

}  // namespace slipgrasp
