#pragma once

// Grasp-force planning: probabilistic MPC by random shooting over LGM-FF rollouts,
// scored by the expected mass-consistency loss, plus force-closure distribution of
// the scalar grasp force to the fingers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "slipgrasp/dynamics.hpp"
#include "slipgrasp/energy.hpp"

namespace slipgrasp {

/// How E[loss] under a Gaussian belief is evaluated.
enum class Expectation {
  Sigma,     // 21 sigma points of the state belief
  Analytic,  // closed form for a Gaussian (linearized) mass estimate
};

inline const char* to_string(Expectation e) {
  return e == Expectation::Sigma ? "sigma" : "analytic";
}

inline Expectation parse_expectation(const std::string& s) {
  if (s == "sigma") return Expectation::Sigma;
  if (s == "analytic") return Expectation::Analytic;
  throw std::invalid_argument("unknown expectation '" + s + "'");
}

struct PlanConfig {
  int horizon = 5;
  int candidates = 128;
  double alpha = 200.0;
  double window = 3.0;  // N, max change between consecutive forces
  double force_min = 0.0;
  double force_max = 30.0;
  int sigma_points = 2 * kStateDim + 1;
  double guard_eps = kMassGuardEps;
  double hold_margin = 0.0;  // a plan must beat holding F_prev by this much
  Expectation expectation = Expectation::Analytic;

  void validate() const {
    if (horizon < 1) throw std::invalid_argument("plan: horizon must be >= 1");
    if (candidates < 1) throw std::invalid_argument("plan: candidates must be >= 1");
    if (!(window > 0.0)) throw std::invalid_argument("plan: window must be positive");
    if (!(force_min < force_max)) throw std::invalid_argument("plan: force_min must be < force_max");
    if (sigma_points != 2 * kStateDim + 1)
      throw std::invalid_argument("plan: sigma_points must be 2*10+1");
  }
};

struct ForcePlan {
  std::vector<double> sequence;
  double applied = 0.0;
  double expected_loss = 0.0;
  bool fallback = false;  // true when every candidate scored without information
};

/// Desired centroid linear and angular velocity for one control step.
struct MotionCommand {
  Vec3 velocity = Vec3::Zero();
  Vec3 angular_velocity = Vec3::Zero();
};

inline double immediate_loss(double mass_estimate, double median, double alpha = 200.0) {
  return -std::exp(-alpha * std::abs(mass_estimate - median));
}

struct LossEval {
  double value = 0.0;
  bool degenerate = false;  // no sigma point produced a mass estimate
};

namespace detail {

// erfc(t) exp(t^2), with the asymptotic series where exp(t^2) would overflow.
inline double erfcx(double t) {
  if (t < 10.0) return std::erfc(t) * std::exp(t * t);
  const double u = 1.0 / (t * t);
  return (1.0 - 0.5 * u + 0.75 * u * u - 1.875 * u * u * u) / (t * std::sqrt(std::numbers::pi));
}

// 0.5 erfc(t / sqrt2) exp(c) where c = t^2 / 2 - q, evaluated without overflow.
inline double scaled_tail(double t, double q) {
  const double r = t / std::numbers::sqrt2;
  if (r <= 0.0) return 0.5 * std::erfc(r) * std::exp(0.5 * t * t - q);
  return 0.5 * erfcx(r) * std::exp(-q);
}

}  // namespace detail

/// E[exp(-alpha |Z|)] for Z ~ N(mu, s^2).
inline double expected_peak(double mu, double s, double alpha) {
  if (!(s > 0.0)) return std::exp(-alpha * std::abs(mu));
  // Each branch is exp(a^2 s^2 / 2 -+ a mu) Phi(+-mu / s - a s); with
  // t = a s -+ mu / s the exponent is t^2 / 2 - mu^2 / (2 s^2).
  const double q = 0.5 * (mu / s) * (mu / s);
  return detail::scaled_tail(alpha * s - mu / s, q) + detail::scaled_tail(alpha * s + mu / s, q);
}

/// Closed-form E[loss]: the mass estimate a / r is linearized about the belief
/// mean (a = 1^T P^A, r = 1^T P~R, independent Gaussians), then the peaked loss
/// is integrated exactly against that Gaussian.
inline LossEval expected_loss_analytic(const GaussianBelief& belief, double median,
                                       const PlanConfig& cfg) {
  const double a = applied_part(belief.mean).sum();
  const double r = retained_part(belief.mean).sum();
  if (!(std::abs(r) >= cfg.guard_eps)) return {0.0, true};
  const double va = belief.var.segment<3>(0).cwiseMax(0.0).sum();
  const double vr = belief.var.segment<4>(3).cwiseMax(0.0).sum();
  const double m = a / r;
  const double s = std::sqrt(va + m * m * vr) / std::abs(r);
  return {-expected_peak(m - median, s, cfg.alpha), false};
}

/// Unscented approximation of E[loss] under a diagonal Gaussian state belief.
/// Sigma points sit at mean +- sqrt(n) sd_i along each axis with weights 1/(2n);
/// the centre carries zero weight (alpha = 1, kappa = 0). Points whose retained
/// power falls under the guard are dropped and the remaining weights renormalized.
inline LossEval expected_loss_sigma(const GaussianBelief& belief, double median, const PlanConfig& cfg) {
  constexpr int n = kStateDim;
  const double spread = std::sqrt(static_cast<double>(n));
  const double wi = 1.0 / (2.0 * n);

  auto loss_at = [&](const StateVec& x) -> std::optional<double> {
    const auto est = estimate_mass(applied_part(x), retained_part(x), cfg.guard_eps);
    if (!est) return std::nullopt;
    return immediate_loss(est->kg, median, cfg.alpha);
  };

  double acc = 0.0;
  double wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double sd = std::sqrt(std::max(belief.var(i), 0.0));
    for (double sign : {1.0, -1.0}) {
      StateVec x = belief.mean;
      x(i) += sign * spread * sd;
      if (auto l = loss_at(x)) {
        acc += wi * *l;
        wsum += wi;
      }
    }
  }
  if (wsum > 0.0) return {acc / wsum, false};
  if (auto l = loss_at(belief.mean)) return {*l, false};
  return {0.0, true};
}

inline LossEval expected_loss(const GaussianBelief& belief, double median, const PlanConfig& cfg) {
  return cfg.expectation == Expectation::Sigma ? expected_loss_sigma(belief, median, cfg)
                                               : expected_loss_analytic(belief, median, cfg);
}

/// Window around the previous force first, then the global limits. The limits
/// win when the previous force itself lies outside them.
inline double clamp_force(double candidate, double previous, const PlanConfig& cfg) {
  const double windowed = std::clamp(candidate, previous - cfg.window, previous + cfg.window);
  return std::clamp(windowed, cfg.force_min, cfg.force_max);
}

namespace detail {

inline double candidate_score(const LgmFfModel& model, const StateVec& x,
                              std::span<const MotionCommand> nominal,
                              std::span<const double> forces, double median,
                              const PlanConfig& cfg, bool& informative) {
  GaussianBelief b{x, StateVec::Zero()};
  double total = 0.0;
  informative = false;
  for (std::size_t k = 0; k < forces.size(); ++k) {
    const MotionCommand& cmd = nominal[std::min(k, nominal.size() - 1)];
    b = model.propagate(b, build_control(cmd.velocity, cmd.angular_velocity, forces[k]));
    const LossEval l = expected_loss(b, median, cfg);
    informative = informative || !l.degenerate;
    total += l.value;
  }
  return total;
}

}  // namespace detail

/// Scores explicit candidate sequences and returns the best one. Each sequence
/// must already satisfy the window and limit constraints. Ties go to the lower
/// mean force.
inline ForcePlan plan_over(const LgmFfModel& model, const StateVec& x,
                           std::span<const MotionCommand> nominal, double previous_force,
                           double median, const PlanConfig& cfg,
                           const std::vector<std::vector<double>>& candidates) {
  cfg.validate();
  if (nominal.empty()) throw std::invalid_argument("plan: nominal motion is empty");

  const double hold = clamp_force(previous_force, previous_force, cfg);
  ForcePlan best;
  best.sequence.assign(cfg.horizon, hold);
  best.applied = hold;
  best.fallback = true;

  double best_score = std::numeric_limits<double>::infinity();
  double best_mean = std::numeric_limits<double>::infinity();
  for (const auto& seq : candidates) {
    if (seq.empty()) continue;
    bool informative = false;
    const double score =
        detail::candidate_score(model, x, nominal, seq, median, cfg, informative);
    if (!informative) continue;
    double mean_force = 0.0;
    for (double f : seq) mean_force += f;
    mean_force /= static_cast<double>(seq.size());
    const bool better = score < best_score - 1e-12 ||
                        (std::abs(score - best_score) <= 1e-12 && mean_force < best_mean);
    if (better) {
      best_score = score;
      best_mean = mean_force;
      best.sequence = seq;
      best.applied = seq.front();
      best.expected_loss = score;
      best.fallback = false;
    }
  }
  if (!best.fallback && cfg.hold_margin > 0.0) {
    const std::vector<double> held(cfg.horizon, hold);
    bool informative = false;
    const double hold_score =
        detail::candidate_score(model, x, nominal, held, median, cfg, informative);
    if (informative && !(best_score < hold_score - cfg.hold_margin)) {
      best.sequence = held;
      best.applied = hold;
      best.expected_loss = hold_score;
    }
  }
  return best;
}

/// Candidate sequences for random shooting: the first holds the previous force,
/// the others add uniform increments in [-window, window], clamped step by step.
inline std::vector<std::vector<double>> shooting_candidates(double previous_force,
                                                            const PlanConfig& cfg,
                                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  std::vector<std::vector<double>> out(cfg.candidates, std::vector<double>(cfg.horizon));
  const double hold = clamp_force(previous_force, previous_force, cfg);
  std::fill(out[0].begin(), out[0].end(), hold);
  for (int s = 1; s < cfg.candidates; ++s) {
    double f = previous_force;
    for (int k = 0; k < cfg.horizon; ++k) {
      f = clamp_force(f + (2.0 * uniform() - 1.0) * cfg.window, f, cfg);
      out[s][k] = f;
    }
  }
  return out;
}

/// Random-shooting pMPC: minimizes the summed expected loss over the predicted
/// states x_2 .. x_{H+1}, starting from x_1 = x.
inline ForcePlan plan(const LgmFfModel& model, const StateVec& x,
                      std::span<const MotionCommand> nominal, double previous_force, double median,
                      const PlanConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return plan_over(model, x, nominal, previous_force, median, cfg,
                   shooting_candidates(previous_force, cfg, seed));
}

/// Splits a scalar grasp force into per-finger commands pointing from each
/// contact toward the centroid. Magnitudes are the least-norm solution of
/// {net force = 0, mean magnitude = F}. When a contact coincides with the
/// centroid the directions are undefined and every finger gets F along its
/// measured contact-force direction instead.
inline std::vector<Vec3> distribute_force(double grasp_force,
                                          std::span<const ContactSnapshot> contacts,
                                          const GraspCentroid& centroid) {
  std::vector<Vec3> out(contacts.size(), Vec3::Zero());
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < contacts.size(); ++i)
    if (contacts[i].in_contact) active.push_back(i);
  if (active.size() < 2) throw FewerThanTwoContacts(static_cast<int>(active.size()));

  const auto n = static_cast<Eigen::Index>(active.size());
  Eigen::Matrix3Xd dirs(3, n);
  bool degenerate = false;
  for (Eigen::Index k = 0; k < n; ++k) {
    const Vec3 d = centroid.position - contacts[active[k]].position;
    if (d.norm() < 1e-9) {
      degenerate = true;
      break;
    }
    dirs.col(k) = d.normalized();
  }

  if (!degenerate) {
    Eigen::MatrixXd a(4, n);
    a.topRows<3>() = dirs;
    a.row(3).setConstant(1.0 / static_cast<double>(n));
    Eigen::Vector4d b(0.0, 0.0, 0.0, grasp_force);
    const Eigen::VectorXd mag = a.completeOrthogonalDecomposition().solve(b);
    const double mean_err = std::abs(mag.mean() - grasp_force);
    if (mean_err <= 1e-9 * std::max(1.0, std::abs(grasp_force))) {
      for (Eigen::Index k = 0; k < n; ++k) out[active[k]] = mag(k) * dirs.col(k);
      return out;
    }
  }

  for (std::size_t i : active) {
    const Vec3& f = contacts[i].force;
    if (f.norm() > 1e-12) out[i] = grasp_force * f.normalized();
  }
  return out;
}

/// Two-stage ahead planning: the plan for tick t+1 is computed while tick t
/// executes and consumed exactly once at t+1. With `enforce` set, a plan that
/// misses the deadline is discarded and the caller holds its previous force;
/// otherwise the plan is waited for and only the miss is recorded.
class AheadPlanner {
 public:
  using Clock = std::chrono::steady_clock;

  AheadPlanner(std::chrono::microseconds deadline, bool enforce)
      : deadline_(deadline), enforce_(enforce) {}

  AheadPlanner(const AheadPlanner&) = delete;
  AheadPlanner& operator=(const AheadPlanner&) = delete;
  ~AheadPlanner() {
    if (pending_.valid()) pending_.wait();
    for (auto& f : stale_) f.wait();
  }

  void start(std::function<ForcePlan()> job) {
    if (pending_.valid()) pending_.wait();
    std::erase_if(stale_, [](const std::future<ForcePlan>& f) {
      return f.wait_for(std::chrono::seconds(0)) == std::future_status::ready;
    });
    started_ = Clock::now();
    pending_ = std::async(std::launch::async, std::move(job));
  }

  bool pending() const { return pending_.valid(); }

  /// Returns the plan prepared for this tick, or nothing on a miss.
  std::optional<ForcePlan> take() {
    if (!pending_.valid()) return std::nullopt;
    const auto due = started_ + deadline_;
    std::optional<ForcePlan> out;
    if (enforce_) {
      if (pending_.wait_until(due) == std::future_status::ready) {
        out = pending_.get();
      } else {
        ++misses_;
        stale_.push_back(std::move(pending_));
      }
    } else {
      out = pending_.get();
      if (Clock::now() > due) ++misses_;
    }
    last_elapsed_ = std::chrono::duration<double, std::milli>(Clock::now() - started_).count();
    return out;
  }

  void discard() {
    if (pending_.valid()) {
      pending_.wait();
      pending_.get();
    }
  }

  int misses() const { return misses_; }
  double last_elapsed_ms() const { return last_elapsed_; }

 private:
  std::chrono::microseconds deadline_;
  bool enforce_;
  std::future<ForcePlan> pending_;
  std::vector<std::future<ForcePlan>> stale_;  // missed plans still finishing
  Clock::time_point started_{};
  int misses_ = 0;
  double last_elapsed_ = 0.0;
};

}  // namespace slipgrasp
