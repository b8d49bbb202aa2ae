#pragma once

// Energy abstraction for multi-contact grasps: contact streams in, applied power,
// massless retained power, mass estimates and the 10-d energy state out.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace slipgrasp {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;

inline constexpr int kStateDim = 10;
inline constexpr int kControlDim = 7;
inline constexpr int kInputDim = kStateDim + kControlDim;

using StateVec = Eigen::Matrix<double, kStateDim, 1>;
using ControlVec = Eigen::Matrix<double, kControlDim, 1>;
using InputVec = Eigen::Matrix<double, kInputDim, 1>;

/// Gravity with z up. The potential term of the retained power uses -g^T C so
/// that lifting produces a positive increment.
inline const Vec3 kGravity{0.0, 0.0, -9.81};

/// Default per-step guard on |1^T P~R| below which no mass estimate is made.
inline constexpr double kMassGuardEps = 1e-6;

struct ContactSnapshot {
  Vec3 force = Vec3::Zero();     // N, applied by the finger on the object
  Vec3 position = Vec3::Zero();  // m, world frame
  Vec3 velocity = Vec3::Zero();  // m/s, world frame
  bool in_contact = false;
};

struct GraspCentroid {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 orientation = Vec3::Zero();  // roll, pitch, yaw in (-pi, pi]
};

struct PowerPair {
  Vec3 applied = Vec3::Zero();            // J per control step
  Vec4 retained_massless = Vec4::Zero();  // J/kg per control step
};

class FewerThanTwoContacts : public std::runtime_error {
 public:
  explicit FewerThanTwoContacts(int found)
      : std::runtime_error("grasp centroid needs two contacts, found " + std::to_string(found)),
        found_(found) {}
  int found() const noexcept { return found_; }

 private:
  int found_;
};

inline double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::remainder(a, 2.0 * pi);  // [-pi, pi]
  if (a <= -pi) a += 2.0 * pi;
  return a;
}

/// Roll/pitch/yaw (ZYX convention) of a rotation matrix, each wrapped to (-pi, pi].
inline Vec3 roll_pitch_yaw(const Mat3& r) {
  const double roll = std::atan2(r(2, 1), r(2, 2));
  const double pitch = std::atan2(-r(2, 0), std::hypot(r(0, 0), r(1, 0)));
  const double yaw = std::atan2(r(1, 0), r(0, 0));
  return {wrap_angle(roll), wrap_angle(pitch), wrap_angle(yaw)};
}

namespace detail {

// Frame from Gram-Schmidt on (p1 - C, p2 - C). When the two offsets are
// parallel the second axis is taken from the world axis least aligned with the first.
inline Mat3 contact_frame(const Vec3& a, const Vec3& b) {
  Vec3 e1 = a.norm() > 1e-15 ? Vec3(a.normalized()) : Vec3::UnitX();
  Vec3 v = b - b.dot(e1) * e1;
  if (v.norm() < 1e-12 * std::max(1.0, b.norm())) {
    Eigen::Index k = 0;
    e1.cwiseAbs().minCoeff(&k);
    Vec3 axis = Vec3::Unit(k);
    v = axis - axis.dot(e1) * e1;
  }
  const Vec3 e2 = v.normalized();
  Mat3 r;
  r.col(0) = e1;
  r.col(1) = e2;
  r.col(2) = e1.cross(e2);
  return r;
}

}  // namespace detail

/// Mean position/velocity of the in-contact fingers plus the orientation of the
/// frame spanned by the two lowest-indexed in-contact fingers.
inline GraspCentroid grasp_centroid(std::span<const ContactSnapshot> contacts) {
  GraspCentroid gc;
  int n = 0;
  for (const auto& c : contacts) {
    if (!c.in_contact) continue;
    gc.position += c.position;
    gc.velocity += c.velocity;
    ++n;
  }
  if (n < 2) throw FewerThanTwoContacts(n);
  gc.position /= n;
  gc.velocity /= n;

  const ContactSnapshot* first = nullptr;
  const ContactSnapshot* second = nullptr;
  for (const auto& c : contacts) {
    if (!c.in_contact) continue;
    if (!first) {
      first = &c;
    } else {
      second = &c;
      break;
    }
  }
  gc.orientation = roll_pitch_yaw(
      detail::contact_frame(first->position - gc.position, second->position - gc.position));
  return gc;
}

inline std::optional<GraspCentroid> try_grasp_centroid(std::span<const ContactSnapshot> contacts) {
  int n = 0;
  for (const auto& c : contacts) n += c.in_contact ? 1 : 0;
  if (n < 2) return std::nullopt;
  return grasp_centroid(contacts);
}

/// Per-step applied energy increment: sum over fingers of force .* velocity, times dt.
inline Vec3 applied_power(std::span<const ContactSnapshot> contacts, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("applied_power: dt must be positive");
  Vec3 p = Vec3::Zero();
  for (const auto& c : contacts) {
    if (!c.in_contact) continue;
    p += c.force.cwiseProduct(c.velocity);
  }
  return p * dt;
}

/// Retained energy increment per unit mass between two consecutive centroid
/// states: [potential, 1/2 d(Cdot_x^2), 1/2 d(Cdot_y^2), 1/2 d(Cdot_z^2)].
inline Vec4 retained_power_massless(const GraspCentroid& prev, const GraspCentroid& curr,
                                    const Vec3& g, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("retained_power_massless: dt must be positive");
  Vec4 r;
  r(0) = -g.dot(curr.position) + g.dot(prev.position);
  const Vec3 ke = 0.5 * (curr.velocity.cwiseProduct(curr.velocity) -
                         prev.velocity.cwiseProduct(prev.velocity));
  r.tail<3>() = ke;
  return r;
}

struct MassEstimate {
  double kg = 0.0;
  /// Non-positive estimates are kept (clipping would bias the median) but flagged.
  bool unphysical() const { return !(kg > 0.0); }
};

/// Ratio of summed applied power to summed massless retained power, or nothing
/// when the retained power is below the degeneracy guard.
inline std::optional<MassEstimate> estimate_mass(const Vec3& applied, const Vec4& retained_massless,
                                                 double guard_eps = kMassGuardEps) {
  const double den = retained_massless.sum();
  if (!(std::abs(den) >= guard_eps)) return std::nullopt;
  const double m = applied.sum() / den;
  if (!std::isfinite(m)) return std::nullopt;
  return MassEstimate{m};
}

/// Append-only record of accepted mass estimates with an exact running median.
class MassEstimator {
 public:
  void update(double estimate) {
    history_.push_back(estimate);
    sorted_.insert(std::upper_bound(sorted_.begin(), sorted_.end(), estimate), estimate);
    latest_ = estimate;
  }

  /// Accepts an estimate when present; otherwise the last accepted value is held.
  void offer(const std::optional<MassEstimate>& est) {
    if (est) update(est->kg);
  }

  bool empty() const { return history_.empty(); }
  std::size_t size() const { return history_.size(); }
  std::optional<double> latest() const { return latest_; }
  const std::vector<double>& history() const { return history_; }

  std::optional<double> median() const {
    const auto n = sorted_.size();
    if (n == 0) return std::nullopt;
    if (n % 2 == 1) return sorted_[n / 2];
    return 0.5 * (sorted_[n / 2 - 1] + sorted_[n / 2]);
  }

 private:
  std::vector<double> history_;
  std::vector<double> sorted_;
  std::optional<double> latest_;
};

/// Cumulative applied energy E^A, integrated at the sensing rate. Powers are read
/// as differences between control ticks so any constant offset cancels.
class EnergyLedger {
 public:
  explicit EnergyLedger(const Vec3& offset = Vec3::Zero())
      : cumulative_(offset), at_tick_(offset) {}

  void integrate(std::span<const ContactSnapshot> contacts, double dt) {
    cumulative_ += applied_power(contacts, dt);
  }

  const Vec3& cumulative() const { return cumulative_; }

  /// Applied energy since the previous call; marks the current tick.
  Vec3 take_tick() {
    const Vec3 p = cumulative_ - at_tick_;
    at_tick_ = cumulative_;
    return p;
  }

 private:
  Vec3 cumulative_;
  Vec3 at_tick_;
};

inline StateVec build_energy_state(const Vec3& applied, const Vec4& retained_massless,
                                   const Vec3& orientation) {
  StateVec x;
  x << applied, retained_massless, orientation;
  return x;
}

inline Vec3 applied_part(const StateVec& x) { return x.segment<3>(0); }
inline Vec4 retained_part(const StateVec& x) { return x.segment<4>(3); }
inline Vec3 orientation_part(const StateVec& x) { return x.segment<3>(7); }

inline ControlVec build_control(const Vec3& centroid_velocity, const Vec3& angular_velocity,
                                double grasp_force) {
  ControlVec u;
  u << centroid_velocity, angular_velocity, grasp_force;
  return u;
}

}  // namespace slipgrasp
