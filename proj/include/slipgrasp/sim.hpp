#pragma once

// Three-fingertip grasp simulator: a rigid cuboid held by point fingertips with
// penalty normal contact, stick/slip Coulomb friction and impedance-controlled
// fingertips, plus the nominal motion library and trial outcome rules.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "slipgrasp/energy.hpp"

namespace slipgrasp {

using Quat = Eigen::Quaterniond;

inline constexpr int kFingers = 3;

enum class MotionKind { ZLift, XZCircle, YRotate };
enum class Phase { Approach = 1, Lift = 2, Manipulation = 3 };

inline const char* to_string(MotionKind k) {
  switch (k) {
    case MotionKind::ZLift: return "z-lift";
    case MotionKind::XZCircle: return "xz-circle";
    case MotionKind::YRotate: return "y-rotate";
  }
  return "?";
}

inline MotionKind parse_motion(const std::string& s) {
  if (s == "z-lift" || s == "zlift") return MotionKind::ZLift;
  if (s == "xz-circle" || s == "xzcircle") return MotionKind::XZCircle;
  if (s == "y-rotate" || s == "yrotate") return MotionKind::YRotate;
  throw std::invalid_argument("unknown motion kind '" + s + "'");
}

struct MotionSpec {
  MotionKind kind = MotionKind::ZLift;
  double omega = std::numbers::pi;  // rad/s
  double l_lift = 0.030;            // m
  double l_circ = 0.025;            // m
  double theta_rot = 0.3;           // rad
  double l_init = 0.050;            // m

  void validate() const {
    if (!(omega > 0 && l_lift > 0 && l_circ > 0 && theta_rot > 0 && l_init > 0))
      throw std::invalid_argument("motion amplitudes must be positive");
  }
};

inline constexpr double kLiftStart = 0.5;      // P1 -> P2
inline constexpr double kManipStart = 4.0;     // P2 -> P3

/// Reference grasp-centroid motion relative to the pose at grasp start (t_a = 0).
struct NominalMotion {
  Phase phase = Phase::Approach;
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 orientation = Vec3::Zero();
  Vec3 angular_velocity = Vec3::Zero();
};

inline NominalMotion nominal_motion(double t_a, const MotionSpec& spec) {
  if (!(t_a >= 0.0)) throw std::invalid_argument("nominal_motion: t_a must be >= 0");
  constexpr double pi = std::numbers::pi;
  NominalMotion n;
  if (t_a < kLiftStart) {
    n.phase = Phase::Approach;
    return n;
  }
  if (t_a < kManipStart) {
    // Smooth cosine ramp up to l_init.
    const double span = kManipStart - kLiftStart;
    const double tau = (t_a - kLiftStart) / span;
    n.phase = Phase::Lift;
    n.position.z() = spec.l_init * 0.5 * (1.0 - std::cos(pi * tau));
    n.velocity.z() = spec.l_init * 0.5 * pi / span * std::sin(pi * tau);
    return n;
  }
  const double tp = t_a - kManipStart;
  const double w = spec.omega;
  n.phase = Phase::Manipulation;
  n.position.z() = spec.l_init;
  switch (spec.kind) {
    case MotionKind::ZLift:
      n.position.z() += spec.l_lift * std::sin(w * tp);
      n.velocity.z() = spec.l_lift * w * std::cos(w * tp);
      break;
    case MotionKind::XZCircle:
      n.position.x() = spec.l_circ * std::sin(w * tp);
      n.position.z() += spec.l_circ * (1.0 - std::cos(w * tp));
      n.velocity.x() = spec.l_circ * w * std::cos(w * tp);
      n.velocity.z() = spec.l_circ * w * std::sin(w * tp);
      break;
    case MotionKind::YRotate:
      n.orientation.y() = spec.theta_rot * std::sin(w * tp);
      n.angular_velocity.y() = spec.theta_rot * w * std::cos(w * tp);
      break;
  }
  return n;
}

struct SimConfig {
  double physics_dt = 0.002;
  double control_dt = 0.1;
  double friction = 0.5;
  double contact_stiffness = 5000.0;   // N/m, normal and tangential
  double contact_damping = -1.0;       // N s/m; negative selects critical damping
  Vec3 gravity = kGravity;
  std::uint64_t seed = 1;

  Vec3 half_extents{0.030, 0.020, 0.025};  // 60 x 40 x 50 mm cuboid
  double finger_spread = 0.005;            // index/middle offset from the face centre, m
  double finger_mass = 0.05;
  double finger_stiffness = 3000.0;        // N/m, tangential tracking
  double squeeze_stiffness = 100.0;        // N/m, along the commanded squeeze direction
  double finger_damping = -1.0;            // negative selects critical damping
  double actuator_tau = 0.05;              // s, first-order lag of the squeeze force
  double direction_noise = 0.1;            // rad, stationary std of squeeze direction error
  double direction_noise_tau = 0.3;        // s
  double support_stiffness = 2.0e4;
  double support_release = 0.5;  // s after grasp start; negative keeps the floor
  int substeps = 4;                        // internal integration substeps per physics step

  double approach_force = 5.0;             // N per finger
  double approach_speed = 0.05;            // m/s
  double approach_gap = 0.015;             // m
  double approach_timeout = 3.0;           // s

  double contact_loss_time = 0.2;          // s with fewer than two contacts
  double drop_distance = 0.05;             // m below the grasp-start height

  int steps_per_tick() const {
    return static_cast<int>(std::lround(control_dt / physics_dt));
  }

  void validate() const {
    if (!(physics_dt > 0 && control_dt > 0)) throw std::invalid_argument("sim: dt must be positive");
    const int n = steps_per_tick();
    if (n < 1 || std::abs(n * physics_dt - control_dt) > 1e-12)
      throw std::invalid_argument("sim: physics dt must divide control dt exactly");
    if (!(friction >= 0)) throw std::invalid_argument("sim: friction must be >= 0");
    if (!(contact_stiffness > 0)) throw std::invalid_argument("sim: contact stiffness must be > 0");
    if (substeps < 1) throw std::invalid_argument("sim: substeps must be >= 1");
  }
};

struct RigidObject {
  double mass = 0.5;
  Mat3 inertia = Mat3::Identity();  // body frame
  Vec3 position = Vec3::Zero();
  Quat orientation = Quat::Identity();
  Vec3 momentum = Vec3::Zero();          // linear, world
  Vec3 angular_momentum = Vec3::Zero();  // about the COM, world

  Vec3 velocity() const { return momentum / mass; }
  Mat3 rotation() const { return orientation.toRotationMatrix(); }
  Mat3 inertia_world() const {
    const Mat3 r = rotation();
    return r * inertia * r.transpose();
  }
  Vec3 angular_velocity() const {
    const Mat3 r = rotation();
    return r * inertia.inverse() * r.transpose() * angular_momentum;
  }
};

inline Mat3 cuboid_inertia(double mass, const Vec3& half) {
  const Vec3 full = 2.0 * half;
  Mat3 i = Mat3::Zero();
  i(0, 0) = mass / 12.0 * (full.y() * full.y() + full.z() * full.z());
  i(1, 1) = mass / 12.0 * (full.x() * full.x() + full.z() * full.z());
  i(2, 2) = mass / 12.0 * (full.x() * full.x() + full.y() * full.y());
  return i;
}

struct Fingertip {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 target = Vec3::Zero();
  Vec3 target_velocity = Vec3::Zero();
  Vec3 feedforward = Vec3::Zero();     // commanded squeeze force
  Vec3 squeeze = Vec3::Zero();         // squeeze force after the actuator lag
  Vec3 squeeze_dir = Vec3::Zero();
  int face_axis = 0;
  double face_sign = 1.0;
  bool in_contact = false;
  Vec3 anchor = Vec3::Zero();          // sticking point, object frame
  double slip = 0.0;                   // cumulative, m
  Vec3 contact_force = Vec3::Zero();   // applied on the object, world
  Vec3 contact_point = Vec3::Zero();   // world
  Vec3 contact_normal = Vec3::Zero();  // outward face normal the force was resolved in, world
  std::array<double, 2> direction_error{0.0, 0.0};
};

struct FingerCommand {
  Vec3 target = Vec3::Zero();
  Vec3 target_velocity = Vec3::Zero();
  Vec3 feedforward = Vec3::Zero();
};

struct StepWrench {
  Vec3 force = Vec3::Zero();   // net on the object, including gravity and support
  Vec3 torque = Vec3::Zero();  // about the COM
  double contact_work = 0.0;   // work by finger contacts on the object this step
};

class SimulationDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class World {
 public:
  World(const SimConfig& cfg, double object_mass) : cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    if (!(object_mass > 0)) throw std::invalid_argument("object mass must be positive");
    obj_.mass = object_mass;
    obj_.inertia = cuboid_inertia(object_mass, cfg_.half_extents);
    obj_.position = Vec3(0.0, 0.0, cfg_.half_extents.z());

    const Vec3& h = cfg_.half_extents;
    const std::array<Vec3, kFingers> design{Vec3(h.x(), 0.0, 0.0),
                                            Vec3(-h.x(), cfg_.finger_spread, 0.0),
                                            Vec3(-h.x(), -cfg_.finger_spread, 0.0)};
    for (int i = 0; i < kFingers; ++i) {
      Fingertip& f = fingers_[i];
      f.face_axis = 0;
      f.face_sign = i == 0 ? 1.0 : -1.0;
      const Vec3 normal = f.face_sign * Vec3::UnitX();
      f.position = obj_.position + design[i] + cfg_.approach_gap * normal;
      f.target = f.position;
    }

    const double share = object_mass / kFingers;
    const double reduced = cfg_.finger_mass * share / (cfg_.finger_mass + share);
    contact_damping_ = cfg_.contact_damping >= 0
                           ? cfg_.contact_damping
                           : 2.0 * std::sqrt(cfg_.contact_stiffness * reduced);
    finger_damping_ = cfg_.finger_damping >= 0
                          ? cfg_.finger_damping
                          : 2.0 * std::sqrt(cfg_.finger_stiffness * cfg_.finger_mass);
  }

  const SimConfig& config() const { return cfg_; }
  double time() const { return time_; }
  const std::array<Fingertip, kFingers>& fingers() const { return fingers_; }

  /// Ground-truth object state. Debug and evaluation only; controllers read
  /// contacts through `contact_readout`.
  const RigidObject& debug_object() const { return obj_; }
  RigidObject& debug_object_mut() { return obj_; }

  bool support_active() const { return support_; }
  void retract_support() { support_ = false; }

  int contact_count() const {
    int n = 0;
    for (const auto& f : fingers_) n += f.in_contact ? 1 : 0;
    return n;
  }
  double low_contact_duration() const { return low_contact_time_; }

  void mark_grasp_start() { start_height_ = obj_.position.z(); }
  std::optional<double> grasp_start_height() const { return start_height_; }

  const StepWrench& last_wrench() const { return last_wrench_; }

  /// One physics step of length `physics_dt`.
  void step(const std::array<FingerCommand, kFingers>& cmds) { step(cmds, cfg_.physics_dt); }

  void step(const std::array<FingerCommand, kFingers>& cmds, double dt) {
    if (std::abs(dt - cfg_.physics_dt) > 1e-15)
      throw std::invalid_argument("World::step: dt must equal the physics dt");

    for (int i = 0; i < kFingers; ++i) {
      fingers_[i].target = cmds[i].target;
      fingers_[i].target_velocity = cmds[i].target_velocity;
      fingers_[i].feedforward = cmds[i].feedforward;
      const double fn = cmds[i].feedforward.norm();
      fingers_[i].squeeze_dir = fn > 1e-12 ? Vec3(cmds[i].feedforward / fn) : Vec3::Zero();
    }

    // Contact stiffness on a 100 g object is too stiff for one explicit 2 ms
    // step, so the step is split into equal substeps; the reported wrench is
    // the step-averaged impulse.
    const int n = cfg_.substeps;
    const double h = dt / n;
    StepWrench total;
    for (int s = 0; s < n; ++s) {
      const StepWrench w = substep(h);
      total.force += w.force;
      total.torque += w.torque;
      total.contact_work += w.contact_work;
    }
    total.force /= n;
    total.torque /= n;
    last_wrench_ = total;

    time_ += dt;
    if (contact_count() < 2)
      low_contact_time_ += dt;
    else
      low_contact_time_ = 0.0;

    if (!obj_.position.allFinite() || !obj_.momentum.allFinite() ||
        !obj_.angular_momentum.allFinite())
      throw SimulationDiverged("simulation diverged at t=" + std::to_string(time_));
  }

  /// Approach: each finger closes along its face normal until its contact force
  /// reaches the threshold, then holds. Returns false on timeout.
  bool approach() {
    std::array<bool, kFingers> done{};
    const double dt = cfg_.physics_dt;
    std::array<FingerCommand, kFingers> cmds;
    for (int i = 0; i < kFingers; ++i) cmds[i].target = fingers_[i].position;
    const double t_end = time_ + cfg_.approach_timeout;
    while (time_ < t_end) {
      bool all = true;
      for (int i = 0; i < kFingers; ++i) {
        const Fingertip& f = fingers_[i];
        if (!done[i] && f.in_contact && f.contact_force.norm() >= cfg_.approach_force) done[i] = true;
        const Vec3 inward = -f.face_sign * Vec3::Unit(f.face_axis);
        if (!done[i]) {
          cmds[i].target += inward * cfg_.approach_speed * dt;
          cmds[i].target_velocity = inward * cfg_.approach_speed;
        } else {
          cmds[i].target_velocity.setZero();
        }
        all = all && done[i];
      }
      if (all) return true;
      step(cmds, dt);
    }
    return false;
  }

  double slippage_mm() const {
    double s = 0.0;
    for (const auto& f : fingers_) s += f.slip;
    return 1000.0 * s / kFingers;
  }

  std::array<double, kFingers> finger_slip_mm() const {
    std::array<double, kFingers> out{};
    for (int i = 0; i < kFingers; ++i) out[i] = 1000.0 * fingers_[i].slip;
    return out;
  }

  /// Test hook: add sliding distance to a finger's accumulator.
  void add_slip(int finger, double meters) {
    if (meters < 0) throw std::invalid_argument("slip increments are nonnegative");
    fingers_.at(finger).slip += meters;
  }

  /// Debug export of the full world state. Object pose columns are ground truth
  /// and must not feed a controller.
  static void write_debug_header(std::ostream& os) {
    os << "time,debug_obj_x,debug_obj_y,debug_obj_z,debug_obj_qw,debug_obj_qx,debug_obj_qy,"
          "debug_obj_qz,debug_obj_vx,debug_obj_vy,debug_obj_vz";
    for (int i = 1; i <= kFingers; ++i)
      os << ",f" << i << "_x,f" << i << "_y,f" << i << "_z,f" << i << "_contact,f" << i << "_slip_mm";
    os << '\n';
  }

  void write_debug_row(std::ostream& os) const {
    const Vec3 v = obj_.velocity();
    os << time_ << ',' << obj_.position.x() << ',' << obj_.position.y() << ',' << obj_.position.z()
       << ',' << obj_.orientation.w() << ',' << obj_.orientation.x() << ','
       << obj_.orientation.y() << ',' << obj_.orientation.z() << ',' << v.x() << ',' << v.y()
       << ',' << v.z();
    for (const auto& f : fingers_)
      os << ',' << f.position.x() << ',' << f.position.y() << ',' << f.position.z() << ','
         << (f.in_contact ? 1 : 0) << ',' << 1000.0 * f.slip;
    os << '\n';
  }

 private:
  StepWrench substep(double dt) {
    advance_direction_noise(dt);
    const double lag = cfg_.actuator_tau > 0.0 ? 1.0 - std::exp(-dt / cfg_.actuator_tau) : 1.0;
    for (auto& f : fingers_) f.squeeze += lag * (f.feedforward - f.squeeze);

    const Mat3 rot = obj_.rotation();
    const Vec3 vel = obj_.velocity();
    const Vec3 omega = obj_.angular_velocity();

    StepWrench w;
    w.force = obj_.mass * cfg_.gravity;
    std::array<Vec3, kFingers> arm_body;  // contact point in the object frame
    for (int i = 0; i < kFingers; ++i) {
      resolve_contact(fingers_[i], rot, vel, omega);
      const Fingertip& f = fingers_[i];
      w.force += f.contact_force;
      w.torque += (f.contact_point - obj_.position).cross(f.contact_force);
      arm_body[i] = rot.transpose() * (f.contact_point - obj_.position);
    }
    if (support_) w.force.z() += support_force(rot, vel);

    // Fingertips: impedance + perturbed feedforward - contact reaction.
    for (auto& f : fingers_) {
      const Vec3 acc = finger_force(f) / cfg_.finger_mass;
      f.velocity += acc * dt;
      f.position += f.velocity * dt;
    }

    // Object: momenta advance by the exact impulse; positions use the updated
    // velocity with the constant gravity term integrated exactly.
    obj_.momentum += w.force * dt;
    obj_.angular_momentum += w.torque * dt;
    const Vec3 v_new = obj_.velocity();
    obj_.position += v_new * dt - 0.5 * cfg_.gravity * dt * dt;
    const Vec3 omega_new = obj_.angular_velocity();
    const double angle = omega_new.norm() * dt;
    if (angle > 0.0) {
      const Quat dq(Eigen::AngleAxisd(angle, omega_new.normalized()));
      obj_.orientation = (dq * obj_.orientation).normalized();
    }

    // Work over the integrator's own displacement of the material contact point,
    // so the audit closes against the positions actually produced.
    const Mat3 rot_new = obj_.rotation();
    for (int i = 0; i < kFingers; ++i) {
      const Fingertip& f = fingers_[i];
      const Vec3 moved = obj_.position + rot_new * arm_body[i];
      w.contact_work += f.contact_force.dot(moved - f.contact_point);
    }
    return w;
  }

  double standard_normal() {
    auto uniform = [this] { return (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53; };
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  void advance_direction_noise(double dt) {
    if (cfg_.direction_noise <= 0.0) return;
    const double a = std::exp(-dt / cfg_.direction_noise_tau);
    const double b = cfg_.direction_noise * std::sqrt(1.0 - a * a);
    for (auto& f : fingers_)
      for (double& e : f.direction_error) e = a * e + b * standard_normal();
  }

  double support_force(const Mat3& rot, const Vec3& vel) const {
    const Vec3& h = cfg_.half_extents;
    const double depth = std::abs(rot(2, 0)) * h.x() + std::abs(rot(2, 1)) * h.y() +
                         std::abs(rot(2, 2)) * h.z();
    const double pen = depth - obj_.position.z();
    if (pen <= 0.0) return 0.0;
    const double damping = std::sqrt(cfg_.support_stiffness * obj_.mass);
    return std::max(0.0, cfg_.support_stiffness * pen - damping * vel.z());
  }

  void resolve_contact(Fingertip& f, const Mat3& rot, const Vec3& vel, const Vec3& omega) {
    const Vec3& h = cfg_.half_extents;
    const int a = f.face_axis;
    const int b = (a + 1) % 3;
    const int c = (a + 2) % 3;
    const Vec3 local = rot.transpose() * (f.position - obj_.position);
    const double pen = h(a) - f.face_sign * local(a);
    const bool inside_face = std::abs(local(b)) <= h(b) && std::abs(local(c)) <= h(c);

    f.contact_force.setZero();
    if (!(pen > 0.0 && pen < h(a) && inside_face)) {
      f.in_contact = false;
      f.contact_point = f.position;
      return;
    }

    Vec3 surface = local;
    surface(a) = f.face_sign * h(a);
    if (!f.in_contact) {
      f.anchor = surface;
      f.in_contact = true;
    }
    f.contact_point = obj_.position + rot * surface;
    f.contact_normal = rot.col(a) * f.face_sign;

    const Vec3 point_vel = vel + omega.cross(f.contact_point - obj_.position);
    const Vec3 rel = rot.transpose() * (f.velocity - point_vel);
    const double pen_rate = -f.face_sign * rel(a);
    const double normal = std::max(0.0, cfg_.contact_stiffness * pen + contact_damping_ * pen_rate);

    Eigen::Vector2d disp(surface(b) - f.anchor(b), surface(c) - f.anchor(c));
    Eigen::Vector2d rel_t(rel(b), rel(c));
    Eigen::Vector2d ft = cfg_.contact_stiffness * disp + contact_damping_ * rel_t;
    const double cap = cfg_.friction * normal;
    const double mag = ft.norm();
    if (mag > cap) {
      const Eigen::Vector2d dir = mag > 0.0 ? Eigen::Vector2d(ft / mag) : Eigen::Vector2d::Zero();
      ft = cap * dir;
      const Eigen::Vector2d new_anchor =
          Eigen::Vector2d(surface(b), surface(c)) - ft / cfg_.contact_stiffness;
      f.slip += (new_anchor - Eigen::Vector2d(f.anchor(b), f.anchor(c))).norm();
      f.anchor(b) = new_anchor(0);
      f.anchor(c) = new_anchor(1);
    }
    f.anchor(a) = f.face_sign * h(a);

    Vec3 local_force = Vec3::Zero();
    local_force(a) = -f.face_sign * normal;
    local_force(b) = ft(0);
    local_force(c) = ft(1);
    f.contact_force = rot * local_force;
  }

  Vec3 finger_force(const Fingertip& f) const {
    const Vec3 err = f.target - f.position;
    Vec3 spring;
    Vec3 ff = f.squeeze;
    if (f.squeeze_dir.squaredNorm() > 0.0) {
      const Vec3& d = f.squeeze_dir;
      const Vec3 along = d * d.dot(err);
      spring = cfg_.squeeze_stiffness * along + cfg_.finger_stiffness * (err - along);
      // Squeeze direction error: the feedforward tilts by two small angles.
      Vec3 t1 = d.cross(Vec3::UnitZ());
      if (t1.norm() < 1e-6) t1 = d.cross(Vec3::UnitX());
      t1.normalize();
      const Vec3 t2 = d.cross(t1);
      const double mag = f.squeeze.norm();
      ff += mag * (std::tan(f.direction_error[0]) * t1 + std::tan(f.direction_error[1]) * t2);
    } else {
      spring = cfg_.finger_stiffness * err;
    }
    return spring + finger_damping_ * (f.target_velocity - f.velocity) + ff - f.contact_force;
  }

  SimConfig cfg_;
  RigidObject obj_;
  std::array<Fingertip, kFingers> fingers_;
  std::mt19937_64 rng_;
  double contact_damping_ = 0.0;
  double finger_damping_ = 0.0;
  double time_ = 0.0;
  double low_contact_time_ = 0.0;
  bool support_ = true;
  std::optional<double> start_height_;
  StepWrench last_wrench_;
};

/// Tactile readout: per-finger contact force, fingertip position and velocity in
/// the world frame, with optional Gaussian force noise. Object pose is never exposed.
template <class Rng>
std::array<ContactSnapshot, kFingers> contact_readout(const World& world, double noise_std, Rng& rng) {
  std::array<ContactSnapshot, kFingers> out;
  std::normal_distribution<double> noise(0.0, noise_std > 0 ? noise_std : 1.0);
  for (int i = 0; i < kFingers; ++i) {
    const Fingertip& f = world.fingers()[i];
    ContactSnapshot& c = out[i];
    c.in_contact = f.in_contact;
    c.position = f.position;
    c.velocity = f.velocity;
    if (f.in_contact) {
      c.force = f.contact_force;
      if (noise_std > 0)
        for (int k = 0; k < 3; ++k) c.force(k) += noise(rng);
    }
  }
  return out;
}

inline std::array<ContactSnapshot, kFingers> contact_readout(const World& world) {
  std::mt19937_64 unused(0);
  return contact_readout(world, 0.0, unused);
}

inline double slippage(const World& world) { return world.slippage_mm(); }

enum class Outcome { Running, Success, Failure };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::Running: return "running";
    case Outcome::Success: return "success";
    case Outcome::Failure: return "failure";
  }
  return "?";
}

inline constexpr double kTargetDuration = 25.0;

inline Outcome check_outcome(const World& world, double t_a, double target_duration = kTargetDuration) {
  const SimConfig& cfg = world.config();
  if (world.low_contact_duration() > cfg.contact_loss_time + 1e-12) return Outcome::Failure;
  if (const auto h = world.grasp_start_height())
    if (world.debug_object().position.z() < *h - cfg.drop_distance) return Outcome::Failure;
  if (t_a >= target_duration - 1e-9) return Outcome::Success;
  return Outcome::Running;
}

}  // namespace slipgrasp
