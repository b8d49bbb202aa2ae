#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

namespace slipgrasp {

/// Random Fourier features for the RBF kernel with per-dimension lengthscales:
///   phi(z) = sqrt(2/M) cos(Omega z + b),  Omega_ij ~ N(0, 1/l_j^2),  b_i ~ U[0, 2 pi).
struct FeatureMap {
  Eigen::MatrixXd omega;        // M x D
  Eigen::VectorXd phase;        // M
  Eigen::VectorXd lengthscales; // D
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(omega.rows()); }
  int input_dim() const { return static_cast<int>(omega.cols()); }

  Eigen::VectorXd operator()(const Eigen::Ref<const Eigen::VectorXd>& z) const {
    const double amp = std::sqrt(2.0 / size());
    return amp * (omega * z + phase).array().cos().matrix();
  }

  /// Row-wise feature matrix for inputs stored as rows of `z` (N x D).
  Eigen::MatrixXd matrix(const Eigen::Ref<const Eigen::MatrixXd>& z) const {
    const double amp = std::sqrt(2.0 / size());
    Eigen::MatrixXd arg = z * omega.transpose();
    arg.rowwise() += phase.transpose();
    return amp * arg.array().cos().matrix();
  }
};

inline FeatureMap sample_features(int m, const Eigen::VectorXd& lengthscales, std::uint64_t seed) {
  if (m < 1) throw std::invalid_argument("sample_features: M must be >= 1");
  if (lengthscales.size() < 1 || !(lengthscales.array() > 0.0).all())
    throw std::invalid_argument("sample_features: lengthscales must be positive");

  FeatureMap f;
  f.seed = seed;
  f.lengthscales = lengthscales;
  f.omega.resize(m, lengthscales.size());
  f.phase.resize(m);

  // Draws are made with explicit transforms of raw 64-bit outputs so the map is
  // reproducible independent of the standard library's distribution classes.
  std::mt19937_64 rng(seed);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  auto uniform = [&rng] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
  bool have_spare = false;
  double spare = 0.0;
  auto normal = [&] {
    if (have_spare) {
      have_spare = false;
      return spare;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare = r * std::sin(two_pi * u2);
    have_spare = true;
    return r * std::cos(two_pi * u2);
  };

  for (int i = 0; i < m; ++i)
    for (int d = 0; d < lengthscales.size(); ++d) f.omega(i, d) = normal() / lengthscales(d);
  for (int i = 0; i < m; ++i) f.phase(i) = two_pi * uniform();
  return f;
}

}  // namespace slipgrasp
