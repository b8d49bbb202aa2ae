#pragma once

// Fourier-featured linear Gaussian model (LGM-FF) of the energy-state transition.
// One Bayesian linear regression per state dimension over a shared feature map,
// with closed-form Gaussian belief propagation that costs O(D M^2) per step.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "slipgrasp/energy.hpp"
#include "slipgrasp/features.hpp"

namespace slipgrasp {

struct Transition {
  StateVec x;
  ControlVec u;
  StateVec next;
};

struct ModelConfig {
  int features = 128;
  double noise_var = 1e-3;     // sigma_n^2 in normalized target units
  double prior_var = 1.0;      // sigma_w^2
  double lengthscale_scale = 8.0;  // in standardized input units
  double scale_floor = 1e-3;
  double force_scale_floor = 5.0;  // N; the force input is often held constant early on
  bool normalize = true;
  bool predict_delta = false;
  std::uint64_t seed = 7;
};

struct DimModel {
  Eigen::VectorXd mean;    // posterior weight mean, M
  Eigen::MatrixXd factor;  // upper Cholesky factor U with Sigma_w = U^T U
  double noise_var = 0.0;
  double prior_var = 1.0;
};

struct GaussianBelief {
  StateVec mean = StateVec::Zero();
  StateVec var = StateVec::Zero();
};

class ModelFitError : public std::runtime_error {
 public:
  ModelFitError(const std::string& what, double condition)
      : std::runtime_error(what), condition_(condition) {}
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

class LgmFfModel {
 public:
  FeatureMap features;
  std::vector<DimModel> dims;  // one per state dimension
  InputVec input_shift = InputVec::Zero();
  InputVec input_scale = InputVec::Ones();
  StateVec output_shift = StateVec::Zero();
  StateVec output_scale = StateVec::Ones();
  bool predict_delta = false;
  std::size_t train_count = 0;

  bool fitted() const { return static_cast<int>(dims.size()) == kStateDim; }
  int feature_count() const { return features.size(); }

  InputVec normalize_input(const StateVec& x, const ControlVec& u) const {
    InputVec z;
    z << x, u;
    return (z - input_shift).cwiseQuotient(input_scale);
  }

  /// Per-dimension predictive mean mu_w^T phi(z) and variance phi^T Sigma_w phi + sigma_n^2.
  GaussianBelief predict(const StateVec& x, const ControlVec& u) const {
    require_fitted();
    const Eigen::VectorXd phi = features(normalize_input(x, u));
    GaussianBelief out;
    for (int d = 0; d < kStateDim; ++d) {
      const DimModel& dm = dims[d];
      const double mu = dm.mean.dot(phi);
      const Eigen::VectorXd uphi = dm.factor.triangularView<Eigen::Upper>() * phi;
      const double var = uphi.squaredNorm() + dm.noise_var;
      out.mean(d) = mu * output_scale(d) + output_shift(d);
      out.var(d) = var * output_scale(d) * output_scale(d);
    }
    if (predict_delta) out.mean += x;
    return out;
  }

  /// Moment-matched prediction under a diagonal Gaussian state belief; the
  /// control is deterministic. Uses exact first and second moments of the cosine
  /// features and keeps only the diagonal of the output covariance.
  GaussianBelief propagate(const GaussianBelief& belief, const ControlVec& u) const {
    require_fitted();
    if ((belief.var.array() <= 0.0).all()) return predict(belief.mean, u);

    const int m = feature_count();
    const InputVec zm = normalize_input(belief.mean, u);
    const Eigen::Matrix<double, kStateDim, 1> sd =
        belief.var.cwiseMax(0.0).cwiseSqrt().cwiseQuotient(input_scale.head<kStateDim>());

    // Rows of w are the state columns of Omega scaled by the input sd, so the
    // feature arguments have covariance S = w w^T.
    const Eigen::Matrix<double, Eigen::Dynamic, kStateDim, Eigen::RowMajor> w =
        features.omega.leftCols<kStateDim>() * sd.asDiagonal();
    const Eigen::ArrayXd arg = (features.omega * zm + features.phase).array();
    const Eigen::ArrayXd c = arg.cos();
    const Eigen::ArrayXd sn = arg.sin();
    const Eigen::ArrayXd half_diag = 0.5 * w.rowwise().squaredNorm().array();
    const Eigen::ArrayXd e = (-half_diag).exp();
    const double amp2 = 2.0 / m;
    const Eigen::VectorXd mean_phi = (std::sqrt(amp2) * c * e).matrix();

    // E[phi_i phi_j] = (2/M) e_i e_j [c_i c_j cosh(S_ij) + s_i s_j sinh(S_ij)], accumulated
    // against the packed upper triangle of Sigma_w + mu mu^T for every output.
    using PackedBlock = Eigen::Matrix<double, Eigen::Dynamic, kStateDim, Eigen::RowMajor>;
    Eigen::Matrix<double, kStateDim, 1> second = Eigen::Matrix<double, kStateDim, 1>::Zero();
    Eigen::ArrayXd sij(m), ex(m), q(m);
    const double* packed = packed_second_moment_.data();
    for (int i = 0; i < m; ++i) {
      const int n = m - i;
      sij.head(n) = (w.bottomRows(n) * w.row(i).transpose()).array();
      const auto cos_diff = c[i] * c.tail(n) + sn[i] * sn.tail(n);  // cos(a_i - a_j)
      const auto cos_sum = c[i] * c.tail(n) - sn[i] * sn.tail(n);   // cos(a_i + a_j)
      if (sij.head(n).maxCoeff() < 600.0) {
        ex.head(n) = sij.head(n).exp();
        q.head(n) = (0.5 * amp2 * e[i]) * e.tail(n) * (cos_diff * ex.head(n) + cos_sum / ex.head(n));
      } else {
        const auto base = -half_diag[i] - half_diag.tail(n);
        q.head(n) = 0.5 * amp2 * (cos_diff * (base + sij.head(n)).exp() + cos_sum * (base - sij.head(n)).exp());
      }
      const Eigen::Map<const PackedBlock> block(packed, n, kStateDim);
      second.noalias() += block.transpose() * q.head(n).matrix();
      packed += static_cast<std::ptrdiff_t>(n) * kStateDim;
    }

    GaussianBelief out;
    for (int d = 0; d < kStateDim; ++d) {
      const DimModel& dm = dims[d];
      const double mu = dm.mean.dot(mean_phi);
      const double var = std::max(second(d) - mu * mu, 0.0) + dm.noise_var;
      out.mean(d) = mu * output_scale(d) + output_shift(d);
      out.var(d) = var * output_scale(d) * output_scale(d);
    }
    if (predict_delta) {
      out.mean += belief.mean;
      out.var += belief.var;
    }
    return out;
  }

  std::vector<GaussianBelief> rollout(const StateVec& x0, std::span<const ControlVec> controls) const {
    std::vector<GaussianBelief> out;
    out.reserve(controls.size());
    GaussianBelief b{x0, StateVec::Zero()};
    for (const auto& u : controls) {
      b = propagate(b, u);
      out.push_back(b);
    }
    return out;
  }

  /// Rebuilds the cache of Sigma_w + mu mu^T used by propagate: upper triangle,
  /// row by row, outputs interleaved, off-diagonal entries doubled.
  void refresh_cache() {
    const int m = feature_count();
    packed_second_moment_.assign(static_cast<std::size_t>(m) * (m + 1) / 2 * kStateDim, 0.0);
    for (int d = 0; d < static_cast<int>(dims.size()); ++d) {
      const DimModel& dm = dims[d];
      Eigen::MatrixXd sigma = dm.factor.transpose() * dm.factor;
      sigma += dm.mean * dm.mean.transpose();
      std::size_t p = 0;
      for (int i = 0; i < m; ++i)
        for (int j = i; j < m; ++j, ++p)
          packed_second_moment_[p * kStateDim + d] = (i == j ? 1.0 : 2.0) * sigma(i, j);
    }
  }

  Eigen::MatrixXd posterior_covariance(int d) const {
    return dims.at(d).factor.transpose() * dims.at(d).factor;
  }

 private:
  void require_fitted() const {
    if (!fitted()) throw std::logic_error("LgmFfModel used before fit");
  }

  std::vector<double> packed_second_moment_;
};

namespace detail {

inline Eigen::MatrixXd input_rows(std::span<const Transition> data) {
  Eigen::MatrixXd z(data.size(), kInputDim);
  for (std::size_t i = 0; i < data.size(); ++i) {
    z.row(i).head<kStateDim>() = data[i].x.transpose();
    z.row(i).tail<kControlDim>() = data[i].u.transpose();
  }
  return z;
}

inline Eigen::MatrixXd target_rows(std::span<const Transition> data, bool delta) {
  Eigen::MatrixXd y(data.size(), kStateDim);
  for (std::size_t i = 0; i < data.size(); ++i)
    y.row(i) = (delta ? StateVec(data[i].next - data[i].x) : data[i].next).transpose();
  return y;
}

inline void column_stats(const Eigen::MatrixXd& a, double floor, Eigen::VectorXd& mean,
                         Eigen::VectorXd& scale) {
  mean = a.colwise().mean().transpose();
  scale.resize(a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const double var = (a.col(j).array() - mean(j)).square().mean();
    scale(j) = std::max(std::sqrt(var), floor);
  }
}

}  // namespace detail

/// Exact Bayesian linear regression per state dimension on the given features.
/// Inputs/targets are standardized first when `cfg.normalize` is set.
inline LgmFfModel fit(std::span<const Transition> data, const FeatureMap& features,
                      const ModelConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("fit: empty dataset");
  if (features.input_dim() != kInputDim)
    throw std::invalid_argument("fit: feature map input dimension must be 17");

  LgmFfModel model;
  model.features = features;
  model.predict_delta = cfg.predict_delta;
  model.train_count = data.size();

  Eigen::MatrixXd z = detail::input_rows(data);
  Eigen::MatrixXd y = detail::target_rows(data, cfg.predict_delta);
  if (cfg.normalize) {
    Eigen::VectorXd mz, sz, my, sy;
    detail::column_stats(z, cfg.scale_floor, mz, sz);
    detail::column_stats(y, cfg.scale_floor, my, sy);
    sz(kInputDim - 1) = std::max(sz(kInputDim - 1), cfg.force_scale_floor);
    model.input_shift = mz;
    model.input_scale = sz;
    model.output_shift = my;
    model.output_scale = sy;
    z = (z.rowwise() - mz.transpose()).array().rowwise() / sz.transpose().array();
    y = (y.rowwise() - my.transpose()).array().rowwise() / sy.transpose().array();
  }

  const Eigen::MatrixXd phi = features.matrix(z);
  const int m = features.size();
  Eigen::MatrixXd gram = phi.transpose() * phi;

  Eigen::MatrixXd precision = gram / cfg.noise_var;
  precision.diagonal().array() += 1.0 / cfg.prior_var;
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(precision, Eigen::EigenvaluesOnly);
    const double cond = eig.eigenvalues().maxCoeff() / eig.eigenvalues().minCoeff();
    throw ModelFitError("fit: posterior precision is not positive definite (condition " +
                            std::to_string(cond) + ")",
                        cond);
  }
  Eigen::MatrixXd sigma = llt.solve(Eigen::MatrixXd::Identity(m, m));
  sigma = 0.5 * (sigma + sigma.transpose());
  Eigen::LLT<Eigen::MatrixXd> cov_llt(sigma);
  if (cov_llt.info() != Eigen::Success)
    throw ModelFitError("fit: posterior covariance factorization failed", 0.0);
  const Eigen::MatrixXd upper = cov_llt.matrixU();

  const Eigen::MatrixXd rhs = phi.transpose() * y / cfg.noise_var;
  const Eigen::MatrixXd means = llt.solve(rhs);
  model.dims.resize(kStateDim);
  for (int d = 0; d < kStateDim; ++d) {
    DimModel& dm = model.dims[d];
    dm.mean = means.col(d);
    dm.factor = upper;
    dm.noise_var = cfg.noise_var;
    dm.prior_var = cfg.prior_var;
  }
  model.refresh_cache();
  return model;
}

/// Lengthscales from the data (standard deviation per input, floored), fresh
/// features from the configured seed, then `fit`.
inline LgmFfModel train(std::span<const Transition> data, const ModelConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  Eigen::VectorXd ls(kInputDim);
  if (cfg.normalize) {
    ls.setConstant(cfg.lengthscale_scale);
  } else {
    Eigen::VectorXd mean, scale;
    detail::column_stats(detail::input_rows(data), cfg.scale_floor, mean, scale);
    scale(kInputDim - 1) = std::max(scale(kInputDim - 1), cfg.force_scale_floor);
    ls = scale * cfg.lengthscale_scale;
  }
  return fit(data, sample_features(cfg.features, ls, cfg.seed), cfg);
}

// ---------------------------------------------------------------------------
// Checkpoints: line-oriented text with C99 hex floats, so values round-trip
// bit-exactly.

namespace detail {

inline std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline void write_vec(std::ostream& os, const char* tag, const Eigen::Ref<const Eigen::VectorXd>& v) {
  os << tag << ' ' << v.size();
  for (Eigen::Index i = 0; i < v.size(); ++i) os << ' ' << hex(v(i));
  os << '\n';
}

inline Eigen::VectorXd read_vec(std::istream& is, const std::string& tag) {
  std::string got;
  Eigen::Index n = 0;
  if (!(is >> got >> n) || got != tag)
    throw std::runtime_error("checkpoint: expected '" + tag + "', found '" + got + "'");
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::string tok;
    if (!(is >> tok)) throw std::runtime_error("checkpoint: truncated '" + tag + "'");
    v(i) = std::strtod(tok.c_str(), nullptr);
  }
  return v;
}

inline Eigen::MatrixXd reshape(const Eigen::VectorXd& v, Eigen::Index rows, Eigen::Index cols) {
  if (v.size() != rows * cols) throw std::runtime_error("checkpoint: matrix size mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v(r * cols + c);
  return m;
}

inline Eigen::VectorXd flatten(const Eigen::MatrixXd& m) {
  Eigen::VectorXd v(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) v(r * m.cols() + c) = m(r, c);
  return v;
}

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "slipgrasp-lgmff";
inline constexpr int kCheckpointVersion = 1;

inline void save_model(std::ostream& os, const LgmFfModel& model) {
  using detail::write_vec;
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "seed " << model.features.seed << '\n';
  os << "features " << model.feature_count() << '\n';
  os << "predict_delta " << (model.predict_delta ? 1 : 0) << '\n';
  os << "train_count " << model.train_count << '\n';
  write_vec(os, "lengthscales", model.features.lengthscales);
  write_vec(os, "input_shift", model.input_shift);
  write_vec(os, "input_scale", model.input_scale);
  write_vec(os, "output_shift", model.output_shift);
  write_vec(os, "output_scale", model.output_scale);
  write_vec(os, "omega", detail::flatten(model.features.omega));
  write_vec(os, "phase", model.features.phase);
  for (const auto& dm : model.dims) {
    os << "dim " << detail::hex(dm.noise_var) << ' ' << detail::hex(dm.prior_var) << '\n';
    write_vec(os, "mean", dm.mean);
    write_vec(os, "factor", detail::flatten(dm.factor));
  }
}

inline LgmFfModel load_model(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != kCheckpointMagic)
    throw std::runtime_error("checkpoint: not an LGM-FF checkpoint");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  auto expect = [&is](const std::string& tag) {
    std::string got;
    if (!(is >> got) || got != tag) throw std::runtime_error("checkpoint: expected '" + tag + "'");
  };
  LgmFfModel model;
  int m = 0;
  int delta = 0;
  expect("seed");
  is >> model.features.seed;
  expect("features");
  is >> m;
  expect("predict_delta");
  is >> delta;
  expect("train_count");
  is >> model.train_count;
  model.predict_delta = delta != 0;
  model.features.lengthscales = detail::read_vec(is, "lengthscales");
  model.input_shift = detail::read_vec(is, "input_shift");
  model.input_scale = detail::read_vec(is, "input_scale");
  model.output_shift = detail::read_vec(is, "output_shift");
  model.output_scale = detail::read_vec(is, "output_scale");
  model.features.omega = detail::reshape(detail::read_vec(is, "omega"), m, kInputDim);
  model.features.phase = detail::read_vec(is, "phase");
  for (int d = 0; d < kStateDim; ++d) {
    DimModel dm;
    std::string nv, pv;
    expect("dim");
    is >> nv >> pv;
    dm.noise_var = std::strtod(nv.c_str(), nullptr);
    dm.prior_var = std::strtod(pv.c_str(), nullptr);
    dm.mean = detail::read_vec(is, "mean");
    dm.factor = detail::reshape(detail::read_vec(is, "factor"), m, m);
    model.dims.push_back(std::move(dm));
  }
  if (!is) throw std::runtime_error("checkpoint: truncated");
  model.refresh_cache();
  return model;
}

inline void save_model(const std::string& path, const LgmFfModel& model) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  save_model(os, model);
}

inline LgmFfModel load_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return load_model(is);
}

}  // namespace slipgrasp
