#pragma once

// Multivariate Gaussian primitives: moments, jittered Cholesky,
// reparameterized sampling, whitening and the closed-form KL to N(0, I).
// All arithmetic is binary64.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <string_view>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gapbridge/emb_io.hpp"
#include "gapbridge/errors.hpp"
#include "gapbridge/log.hpp"
#include "gapbridge/rng.hpp"

namespace gapbridge {

enum class Provenance { setting1, setting2, fitted, synthetic_truth };

inline std::string_view to_string(Provenance p) noexcept {
  switch (p) {
    case Provenance::setting1: return "setting1";
    case Provenance::setting2: return "setting2";
    case Provenance::fitted: return "fitted";
    case Provenance::synthetic_truth: return "synthetic-truth";
  }
  return "fitted";
}

inline Provenance parse_provenance(std::string_view s) {
  if (s == "setting1") return Provenance::setting1;
  if (s == "setting2") return Provenance::setting2;
  if (s == "fitted") return Provenance::fitted;
  if (s == "synthetic-truth") return Provenance::synthetic_truth;
  throw FormatError("unknown provenance '" + std::string(s) + "'");
}

/// N(mean, chol * chol^T) with chol lower triangular, positive diagonal.
struct GaussianParams {
  Vec mean;
  Mat chol;
  Provenance provenance = Provenance::fitted;

  GaussianParams() = default;
  GaussianParams(Vec mean_, Mat chol_, Provenance provenance_)
      : mean(std::move(mean_)), chol(std::move(chol_)), provenance(provenance_) {
    validate();
  }

  static GaussianParams standard(Eigen::Index dim, Provenance p = Provenance::fitted) {
    return GaussianParams(Vec::Zero(dim), Mat::Identity(dim, dim), p);
  }

  Eigen::Index dim() const noexcept { return mean.size(); }
  Mat covariance() const { return chol * chol.transpose(); }

  void validate() const {
    const auto d = mean.size();
    if (d < 1) throw ValidationError("gaussian dim must be positive");
    if (chol.rows() != d || chol.cols() != d)
      throw ShapeError("cholesky factor is " + std::to_string(chol.rows()) + "x" +
                       std::to_string(chol.cols()) + ", expected " + std::to_string(d) + "x" +
                       std::to_string(d));
    if (!mean.allFinite() || !chol.allFinite()) throw ValidationError("non-finite gaussian parameters");
    for (Eigen::Index i = 0; i < d; ++i) {
      if (!(chol(i, i) > 0.0))
        throw ValidationError("cholesky diagonal entry " + std::to_string(i) + " is not positive");
      for (Eigen::Index j = i + 1; j < d; ++j)
        if (chol(i, j) != 0.0) throw ValidationError("cholesky factor is not lower triangular");
    }
  }
};

enum class Estimator { unbiased, biased };

struct Moments {
  Vec mean;
  Mat cov;
};

/// Sample mean and covariance of the rows; the covariance is symmetrized
/// after accumulation.
inline Moments estimate_moments(const Mat& rows, Estimator estimator) {
  const auto n = rows.rows();
  const Eigen::Index minimum = estimator == Estimator::unbiased ? 2 : 1;
  if (n < minimum)
    throw InsufficientDataError("moment estimation needs at least " + std::to_string(minimum) +
                                " rows, got " + std::to_string(n));
  Moments m;
  m.mean = rows.colwise().mean().transpose();
  const Mat centered = rows.rowwise() - m.mean.transpose();
  const double denom = estimator == Estimator::unbiased ? static_cast<double>(n - 1)
                                                        : static_cast<double>(n);
  m.cov = (centered.transpose() * centered) / denom;
  m.cov = 0.5 * (m.cov + m.cov.transpose()).eval();
  return m;
}

/// Multipliers tried in order; each is scaled by max(1, tr(cov)/d).
struct JitterPolicy {
  std::array<double, 6> ladder{0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-3};
};

struct CholeskyResult {
  Mat factor;
  double jitter = 0.0;
};

namespace detail {

// Returns -1 on success, else the index of the first non-positive pivot.
inline Eigen::Index try_cholesky(const Mat& a, Mat& l) {
  const auto d = a.rows();
  l.setZero(d, d);
  const double max_diag = d > 0 ? a.diagonal().cwiseAbs().maxCoeff() : 0.0;
  const double floor = std::numeric_limits<double>::epsilon() * static_cast<double>(d) * max_diag;
  for (Eigen::Index j = 0; j < d; ++j) {
    double pivot = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
    if (!(pivot > floor)) return j;
    const double ljj = std::sqrt(pivot);
    l(j, j) = ljj;
    for (Eigen::Index i = j + 1; i < d; ++i) {
      double s = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return -1;
}

}  // namespace detail

/**
 * Lower Cholesky factor of `cov + jitter * I`.
 *
 * The jitter is the first rung of the ladder for which every pivot is
 * positive; zero when `cov` is numerically positive definite.
 *
 * Throws ValidationError if `cov` is not square and symmetric to 1e-9
 * relative, NotPositiveDefiniteError when the top rung still fails.
 */
inline CholeskyResult cholesky(const Mat& cov, const JitterPolicy& policy = {}) {
  const auto d = cov.rows();
  if (d == 0 || cov.cols() != d) throw ShapeError("cholesky needs a non-empty square matrix");
  if (!cov.allFinite()) throw ValidationError("cholesky input has non-finite entries");
  const double scale_abs = std::max(1.0, cov.cwiseAbs().maxCoeff());
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale_abs)
    throw ValidationError("cholesky input is not symmetric");

  const double scale = std::max(1.0, cov.trace() / static_cast<double>(d));
  CholeskyResult out;
  Eigen::Index failing = 0;
  for (double rung : policy.ladder) {
    const double lambda = rung * scale;
    Mat shifted = cov;
    shifted.diagonal().array() += lambda;
    failing = detail::try_cholesky(shifted, out.factor);
    if (failing < 0) {
      out.jitter = lambda;
      if (lambda > 0.0) log(LogLevel::debug, "cholesky: applied jitter " + std::to_string(lambda));
      return out;
    }
  }
  throw NotPositiveDefiniteError("matrix is not positive definite even with jitter " +
                                     std::to_string(policy.ladder.back() * scale) +
                                     "; failing pivot " + std::to_string(failing),
                                 static_cast<long>(failing));
}

/// Row i = chol * z_i + mean; `latent` (optional) receives the z_i.
inline Mat sample_noise(const GaussianParams& params, Eigen::Index n, Rng& rng, Mat* latent = nullptr) {
  if (n < 1) throw ValidationError("sample_noise needs n >= 1");
  const auto d = params.dim();
  Mat z(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) z(i, j) = rng.normal();
  Mat out = z * params.chol.transpose();
  out.rowwise() += params.mean.transpose();
  if (latent) *latent = std::move(z);
  return out;
}

/// Solves chol * eps_i = delta_i - mean for every row by forward substitution.
inline Mat whiten(const Mat& deltas, const GaussianParams& params) {
  if (deltas.cols() != params.dim())
    throw ShapeError("whiten: deltas have dim " + std::to_string(deltas.cols()) + ", params " +
                     std::to_string(params.dim()));
  Mat centered_t = (deltas.rowwise() - params.mean.transpose()).transpose();
  params.chol.triangularView<Eigen::Lower>().solveInPlace(centered_t);
  return centered_t.transpose();
}

/// KL(N(mean, cov) || N(0, I)). A jittered covariance is treated as the
/// distribution's covariance.
inline double kl_to_standard(const Vec& mean, const Mat& cov) {
  if (cov.rows() != mean.size()) throw ShapeError("kl_to_standard: mean/cov size mismatch");
  const auto chol = cholesky(cov);
  const double d = static_cast<double>(mean.size());
  const double log_det = 2.0 * chol.factor.diagonal().array().log().sum();
  return 0.5 * (cov.trace() + d * chol.jitter + mean.squaredNorm() - d - log_det);
}

/// Writes `<stem>_mean.emb`, `<stem>_chol.emb` and the JSON manifest at
/// `json_path`; blob paths in the manifest are relative to it.
inline void save_params(const GaussianParams& params, const std::filesystem::path& json_path) {
  const auto stem = json_path.stem().string();
  const std::string mean_name = stem + "_mean.emb";
  const std::string chol_name = stem + "_chol.emb";
  const auto dir = json_path.parent_path();
  write_embeddings(EmbeddingMatrix::from_matrix(params.mean.transpose()), dir / mean_name);
  write_embeddings(EmbeddingMatrix::from_matrix(params.chol), dir / chol_name);
  nlohmann::json j{{"dim", params.dim()},
                   {"provenance", std::string(to_string(params.provenance))},
                   {"mean_path", mean_name},
                   {"chol_path", chol_name}};
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + json_path.string() + " for writing");
  out << j.dump(2) << '\n';
}

inline GaussianParams params_from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  try {
    const auto dim = j.at("dim").get<Eigen::Index>();
    auto resolve = [&](const std::string& key) {
      std::filesystem::path p = j.at(key).get<std::string>();
      return p.is_relative() ? base / p : p;
    };
    const Mat mean = read_embeddings(resolve("mean_path")).to_matrix();
    const Mat chol = read_embeddings(resolve("chol_path")).to_matrix();
    if (mean.rows() != 1 || mean.cols() != dim || chol.rows() != dim || chol.cols() != dim)
      throw FormatError("gaussian blobs do not match declared dim " + std::to_string(dim));
    return GaussianParams(mean.row(0).transpose(), chol,
                          parse_provenance(j.at("provenance").get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("gaussian manifest: ") + e.what());
  }
}

inline GaussianParams load_params(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open " + json_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  return params_from_json(j, json_path.parent_path());
}

}  // namespace gapbridge
