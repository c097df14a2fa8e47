#pragma once

// The mapping module: bias estimation from paired or web data, the
// stochastic text -> image projection, and the whitened-KL objective used
// to fit (mean, chol) when no pairs exist.

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "gapbridge/emb_io.hpp"
#include "gapbridge/errors.hpp"
#include "gapbridge/gauss.hpp"
#include "gapbridge/log.hpp"
#include "gapbridge/rng.hpp"

namespace gapbridge {

struct MappingModule {
  GaussianParams params;
  bool trainable = false;
  bool renormalize_after_map = false;

  void validate() const {
    params.validate();
    if (!trainable && params.provenance == Provenance::fitted)
      throw ValidationError("a frozen mapping module needs setting1, setting2 or synthetic-truth params");
  }
};

enum class BiasSource { paired, web_corrected, cross_unpaired, pseudo };

/// Per-row image-minus-text differences.
struct BiasBatch {
  Mat deltas;
  BiasSource source = BiasSource::paired;
};

/// Mean, strictly-lower part and log-diagonal: the unconstrained coordinates
/// in which the trainer moves a GaussianParams.
struct TrainableGaussian {
  Vec mean;
  Mat strict_lower;
  Vec log_diag;

  static TrainableGaussian from_params(const GaussianParams& p) {
    TrainableGaussian t;
    t.mean = p.mean;
    t.strict_lower = p.chol.triangularView<Eigen::StrictlyLower>();
    t.log_diag = p.chol.diagonal().array().log().matrix();
    return t;
  }

  GaussianParams to_params(Provenance provenance = Provenance::fitted) const {
    Mat chol = strict_lower.triangularView<Eigen::StrictlyLower>();
    chol.diagonal() = log_diag.array().exp().matrix();
    return GaussianParams(mean, std::move(chol), provenance);
  }
};

/// Converts d(loss)/d(chol entries) into the (strict-lower, log-diag)
/// coordinates; the diagonal of the result holds the log-diag gradient.
inline Mat chol_grad_to_param_grad(const Mat& raw, const Mat& chol) {
  Mat g = raw.triangularView<Eigen::Lower>();
  g.diagonal().array() *= chol.diagonal().array();
  return g;
}

inline void check_min_rows(const EmbeddingMatrix& m, std::size_t minimum, const char* what) {
  if (m.count() < minimum)
    throw InsufficientDataError(std::string(what) + " needs at least " + std::to_string(minimum) +
                                " rows, got " + std::to_string(m.count()));
}

namespace detail {

inline GaussianParams params_from_moments(const Vec& mean, const Mat& cov, Provenance provenance) {
  const auto chol = cholesky(cov);
  if (chol.jitter > 0.0)
    log(LogLevel::info, "bias covariance is rank deficient; jitter " + std::to_string(chol.jitter) +
                            " added to its diagonal");
  return GaussianParams(mean, chol.factor, provenance);
}

}  // namespace detail

/// Moments of image_i - text_i over human-annotated pairs.
inline GaussianParams estimate_setting1(const EmbeddingMatrix& images, const EmbeddingMatrix& texts) {
  check_paired(images, texts);
  check_min_rows(images, 2, "setting-1 estimation");
  if (images.count() < images.dim() + 1)
    log(LogLevel::warn, "setting-1 estimation with " + std::to_string(images.count()) +
                            " pairs for dim " + std::to_string(images.dim()) +
                            "; covariance will be rank deficient");
  const Mat deltas = images.to_matrix() - texts.to_matrix();
  const auto m = estimate_moments(deltas, Estimator::unbiased);
  return detail::params_from_moments(m.mean, m.cov, Provenance::setting1);
}

struct Setting2Options {
  /// Keep the web covariance and correct only the mean.
  bool mean_only_correction = false;
};

/**
 * Web-pair bias with a global domain correction towards the corpus.
 *
 * The web-to-corpus shift has mean mean(corpus) - mean(web texts). Its
 * covariance is the sum of the two text covariances, i.e. the covariance of
 * a difference of independent draws. The corrected bias is
 * delta_web - delta_{w->c}: means subtract, covariances add.
 */
inline GaussianParams estimate_setting2(const EmbeddingMatrix& web_images,
                                        const EmbeddingMatrix& web_texts,
                                        const EmbeddingMatrix& corpus_texts,
                                        const Setting2Options& options = {}) {
  check_paired(web_images, web_texts);
  check_min_rows(web_images, 2, "setting-2 estimation (web pairs)");
  check_min_rows(corpus_texts, 2, "setting-2 estimation (corpus)");
  if (corpus_texts.dim() != web_texts.dim())
    throw PairingError("corpus dim " + std::to_string(corpus_texts.dim()) + " differs from web dim " +
                       std::to_string(web_texts.dim()));

  const Mat web_t = web_texts.to_matrix();
  const auto web = estimate_moments(web_images.to_matrix() - web_t, Estimator::unbiased);
  const auto web_text = estimate_moments(web_t, Estimator::unbiased);
  const auto corpus = estimate_moments(corpus_texts.to_matrix(), Estimator::unbiased);

  const Vec shift_mean = corpus.mean - web_text.mean;
  Mat cov = web.cov;
  if (!options.mean_only_correction) cov += corpus.cov + web_text.cov;
  return detail::params_from_moments(web.mean - shift_mean, cov, Provenance::setting2);
}

/// Adds sampled noise to each row. `latent` receives the standard-normal
/// draws so callers can differentiate through the reparameterization.
inline Mat map_forward(const Mat& texts, const GaussianParams& params, Rng& rng,
                       bool renormalize = false, Mat* latent = nullptr) {
  if (texts.cols() != params.dim())
    throw ShapeError("map_forward: texts have dim " + std::to_string(texts.cols()) + ", mapping " +
                     std::to_string(params.dim()));
  if (texts.rows() == 0) return Mat(0, texts.cols());
  Mat out = texts + sample_noise(params, texts.rows(), rng, latent);
  if (renormalize) {
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const double norm = out.row(i).norm();
      if (norm == 0.0) throw DegenerateInputError("mapped row " + std::to_string(i) + " has zero norm");
      out.row(i) /= norm;
    }
  }
  return out;
}

inline EmbeddingMatrix map_forward(const EmbeddingMatrix& texts, const MappingModule& module, Rng& rng) {
  module.validate();
  const Mat mapped = map_forward(texts.to_matrix(), module.params, rng, module.renormalize_after_map);
  return EmbeddingMatrix::from_matrix(mapped, module.renormalize_after_map, texts.ids());
}

/// Value and gradients of the whitened-residual KL.
struct LmapResult {
  double loss = 0.0;
  /// d loss / d mean.
  Vec grad_mean;
  /// Strictly-lower entries: d loss / d chol(i, j). Diagonal: d loss / d log chol(i, i).
  Mat grad_chol;
  /// d loss / d chol(i, j) for every lower entry, before reparameterization.
  Mat grad_chol_raw;
  /// d loss / d deltas.
  Mat grad_deltas;
  /// Jitter added to the batch covariance of the whitened residuals.
  double jitter = 0.0;
};

/**
 * KL(N(m, S) || N(0, I)) where m and S are the batch mean and biased batch
 * covariance of eps_i = chol^{-1} (delta_i - mean).
 *
 * With C the centered eps rows and G = (I - S^{-1}) / 2, the gradient with
 * respect to eps_i is (2/n) G c_i + m / n; it is pulled back through the
 * triangular solve to deltas, mean and chol.
 */
inline LmapResult lmap_loss(const Mat& deltas, const GaussianParams& params) {
  const auto n = deltas.rows();
  const auto d = params.dim();
  if (deltas.cols() != d)
    throw ShapeError("lmap_loss: deltas have dim " + std::to_string(deltas.cols()) + ", params " +
                     std::to_string(d));
  if (n < 2) throw InsufficientDataError("lmap_loss needs a batch of at least 2 rows");

  const Mat eps = whiten(deltas, params);
  const Vec m = eps.colwise().mean().transpose();
  const Mat centered = eps.rowwise() - m.transpose();
  const double inv_n = 1.0 / static_cast<double>(n);
  Mat s = centered.transpose() * centered * inv_n;
  s = 0.5 * (s + s.transpose()).eval();

  const auto chol_s = cholesky(s);
  LmapResult r;
  r.jitter = chol_s.jitter;
  const double log_det = 2.0 * chol_s.factor.diagonal().array().log().sum();
  r.loss = 0.5 * (s.trace() + static_cast<double>(d) * chol_s.jitter + m.squaredNorm() -
                  static_cast<double>(d) - log_det);

  Mat s_inv = Mat::Identity(d, d);
  chol_s.factor.triangularView<Eigen::Lower>().solveInPlace(s_inv);
  chol_s.factor.transpose().triangularView<Eigen::Upper>().solveInPlace(s_inv);
  const Mat g = 0.5 * (Mat::Identity(d, d) - s_inv);

  Mat grad_eps = 2.0 * inv_n * centered * g;
  grad_eps.rowwise() += inv_n * m.transpose();

  const auto upper_t = params.chol.transpose().triangularView<Eigen::Upper>();

  // d/d delta_i = chol^{-T} g_i, stored as rows.
  Mat grad_deltas_t = grad_eps.transpose();
  upper_t.solveInPlace(grad_deltas_t);
  r.grad_deltas = grad_deltas_t.transpose();

  // d/d mean = -sum_i chol^{-T} g_i.
  r.grad_mean = -r.grad_deltas.colwise().sum().transpose();

  // d eps = -chol^{-1} d(chol) eps  =>  d/d chol = -chol^{-T} (G_eps^T eps).
  Mat outer = grad_eps.transpose() * eps;
  upper_t.solveInPlace(outer);
  r.grad_chol_raw = (-outer).triangularView<Eigen::Lower>();
  r.grad_chol = chol_grad_to_param_grad(r.grad_chol_raw, params.chol);
  return r;
}

inline LmapResult lmap_loss(const BiasBatch& batch, const GaussianParams& params) {
  return lmap_loss(batch.deltas, params);
}

}  // namespace gapbridge
