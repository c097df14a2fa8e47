#pragma once

// Synthetic embeddings with a planted bias: clustered unit-norm "texts" and
// "images" = texts + draws from a known Gaussian.

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gapbridge/emb_io.hpp"
#include "gapbridge/errors.hpp"
#include "gapbridge/gauss.hpp"
#include "gapbridge/rng.hpp"

namespace gapbridge {

struct SynthSpec {
  Eigen::Index dim = 16;
  Eigen::Index count = 1024;
  Eigen::Index clusters = 8;
  double cluster_spread = 0.1;
  double bias_mean_scale = 0.05;
  double bias_cov_scale = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (dim < 1) throw ValidationError("synth dim must be positive");
    if (count < 1) throw ValidationError("synth count must be positive");
    if (clusters < 1 || clusters > count) throw ValidationError("synth needs 1 <= clusters <= count");
    if (!(cluster_spread > 0.0) || !(bias_mean_scale > 0.0) || !(bias_cov_scale > 0.0))
      throw ValidationError("synth scales must be positive");
  }
};

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  const SynthSpec defaults;
  s.dim = j.value("dim", defaults.dim);
  s.count = j.value("count", defaults.count);
  s.clusters = j.value("clusters", defaults.clusters);
  s.cluster_spread = j.value("cluster_spread", defaults.cluster_spread);
  s.bias_mean_scale = j.value("bias_mean_scale", defaults.bias_mean_scale);
  s.bias_cov_scale = j.value("bias_cov_scale", defaults.bias_cov_scale);
  s.seed = j.value("seed", defaults.seed);
}

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"dim", s.dim},
                     {"count", s.count},
                     {"clusters", s.clusters},
                     {"cluster_spread", s.cluster_spread},
                     {"bias_mean_scale", s.bias_mean_scale},
                     {"bias_cov_scale", s.bias_cov_scale},
                     {"seed", s.seed}};
}

// Sub-stream identifiers for derive_seed.
inline constexpr std::uint64_t kStreamTexts = 1;
inline constexpr std::uint64_t kStreamBias = 2;
inline constexpr std::uint64_t kStreamPairs = 3;

namespace detail {

inline Vec random_unit(Eigen::Index d, Rng& rng) {
  Vec v(d);
  double norm = 0.0;
  while (norm == 0.0) {
    for (Eigen::Index j = 0; j < d; ++j) v(j) = rng.normal();
    norm = v.norm();
  }
  return v / norm;
}

}  // namespace detail

struct LabeledTexts {
  EmbeddingMatrix texts;
  std::vector<Eigen::Index> labels;
  Mat centers;  // clusters x dim, unit rows
};

/// Row i belongs to cluster i mod k; row = normalize(center + spread * z).
inline LabeledTexts gen_labeled_texts(const SynthSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, kStreamTexts));
  LabeledTexts out;
  out.centers.resize(spec.clusters, spec.dim);
  for (Eigen::Index c = 0; c < spec.clusters; ++c)
    out.centers.row(c) = detail::random_unit(spec.dim, rng).transpose();
  Mat rows(spec.count, spec.dim);
  out.labels.resize(static_cast<std::size_t>(spec.count));
  for (Eigen::Index i = 0; i < spec.count; ++i) {
    const Eigen::Index c = i % spec.clusters;
    out.labels[static_cast<std::size_t>(i)] = c;
    Eigen::RowVectorXd r = out.centers.row(c);
    for (Eigen::Index j = 0; j < spec.dim; ++j) r(j) += spec.cluster_spread * rng.normal();
    rows.row(i) = r / r.norm();
  }
  out.texts = EmbeddingMatrix::from_matrix(rows, true);
  return out;
}

inline EmbeddingMatrix gen_text_embeddings(const SynthSpec& spec) {
  return gen_labeled_texts(spec).texts;
}

/**
 * Planted bias N(mu*, Sigma*): mu* = mean_scale * sqrt(d) * u for a random
 * unit u; Sigma* = cov_scale^2 * A * d / tr(A) with A = M^T M / d + I, so the
 * average per-coordinate variance is cov_scale^2.
 */
inline GaussianParams gen_bias_truth(Eigen::Index dim, double bias_mean_scale, double bias_cov_scale,
                                     std::uint64_t seed) {
  if (dim < 1) throw ValidationError("gen_bias_truth dim must be positive");
  if (!(bias_mean_scale > 0.0) || !(bias_cov_scale > 0.0))
    throw ValidationError("gen_bias_truth scales must be positive");
  Rng rng(seed);
  const Vec mean = bias_mean_scale * std::sqrt(static_cast<double>(dim)) * detail::random_unit(dim, rng);
  Mat m(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) m(i, j) = rng.normal();
  Mat a = m.transpose() * m / static_cast<double>(dim) + Mat::Identity(dim, dim);
  a *= bias_cov_scale * bias_cov_scale * static_cast<double>(dim) / a.trace();
  a = 0.5 * (a + a.transpose()).eval();
  return GaussianParams(mean, cholesky(a).factor, Provenance::synthetic_truth);
}

inline GaussianParams gen_bias_truth(const SynthSpec& spec) {
  return gen_bias_truth(spec.dim, spec.bias_mean_scale, spec.bias_cov_scale,
                        derive_seed(spec.seed, kStreamBias));
}

/// image_i = text_i + eps_i with eps_i ~ truth, optionally renormalized.
inline EmbeddingMatrix gen_paired_images(const EmbeddingMatrix& texts, const GaussianParams& truth, Rng& rng,
                                         bool renormalize = false) {
  if (static_cast<Eigen::Index>(texts.dim()) != truth.dim())
    throw ShapeError("gen_paired_images: texts dim " + std::to_string(texts.dim()) + ", truth dim " +
                     std::to_string(truth.dim()));
  if (texts.count() == 0) return EmbeddingMatrix(0, texts.dim(), {}, renormalize);
  Mat images = texts.to_matrix() + sample_noise(truth, static_cast<Eigen::Index>(texts.count()), rng);
  if (renormalize) {
    for (Eigen::Index i = 0; i < images.rows(); ++i) {
      const double norm = images.row(i).norm();
      if (norm == 0.0) throw DegenerateInputError("image row " + std::to_string(i) + " has zero norm");
      images.row(i) /= norm;
    }
  }
  return EmbeddingMatrix::from_matrix(images, renormalize, texts.ids());
}

}  // namespace gapbridge
