#pragma once

// Gap-closure metrics: cosine retrieval, whitened-residual KL, similarity
// structure divergence, parameter recovery and residual histograms.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gapbridge/emb_io.hpp"
#include "gapbridge/errors.hpp"
#include "gapbridge/format.hpp"
#include "gapbridge/gapmap.hpp"
#include "gapbridge/gauss.hpp"
#include "gapbridge/revmap.hpp"

namespace gapbridge {

struct EvalReport {
  double retrieval_at_1 = 0.0;
  double retrieval_at_5 = 0.0;
  double residual_kl = 0.0;
  double simmatrix_div = 0.0;
  double mean_pair_cosine = 0.0;
  std::string notes;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"retrieval_at_1", r.retrieval_at_1}, {"retrieval_at_5", r.retrieval_at_5},
                     {"residual_kl", r.residual_kl},       {"simmatrix_div", r.simmatrix_div},
                     {"mean_pair_cosine", r.mean_pair_cosine}, {"notes", r.notes}};
}

/// Fraction of queries whose own target (same index) ranks within the top k
/// by cosine similarity. Ties go to the lower index.
inline double retrieval_accuracy(const Mat& queries, const Mat& targets, Eigen::Index k) {
  const auto n = queries.rows();
  if (targets.rows() != n || targets.cols() != queries.cols())
    throw PairingError("retrieval_accuracy: queries and targets must be aligned");
  if (n < 2) throw InsufficientDataError("retrieval_accuracy needs at least 2 pairs");
  if (k < 1 || k > n) throw ValidationError("retrieval_accuracy: k must lie in [1, n]");
  const Mat sim = cosine_similarity_matrix(queries, targets);
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double own = sim(i, i);
    Eigen::Index rank = 0;
    for (Eigen::Index j = 0; j < n && rank < k; ++j) {
      if (j == i) continue;
      if (sim(i, j) > own || (sim(i, j) == own && j < i)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// KL to N(0, I) of the moments of whiten(images - texts, params); zero
/// when the parameters explain the residuals exactly.
inline double residual_kl(const Mat& images, const Mat& texts, const GaussianParams& params) {
  if (images.rows() != texts.rows() || images.cols() != texts.cols())
    throw PairingError("residual_kl: images and texts must be aligned");
  const Mat eps = whiten(images - texts, params);
  const auto m = estimate_moments(eps, Estimator::biased);
  return kl_to_standard(m.mean, m.cov);
}

/// The distillation loss value, used as a metric.
inline double simmatrix_divergence(const Mat& a, const Mat& b, double temp = 1.0) {
  return disti_loss(a, b, temp).loss;
}

inline double mean_pair_cosine(const Mat& a, const Mat& b) { return 1.0 - cosine_loss(a, b).loss; }

struct RecoveryError {
  double mean_linf = 0.0;
  double cov_frob_rel = 0.0;
};

inline RecoveryError param_recovery_error(const GaussianParams& estimate, const GaussianParams& truth) {
  if (estimate.dim() != truth.dim()) throw ShapeError("param_recovery_error: dim mismatch");
  const Mat truth_cov = truth.covariance();
  return {(estimate.mean - truth.mean).cwiseAbs().maxCoeff(),
          (estimate.covariance() - truth_cov).norm() / truth_cov.norm()};
}

struct HistogramBin {
  std::optional<Eigen::Index> dim;  // empty for the pooled "global" series
  double left = 0.0;
  double right = 0.0;
  long count = 0;
};

namespace detail {

inline void histogram_series(const std::vector<double>& values, std::optional<Eigen::Index> dim, long bins,
                             std::vector<HistogramBin>& out) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (values.empty()) lo = hi = 0.0;
  if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<long> counts(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    auto b = static_cast<long>((v - lo) / width);
    b = std::clamp(b, 0L, bins - 1);
    ++counts[static_cast<std::size_t>(b)];
  }
  for (long b = 0; b < bins; ++b) {
    const double left = lo + width * static_cast<double>(b);
    const double right = b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1);
    out.push_back({dim, left, right, counts[static_cast<std::size_t>(b)]});
  }
}

}  // namespace detail

/**
 * Histograms of images - texts for the selected coordinates, each over its
 * own [min, max]; a degenerate range is widened to +-0.5 around the value.
 * With `include_global` a final series pools every coordinate of every row.
 */
inline std::vector<HistogramBin> export_residual_histograms(const Mat& images, const Mat& texts,
                                                            const std::vector<Eigen::Index>& dims, long bins,
                                                            bool include_global = true) {
  if (images.rows() != texts.rows() || images.cols() != texts.cols())
    throw PairingError("export_residual_histograms: images and texts must be aligned");
  if (dims.empty() && !include_global) throw ValidationError("export_residual_histograms: no dims selected");
  if (bins < 1) throw ValidationError("export_residual_histograms: bins must be positive");
  const Mat diff = images - texts;
  std::vector<HistogramBin> out;
  for (Eigen::Index d : dims) {
    if (d < 0 || d >= diff.cols())
      throw ValidationError("export_residual_histograms: dim " + std::to_string(d) + " out of range");
    std::vector<double> values(diff.col(d).data(), diff.col(d).data() + diff.rows());
    detail::histogram_series(values, d, bins, out);
  }
  if (include_global) {
    std::vector<double> values(diff.data(), diff.data() + diff.size());
    detail::histogram_series(values, std::nullopt, bins, out);
  }
  return out;
}

inline void write_histogram_csv(const std::vector<HistogramBin>& bins, std::ostream& out) {
  out << "dim,bin_left,bin_right,count\n";
  for (const auto& b : bins) {
    if (b.dim)
      out << *b.dim;
    else
      out << "global";
    out << ',' << format_double(b.left) << ',' << format_double(b.right) << ','
        << b.count << '\n';
  }
}

}  // namespace gapbridge
