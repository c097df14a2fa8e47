#pragma once

// Reverse mapping (one-hidden-layer feedforward re-projection) and the
// losses that train it: cosine reconstruction, symmetric InfoNCE and the
// relational distillation between internal similarity structures.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gapbridge/emb_io.hpp"
#include "gapbridge/errors.hpp"
#include "gapbridge/rng.hpp"

namespace gapbridge {

struct ReverseMapping {
  Eigen::Index dim = 0;
  Eigen::Index expansion = 2;
  Mat w1;  // (expansion*dim) x dim
  Vec b1;
  Mat w2;  // dim x (expansion*dim)
  Vec b2;

  Eigen::Index hidden() const noexcept { return expansion * dim; }

  void validate() const {
    if (dim < 1 || expansion < 1) throw ValidationError("reverse mapping needs dim, expansion >= 1");
    const auto h = hidden();
    if (w1.rows() != h || w1.cols() != dim || b1.size() != h || w2.rows() != dim || w2.cols() != h ||
        b2.size() != dim)
      throw ShapeError("reverse mapping weight shapes do not match dim " + std::to_string(dim) +
                       " and expansion " + std::to_string(expansion));
    if (!w1.allFinite() || !b1.allFinite() || !w2.allFinite() || !b2.allFinite())
      throw ValidationError("reverse mapping has non-finite weights");
  }
};

/// Weights ~ N(0, 0.02^2), zero biases.
inline ReverseMapping init_revmap(Eigen::Index dim, Eigen::Index expansion, std::uint64_t seed) {
  if (dim < 1 || expansion < 1) throw ValidationError("init_revmap needs dim, expansion >= 1");
  constexpr double kInitStd = 0.02;
  Rng rng(seed);
  ReverseMapping m;
  m.dim = dim;
  m.expansion = expansion;
  const auto h = m.hidden();
  m.w1.resize(h, dim);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) m.w1(i, j) = kInitStd * rng.normal();
  m.w2.resize(dim, h);
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = 0; j < h; ++j) m.w2(i, j) = kInitStd * rng.normal();
  m.b1 = Vec::Zero(h);
  m.b2 = Vec::Zero(dim);
  return m;
}

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double u) noexcept {
  return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
}

inline double gelu_grad(double u) noexcept {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

}  // namespace detail

struct RevmapCache {
  Mat input;
  Mat pre;  // pre-activation of the hidden layer
};

/// Row-wise y = w2 * gelu(w1 x + b1) + b2.
inline Mat revmap_forward(const Mat& x, const ReverseMapping& m, RevmapCache* cache = nullptr) {
  if (x.cols() != m.dim)
    throw ShapeError("revmap_forward: input dim " + std::to_string(x.cols()) + ", module dim " +
                     std::to_string(m.dim));
  Mat pre = x * m.w1.transpose();
  pre.rowwise() += m.b1.transpose();
  const Mat hidden = pre.unaryExpr([](double u) { return detail::gelu(u); });
  Mat y = hidden * m.w2.transpose();
  y.rowwise() += m.b2.transpose();
  if (cache) {
    cache->input = x;
    cache->pre = std::move(pre);
  }
  return y;
}

struct RevmapGrads {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
  Mat input;
};

inline RevmapGrads revmap_backward(const ReverseMapping& m, const RevmapCache& cache, const Mat& upstream) {
  if (upstream.rows() != cache.input.rows() || upstream.cols() != m.dim)
    throw ShapeError("revmap_backward: upstream gradient shape mismatch");
  const Mat hidden = cache.pre.unaryExpr([](double u) { return detail::gelu(u); });
  RevmapGrads g;
  g.w2 = upstream.transpose() * hidden;
  g.b2 = upstream.colwise().sum().transpose();
  const Mat d_pre =
      ((upstream * m.w2).array() * cache.pre.unaryExpr([](double u) { return detail::gelu_grad(u); }).array())
          .matrix();
  g.w1 = d_pre.transpose() * cache.input;
  g.b1 = d_pre.colwise().sum().transpose();
  g.input = d_pre * m.w1;
  return g;
}

inline RevmapGrads revmap_backward(const ReverseMapping& m, const Mat& x, const Mat& upstream) {
  RevmapCache cache;
  revmap_forward(x, m, &cache);
  return revmap_backward(m, cache, upstream);
}

// ---------------------------------------------------------------------------
// Losses. Each returns the value and the gradient with respect to its first
// argument only.

struct LossGrad {
  double loss = 0.0;
  Mat grad;
};

namespace detail {

inline Vec row_norms(const Mat& x, const char* what) {
  Vec norms = x.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i)
    if (norms(i) == 0.0)
      throw DegenerateInputError(std::string(what) + ": row " + std::to_string(i) + " has zero norm");
  return norms;
}

inline Mat unit_rows(const Mat& x, const Vec& norms) {
  return x.array().colwise() / norms.array();
}

// Pulls a gradient with respect to unit rows back to the raw rows.
inline Mat unit_rows_backward(const Mat& unit, const Vec& norms, const Mat& grad_unit) {
  const Vec radial = (grad_unit.array() * unit.array()).rowwise().sum().matrix();
  Mat g = grad_unit - (unit.array().colwise() * radial.array()).matrix();
  return g.array().colwise() / norms.array();
}

inline void check_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": operands have different shapes");
}

}  // namespace detail

/// values(i, j) = cos(a_i, b_j).
inline Mat cosine_similarity_matrix(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) throw ShapeError("cosine_similarity_matrix: dim mismatch");
  const Mat ua = detail::unit_rows(a, detail::row_norms(a, "cosine_similarity_matrix"));
  const Mat ub = detail::unit_rows(b, detail::row_norms(b, "cosine_similarity_matrix"));
  return ua * ub.transpose();
}

/// (1/n) sum_i (1 - cos(pred_i, target_i)).
inline LossGrad cosine_loss(const Mat& pred, const Mat& target) {
  detail::check_same_shape(pred, target, "cosine_loss");
  const auto n = pred.rows();
  if (n == 0) throw InsufficientDataError("cosine_loss needs at least one row");
  const Vec pn = detail::row_norms(pred, "cosine_loss");
  const Mat up = detail::unit_rows(pred, pn);
  const Mat ut = detail::unit_rows(target, detail::row_norms(target, "cosine_loss"));
  const Vec cos = (up.array() * ut.array()).rowwise().sum().matrix();
  LossGrad r;
  r.loss = (1.0 - cos.array()).mean();
  r.grad = detail::unit_rows_backward(up, pn, -ut / static_cast<double>(n));
  return r;
}

/**
 * Symmetric InfoNCE over the pred-vs-target cosine similarity matrix S:
 * 0.5 * (row-wise + column-wise mean of -log softmax(S / tau) on the
 * diagonal). Non-negative; small when matched pairs dominate.
 */
inline LossGrad contrastive_loss(const Mat& pred, const Mat& target, double tau = 0.1) {
  detail::check_same_shape(pred, target, "contrastive_loss");
  const auto n = pred.rows();
  if (n < 2) throw InsufficientDataError("contrastive_loss needs at least 2 rows");
  if (!(tau > 0.0)) throw ValidationError("contrastive_loss temperature must be positive");

  const Vec pn = detail::row_norms(pred, "contrastive_loss");
  const Mat up = detail::unit_rows(pred, pn);
  const Mat ut = detail::unit_rows(target, detail::row_norms(target, "contrastive_loss"));
  const Mat logits = (up * ut.transpose()) / tau;

  // Row softmax (pred -> targets) and column softmax (target -> preds).
  Mat p_row(n, n), p_col(n, n);
  double row_term = 0.0, col_term = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp().matrix();
    const double sum = e.sum();
    p_row.row(i) = e / sum;
    row_term += mx + std::log(sum) - logits(i, i);
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    const double mx = logits.col(j).maxCoeff();
    const Vec e = (logits.col(j).array() - mx).exp().matrix();
    const double sum = e.sum();
    p_col.col(j) = e / sum;
    col_term += mx + std::log(sum) - logits(j, j);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  LossGrad r;
  r.loss = 0.5 * inv_n * (row_term + col_term);

  Mat d_logits = p_row + p_col;
  d_logits.diagonal().array() -= 2.0;
  const Mat d_sim = d_logits * (0.5 * inv_n / tau);
  r.grad = detail::unit_rows_backward(up, pn, d_sim * ut);
  return r;
}

/**
 * Relational distillation between internal cosine-similarity structures.
 *
 * Each row of the self-similarity matrices (diagonal excluded) becomes a
 * softmax distribution at temperature `temp`; the loss is the mean over
 * rows of KL(source row || mapped row). Gradients flow to `mapped` only.
 */
inline LossGrad disti_loss(const Mat& mapped, const Mat& source, double temp = 1.0) {
  detail::check_same_shape(mapped, source, "disti_loss");
  const auto n = mapped.rows();
  if (n < 2) throw InsufficientDataError("disti_loss needs at least 2 rows");
  if (!(temp > 0.0)) throw ValidationError("disti_loss temperature must be positive");

  const Vec mn = detail::row_norms(mapped, "disti_loss");
  const Mat um = detail::unit_rows(mapped, mn);
  const Mat us = detail::unit_rows(source, detail::row_norms(source, "disti_loss"));
  const Mat a = um * um.transpose();
  const Mat b = us * us.transpose();

  auto log_softmax_offdiag = [&](const Mat& sim, Eigen::Index i, Eigen::RowVectorXd& out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, sim(i, j) / temp);
    double sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) sum += std::exp(sim(i, j) / temp - mx);
    const double lse = mx + std::log(sum);
    out.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) out(j) = j == i ? 0.0 : sim(i, j) / temp - lse;
  };

  const double inv_n = 1.0 / static_cast<double>(n);
  Mat d_a = Mat::Zero(n, n);
  double total = 0.0;
  Eigen::RowVectorXd log_p, log_q;
  for (Eigen::Index i = 0; i < n; ++i) {
    log_softmax_offdiag(b, i, log_p);
    log_softmax_offdiag(a, i, log_q);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double p = std::exp(log_p(j));
      total += p * (log_p(j) - log_q(j));
      d_a(i, j) = inv_n * (std::exp(log_q(j)) - p) / temp;
    }
  }
  LossGrad r;
  r.loss = total * inv_n;
  const Mat d_unit = (d_a + d_a.transpose()) * um;
  r.grad = detail::unit_rows_backward(um, mn, d_unit);
  return r;
}

// ---------------------------------------------------------------------------
// Serialization: {"dim", "expansion", "<name>_path"...} plus EMB1 blobs.

inline nlohmann::json save_revmap(const ReverseMapping& m, const std::filesystem::path& dir,
                                  const std::string& prefix = "revmap") {
  m.validate();
  nlohmann::json j{{"dim", m.dim}, {"expansion", m.expansion}};
  auto put = [&](const char* name, const Mat& value) {
    const std::string file = prefix + "_" + name + ".emb";
    write_embeddings(EmbeddingMatrix::from_matrix(value), dir / file);
    j[std::string(name) + "_path"] = file;
  };
  put("w1", m.w1);
  put("b1", m.b1.transpose());
  put("w2", m.w2);
  put("b2", m.b2.transpose());
  return j;
}

inline ReverseMapping load_revmap(const nlohmann::json& j, const std::filesystem::path& base) {
  ReverseMapping m;
  try {
    m.dim = j.at("dim").get<Eigen::Index>();
    m.expansion = j.at("expansion").get<Eigen::Index>();
    auto get = [&](const char* name) {
      std::filesystem::path p = j.at(std::string(name) + "_path").get<std::string>();
      return read_embeddings(p.is_relative() ? base / p : p).to_matrix();
    };
    m.w1 = get("w1");
    m.b1 = get("b1").transpose();
    m.w2 = get("w2");
    m.b2 = get("b2").transpose();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("reverse mapping manifest: ") + e.what());
  }
  try {
    m.validate();
  } catch (const ValidationError& e) {
    throw FormatError(e.what());
  }
  return m;
}

}  // namespace gapbridge
