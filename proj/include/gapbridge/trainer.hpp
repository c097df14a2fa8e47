#pragma once

// Optimizer, learning-rate schedule and the per-setting training loops for
// the mapping / reverse-mapping pair.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <locale>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gapbridge/emb_io.hpp"
#include "gapbridge/errors.hpp"
#include "gapbridge/format.hpp"
#include "gapbridge/gapmap.hpp"
#include "gapbridge/gauss.hpp"
#include "gapbridge/log.hpp"
#include "gapbridge/revmap.hpp"
#include "gapbridge/rng.hpp"

namespace gapbridge {

struct LossWeights {
  double map = 1.0;
  double recons = 1.0;
  double disti = 1.0;
};

struct TrainConfig {
  long batch_size = 32;
  double peak_lr = 5e-4;
  long warmup_steps = 1250;
  long total_steps = 3000;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double tau = 0.1;
  double disti_temp = 1.0;
  LossWeights loss_weights;
  std::uint64_t seed = 0;
  /// Hidden width of the reverse mapping is expansion * dim.
  long expansion = 2;
  /// Trainable mappings start from N(0, (init_chol_scale)^2 I).
  double init_chol_scale = 0.05;

  void validate() const {
    if (batch_size < 2) throw ValidationError("batch_size must be at least 2");
    if (total_steps < 0 || warmup_steps < 0) throw ValidationError("step counts must be non-negative");
    if (warmup_steps > total_steps) throw ValidationError("warmup_steps exceeds total_steps");
    if (!(peak_lr > 0.0) || !(eps > 0.0) || !(tau > 0.0) || !(disti_temp > 0.0) ||
        !(init_chol_scale > 0.0))
      throw ValidationError("rates, eps, temperatures and init scale must be positive");
    if (weight_decay < 0.0) throw ValidationError("weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ValidationError("betas must lie in [0, 1)");
    if (loss_weights.map < 0.0 || loss_weights.recons < 0.0 || loss_weights.disti < 0.0)
      throw ValidationError("loss weights must be non-negative");
    if (expansion < 1) throw ValidationError("expansion must be positive");
  }
};

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  if (j.contains("betas")) {
    const auto& b = j.at("betas");
    if (!b.is_array() || b.size() != 2) throw FormatError("betas must be a two-element array");
    c.beta1 = b[0].get<double>();
    c.beta2 = b[1].get<double>();
  }
  c.eps = j.value("eps", d.eps);
  c.tau = j.value("tau", d.tau);
  c.disti_temp = j.value("disti_temp", d.disti_temp);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.loss_weights.map = w.value("w_map", d.loss_weights.map);
    c.loss_weights.recons = w.value("w_recons", d.loss_weights.recons);
    c.loss_weights.disti = w.value("w_disti", d.loss_weights.disti);
  }
  c.seed = j.value("seed", d.seed);
  c.expansion = j.value("expansion", d.expansion);
  c.init_chol_scale = j.value("init_chol_scale", d.init_chol_scale);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"peak_lr", c.peak_lr},
                     {"warmup_steps", c.warmup_steps},
                     {"total_steps", c.total_steps},
                     {"weight_decay", c.weight_decay},
                     {"betas", {c.beta1, c.beta2}},
                     {"eps", c.eps},
                     {"tau", c.tau},
                     {"disti_temp", c.disti_temp},
                     {"loss_weights",
                      {{"w_map", c.loss_weights.map},
                       {"w_recons", c.loss_weights.recons},
                       {"w_disti", c.loss_weights.disti}}},
                     {"seed", c.seed},
                     {"expansion", c.expansion},
                     {"init_chol_scale", c.init_chol_scale}};
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open train config " + path.string());
  TrainConfig c;
  try {
    nlohmann::json j;
    in >> j;
    c = j.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("train config " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

/// Linear warmup from 0 to peak_lr at warmup_steps, then linear decay to 0
/// at total_steps.
inline double lr_at(long step, const TrainConfig& config) {
  if (step < 0 || step > config.total_steps)
    throw ValidationError("lr_at: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(config.total_steps) + "]");
  if (step <= config.warmup_steps && config.warmup_steps > 0)
    return config.peak_lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  const long decay = config.total_steps - config.warmup_steps;
  if (decay == 0) return config.peak_lr;
  return config.peak_lr * static_cast<double>(config.total_steps - step) / static_cast<double>(decay);
}

struct AdamState {
  Eigen::ArrayXXd m;
  Eigen::ArrayXXd v;
  long step = 0;
};

/// One AdamW update in place: decoupled decay, then the bias-corrected Adam
/// step.
template <typename Param, typename Grad>
void adamw_step(Eigen::PlainObjectBase<Param>& param, const Eigen::MatrixBase<Grad>& grad, AdamState& state,
                double lr, const TrainConfig& config) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols())
    throw ShapeError("adamw_step: parameter and gradient shapes differ");
  if (state.step == 0) {
    state.m = Eigen::ArrayXXd::Zero(param.rows(), param.cols());
    state.v = Eigen::ArrayXXd::Zero(param.rows(), param.cols());
  } else if (state.m.rows() != param.rows() || state.m.cols() != param.cols()) {
    throw ShapeError("adamw_step: optimizer state shape differs from parameter");
  }
  ++state.step;
  const auto g = grad.array();
  state.m = config.beta1 * state.m + (1.0 - config.beta1) * g;
  state.v = config.beta2 * state.v + (1.0 - config.beta2) * g.square();
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  auto p = param.array();
  p -= lr * config.weight_decay * p;
  p -= lr * (state.m / c1) / ((state.v / c2).sqrt() + config.eps);
}

struct HistoryEntry {
  long step = 0;
  double loss_map = 0.0;
  double loss_cosine = 0.0;
  double loss_cl = 0.0;
  double loss_disti = 0.0;
  double lr = 0.0;
};

struct FittedModel {
  MappingModule mapping;
  ReverseMapping reverse;
  std::vector<HistoryEntry> history;
  /// Smallest diagonal entry of the mapping's Cholesky factor seen during
  /// training (the initial value when nothing was trained).
  double min_chol_diag = 0.0;
};

enum class TrainMode { fixed_mapping, setting3, setting4 };

namespace detail {

/// Shuffled passes over [0, n); the last partial batch of each pass is
/// dropped. Corpora smaller than one batch are served whole.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::size_t batch, Rng& rng) : n_(n), batch_(std::min(batch, n)), rng_(rng) {
    order_.resize(n_);
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (cursor_ + batch_ > n_) reshuffle();
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    cursor_ = 0;
  }

  std::size_t n_;
  std::size_t batch_;
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline Mat gather_rows(const Mat& source, const std::vector<std::size_t>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), source.cols());
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.row(static_cast<Eigen::Index>(k)) = source.row(static_cast<Eigen::Index>(idx[k]));
  return out;
}

inline void check_finite(double value, long step, const char* term) {
  if (!std::isfinite(value))
    throw DivergenceError("non-finite " + std::string(term) + " at step " + std::to_string(step));
}

struct Optimizers {
  AdamState mean, strict_lower, log_diag, w1, b1, w2, b2;
};

/// Shared loop; `images` is only read in setting 3.
inline FittedModel train(TrainMode mode, const EmbeddingMatrix& corpus, const EmbeddingMatrix* images,
                         const GaussianParams* fixed, const TrainConfig& config) {
  config.validate();
  if (corpus.count() < 2) throw InsufficientDataError("training needs a corpus of at least 2 texts");
  const auto d = static_cast<Eigen::Index>(corpus.dim());
  const Mat texts = corpus.to_matrix();
  Mat pool;
  if (mode == TrainMode::setting3) {
    if (!images || images->count() == 0) throw InsufficientDataError("setting 3 needs a non-empty image pool");
    if (images->dim() != corpus.dim()) throw PairingError("image pool dim differs from corpus dim");
    pool = images->to_matrix();
  }

  Rng batch_rng(derive_seed(config.seed, 11));
  Rng image_rng(derive_seed(config.seed, 12));
  Rng noise_rng(derive_seed(config.seed, 13));

  FittedModel model;
  model.reverse = init_revmap(d, config.expansion, derive_seed(config.seed, 10));
  const bool trainable = mode != TrainMode::fixed_mapping;
  if (trainable) {
    model.mapping.params = GaussianParams(Vec::Zero(d), config.init_chol_scale * Mat::Identity(d, d),
                                          Provenance::fitted);
  } else {
    if (!fixed) throw ValidationError("fixed-mapping training needs mapping parameters");
    if (fixed->dim() != d) throw ShapeError("mapping dim differs from corpus dim");
    model.mapping.params = *fixed;
  }
  model.mapping.trainable = trainable;
  model.mapping.validate();
  model.min_chol_diag = model.mapping.params.chol.diagonal().minCoeff();

  TrainableGaussian gauss = TrainableGaussian::from_params(model.mapping.params);
  ReverseMapping& rev = model.reverse;
  Optimizers opt;
  EpochSampler sampler(corpus.count(), static_cast<std::size_t>(config.batch_size), batch_rng);
  const LossWeights& w = config.loss_weights;
  model.history.reserve(static_cast<std::size_t>(config.total_steps));

  for (long step = 0; step < config.total_steps; ++step) {
    const Mat x = gather_rows(texts, sampler.next());
    const auto b = x.rows();
    const GaussianParams params = trainable ? gauss.to_params() : model.mapping.params;

    Mat latent;
    const Mat mapped = map_forward(x, params, noise_rng, false, &latent);
    RevmapCache cache;
    const Mat recon = revmap_forward(mapped, rev, &cache);

    HistoryEntry h;
    h.step = step;
    h.lr = lr_at(step, config);
    Mat d_mapped = Mat::Zero(b, d);
    Mat d_recon = Mat::Zero(b, d);
    Vec d_mean = Vec::Zero(d);
    Mat d_chol = Mat::Zero(d, d);  // (strict-lower, log-diag) coordinates

    {
      const auto cos = cosine_loss(recon, x);
      const auto cl = contrastive_loss(recon, x, config.tau);
      h.loss_cosine = cos.loss;
      h.loss_cl = cl.loss;
      d_recon += w.recons * (cos.grad + cl.grad);
    }
    if (mode == TrainMode::setting3) {
      Mat y(b, d);
      for (Eigen::Index i = 0; i < b; ++i)
        y.row(i) = pool.row(static_cast<Eigen::Index>(image_rng.below(static_cast<std::uint64_t>(pool.rows()))));
      const auto lm = lmap_loss(y - x, params);
      h.loss_map = lm.loss;
      d_mean += w.map * lm.grad_mean;
      d_chol += w.map * lm.grad_chol;
    } else if (mode == TrainMode::setting4) {
      const auto lm = lmap_loss(mapped - recon, params);
      h.loss_map = lm.loss;
      d_mean += w.map * lm.grad_mean;
      d_chol += w.map * lm.grad_chol;
      d_mapped += w.map * lm.grad_deltas;
      d_recon -= w.map * lm.grad_deltas;
      const auto dl = disti_loss(mapped, x, config.disti_temp);
      h.loss_disti = dl.loss;
      d_mapped += w.disti * dl.grad;
    }
    check_finite(h.loss_map, step, "loss_map");
    check_finite(h.loss_cosine, step, "loss_cosine");
    check_finite(h.loss_cl, step, "loss_cl");
    check_finite(h.loss_disti, step, "loss_disti");

    const RevmapGrads rg = revmap_backward(rev, cache, d_recon);
    if (trainable) {
      d_mapped += rg.input;
      d_mean += d_mapped.colwise().sum().transpose();
      const Mat raw = (d_mapped.transpose() * latent).triangularView<Eigen::Lower>();
      d_chol += chol_grad_to_param_grad(raw, params.chol);

      const Mat d_strict = d_chol.triangularView<Eigen::StrictlyLower>();
      const Vec d_log_diag = d_chol.diagonal();
      adamw_step(gauss.mean, d_mean, opt.mean, h.lr, config);
      adamw_step(gauss.strict_lower, d_strict, opt.strict_lower, h.lr, config);
      adamw_step(gauss.log_diag, d_log_diag, opt.log_diag, h.lr, config);
      model.min_chol_diag = std::min(model.min_chol_diag, gauss.log_diag.array().exp().minCoeff());
    }
    adamw_step(rev.w1, rg.w1, opt.w1, h.lr, config);
    adamw_step(rev.b1, rg.b1, opt.b1, h.lr, config);
    adamw_step(rev.w2, rg.w2, opt.w2, h.lr, config);
    adamw_step(rev.b2, rg.b2, opt.b2, h.lr, config);
    model.history.push_back(h);
  }
  if (trainable) model.mapping.params = gauss.to_params(Provenance::fitted);
  rev.validate();
  return model;
}

}  // namespace detail

/// Frozen mapping (settings 1 and 2): only the reverse mapping learns, from
/// L_Recons on the mapped corpus.
inline FittedModel train_fixed_mapping(const EmbeddingMatrix& corpus_texts, const GaussianParams& params,
                                       const TrainConfig& config) {
  return detail::train(TrainMode::fixed_mapping, corpus_texts, nullptr, &params, config);
}

/// Unpaired images: L_Map on image-minus-text differences of independently
/// sampled rows, plus L_Recons.
inline FittedModel train_setting3(const EmbeddingMatrix& corpus_texts, const EmbeddingMatrix& any_images,
                                  const TrainConfig& config) {
  return detail::train(TrainMode::setting3, corpus_texts, &any_images, nullptr, config);
}

/// Text only: L_Map on the mapped-minus-reconstructed pseudo bias, plus
/// L_Recons and the relational distillation against the source texts.
inline FittedModel train_setting4(const EmbeddingMatrix& corpus_texts, const TrainConfig& config) {
  return detail::train(TrainMode::setting4, corpus_texts, nullptr, nullptr, config);
}

// ---------------------------------------------------------------------------
// Model directory: model.json + EMB1 blobs + history.csv.


inline void write_history_csv(const std::vector<HistoryEntry>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "step,loss_map,loss_cosine,loss_cl,loss_disti,lr\n";
  for (const auto& h : history) {
    out << h.step << ',' << format_double(h.loss_map) << ',' << format_double(h.loss_cosine)
        << ',' << format_double(h.loss_cl) << ',' << format_double(h.loss_disti) << ','
        << format_double(h.lr) << '\n';
  }
  if (!out) throw IoError("write failure on " + path.string());
}

inline std::vector<HistoryEntry> read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step,loss_map,loss_cosine,loss_cl,loss_disti,lr")
    throw FormatError(path.string() + ": unexpected history header");
  std::vector<HistoryEntry> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    row.imbue(std::locale::classic());
    HistoryEntry h;
    char c1, c2, c3, c4, c5;
    row >> h.step >> c1 >> h.loss_map >> c2 >> h.loss_cosine >> c3 >> h.loss_cl >> c4 >> h.loss_disti >> c5 >>
        h.lr;
    if (!row || c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',')
      throw FormatError(path.string() + ": malformed history row '" + line + "'");
    out.push_back(h);
  }
  return out;
}

inline void save_model(const FittedModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& p = model.mapping.params;
  write_embeddings(EmbeddingMatrix::from_matrix(p.mean.transpose()), dir / "mapping_mean.emb");
  write_embeddings(EmbeddingMatrix::from_matrix(p.chol), dir / "mapping_chol.emb");
  nlohmann::json j;
  j["mapping"] = {{"dim", p.dim()},
                  {"provenance", std::string(to_string(p.provenance))},
                  {"mean_path", "mapping_mean.emb"},
                  {"chol_path", "mapping_chol.emb"},
                  {"trainable", model.mapping.trainable},
                  {"renormalize_after_map", model.mapping.renormalize_after_map}};
  j["reverse"] = save_revmap(model.reverse, dir, "reverse");
  j["history_path"] = "history.csv";
  j["min_chol_diag"] = model.min_chol_diag;
  write_history_csv(model.history, dir / "history.csv");
  std::ofstream out(dir / "model.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "model.json").string());
  out << j.dump(2) << '\n';
}

inline FittedModel load_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw IoError("cannot open " + (dir / "model.json").string());
  FittedModel model;
  try {
    nlohmann::json j;
    in >> j;
    const auto& m = j.at("mapping");
    model.mapping.params = params_from_json(m, dir);
    model.mapping.trainable = m.value("trainable", false);
    model.mapping.renormalize_after_map = m.value("renormalize_after_map", false);
    model.reverse = load_revmap(j.at("reverse"), dir);
    model.history = read_history_csv(dir / j.value("history_path", std::string("history.csv")));
    model.min_chol_diag = j.value("min_chol_diag", model.mapping.params.chol.diagonal().minCoeff());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model.json: ") + e.what());
  }
  if (model.reverse.dim != model.mapping.params.dim())
    throw FormatError("model mapping and reverse dims differ");
  return model;
}

}  // namespace gapbridge
