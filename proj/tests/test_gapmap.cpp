#include <cmath>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace gapbridge;

namespace {

struct SyntheticPairs {
  EmbeddingMatrix texts;
  EmbeddingMatrix images;
  GaussianParams truth;
};

SyntheticPairs make_pairs(Eigen::Index dim, Eigen::Index count, std::uint64_t seed) {
  SynthSpec spec;
  spec.dim = dim;
  spec.count = count;
  spec.seed = seed;
  SyntheticPairs out{gen_text_embeddings(spec), {}, gen_bias_truth(spec)};
  Rng rng(derive_seed(seed, kStreamPairs));
  out.images = gen_paired_images(out.texts, out.truth, rng);
  return out;
}

}  // namespace

TEST(Setting1, IdenticalPairsGiveZeroBias) {
  Rng rng(1);
  const auto t = EmbeddingMatrix::from_matrix(gbtest::random_unit_rows(40, 6, rng), true);
  const auto p = estimate_setting1(t, t);
  EXPECT_EQ(p.provenance, Provenance::setting1);
  EXPECT_EQ(p.mean.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_LT(p.covariance().norm(), 1e-6);
  EXPECT_NO_THROW(p.validate());
  const double kl = kl_to_standard(Vec::Zero(6), p.covariance());
  EXPECT_TRUE(std::isfinite(kl));
  EXPECT_GT(kl, 10.0);
}

TEST(Setting1, RecoversPlantedBias) {
  const auto s = make_pairs(16, 10000, 4);
  const auto est = estimate_setting1(s.images, s.texts);
  const auto err = param_recovery_error(est, s.truth);
  EXPECT_LT(err.mean_linf, 0.02 * (1.0 + s.truth.mean.cwiseAbs().maxCoeff()));
  EXPECT_LT(err.cov_frob_rel, 0.05);
}

TEST(Setting1, Errors) {
  const auto one = EmbeddingMatrix(1, 2, {1.f, 0.f});
  EXPECT_THROW(estimate_setting1(one, one), InsufficientDataError);
  const auto a = EmbeddingMatrix(2, 2, {1.f, 0.f, 0.f, 1.f});
  const auto b = EmbeddingMatrix(2, 1, {1.f, 0.f});
  EXPECT_THROW(estimate_setting1(a, b), PairingError);
}

TEST(Setting2, HomogeneousCorpusMatchesSetting1) {
  const auto web = make_pairs(8, 10000, 7);
  SynthSpec corpus_spec;
  corpus_spec.dim = 8;
  corpus_spec.count = 20000;
  corpus_spec.seed = 7;  // same centers, more draws
  const Mat all = gen_text_embeddings(corpus_spec).to_matrix();
  const auto corpus = EmbeddingMatrix::from_matrix(all.bottomRows(10000), true);
  const auto s1 = estimate_setting1(web.images, web.texts);
  const auto s2 = estimate_setting2(web.images, web.texts, corpus);
  EXPECT_EQ(s2.provenance, Provenance::setting2);
  EXPECT_LT((s2.mean - s1.mean).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Setting2, PlantedShiftIsRemovedFromMean) {
  const auto web = make_pairs(8, 10000, 8);
  Vec c(8);
  c << 0.3, -0.2, 0.1, 0.0, 0.25, -0.3, 0.05, 0.2;
  const Mat corpus = web.texts.to_matrix().rowwise() + c.transpose();
  const auto est = estimate_setting2(web.images, web.texts, EmbeddingMatrix::from_matrix(corpus));
  const auto s1 = estimate_setting1(web.images, web.texts);
  EXPECT_LT((est.mean - (s1.mean - c)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Setting2, CovarianceCorrectionAddsTextCovariances) {
  Rng rng(3);
  const auto wi = EmbeddingMatrix::from_matrix(gbtest::random_matrix(50, 3, rng));
  const auto wt = EmbeddingMatrix::from_matrix(gbtest::random_matrix(50, 3, rng));
  const auto ct = EmbeddingMatrix::from_matrix(gbtest::random_matrix(70, 3, rng, 2.0));
  const auto web = estimate_moments(wi.to_matrix() - wt.to_matrix(), Estimator::unbiased);
  const Mat expected = web.cov + estimate_moments(wt.to_matrix(), Estimator::unbiased).cov +
                       estimate_moments(ct.to_matrix(), Estimator::unbiased).cov;
  EXPECT_LT((estimate_setting2(wi, wt, ct).covariance() - expected).norm(), 1e-10);
  EXPECT_LT((estimate_setting2(wi, wt, ct, {true}).covariance() - web.cov).norm(), 1e-10);
}

TEST(Setting2, EmptyCorpus) {
  const auto s = make_pairs(4, 20, 1);
  EXPECT_THROW(estimate_setting2(s.images, s.texts, EmbeddingMatrix(0, 4, {})), InsufficientDataError);
}

TEST(MappingModule, FrozenModuleNeedsEstimatedProvenance) {
  MappingModule m;
  m.params = GaussianParams::standard(3, Provenance::fitted);
  EXPECT_THROW(m.validate(), ValidationError);
  m.trainable = true;
  EXPECT_NO_THROW(m.validate());
  m.trainable = false;
  m.params.provenance = Provenance::setting2;
  EXPECT_NO_THROW(m.validate());
}

TEST(MapForward, DeterministicShift) {
  Rng rng(5);
  const Mat texts = gbtest::random_unit_rows(20, 4, rng);
  const Vec b = (Vec(4) << 0.1, -0.2, 0.3, 0.0).finished();
  const GaussianParams p(b, 1e-12 * Mat::Identity(4, 4), Provenance::setting1);
  Rng noise(1);
  const Mat out = map_forward(texts, p, noise);
  EXPECT_LT((out - (texts.rowwise() + b.transpose())).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(MapForward, SeedDeterminismAndShapes) {
  Rng rng(6);
  const auto texts = EmbeddingMatrix::from_matrix(gbtest::random_unit_rows(30, 5, rng), true);
  MappingModule m;
  m.params = GaussianParams(Vec::Constant(5, 0.1), 0.2 * Mat::Identity(5, 5), Provenance::setting1);
  Rng a(7), b(7);
  const auto x = map_forward(texts, m, a);
  EXPECT_EQ(x, map_forward(texts, m, b));
  EXPECT_EQ(x.count(), texts.count());
  EXPECT_EQ(x.dim(), texts.dim());
  EXPECT_FALSE(x.normalized());
  m.renormalize_after_map = true;
  const auto y = map_forward(texts, m, a);
  EXPECT_TRUE(y.normalized());
  for (std::size_t i = 0; i < y.count(); ++i) {
    double sq = 0;
    for (float v : y.row(i)) sq += double(v) * v;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
  }
  EXPECT_THROW(map_forward(Mat::Zero(2, 3), m.params, a), ShapeError);
}

TEST(MapForward, TruthMappingReducesGap) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = make_pairs(8, 1000, seed);
    const Mat texts = s.texts.to_matrix();
    const Mat images = s.images.to_matrix();
    Rng rng(seed + 1000);
    const Mat mapped = map_forward(texts, s.truth, rng);
    const double mapped_gap = (mapped - images).rowwise().norm().mean();
    const double raw_gap = (texts - images).rowwise().norm().mean();
    wins += mapped_gap <= raw_gap;
  }
  EXPECT_GE(wins, 11);
}

TEST(Lmap, SelfConsistentSamplesGiveSmallLoss) {
  Rng prng(10);
  const GaussianParams p(gbtest::random_matrix(8, 1, prng, 0.3), gbtest::random_chol(8, prng), Provenance::fitted);
  Rng rng(11);
  const auto r = lmap_loss(sample_noise(p, 4096, rng), p);
  EXPECT_LT(r.loss, 0.05);
  EXPECT_GE(r.loss, -1e-10);
}

TEST(Lmap, DegenerateBatchIsFinite) {
  const Mat deltas = Vec::Constant(3, 0.5).transpose().replicate(10, 1);
  const auto r = lmap_loss(deltas, GaussianParams::standard(3));
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_GT(r.loss, 10.0);
  EXPECT_GT(r.jitter, 0.0);
}

TEST(Lmap, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Eigen::Index d = 4, n = 64;
    const GaussianParams p(gbtest::random_matrix(d, 1, rng, 0.3), gbtest::random_chol(d, rng), Provenance::fitted);
    const Mat deltas = gbtest::random_matrix(n, d, rng, 0.8).rowwise() + Vec::Constant(d, 0.2).transpose();
    const auto r = lmap_loss(deltas, p);
    const auto tg = TrainableGaussian::from_params(p);

    const Mat fd_mean = gbtest::numeric_gradient(
        [&](const Mat& m) { return lmap_loss(deltas, GaussianParams(m, p.chol, Provenance::fitted)).loss; }, p.mean);
    EXPECT_LT(gbtest::relative_error(r.grad_mean, fd_mean), 1e-4);

    // (strict-lower, log-diag) coordinates packed in one matrix.
    Mat packed = tg.strict_lower;
    packed.diagonal() = tg.log_diag;
    const Mat fd_chol = gbtest::numeric_gradient(
        [&](const Mat& q) {
          TrainableGaussian t = tg;
          t.strict_lower = q.triangularView<Eigen::StrictlyLower>();
          t.log_diag = q.diagonal();
          return lmap_loss(deltas, t.to_params()).loss;
        },
        packed);
    const Mat fd_lower = fd_chol.triangularView<Eigen::Lower>();
    EXPECT_LT(gbtest::relative_error(r.grad_chol, fd_lower), 1e-4);

    const Mat fd_deltas = gbtest::numeric_gradient([&](const Mat& x) { return lmap_loss(x, p).loss; }, deltas);
    EXPECT_LT(gbtest::relative_error(r.grad_deltas, fd_deltas), 1e-4);
  }
}

TEST(Lmap, ShiftEquivariance) {
  Rng rng(13);
  const GaussianParams p(gbtest::random_matrix(5, 1, rng), gbtest::random_chol(5, rng), Provenance::fitted);
  const Mat deltas = gbtest::random_matrix(40, 5, rng);
  const Vec c = gbtest::random_matrix(5, 1, rng, 3.0);
  const double base = lmap_loss(deltas, p).loss;
  const double shifted =
      lmap_loss(deltas.rowwise() + c.transpose(), GaussianParams(p.mean + c, p.chol, Provenance::fitted)).loss;
  EXPECT_NEAR(base, shifted, 1e-10);
}

TEST(Lmap, DescentRecoversPlantedBias) {
  // Full-batch AdamW, constant lr 1e-2, 200 steps from (0, I).
  int successes = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto truth = gen_bias_truth(8, 0.2, 0.3, derive_seed(seed, kStreamBias));
    Rng rng(seed);
    const Mat deltas = sample_noise(truth, 2048, rng);
    TrainableGaussian g = TrainableGaussian::from_params(GaussianParams::standard(8));
    TrainConfig config;
    AdamState sm, sl, sd;
    const double initial = lmap_loss(deltas, g.to_params()).loss;
    double loss = initial;
    for (int step = 0; step < 200; ++step) {
      const auto r = lmap_loss(deltas, g.to_params());
      loss = r.loss;
      const Mat strict = r.grad_chol.triangularView<Eigen::StrictlyLower>();
      const Vec diag = r.grad_chol.diagonal();
      adamw_step(g.mean, r.grad_mean, sm, 1e-2, config);
      adamw_step(g.strict_lower, strict, sl, 1e-2, config);
      adamw_step(g.log_diag, diag, sd, 1e-2, config);
    }
    loss = lmap_loss(deltas, g.to_params()).loss;
    const double mu_err = (g.mean - truth.mean).cwiseAbs().maxCoeff();
    successes += loss <= 0.1 * initial && mu_err < 0.05 * (1.0 + truth.mean.cwiseAbs().maxCoeff());
  }
  EXPECT_GE(successes, 18);
}

TEST(Lmap, Errors) {
  EXPECT_THROW(lmap_loss(Mat::Zero(1, 3), GaussianParams::standard(3)), InsufficientDataError);
  EXPECT_THROW(lmap_loss(Mat::Zero(4, 2), GaussianParams::standard(3)), ShapeError);
}
