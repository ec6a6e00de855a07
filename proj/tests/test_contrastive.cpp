#include <gtest/gtest.h>

#include <cmath>

#include "fsrc/contrastive.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fsrc;
using fsrc::testing::random_tensor;

namespace {

ContrastiveBatch make_batch(const Tensor2& f, std::vector<ClassId> labels, std::vector<double> ious) {
  ContrastiveBatch b;
  b.raw_features = f;
  b.labels = std::move(labels);
  b.ious = std::move(ious);
  b.in_group.assign(b.labels.size(), false);
  return b;
}

ContrastiveBatch random_batch(std::mt19937_64& rng, std::size_t n, std::size_t d, int classes, double iou_lo = 0.5) {
  std::uniform_int_distribution<int> lab(0, classes - 1);
  std::uniform_real_distribution<double> u(iou_lo, 1.0);
  std::vector<ClassId> labels(n);
  std::vector<double> ious(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = lab(rng);
    ious[i] = u(rng);
  }
  return make_batch(random_tensor(rng, n, d), labels, ious);
}

std::vector<std::vector<double>> rows_of(const Tensor2& t) {
  std::vector<std::vector<double>> r;
  for (std::size_t i = 0; i < t.rows(); ++i) r.emplace_back(t.row(i).begin(), t.row(i).end());
  return r;
}

}  // namespace

TEST(AnchorWeight, FloorIsInclusive) {
  RCLConfig cfg;
  EXPECT_EQ(anchor_weight(0.8, cfg), 1.0);
  EXPECT_EQ(anchor_weight(0.69, cfg), 0.0);
  EXPECT_EQ(anchor_weight(0.7, cfg), 1.0);
  EXPECT_EQ(anchor_weight(0.0, cfg), 0.0);
  EXPECT_EQ(anchor_weight(1.0, cfg), 1.0);
}

TEST(RCLConfig, Validation) {
  RCLConfig c;
  c.temperature = 0;
  EXPECT_THROW(c.validate(), PreconditionError);
  c = {};
  c.iou_floor = 1.5;
  EXPECT_THROW(c.validate(), PreconditionError);
}

TEST(PerAnchorLoss, SameLabelPairIsZero) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 10; ++t) {
    const auto b = make_batch(random_tensor(rng, 2, 4), {3, 3}, {0.9, 0.9});
    EXPECT_EQ(per_anchor_loss(b, 0, 0.2), 0.0);
    EXPECT_EQ(per_anchor_loss(b, 1, 0.2), 0.0);
  }
}

TEST(PerAnchorLoss, NoPartnerIsZero) {
  const auto b = make_batch(Tensor2::from_rows({{1, 0}, {0, 1}, {1, 1}}), {0, 1, 1}, {1, 1, 1});
  EXPECT_EQ(per_anchor_loss(b, 0, 0.2), 0.0);
  EXPECT_GT(per_anchor_loss(b, 1, 0.2), 0.0);
}

TEST(PerAnchorLoss, HandWalkedThreeProposalExample) {
  // Labels (A, A, B) with features e1, e1, e2: the positive has similarity 1/0.2 = 5, the negative 0.
  const auto b = make_batch(Tensor2::from_rows({{1, 0}, {1, 0}, {0, 1}}), {0, 0, 1}, {1, 1, 1});
  const double expected = std::log1p(std::exp(-5.0));
  EXPECT_NEAR(per_anchor_loss(b, 0, 0.2), expected, 1e-15);
  EXPECT_NEAR(expected, 0.0067153, 1e-6);
  const double oracle_total = oracle::rcl_loss_scalar(rows_of(b.raw_features), {0, 0, 1}, {1, 1, 1}, 0.2, 0.7);
  // Anchors 0 and 1 contribute the same term; anchor 2 has no positive.
  EXPECT_NEAR(oracle_total, 2.0 * expected / 3.0, 1e-15);
}

TEST(PerAnchorLoss, RequiresTwoProposals) {
  const auto b = make_batch(Tensor2::from_rows({{1, 0}}), {0}, {1});
  EXPECT_THROW(per_anchor_loss(b, 0, 0.2), PreconditionError);
}

TEST(PerAnchorLoss, LargeSimilaritiesStayFinite) {
  const auto b = make_batch(Tensor2::from_rows({{1, 0}, {1, 0}, {-1, 0}}), {0, 0, 1}, {1, 1, 1});
  const double l = per_anchor_loss(b, 0, 1e-3);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_GE(l, 0.0);
}

TEST(PerAnchorLoss, TemperatureLimits) {
  // One positive (similarity 0.8) and one negative (similarity 0.2).
  const auto good = make_batch(Tensor2::from_rows({{1, 0}, {0.8, 0.6}, {0.2, std::sqrt(0.96)}}), {0, 0, 1}, {1, 1, 1});
  const auto bad = make_batch(Tensor2::from_rows({{1, 0}, {0.2, std::sqrt(0.96)}, {0.8, 0.6}}), {0, 0, 1}, {1, 1, 1});
  double prev_good = per_anchor_loss(good, 0, 1.0);
  double prev_bad = per_anchor_loss(bad, 0, 1.0);
  for (double tau : {0.5, 0.2, 0.1, 0.05, 0.01}) {
    const double g = per_anchor_loss(good, 0, tau);
    const double b = per_anchor_loss(bad, 0, tau);
    EXPECT_LT(g, prev_good);
    EXPECT_GT(b, prev_bad);
    prev_good = g;
    prev_bad = b;
  }
  EXPECT_LT(prev_good, 1e-20);
  EXPECT_GT(prev_bad, 50.0);
}

TEST(RclLoss, AllBelowFloorGivesZeroLossAndGradient) {
  std::mt19937_64 rng(2);
  auto b = random_batch(rng, 8, 4, 3);
  b.ious.assign(8, 0.5);
  const auto r = rcl_loss(b, RCLConfig{});
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.grad, Tensor2(8, 4));
}

TEST(RclLoss, IdenticalFeaturesOneLabel) {
  // Every other proposal is a positive with the same similarity, so an anchor's
  // loss is log(n - 1): zero only for a pair.
  const auto pair = make_batch(Tensor2(2, 3, 0.7), {2, 2}, {1, 1});
  EXPECT_NEAR(rcl_loss(pair, RCLConfig{}).loss, 0.0, 1e-15);
  for (std::size_t n : {3u, 5u, 9u}) {
    const auto b = make_batch(Tensor2(n, 3, 0.7), std::vector<ClassId>(n, 2), std::vector<double>(n, 1.0));
    const auto r = rcl_loss(b, RCLConfig{});
    EXPECT_NEAR(r.loss, std::log(static_cast<double>(n - 1)), 1e-12);
    // Identical unit rows: the gradient is radial and removed by the normalization.
    for (double g : r.grad.data()) EXPECT_NEAR(g, 0.0, 1e-12);
  }
}

TEST(RclLoss, EmptyAndSingletonBatchesAreZero) {
  const auto empty = make_batch(Tensor2(0, 4), {}, {});
  EXPECT_EQ(rcl_loss(empty, RCLConfig{}).loss, 0.0);
  const auto one = make_batch(Tensor2(1, 4, 1.0), {0}, {1});
  const auto r = rcl_loss(one, RCLConfig{});
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.grad, Tensor2(1, 4));
}

TEST(RclLoss, MatchesScalarOracle) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng() % 15;
    const std::size_t d = 1 + rng() % 8;
    const auto b = random_batch(rng, n, d, 3);
    for (double tau : {0.1, 0.2, 0.5}) {
      RCLConfig cfg;
      cfg.temperature = tau;
      const double ref = oracle::rcl_loss_scalar(rows_of(b.raw_features), b.labels, b.ious, tau, cfg.iou_floor);
      EXPECT_NEAR(rcl_loss(b, cfg).loss, ref, 1e-9);
    }
  }
}

TEST(RclLoss, DenominatorCountsZeroWeightAnchors) {
  // Same anchors, extra below-floor proposal of an unrelated label: the mean divides by n.
  const auto b = make_batch(Tensor2::from_rows({{1, 0}, {1, 0}, {0, 1}}), {0, 0, 1}, {1, 1, 0.1});
  const double li = std::log1p(std::exp(-5.0));
  EXPECT_NEAR(rcl_loss(b, RCLConfig{}).loss, 2.0 * li / 3.0, 1e-15);
}

TEST(RclLoss, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 3 + rng() % 8;
    const std::size_t d = 2 + rng() % 4;
    auto b = random_batch(rng, n, d, 2);
    const RCLConfig cfg;
    const auto r = rcl_loss(b, cfg);
    const ScalarFn f = [&](std::span<const double> x) {
      ContrastiveBatch c = b;
      c.raw_features = Tensor2(n, d, std::vector<double>(x.begin(), x.end()));
      return rcl_loss(c, cfg).loss;
    };
    const std::vector<double> x(b.raw_features.data().begin(), b.raw_features.data().end());
    EXPECT_LT(finite_diff_check(f, x, r.grad.data()), 1e-5);
  }
}

TEST(RclLoss, PermutationInvariance) {
  std::mt19937_64 rng(5);
  const auto b = random_batch(rng, 10, 4, 3);
  const auto r = rcl_loss(b, RCLConfig{});
  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  ContrastiveBatch p = b;
  for (std::size_t i = 0; i < 10; ++i) {
    std::copy(b.raw_features.row(perm[i]).begin(), b.raw_features.row(perm[i]).end(), p.raw_features.row(i).begin());
    p.labels[i] = b.labels[perm[i]];
    p.ious[i] = b.ious[perm[i]];
  }
  const auto rp = rcl_loss(p, RCLConfig{});
  EXPECT_NEAR(rp.loss, r.loss, 1e-12);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(rp.per_anchor[i], r.per_anchor[perm[i]], 1e-12);
}

TEST(RclLoss, ScaleInvariance) {
  std::mt19937_64 rng(6);
  const auto b = random_batch(rng, 9, 5, 3);
  ContrastiveBatch s = b;
  for (std::size_t r = 0; r < 9; ++r) {
    const double k = 0.1 + static_cast<double>(r);
    for (double& v : s.raw_features.row(r)) v *= k;
  }
  EXPECT_NEAR(rcl_loss(s, RCLConfig{}).loss, rcl_loss(b, RCLConfig{}).loss, 1e-9);
}

TEST(RclLoss, PerAnchorNonNegative) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    const auto b = random_batch(rng, 12, 3, 2);
    for (double l : rcl_loss(b, RCLConfig{}).per_anchor) EXPECT_GE(l, 0.0);
  }
}

TEST(RclLoss, ZeroNormFeatureIsDegenerate) {
  const auto b = make_batch(Tensor2::from_rows({{0, 0}, {1, 0}}), {0, 0}, {1, 1});
  EXPECT_THROW(rcl_loss(b, RCLConfig{}), DegenerateInput);
}

// --- selection -----------------------------------------------------------------

namespace {

constexpr ClassId kCow = 0, kHorse = 1, kDog = 2, kCat = 3, kBg = 9;

}  // namespace

TEST(SelectBatch, GateRule) {
  const ResemblanceGroup g{{kCow, kHorse}};
  const Tensor2 f(3, 2, 1.0);
  const std::vector<ClassId> pred{kCow, kCat, kBg};
  const std::vector<ClassId> gt{kDog, kDog, kBg};
  const std::vector<double> ious{0.9, 0.9, 0.1};
  const auto rcl = select_contrastive_batch(f, pred, gt, ious, g, ContrastPhase::RCL, kBg);
  ASSERT_EQ(rcl.size(), 2u);
  EXPECT_EQ(rcl.source_index, (std::vector<std::size_t>{0, 2}));
  EXPECT_TRUE(rcl.in_group[0]);
  EXPECT_FALSE(rcl.in_group[1]);
  const auto gcl = select_contrastive_batch(f, pred, gt, ious, g, ContrastPhase::GCL, kBg);
  EXPECT_EQ(gcl.size(), 3u);
}

TEST(SelectBatch, GroundTruthInGroupAlsoQualifies) {
  const ResemblanceGroup g{{kHorse}};
  const Tensor2 f(1, 2, 1.0);
  const std::vector<ClassId> pred{kDog}, gt{kHorse};
  const std::vector<double> ious{0.8};
  EXPECT_EQ(select_contrastive_batch(f, pred, gt, ious, g, ContrastPhase::RCL, kBg).size(), 1u);
}

TEST(SelectBatch, BackgroundSwitch) {
  const ResemblanceGroup g{{kCow}};
  const Tensor2 f(2, 2, 1.0);
  const std::vector<ClassId> pred{kCow, kCow}, gt{kCow, kBg};
  const std::vector<double> ious{0.9, 0.2};
  EXPECT_EQ(select_contrastive_batch(f, pred, gt, ious, g, ContrastPhase::RCL, kBg, true).size(), 2u);
  EXPECT_EQ(select_contrastive_batch(f, pred, gt, ious, g, ContrastPhase::RCL, kBg, false).size(), 1u);
  // A background proposal predicted as a group class is a negative, never gated in.
  const auto b = select_contrastive_batch(f, pred, gt, ious, g, ContrastPhase::RCL, kBg, true);
  EXPECT_FALSE(b.in_group[1]);
}

TEST(SelectBatch, GclKeepsEverything) {
  std::mt19937_64 rng(8);
  const Tensor2 f = random_tensor(rng, 20, 3);
  std::vector<ClassId> pred(20), gt(20);
  std::vector<double> ious(20);
  for (int i = 0; i < 20; ++i) {
    pred[i] = i % 5;
    gt[i] = i % 4 == 0 ? kBg : i % 3;
    ious[i] = gt[i] == kBg ? 0.1 : 0.8;
  }
  const auto b = select_contrastive_batch(f, pred, gt, ious, ResemblanceGroup{}, ContrastPhase::GCL, kBg);
  EXPECT_EQ(b.size(), 20u);
  EXPECT_EQ(b.raw_features, f);
}
