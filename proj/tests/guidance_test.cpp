#include "it3d/diffmath/ops.hpp"
#include "it3d/guidance.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace it3d;

namespace {

Tensord randn(Shape shape, Rng& rng) {
  Tensord t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

Tensord unit(Tensord t) {
  t.array() /= std::sqrt(t.array().square().sum());
  return t;
}

double max_abs_diff(const Tensord& a, const Tensord& b) { return (a.array() - b.array()).abs().maxCoeff(); }

double dotp(const Tensord& a, const Tensord& b) { return (a.array() * b.array()).sum(); }

// Returns fixed predictions regardless of the query.
class FixedOracle : public ScoreOracle {
 public:
  explicit FixedOracle(DenoiseResult r) : r_(std::move(r)) {}
  DenoiseResult denoise(const DenoiseQuery& q) override {
    last = q;
    DenoiseResult r = r_;
    r.eps_neg.resize(q.negatives.size(), r_.eps_neg.empty() ? r_.eps_cond : r_.eps_neg.front());
    return r;
  }
  DenoiseQuery last;

 private:
  DenoiseResult r_;
};

class ThrowingOracle : public ScoreOracle {
 public:
  DenoiseResult denoise(const DenoiseQuery&) override { throw std::runtime_error("connection refused"); }
};

PromptRecord cat_record() {
  PromptRecord r;
  r.id = 3;
  r.keywords = {{"species", "cat"}, {"item", std::nullopt}, {"gadget", "a tie"}, {"hat", "sombrero"}};
  r.text = animal_text(r.keywords);
  return r;
}

}  // namespace

TEST(Schedule, StrictlyDecreasingInUnitInterval) {
  const auto s = DiffusionSchedule::linear();
  ASSERT_EQ(s.steps(), 1000);
  double prev = 1.0;
  for (Index t = 1; t <= 1000; ++t) {
    EXPECT_LT(s.alpha_bar(t), prev);
    EXPECT_GT(s.alpha_bar(t), 0.0);
    prev = s.alpha_bar(t);
  }
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 1.0 - 1e-4);
  EXPECT_DOUBLE_EQ(s.weight(500), 1.0 - s.alpha_bar(500));
  EXPECT_THROW(s.alpha_bar(0), std::out_of_range);
  EXPECT_THROW(s.alpha_bar(1001), std::out_of_range);
  EXPECT_THROW(DiffusionSchedule::linear(1000, 2e-2, 1e-4), std::invalid_argument);
}

TEST(ForwardDiffuse, EndpointsAndInversion) {
  Rng rng(1);
  const Tensord img = randn({4, 4, 3}, rng), eps = randn({4, 4, 3}, rng);
  const auto clean = DiffusionSchedule::linear(2, 1e-14, 2e-14);
  EXPECT_LT(max_abs_diff(forward_diffuse(img, 1, eps, clean), img), 1e-6);
  const auto noisy = DiffusionSchedule::linear(1000, 0.5, 0.99);
  EXPECT_LT(noisy.alpha_bar(1000), 1e-300);
  EXPECT_LT(max_abs_diff(forward_diffuse(img, 1000, eps, noisy), eps), 1e-12);

  const auto s = DiffusionSchedule::linear();
  for (Index t : {1, 20, 500, 980, 1000}) {
    const Tensord x = forward_diffuse(img, t, eps, s);
    Tensord back = x;
    back.array() = (x.array() - std::sqrt(1 - s.alpha_bar(t)) * eps.array()) / std::sqrt(s.alpha_bar(t));
    EXPECT_LT(max_abs_diff(back, img), 1e-5) << "t=" << t;
  }
  EXPECT_THROW(forward_diffuse(img, 0, eps, s), std::out_of_range);
  EXPECT_THROW(forward_diffuse(img, 5, randn({4, 4}, rng), s), ShapeError);
}

TEST(Cfg, Algebra) {
  Rng rng(2);
  const Tensord unc = randn({3, 5}, rng), d = randn({3, 5}, rng);
  Tensord cond = unc;
  cond.array() += d.array();
  const DenoiseResult r{unc, cond, {}};
  EXPECT_EQ(max_abs_diff(cfg_predict(r, 0.0), unc), 0.0);
  EXPECT_LT(max_abs_diff(cfg_predict(r, 1.0), cond), 1e-12);
  for (double w : {0.5, 7.5, 100.0}) {
    Tensord diff = cfg_predict(r, w);
    diff.array() -= unc.array();
    Tensord expect = d;
    expect.array() *= w;
    EXPECT_LT(max_abs_diff(diff, expect), 1e-10 * w);
  }
  FixedOracle oracle(r);
  DenoiseQuery q;
  q.x_t = unc;
  EXPECT_LT(max_abs_diff(cfg_predict(q, oracle, 1.0), cond), 1e-12);
}

TEST(PerpNeg, HandProjection) {
  const DenoiseResult r{Tensord({2}, {0.0, 0.0}), Tensord({2}, {1.0, 0.0}), {Tensord({2}, {1.0, 1.0})}};
  const Tensord p = perp_neg_predict(r, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_DOUBLE_EQ(p[1], -1.0);
  EXPECT_THROW(perp_neg_predict(DenoiseResult{r.eps_uncond, r.eps_cond, {}}, 1.0, 1.0), std::invalid_argument);
}

TEST(PerpNeg, ParallelNegativeReducesToCfg) {
  Rng rng(3);
  const Tensord unc = randn({8, 8, 3}, rng), pos = randn({8, 8, 3}, rng);
  Tensord cond = unc, neg = unc;
  cond.array() += pos.array();
  neg.array() += -2.5 * pos.array();
  const DenoiseResult r{unc, cond, {neg}};
  EXPECT_LT(max_abs_diff(perp_neg_predict(r, 7.0, 3.0), cfg_predict(r, 7.0)), 1e-12);
}

TEST(PerpNeg, ZeroNegScaleIsBitIdenticalToCfg) {
  Rng rng(4);
  for (int k = 0; k < 20; ++k) {
    const DenoiseResult r{randn({6, 6, 3}, rng), randn({6, 6, 3}, rng), {randn({6, 6, 3}, rng)}};
    const double w = rng.uniform(0.0, 100.0);
    EXPECT_TRUE((perp_neg_predict(r, w, 0.0).array() == cfg_predict(r, w).array()).all());
  }
}

TEST(PerpNeg, OrthogonalOnRandomDraws) {
  Rng rng(5);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Tensord neg = randn({7, 3}, rng), pos = randn({7, 3}, rng);
    const Tensord perp = perpendicular(neg, pos);
    const double scale = std::sqrt(dotp(neg, neg) * dotp(pos, pos));
    worst = std::max(worst, std::abs(dotp(perp, pos)) / scale);
  }
  EXPECT_LT(worst, 1e-5);
  // Degenerate positive direction leaves the negative untouched.
  const Tensord tiny({3}, {1e-10, 0.0, 0.0}), v({3}, {1.0, 2.0, 3.0});
  EXPECT_EQ(max_abs_diff(perpendicular(v, tiny), v), 0.0);
}

TEST(PerpNeg, NegativesAreAveragedBeforeProjection) {
  const Tensord zero({2}, {0.0, 0.0});
  const DenoiseResult r{zero, Tensord({2}, {1.0, 0.0}), {Tensord({2}, {1.0, 2.0}), Tensord({2}, {3.0, 0.0})}};
  // mean neg = (2, 1) -> perpendicular part (0, 1).
  const Tensord p = perp_neg_predict(r, 2.0, 0.5);
  EXPECT_DOUBLE_EQ(p[0], 2.0);
  EXPECT_DOUBLE_EQ(p[1], -1.0);
}

TEST(Severity, EndpointCases) {
  Rng rng(6);
  const Tensord f = unit(randn({16}, rng));
  Tensord g({16});
  g.array() = 0;
  g[0] = f[1];
  g[1] = -f[0];
  g = unit(g);
  ASSERT_NEAR(dotp(f, g), 0.0, 1e-15);
  EXPECT_NEAR(severity(37.0, f, 37.0, unit(randn({16}, rng))), 0.0, 1e-6);
  EXPECT_NEAR(severity(10.0, f, 190.0, f), 1.0, 1e-6);
  EXPECT_NEAR(severity(0.0, f, 90.0, g), 0.25, 1e-6);
  EXPECT_NEAR(severity(-90.0, f, 0.0, g), 0.25, 1e-6);
  EXPECT_DOUBLE_EQ(severity(20.0, f, nullptr), 0.0);
}

TEST(Severity, RangeAndSymmetry) {
  Rng rng(7);
  for (int k = 0; k < 1000; ++k) {
    const Tensord a = unit(randn({9}, rng)), b = unit(randn({9}, rng));
    const double v = rng.uniform(-360, 720), v1 = rng.uniform(-360, 720);
    const double raw = 0.25 * (1 - std::cos((v - v1) * std::numbers::pi / 180)) * (1 + dotp(a, b));
    EXPECT_GE(raw, -1e-12);
    EXPECT_LE(raw, 1.0 + 1e-12);
    const double c = severity(v, a, v1, b);
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
    EXPECT_DOUBLE_EQ(c, severity(v1, b, v, a));
  }
  // Non-unit features are clamped.
  const Tensord big({2}, {3.0, 0.0});
  EXPECT_DOUBLE_EQ(severity(0.0, big, 180.0, big), 1.0);
}

TEST(AdaptiveWNeg, EndpointsAndMonotone) {
  GuidanceConfig cfg;
  EXPECT_DOUBLE_EQ(adaptive_w_neg(0.0, cfg), cfg.w_min);
  EXPECT_DOUBLE_EQ(adaptive_w_neg(1.0, cfg), cfg.w_min + cfg.delta_w);
  EXPECT_DOUBLE_EQ(adaptive_w_neg(0.25, cfg), 2.5);
  double prev = -1;
  for (int i = 0; i <= 100; ++i) {
    const double w = adaptive_w_neg(i / 100.0, cfg);
    EXPECT_GE(w, prev);
    prev = w;
  }
  EXPECT_THROW(adaptive_w_neg(1.5, cfg), std::domain_error);
}

TEST(SeverityCacheTest, KeepsLatestPerPrompt) {
  Rng rng(8);
  SeverityCache cache(3);
  const Tensord f1 = unit(randn({4}, rng)), f2 = unit(randn({4}, rng));
  cache.update(5, 10.0, f1, 0.1);
  cache.update(5, 200.0, f2, 0.3);
  ASSERT_EQ(cache.size(), 1u);
  EXPECT_DOUBLE_EQ(cache.find(5)->azimuth, 200.0);
  EXPECT_EQ(max_abs_diff(cache.find(5)->feature, f2), 0.0);
  EXPECT_EQ(cache.find(6), nullptr);
  cache.update(6, 0, f1, 0);
  cache.update(7, 0, f1, 0);
  EXPECT_EQ(cache.size(), 3u);
  EXPECT_THROW(cache.update(8, 0, f1, 0), std::length_error);
  cache.update(7, 45.0, f2, 0);
  EXPECT_NEAR(severity(45.0, f2, cache.find(7)), 0.0, 1e-15);
}

TEST(Views, Partition) {
  EXPECT_EQ(view_of(0), View::kFront);
  EXPECT_EQ(view_of(45), View::kFront);
  EXPECT_EQ(view_of(315), View::kFront);
  EXPECT_EQ(view_of(-30), View::kFront);
  EXPECT_EQ(view_of(46), View::kSide);
  EXPECT_EQ(view_of(270), View::kSide);
  EXPECT_EQ(view_of(135), View::kSide);
  EXPECT_EQ(view_of(180), View::kBack);
  EXPECT_EQ(view_of(540), View::kBack);
  const auto vp = view_prompts("a cat", 100.0);
  EXPECT_EQ(vp.positive, "a cat, side view");
  EXPECT_EQ(vp.negatives, (std::vector<std::string>{"a cat, front view", "a cat, back view"}));
}

TEST(Sds, ExactPredictionGivesZeroGradient) {
  Rng rng(9);
  const auto sched = DiffusionSchedule::linear();
  const Tensord rendered = randn({8, 8, 3}, rng), eps = randn({8, 8, 3}, rng);
  const PromptRecord rec = cat_record();
  DiffusionSchedule s = sched;
  for (bool cfg_only : {true, false}) {
    GuidanceConfig cfg;
    cfg.cfg_only = cfg_only;
    FixedOracle oracle(DenoiseResult{eps, eps, {eps}});
    SeverityCache cache;
    const Tensord feat = unit(randn({16}, rng));
    const auto res = sds_grad_at(rendered, CameraPose{}, rec, oracle, s, cfg, cache, feat, 400, eps);
    EXPECT_EQ(res.grad.shape(), rendered.shape());
    EXPECT_EQ(res.grad.array().abs().maxCoeff(), 0.0);
    EXPECT_EQ(oracle.last.negatives.size(), cfg_only ? 0u : 2u);
    EXPECT_EQ(oracle.last.prompt, rec.text + ", front view");
  }
}

TEST(Sds, SyntheticOracleIsAClosedFormPull) {
  const auto sched = DiffusionSchedule::linear();
  SyntheticOracle oracle(sched);
  GuidanceConfig cfg;
  const PromptRecord rec = cat_record();
  Rng rng(10);
  SeverityCache cache;
  const CameraPose pose{80.0, 130.0, 3.3, 75.0};
  const Tensord target = oracle.target(rec, pose, 16, 16);
  Tensord rendered = randn({16, 16, 3}, rng);
  rendered.array() = 0.5 + 0.2 * rendered.array();
  cache.update(rec.id, 0.0, unit(randn({16}, rng)), 0.0);
  const Tensord feat = unit(randn({16}, rng));
  double worst = 0.0;
  for (Index t : {20, 50, 100, 200, 300, 450, 600, 750, 900, 980}) {
    const Tensord eps = randn({16, 16, 3}, rng);
    const auto res = sds_grad_at(rendered, pose, rec, oracle, sched, cfg, cache, feat, t, eps);
    const double ab = sched.alpha_bar(t);
    Tensord expect = rendered;
    expect.array() = std::sqrt(ab) / std::sqrt(1 - ab) * (rendered.array() - target.array());
    worst = std::max(worst, max_abs_diff(res.residual, expect));
    Tensord weighted = expect;
    weighted.array() *= 1 - ab;
    EXPECT_LT(max_abs_diff(res.grad, weighted), 1e-5);
    EXPECT_GT(res.severity, 0.0);
    EXPECT_DOUBLE_EQ(res.w_neg, adaptive_w_neg(res.severity, cfg));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Sds, SyntheticFixedPointAndSign) {
  const auto sched = DiffusionSchedule::linear();
  SyntheticOracle oracle(sched);
  GuidanceConfig cfg;
  cfg.cfg_only = true;
  const PromptRecord rec = cat_record();
  const CameraPose pose;
  SeverityCache cache;
  Rng rng(11);
  const Tensord target = oracle.target(rec, pose, 12, 12);
  for (Index t : {20, 500, 980}) {
    const auto res = sds_grad_at(target, pose, rec, oracle, sched, cfg, cache, {}, t, randn({12, 12, 3}, rng));
    EXPECT_LT(res.grad.array().abs().maxCoeff(), 1e-9);
  }
  // Dark scene on a black background, white render: pushes every pixel down.
  SyntheticOracle dark(sched, 0.0);
  PromptRecord panda;
  panda.keywords = {{"species", "panda"}};
  panda.text = "a panda";
  const Tensord white = Tensord::full({12, 12, 3}, 1.0);
  const auto res = sds_grad_at(white, pose, panda, dark, sched, cfg, cache, {}, 300, randn({12, 12, 3}, rng));
  EXPECT_GT(res.grad.array().minCoeff(), 0.0);
}

TEST(Sds, MagnitudeScalesWithNoiseRatio) {
  const auto sched = DiffusionSchedule::linear();
  SyntheticOracle oracle(sched);
  GuidanceConfig cfg;
  const PromptRecord rec = cat_record();
  SeverityCache cache;
  Rng rng(12);
  const Tensord rendered = Tensord::full({8, 8, 3}, 0.3);
  const Tensord feat = unit(randn({4}, rng));
  const auto a = sds_grad_at(rendered, {}, rec, oracle, sched, cfg, cache, feat, 100, randn({8, 8, 3}, rng));
  const auto b = sds_grad_at(rendered, {}, rec, oracle, sched, cfg, cache, feat, 700, randn({8, 8, 3}, rng));
  auto ratio = [&](Index t) { return std::sqrt(sched.alpha_bar(t) / (1 - sched.alpha_bar(t))); };
  const double expected = ratio(100) / ratio(700);
  for (Index i = 0; i < a.residual.size(); ++i) {
    if (std::abs(b.residual[i]) > 1e-6) EXPECT_NEAR(a.residual[i] / b.residual[i], expected, 1e-6 * expected);
  }
}

TEST(Sds, RandomDrawsStayInRange) {
  const auto sched = DiffusionSchedule::linear();
  SyntheticOracle oracle(sched);
  GuidanceConfig cfg;
  cfg.cfg_only = true;
  const PromptRecord rec = cat_record();
  SeverityCache cache;
  Rng trng(13), nrng(14);
  const Tensord rendered = Tensord::full({4, 4, 3}, 0.5);
  Index lo = 1000, hi = 0;
  for (int k = 0; k < 2000; ++k) {
    const auto r = sds_grad(rendered, {}, rec, oracle, sched, cfg, cache, {}, {trng, nrng});
    lo = std::min(lo, r.t);
    hi = std::max(hi, r.t);
  }
  EXPECT_EQ(lo, 20);
  EXPECT_EQ(hi, 980);
}

TEST(Sds, OracleFailuresCarryContext) {
  const auto sched = DiffusionSchedule::linear();
  ThrowingOracle bad;
  GuidanceConfig cfg;
  cfg.cfg_only = true;
  SeverityCache cache;
  const Tensord r = Tensord::full({4, 4, 3}, 0.5);
  try {
    sds_grad_at(r, {}, cat_record(), bad, sched, cfg, cache, {}, 10, r);
    FAIL() << "expected OracleError";
  } catch (const OracleError& e) {
    EXPECT_NE(std::string(e.what()).find("connection refused"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("a cat"), std::string::npos);
  }
  FixedOracle wrong(DenoiseResult{Tensord({2}), Tensord({2}), {}});
  EXPECT_THROW(sds_grad_at(r, {}, cat_record(), wrong, sched, cfg, cache, {}, 10, r), OracleError);
  PromptRecord unknown;
  unknown.keywords = {{"species", "dragon"}};
  unknown.text = "a dragon";
  SyntheticOracle synth(sched);
  EXPECT_THROW(sds_grad_at(r, {}, unknown, synth, sched, cfg, cache, {}, 10, r), OracleError);
}

TEST(ClipLoss, CosineDistance) {
  const Tensord a({3}, {1.0, 2.0, 2.0});
  Tensord na = a;
  na.array() *= -3.0;
  EXPECT_NEAR(clip_loss(a, a), 0.0, 1e-15);
  EXPECT_NEAR(clip_loss(a, na), 2.0, 1e-15);
  EXPECT_NEAR(clip_loss(a, Tensord({3}, {2.0, -1.0, 0.0})), 1.0, 1e-15);
  EXPECT_THROW(clip_loss(a, Tensord({3})), std::invalid_argument);
}

TEST(Features, DownsampleIsUnitAndCentred) {
  DownsampleFeature f(4);
  Rng rng(15);
  Tensord img({16, 16, 3});
  for (Index i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  const Tensord v = f.features(img);
  EXPECT_EQ(v.size(), 16);
  EXPECT_NEAR(v.array().square().sum(), 1.0, 1e-12);
  EXPECT_NEAR(v.array().sum(), 0.0, 1e-12);
  const Tensord flat = f.features(Tensord::full({16, 16, 3}, 0.7));
  EXPECT_NEAR(flat.array().square().sum(), 1.0, 1e-12);
  EXPECT_THROW(f.features(Tensord({10, 10, 3})), ShapeError);
  // Brightness and contrast changes do not move the feature.
  Tensord brighter = img;
  brighter.array() = 0.1 + 0.5 * img.array();
  EXPECT_LT(max_abs_diff(f.features(brighter), v), 1e-12);
}

TEST(Features, ClipLossGradCheck) {
  DownsampleFeature f(4);
  Rng rng(16);
  Tensord img({8, 8, 3});
  for (Index i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  const Tensord anchor = unit(randn({16}, rng));
  const GraphBuilder<double> build = [&](Graph<double>&, const VarSet<double>& p) {
    return clip_loss(f.features(p.at("image")), anchor);
  };
  GradCheckOptions opts;
  opts.eps = 1e-6;
  opts.tol = 1e-6;
  const auto report = grad_check(build, ParamSet<double>{{"image", img}}, opts);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}
