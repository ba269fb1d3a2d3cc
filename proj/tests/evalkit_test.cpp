#include "it3d/evalkit.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>

using namespace it3d;

namespace {

Tensord unit_random(Index d, Rng& rng) {
  Tensord t({d});
  for (Index i = 0; i < d; ++i) t[i] = rng.normal();
  t.array() /= std::sqrt(t.array().square().sum());
  return t;
}

Tensord stack(const std::vector<Tensord>& rows) {
  const Index d = rows.front().size();
  Tensord out({Index(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Index k = 0; k < d; ++k) out[Index(i) * d + k] = rows[i][k];
  return out;
}

}  // namespace

TEST(ViewsPP, LargeRunOperatingPointIsExact) {
  const ViewsPP v = views_pp_exact(39375, 96, 1890);
  EXPECT_EQ(v.num, 2000);
  EXPECT_EQ(v.den, 1);
  EXPECT_EQ(views_pp(39375, 96, 1890), 2000.0);
  EXPECT_EQ(views_pp(0, 96, 7), 0.0);
  EXPECT_EQ(views_pp(10, 96, 960), 1.0);
  const ViewsPP third = views_pp_exact(1, 1, 3);
  EXPECT_EQ(third.num, 1);
  EXPECT_EQ(third.den, 3);
}

TEST(ViewsPP, LargeCountsStayExact) {
  // 4e15 * 96 overflows a double's integer range but reduces cleanly.
  const ViewsPP v = views_pp_exact(4'000'000'000'000'005LL, 96, 96);
  EXPECT_EQ(v.num, 4'000'000'000'000'005LL);
  EXPECT_EQ(v.den, 1);
  EXPECT_THROW(views_pp(1, 1, 0), std::invalid_argument);
  EXPECT_THROW(views_pp(-1, 1, 1), std::invalid_argument);
}

TEST(EvalPoses, FourDistinctAzimuths) {
  const auto poses = eval_poses();
  ASSERT_EQ(poses.size(), 4u);
  const double az[] = {0.0, 90.0, 180.0, -90.0};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(poses[std::size_t(i)].azimuth, az[i]);
    EXPECT_EQ(poses[std::size_t(i)].polar, 90.0);
    EXPECT_EQ(poses[std::size_t(i)].radius, 3.3);
  }
}

TEST(Retrieval, SinglePromptIsCertain) {
  Rng rng = Rng::stream(1, "f");
  const Tensord text = stack({unit_random(8, rng)});
  const auto s = retrieval_scores({{unit_random(8, rng), unit_random(8, rng)}}, text);
  EXPECT_EQ(s.clip_rp, 1.0);
  EXPECT_EQ(s.ranks, std::vector<Index>{1});
}

TEST(Retrieval, UniformScoringGivesChance) {
  Rng rng = Rng::stream(2, "f");
  const Tensord shared = unit_random(16, rng);
  for (Index n : {2, 5, 13}) {
    const Tensord text = stack(std::vector<Tensord>(std::size_t(n), shared));
    const std::vector<std::vector<Tensord>> images(std::size_t(n), std::vector<Tensord>(4, unit_random(16, rng)));
    const auto s = retrieval_scores(images, text);
    EXPECT_NEAR(s.clip_rp, 1.0 / double(n), 1e-15);
    for (double p : s.per_prompt) EXPECT_NEAR(p, 1.0 / double(n), 1e-15);
  }
}

TEST(Retrieval, RandomFeaturesAverageToChance) {
  const Index n = 10, d = 32;
  std::vector<double> runs;
  for (int run = 0; run < 20; ++run) {
    Rng rng = Rng::stream(3, "run", std::uint64_t(run));
    std::vector<Tensord> rows;
    for (Index i = 0; i < n; ++i) rows.push_back(unit_random(d, rng));
    std::vector<std::vector<Tensord>> images(static_cast<std::size_t>(n));
    for (auto& v : images)
      for (int k = 0; k < 4; ++k) v.push_back(unit_random(d, rng));
    const double rp = retrieval_scores(images, stack(rows), 10.0).clip_rp;
    EXPECT_GE(rp, 0.0);
    EXPECT_LE(rp, 1.0);
    runs.push_back(rp);
  }
  double mean = 0, var = 0;
  for (double r : runs) mean += r / 20.0;
  for (double r : runs) var += (r - mean) * (r - mean) / 19.0;
  EXPECT_LT(std::abs(mean - 0.1), 3.0 * std::sqrt(var / 20.0)) << "mean " << mean;
}

TEST(Retrieval, MatchingFeaturesRankFirst) {
  Rng rng = Rng::stream(4, "f");
  std::vector<Tensord> rows;
  for (int i = 0; i < 6; ++i) rows.push_back(unit_random(24, rng));
  std::vector<std::vector<Tensord>> images;
  for (const auto& r : rows) images.push_back({r, r});
  const auto s = retrieval_scores(images, stack(rows));
  EXPECT_GT(s.clip_rp, 0.99);
  for (Index r : s.ranks) EXPECT_EQ(r, 1);
  // Swapping two prompts' images makes them rank below each other.
  std::swap(images[0], images[1]);
  const auto t = retrieval_scores(images, stack(rows));
  EXPECT_GT(t.ranks[0], 1);
  EXPECT_LT(t.per_prompt[0], 0.01);
}

TEST(Retrieval, ShapeErrors) {
  Rng rng = Rng::stream(5, "f");
  EXPECT_THROW(retrieval_scores({}, Tensord({1, 4})), std::invalid_argument);
  EXPECT_THROW(retrieval_scores({{unit_random(4, rng)}}, Tensord({2, 4})), std::invalid_argument);
  EXPECT_THROW(retrieval_scores({{unit_random(3, rng)}}, stack({unit_random(4, rng)})), std::invalid_argument);
}

TEST(Spearman, HandValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5}), 0.8);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3}, {30, 20, 10}), -1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {1, 8, 27, 64}), 1.0);
  // Ties take average ranks: y ranks (1.5, 1.5, 3), Pearson on ranks = sqrt(3)/2.
  EXPECT_NEAR(spearman({1, 2, 3}, {5, 5, 9}), std::sqrt(3.0) / 2.0, 1e-15);
  EXPECT_EQ(spearman({1, 2, 3}, {4, 4, 4}), 0.0);
  EXPECT_THROW(spearman({1}, {1}), std::invalid_argument);
  EXPECT_THROW(spearman({1, 2}, {1}), std::invalid_argument);
}

TEST(Report, CsvAndJson) {
  EvalReport r;
  r.views_pp = 2.5;
  r.clip_rp = 0.25;
  r.prompt_ids = {7};
  r.ranks = {2};
  r.per_prompt = {0.25};
  r.curve = {{0, 0.0, 0.125}, {100, 2.5, 0.25}};
  EXPECT_EQ(curve_csv(r.curve), "step,views_pp,clip_rp\n0,0,0.125\n100,2.5,0.25\n");
  const auto j = nlohmann::json::parse(report_json(r));
  EXPECT_EQ(j.at("clip_rp"), 0.25);
  EXPECT_EQ(j.at("prompts").at(0).at("rank"), 2);
  EXPECT_EQ(j.at("curve").size(), 2u);
}

TEST(ClipRp, RendersTinyModel) {
  ModelConfig m;
  DecoderConfig& c = m.decoder;
  c.base_channel = 8;
  c.layers_per_block = 1;
  c.channel_multipliers = {2, 1};
  c.stages = 2;
  c.base_resolution = 4;
  c.out_resolution = 16;
  c.out_channels = 2;
  c.token_count = 4;
  c.token_dim = 8;
  c.token_reduce_dim = 4;
  c.heads = 2;
  c.style_token_dim = 2;
  c.style_noise_dim = 4;
  c.attention_stages = 1;
  m.head.hidden = 8;
  const TrainState st = init_train_state(m, TrainConfig{}, 2);
  auto recs = gen_desk_animals();
  std::vector<const PromptRecord*> query{&recs[0], &recs[5], &recs[9]};
  SyntheticTextEncoder text(embedder_for(m));
  DownsampleFeature feat(4);
  const SyntheticOracle oracle(DiffusionSchedule::linear());
  EvalOptions opts;
  opts.hw = 8;
  opts.n_uniform = opts.n_importance = 8;
  const Tensord anchors = target_text_features(query, oracle, feat, opts.hw);
  EXPECT_EQ(anchors.shape(), (Shape{3, 16}));
  const auto s = clip_rp(st, query, text, feat, anchors, opts);
  EXPECT_GE(s.clip_rp, 0.0);
  EXPECT_LE(s.clip_rp, 1.0);
  EXPECT_EQ(s.per_prompt.size(), 3u);
  const auto again = clip_rp(st, query, text, feat, anchors, opts);
  EXPECT_EQ(again.clip_rp, s.clip_rp);
  const std::vector<const PromptRecord*> one{&recs[0]};
  EXPECT_EQ(clip_rp(st, one, text, feat, target_text_features(one, oracle, feat, 8), opts).clip_rp, 1.0);
}
