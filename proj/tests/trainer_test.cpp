#include "it3d/config_json.hpp"
#include "it3d/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace it3d;

namespace {

ModelConfig tiny_model() {
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
  m.init_seed = 3;
  m.embed_seed = 4;
  return m;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 2;
  t.total_steps = 10;
  t.render_hw = 8;
  t.n_uniform = 6;
  t.n_importance = 4;
  t.seed = 11;
  t.adam.lr = 1e-3;
  return t;
}

std::vector<PromptRecord> train_records() {
  auto recs = gen_desk_animals();
  recs.resize(4);
  for (auto& r : recs) r.split = Split::kTrain;
  return recs;
}

std::vector<const PromptRecord*> ptrs(const std::vector<PromptRecord>& r) {
  std::vector<const PromptRecord*> out;
  for (const auto& x : r) out.push_back(&x);
  return out;
}

// Services for a synthetic run with an 8x8 render (feature side 4).
struct Services {
  DiffusionSchedule sched = DiffusionSchedule::linear();
  SyntheticOracle oracle{sched};
  SyntheticTextEncoder text;
  DownsampleFeature features{4};
  explicit Services(const ModelConfig& m) : text(embedder_for(m)) {}
  TrainContext ctx() { return TrainContext{oracle, text, features, sched}; }
};

void run(TrainState& st, const std::vector<const PromptRecord*>& train, TrainContext& ctx, Index steps) {
  for (Index s = 0; s < steps; ++s) train_step(st, batch_for_step(train, st.train.batch_size, st.step, st.train.seed), ctx);
}

// Predicts the trainer's noise exactly by replaying its "noise" stream.
class ReplayOracle : public ScoreOracle {
 public:
  ReplayOracle(std::uint64_t seed, Index batch) : seed_(seed), batch_(batch) {}
  DenoiseResult denoise(const DenoiseQuery& q) override {
    const Index step = calls_ / batch_, slot = calls_ % batch_;
    ++calls_;
    Rng rng = Rng::stream(seed_, "noise", std::uint64_t(step), std::uint64_t(slot));
    Tensord eps(q.x_t.shape());
    for (Index i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
    return DenoiseResult{eps, eps, std::vector<Tensord>(q.negatives.size(), eps)};
  }

 private:
  std::uint64_t seed_;
  Index batch_;
  Index calls_ = 0;
};

class FailingOracle : public ScoreOracle {
 public:
  explicit FailingOracle(ScoreOracle& inner, int fail_on) : inner_(inner), fail_on_(fail_on) {}
  DenoiseResult denoise(const DenoiseQuery& q) override {
    if (++calls_ == fail_on_) throw OracleError("stub failure");
    return inner_.denoise(q);
  }

 private:
  ScoreOracle& inner_;
  int fail_on_;
  int calls_ = 0;
};

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("it3d_trainer_" + name)).string();
}

}  // namespace

TEST(Adam, ZeroGradientAndZeroLearningRate) {
  ParamSet<double> p{{"w", Tensord({3}, {1.0, -2.0, 0.5})}};
  const ParamSet<double> zero{{"w", Tensord({3})}};
  AdamState<double> st;
  AdamConfig cfg;
  adam_step(p, zero, st, cfg);
  EXPECT_TRUE((p.at("w").array() == Tensord({3}, {1.0, -2.0, 0.5}).array()).all());

  st.m["w"] = Tensord({3}, {0.3, -0.1, 0.2});
  st.v["w"] = Tensord({3}, {0.09, 0.01, 0.04});
  const Tensord m0 = st.m["w"], v0 = st.v["w"];
  adam_step(p, zero, st, cfg);
  for (Index i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(st.m["w"][i], 0.9 * m0[i]);
    EXPECT_DOUBLE_EQ(st.v["w"][i], 0.99 * v0[i]);
  }

  AdamConfig frozen;
  frozen.lr = 0.0;
  const Tensord before = p.at("w");
  adam_step(p, ParamSet<double>{{"w", Tensord({3}, {5.0, 1.0, -3.0})}}, st, frozen);
  EXPECT_TRUE((p.at("w").array() == before.array()).all());
}

TEST(Adam, ConstantGradientMatchesHandRecurrence) {
  const double g = 0.37, lr = 1e-4, b1 = 0.9, b2 = 0.99, eps = 1e-8;
  ParamSet<double> p{{"w", Tensord({1}, {0.25})}};
  AdamState<double> st;
  AdamConfig cfg;
  double w = 0.25, m = 0, v = 0;
  for (int k = 1; k <= 25; ++k) {
    adam_step(p, ParamSet<double>{{"w", Tensord({1}, {g})}}, st, cfg);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    w -= lr * (m / (1 - std::pow(b1, k))) / (std::sqrt(v / (1 - std::pow(b2, k))) + eps);
    EXPECT_NEAR(p.at("w")[0], w, 1e-7) << "step " << k;
  }
  EXPECT_EQ(st.step, 25);
}

TEST(Adam, ShapeMismatchThrows) {
  ParamSet<double> p{{"w", Tensord({3})}};
  AdamState<double> st;
  EXPECT_THROW(adam_step(p, ParamSet<double>{{"w", Tensord({2})}}, st, {}), ShapeError);
  EXPECT_THROW(adam_step(p, ParamSet<double>{{"v", Tensord({3})}}, st, {}), std::invalid_argument);
}

TEST(Anneal, AlphaScheduleInTraining) {
  TrainConfig t;
  t.total_steps = 100;
  EXPECT_DOUBLE_EQ(t.alpha_at(0), 0.5);
  double prev = 0;
  for (Index s = 0; s < 100; ++s) {
    EXPECT_GE(t.alpha_at(s), prev);
    prev = t.alpha_at(s);
    if (s >= 80) EXPECT_EQ(t.alpha_at(s), 1.0);
  }
  t.scaled_sigmoid = false;
  EXPECT_EQ(t.alpha_at(0), 1.0);
}

TEST(Batches, EpochsCoverEveryPrompt) {
  const auto recs = train_records();
  const auto train = ptrs(recs);
  std::map<const PromptRecord*, int> seen;
  for (Index s = 0; s < 6; ++s) {
    for (const auto* r : batch_for_step(train, 2, s, 9)) ++seen[r];
  }
  for (const auto* r : train) EXPECT_EQ(seen[r], 3);
  EXPECT_EQ(batch_for_step(train, 3, 5, 9), batch_for_step(train, 3, 5, 9));
}

TEST(TrainStep, DeterministicAcrossRuns) {
  const auto recs = train_records();
  const auto train = ptrs(recs);
  const ModelConfig m = tiny_model();
  Services a(m), b(m);
  TrainState s1 = init_train_state(m, tiny_train(), train.size());
  TrainState s2 = init_train_state(m, tiny_train(), train.size());
  auto c1 = a.ctx(), c2 = b.ctx();
  c2.threads = 2;
  run(s1, train, c1, 10);
  run(s2, train, c2, 10);
  EXPECT_EQ(checkpoint_bytes(s1), checkpoint_bytes(s2));
  EXPECT_EQ(s1.step, 10);
  EXPECT_EQ(s1.cache.size(), 4u);
  EXPECT_NE(checkpoint_bytes(s1), checkpoint_bytes(init_train_state(m, tiny_train(), train.size())));
}

TEST(TrainStep, MetricsAtFirstStep) {
  const auto recs = train_records();
  const auto train = ptrs(recs);
  const ModelConfig m = tiny_model();
  Services sv(m);
  auto ctx = sv.ctx();
  TrainState st = init_train_state(m, tiny_train(), train.size());
  const StepMetrics first = train_step(st, batch_for_step(train, 2, 0, 0), ctx);
  EXPECT_EQ(first.step, 0);
  EXPECT_DOUBLE_EQ(first.alpha, 0.5);
  EXPECT_DOUBLE_EQ(first.mean_severity, 0.0);  // cold cache
  EXPECT_DOUBLE_EQ(first.mean_w_neg, st.train.guidance.w_min);
  EXPECT_GT(first.loss, 0.0);
  EXPECT_EQ(st.cache.size(), 2u);
  for (const auto& [id, e] : st.cache.entries()) EXPECT_NEAR(e.feature.array().square().sum(), 1.0, 1e-5);
}

TEST(TrainStep, ExactNoisePredictionLeavesParametersUnchanged) {
  const auto recs = train_records();
  const auto train = ptrs(recs);
  const ModelConfig m = tiny_model();
  TrainConfig tc = tiny_train();
  tc.guidance.cfg_only = true;
  Services sv(m);
  ReplayOracle replay(tc.seed, tc.batch_size);
  TrainContext ctx{replay, sv.text, sv.features, sv.sched};
  TrainState st = init_train_state(m, tc, train.size());
  const ParamSet<float> before = st.params;
  run(st, train, ctx, 3);
  for (const auto& [name, p] : before) {
    EXPECT_TRUE((st.params.at(name).array() == p.array()).all()) << name;
  }
  EXPECT_EQ(st.step, 3);
}

TEST(TrainStep, FailureLeavesStateUntouched) {
  const auto recs = train_records();
  const auto train = ptrs(recs);
  const ModelConfig m = tiny_model();
  Services sv(m);
  auto ctx = sv.ctx();
  TrainState st = init_train_state(m, tiny_train(), train.size());
  run(st, train, ctx, 1);
  const std::string snapshot = checkpoint_bytes(st);
  FailingOracle failing(sv.oracle, 2);
  TrainContext bad{failing, sv.text, sv.features, sv.sched};
  EXPECT_THROW(train_step(st, batch_for_step(train, 2, st.step, 0), bad), OracleError);
  EXPECT_EQ(checkpoint_bytes(st), snapshot);

  PromptRecord held_out = recs[0];
  held_out.split = Split::kTest;
  EXPECT_THROW(train_step(st, {&held_out}, ctx), std::invalid_argument);
  EXPECT_EQ(checkpoint_bytes(st), snapshot);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const auto recs = train_records();
  const auto train = ptrs(recs);
  const ModelConfig m = tiny_model();
  Services sv(m);
  auto ctx = sv.ctx();
  TrainState st = init_train_state(m, tiny_train(), train.size());
  run(st, train, ctx, 3);
  const std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, st);
  const TrainState back = load_checkpoint(path);
  EXPECT_EQ(checkpoint_bytes(back), checkpoint_bytes(st));
  EXPECT_EQ(back.step, 3);
  for (const auto& [name, p] : st.params) EXPECT_TRUE((back.params.at(name).array() == p.array()).all()) << name;
  for (const auto& [name, p] : st.adam.v) EXPECT_TRUE((back.adam.v.at(name).array() == p.array()).all()) << name;
  EXPECT_EQ(back.cache.size(), st.cache.size());
  std::filesystem::remove(path);
}

TEST(Checkpoint, ManifestOffsetsFollowFromShapes) {
  const ModelConfig m = tiny_model();
  const TrainState st = init_train_state(m, tiny_train(), 4);
  const std::string bytes = checkpoint_bytes(st);
  ASSERT_EQ(bytes.substr(0, 4), "IT3D");
  std::uint64_t hlen = 0;
  for (int b = 0; b < 8; ++b) hlen |= std::uint64_t(static_cast<unsigned char>(bytes[8 + std::size_t(b)])) << (8 * b);
  const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
  std::uint64_t offset = 0;
  for (const auto& t : header.at("tensors")) {
    EXPECT_EQ(t.at("offset").get<std::uint64_t>(), offset);
    std::uint64_t n = 1;
    for (auto d : t.at("shape")) n *= d.get<std::uint64_t>();
    offset += 4 * n;
  }
  EXPECT_EQ(offset, bytes.size() - 16 - hlen);
  EXPECT_EQ(header.at("payload_bytes").get<std::uint64_t>(), offset);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const TrainState st = init_train_state(tiny_model(), tiny_train(), 4);
  const std::string good = checkpoint_bytes(st);
  auto rejects = [](const std::string& bytes, const std::string& fragment) {
    try {
      checkpoint_from_bytes(bytes);
      ADD_FAILURE() << "accepted corrupt checkpoint (" << fragment << ")";
    } catch (const CheckpointError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  rejects(good.substr(0, good.size() - 7), "truncated");
  rejects(good + "x", "padded");
  rejects(good.substr(0, 10), "too short");
  std::string magic = good;
  magic[0] = 'X';
  rejects(magic, "magic");
  std::string version = good;
  version[4] = 9;
  rejects(version, "version");
  std::string header = good;
  header[17] = '#';
  rejects(header, "malformed header");
  std::string hlen = good;
  hlen[15] = 1;
  rejects(hlen, "exceeds");
  std::string flipped = good;
  flipped[flipped.size() - 3] ^= 0x10;
  rejects(flipped, "digest");

  // A shape edit that keeps the byte counts consistent is caught by the model check.
  TrainState other = st;
  other.params["head.fc2.bias"] = Tensorf({2, 2});
  rejects(checkpoint_bytes(other), "head.fc2.bias");

  // Loading from disk leaves a prior state object alone when it fails.
  const std::string path = temp_path("corrupt.ckpt");
  {
    std::ofstream f(path, std::ios::binary);
    f << good.substr(0, good.size() / 2);
  }
  TrainState kept = st;
  EXPECT_THROW(kept = load_checkpoint(path), CheckpointError);
  EXPECT_EQ(checkpoint_bytes(kept), good);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const auto recs = train_records();
  const auto train = ptrs(recs);
  const ModelConfig m = tiny_model();
  Services sv(m);
  auto ctx = sv.ctx();
  TrainState straight = init_train_state(m, tiny_train(), train.size());
  run(straight, train, ctx, 4);
  TrainState first = init_train_state(m, tiny_train(), train.size());
  run(first, train, ctx, 2);
  TrainState resumed = checkpoint_from_bytes(checkpoint_bytes(first));
  run(resumed, train, ctx, 2);
  EXPECT_EQ(checkpoint_bytes(resumed), checkpoint_bytes(straight));
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig t = tiny_train();
  t.shading = Shading::kLambertian;
  t.guidance.w_min = 1.5;
  const nlohmann::json j = t;
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
  nlohmann::json bad = j;
  bad["learning_rate"] = 1;
  EXPECT_THROW(bad.get<TrainConfig>(), std::invalid_argument);
  nlohmann::json partial = {{"batch_size", 3}};
  EXPECT_EQ(partial.get<TrainConfig>().batch_size, 3);
  EXPECT_EQ(partial.get<TrainConfig>().total_steps, TrainConfig{}.total_steps);
}

TEST(Render, PromptRenderIsDeterministic) {
  const ModelConfig m = tiny_model();
  const TrainState st = init_train_state(m, tiny_train(), 1);
  const auto cond = embedder_for(m).embed("a fox");
  const Tensord a = render_prompt(st, cond, CameraPose{}, 8, 5, std::nullopt, 8, 8);
  const Tensord b = render_prompt(st, cond, CameraPose{}, 8, 5, std::nullopt, 8, 8);
  EXPECT_EQ(a.shape(), (Shape{8, 8, 3}));
  EXPECT_TRUE((a.array() == b.array()).all());
}
