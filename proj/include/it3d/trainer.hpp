#pragma once

#include "it3d/guidance.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace it3d {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename S>
struct AdamState {
  ParamSet<S> m, v;
  Index step = 0;
};

/// One bias-corrected Adam update; weight decay is decoupled (AdamW-style) and
/// off by default. Every param needs a same-shaped grad. Throws ShapeError.
template <typename S>
void adam_step(ParamSet<S>& params, const ParamSet<S>& grads, AdamState<S>& state, const AdamConfig& cfg);

struct ModelConfig {
  DecoderConfig decoder;
  HeadConfig head;
  std::uint64_t init_seed = 0;
  std::uint64_t embed_seed = 0;
};

struct TrainConfig {
  AdamConfig adam;
  Index batch_size = 8;
  Index total_steps = 2000;
  Index render_hw = 64;
  Index n_uniform = 64, n_importance = 64;
  std::uint64_t seed = 0;
  double clip_weight = 0.1;  // relative to SDS; a guess
  GuidanceConfig guidance;
  double alpha_start = 0.5;
  double anneal_fraction = 0.8;
  /// false trains with a plain sigmoid (alpha pinned to 1).
  bool scaled_sigmoid = true;
  Shading shading = Shading::kAlbedo;
  double textureless_prob = 0.1;
  CameraRanges cameras;

  void validate() const;
  /// Albedo scale used during `step` (0-based).
  double alpha_at(Index step) const;
};

/// Text features for a prompt in the decoder's token space.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual TextCondition<double> encode(const std::string& text) = 0;
};

class SyntheticTextEncoder : public TextEncoder {
 public:
  explicit SyntheticTextEncoder(SyntheticEmbedder e) : embedder_(e) {}
  TextCondition<double> encode(const std::string& text) override { return embedder_.embed(text); }

 private:
  SyntheticEmbedder embedder_;
};

SyntheticEmbedder embedder_for(const ModelConfig& cfg);

/// Model parameters: decoder.* and head.* in one set.
ParamSet<float> init_model_params(const ModelConfig& cfg);

/// Style noise for one decode, drawn from the "style" stream.
std::vector<float> style_noise(const DecoderConfig& cfg, Rng& rng);

/// Triplane field for one prompt on graph `g`.
template <typename S>
Field<S> model_field(Graph<S>& g, const VarSet<S>& vars, const ModelConfig& cfg, const TextCondition<S>& cond,
                     const std::vector<S>& noise, S alpha);

struct TrainState {
  ModelConfig model;
  TrainConfig train;
  ParamSet<float> params;
  AdamState<float> adam;
  Index step = 0;
  SeverityCache cache;
};

/// Fresh state; the severity cache holds one entry per training prompt.
TrainState init_train_state(const ModelConfig& model, const TrainConfig& train, std::size_t num_train_prompts);

struct StepMetrics {
  Index step = 0;
  double loss = 0.0;  // target MSE when the oracle has targets, else mean squared SDS gradient
  double alpha = 0.0;
  double mean_severity = 0.0;
  double mean_w_neg = 0.0;
  double seconds = 0.0;
};

/// Services a training step needs besides the state.
struct TrainContext {
  ScoreOracle& oracle;
  TextEncoder& text;
  FeatureOracle& features;
  DiffusionSchedule schedule = DiffusionSchedule::linear();
  /// Records of a batch are processed by up to this many threads.
  Index threads = 1;
};

/// Accumulates gradients over the batch and applies one Adam step. Nothing in
/// `state` changes if any record fails.
StepMetrics train_step(TrainState& state, const std::vector<const PromptRecord*>& batch, TrainContext& ctx);

/// Records for step `step`: a seeded permutation of the training prompts per
/// epoch, read in consecutive windows.
std::vector<const PromptRecord*> batch_for_step(const std::vector<const PromptRecord*>& train, Index batch_size,
                                                Index step, std::uint64_t seed);

struct PromptRenders {
  std::vector<Tensord> images;  // [hw, hw, 3] per pose
  double decode_seconds = 0.0;
};

/// Gradient-free albedo renders of one prompt: one triplane decode, then each
/// pose rendered in row bands. Alpha defaults to the state's step.
PromptRenders render_views(const TrainState& state, const TextCondition<double>& cond,
                           const std::vector<CameraPose>& poses, Index hw, std::uint64_t noise_seed,
                           std::optional<double> alpha = std::nullopt, Index n_uniform = 64,
                           Index n_importance = 64);

/// Single-pose render_views.
Tensord render_prompt(const TrainState& state, const TextCondition<double>& cond, const CameraPose& pose,
                      Index hw, std::uint64_t noise_seed, std::optional<double> alpha = std::nullopt,
                      Index n_uniform = 64, Index n_importance = 64);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "IT3D", u32 version, u64 header length, JSON header, f32 payload (all LE).
std::string checkpoint_bytes(const TrainState& state);
TrainState checkpoint_from_bytes(const std::string& bytes);
/// Writes through a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
/// Throws CheckpointError (or std::runtime_error on I/O) without touching any state.
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace it3d
