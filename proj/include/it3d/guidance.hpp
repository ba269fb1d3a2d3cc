#pragma once

#include "it3d/conditioner.hpp"
#include "it3d/prompts.hpp"
#include "it3d/renderer.hpp"

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace it3d {

/// Cumulative alphas from linear betas; alpha_bar(t) for t in 1..T.
class DiffusionSchedule {
 public:
  static DiffusionSchedule linear(Index steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2);

  Index steps() const { return Index(alpha_bar_.size()); }
  /// Throws std::out_of_range outside 1..T.
  double alpha_bar(Index t) const;
  /// SDS weight w(t) = 1 - alpha_bar(t).
  double weight(Index t) const { return 1.0 - alpha_bar(t); }

 private:
  std::vector<double> alpha_bar_;
};

/// x_t = sqrt(ab) img + sqrt(1 - ab) eps.
Tensord forward_diffuse(const Tensord& img, Index t, const Tensord& eps, const DiffusionSchedule& sched);

struct GuidanceConfig {
  double w_guidance = 100.0;
  double w_min = 2.0;
  double delta_w = 2.0;
  double t_min = 0.02, t_max = 0.98;
  bool cfg_only = false;

  void validate() const;
  /// Integer timestep bounds ceil(t_min T) .. floor(t_max T), clipped to 1..T.
  std::pair<Index, Index> t_bounds(Index steps) const;
};

enum class View { kFront, kSide, kBack };

/// Front within 45 degrees of azimuth 0, side up to 135, back otherwise.
View view_of(double azimuth);
const char* view_name(View v);
/// Azimuth at the centre of a view: 0, 90 or 180.
double canonical_azimuth(View v);

struct ViewPrompts {
  std::string positive;
  std::vector<std::string> negatives;
  std::vector<View> negative_views;
};

/// "<text>, front view" with the other two views as negatives.
ViewPrompts view_prompts(const std::string& text, double azimuth);

/// Everything an oracle may need for one denoising call. `record` and the
/// poses are only read by the synthetic oracle.
struct DenoiseQuery {
  Tensord x_t;
  Index t = 0;
  std::string prompt;
  std::vector<std::string> negatives;
  const PromptRecord* record = nullptr;
  CameraPose pose;
  std::vector<CameraPose> negative_poses;
};

struct DenoiseResult {
  Tensord eps_uncond;
  Tensord eps_cond;
  std::vector<Tensord> eps_neg;
};

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ScoreOracle {
 public:
  virtual ~ScoreOracle() = default;
  /// Raw noise predictions; composition happens client-side. Throws OracleError.
  virtual DenoiseResult denoise(const DenoiseQuery& q) = 0;
  /// A guidance scale the oracle insists on, overriding the configured one.
  virtual std::optional<double> fixed_guidance_scale() const { return std::nullopt; }
  /// The image the oracle pulls toward, when it has one (synthetic oracles).
  virtual std::optional<Tensord> target_image(const PromptRecord&, const CameraPose&, Index, Index) const {
    return std::nullopt;
  }
};

/// eps_unc + w (eps_cond - eps_unc).
Tensord cfg_predict(const DenoiseResult& r, double w_guidance);
Tensord cfg_predict(const DenoiseQuery& q, ScoreOracle& oracle, double w_guidance);

/// Part of `v` orthogonal to `ref`; `v` itself when |ref| < 1e-8.
Tensord perpendicular(const Tensord& v, const Tensord& ref);

/// eps_unc + w (eps_pos - w_neg perp(mean_k eps_neg_k - eps_unc, eps_pos)).
Tensord perp_neg_predict(const DenoiseResult& r, double w_guidance, double w_neg);
Tensord perp_neg_predict(const DenoiseQuery& q, ScoreOracle& oracle, double w_guidance, double w_neg);

/// Unit feature vectors of rendered images.
class FeatureOracle {
 public:
  virtual ~FeatureOracle() = default;
  virtual Tensord features(const Tensord& image) = 0;
};

/// Box-downsampled grayscale image, mean-centred and L2-normalised. A flat
/// image has no direction, so it maps to the uniform unit vector.
class DownsampleFeature : public FeatureOracle {
 public:
  explicit DownsampleFeature(Index side = 16) : side_(side) {}

  Index side() const { return side_; }
  Index dim() const { return side_ * side_; }
  Tensord features(const Tensord& image) override;

  /// Differentiable version on an [H, W, 3] image variable.
  template <typename S>
  Var<S> features(const Var<S>& image) const;

 private:
  Index side_;
};

/// 1 - cos(feature, anchor); throws std::invalid_argument on a zero vector.
double clip_loss(const Tensord& feature, const Tensord& anchor);
template <typename S>
Var<S> clip_loss(const Var<S>& feature, const Tensor<S>& anchor);

struct SeverityEntry {
  double azimuth = 0.0;
  Tensord feature;
  double severity = 0.0;
};

/// C = 1/4 (1 - cos(v - v1)) (1 + <f, f1>), clamped to [0, 1].
double severity(double v, const Tensord& feat, double v1, const Tensord& feat1);
/// Against a cache entry; a cold cache gives 0.
double severity(double v, const Tensord& feat, const SeverityEntry* cached);

/// w_min + C delta_w.
double adaptive_w_neg(double severity, const GuidanceConfig& cfg);

/// Latest rendered feature per prompt id. Not synchronised: callers read during
/// a batch and update between batches.
class SeverityCache {
 public:
  explicit SeverityCache(std::size_t capacity = 0) : capacity_(capacity) {}

  const SeverityEntry* find(std::int64_t id) const;
  /// Replaces the entry for `id`. Throws std::length_error when a new id would
  /// exceed the capacity (0 means unbounded).
  void update(std::int64_t id, double azimuth, Tensord feature, double severity);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::map<std::int64_t, SeverityEntry>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::map<std::int64_t, SeverityEntry> entries_;
};

struct SdsResult {
  Tensord grad;      // w(t) (eps_predict - eps)
  Tensord residual;  // eps_predict - eps
  Index t = 0;
  double weight = 0.0;
  double severity = 0.0;
  double w_neg = 0.0;
};

/// Random streams for one SDS evaluation.
struct SdsRngs {
  Rng& timestep;
  Rng& noise;
};

/// Pixel-space SDS gradient of a rendered [H, W, 3] image. `feature` is the
/// current render's feature for the severity term; it may be empty under
/// cfg_only. The cache is only read.
SdsResult sds_grad(const Tensord& rendered, const CameraPose& pose, const PromptRecord& record, ScoreOracle& oracle,
                   const DiffusionSchedule& sched, const GuidanceConfig& cfg, const SeverityCache& cache,
                   const Tensord& feature, SdsRngs rngs);

/// Same with a fixed timestep and noise.
SdsResult sds_grad_at(const Tensord& rendered, const CameraPose& pose, const PromptRecord& record,
                      ScoreOracle& oracle, const DiffusionSchedule& sched, const GuidanceConfig& cfg,
                      const SeverityCache& cache, const Tensord& feature, Index t, const Tensord& eps);

/// Scores against procedural targets: eps_hat = (x_t - sqrt(ab) target) / sqrt(1 - ab).
/// The unconditional target is flat gray; negatives use the target seen from
/// the negative view's pose. Guidance scale is pinned to 1 so the prediction is
/// an exact pull toward the target.
class SyntheticOracle : public ScoreOracle {
 public:
  explicit SyntheticOracle(const DiffusionSchedule& sched, double background = 1.0, double gray = 0.5)
      : sched_(sched), background_(background), gray_(gray) {}

  DenoiseResult denoise(const DenoiseQuery& q) override;
  std::optional<double> fixed_guidance_scale() const override { return 1.0; }
  std::optional<Tensord> target_image(const PromptRecord& r, const CameraPose& p, Index h, Index w) const override {
    return target(r, p, h, w);
  }

  Tensord target(const PromptRecord& record, const CameraPose& pose, Index height, Index width) const;

 private:
  Tensord eps_hat(const Tensord& x_t, double ab, const Tensord& target) const;

  DiffusionSchedule sched_;
  double background_;
  double gray_;
};

}  // namespace it3d
