#pragma once

#include "it3d/trainer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace it3d {

/// Iterations x batch / prompts as a reduced fraction.
struct ViewsPP {
  std::int64_t num = 0;
  std::int64_t den = 1;
  double value() const { return double(num) / double(den); }
};

/// Throws std::invalid_argument for num_prompts < 1 or negative counts.
ViewsPP views_pp_exact(std::int64_t iterations, std::int64_t batch_size, std::int64_t num_prompts);
double views_pp(std::int64_t iterations, std::int64_t batch_size, std::int64_t num_prompts);

/// Azimuths 0, 90, 180, 270 at polar 90 and radius 3.3.
std::vector<CameraPose> eval_poses(Index views = 4);

struct RetrievalScores {
  double clip_rp = 0.0;
  std::vector<double> per_prompt;  // probability of the correct prompt, mean over views
  std::vector<Index> ranks;        // 1-based rank of the correct prompt by mean similarity
};

inline constexpr double kRetrievalLogitScale = 100.0;

/// image_features[i][v]: unit feature of prompt i's view v. text_features: [N, D]
/// rows, prompt i's text on row i. Each view takes a softmax over the N cosine
/// similarities (times `logit_scale`).
RetrievalScores retrieval_scores(const std::vector<std::vector<Tensord>>& image_features,
                                 const Tensord& text_features, double logit_scale = kRetrievalLogitScale);

/// Text anchors in DownsampleFeature space: the feature of each prompt's
/// front-view target.
Tensord target_text_features(const std::vector<const PromptRecord*>& query, const SyntheticOracle& oracle,
                             FeatureOracle& features, Index hw);

struct EvalOptions {
  Index hw = 64;
  Index n_uniform = 64, n_importance = 64;
  Index views = 4;
  std::uint64_t noise_seed = 0;
  double logit_scale = kRetrievalLogitScale;
};

/// Renders every query prompt from the eval poses and scores retrieval among
/// the whole query set.
RetrievalScores clip_rp(const TrainState& state, const std::vector<const PromptRecord*>& query, TextEncoder& text,
                        FeatureOracle& features, const Tensord& text_features, const EvalOptions& opts = {});

/// Spearman rank correlation with average ranks for ties. Throws on size
/// mismatch or fewer than two points; 0 when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct CurveSample {
  Index step = 0;
  double views_pp = 0.0;
  double clip_rp = 0.0;
};

struct EvalReport {
  double views_pp = 0.0;
  double clip_rp = 0.0;
  std::vector<std::int64_t> prompt_ids;
  std::vector<Index> ranks;
  std::vector<double> per_prompt;
  std::vector<CurveSample> curve;
};

std::string report_json(const EvalReport& r);
/// "step,views_pp,clip_rp" header and one row per sample.
std::string curve_csv(const std::vector<CurveSample>& curve);

}  // namespace it3d
