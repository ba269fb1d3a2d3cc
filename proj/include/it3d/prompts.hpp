#pragma once

#include "it3d/conditioner.hpp"
#include "it3d/renderer.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace it3d {

enum class Split { kTrain, kTest };

/// Keyword slots in template order; a missing value is the null keyword.
using Keywords = std::map<std::string, std::optional<std::string>>;

struct PromptRecord {
  std::int64_t id = 0;
  std::string text;
  Keywords keywords;
  Split split = Split::kTrain;
};

/// "a {species}" followed by the non-null clauses "sitting {item}",
/// "wearing {gadget}", "wearing a {hat}" joined by " and ".
std::string animal_text(const Keywords& k);
/// "{figure} wearing a {hat} is {expressing}".
std::string portrait_text(const Keywords& k);
/// Re-renders the text of a record from its keywords (animals or portraits).
std::string template_text(const Keywords& k);

/// 10 species x 7 items x 5 gadgets x 9 hats in that nesting order; ids 0..3149.
std::vector<PromptRecord> gen_animals();
/// 10 figures x 4 hats x 10 expressions; ids 0..399.
std::vector<PromptRecord> gen_portraits();

/// 32-prompt subset of the Animals set for desk-scale runs: 4 species x 4
/// hats (null included) x {no gadget, a scarf}, items null. Ids and texts are
/// those of gen_animals().
std::vector<PromptRecord> gen_desk_animals();

/// Seeded Fisher-Yates shuffle of the indices; the first round(frac * N)
/// become train, the rest test. Record order is preserved.
std::vector<PromptRecord> split(std::vector<PromptRecord> records, double train_frac, std::uint64_t seed);

std::string to_jsonl(const std::vector<PromptRecord>& records);
std::vector<PromptRecord> from_jsonl(const std::string& text);
void save_prompts(const std::filesystem::path& path, const std::vector<PromptRecord>& records);
std::vector<PromptRecord> load_prompts(const std::filesystem::path& path);

/// Hash-seeded Gaussian token embeddings. Text is split on whitespace, capped
/// or padded to `tokens` rows; padding rows hold the embedding of "<pad>".
struct SyntheticEmbedder {
  std::uint64_t seed = 0;
  Index dim = 64;
  Index tokens = 16;

  Tensord token_embedding(const std::string& token) const;
  /// Sentence embedding is the normalised mean of the non-padding rows.
  TextCondition<double> embed(const std::string& text) const;
};

std::vector<std::string> tokenize(const std::string& text);

/// Analytic target images: a body sphere coloured by species (or figure) and,
/// unless the hat is null, a hat sphere above it, over the background.
struct SceneGeometry {
  Eigen::Vector3d body_center{0.0, 0.0, 0.0};
  double body_radius = 0.6;
  Eigen::Vector3d hat_center{0.0, 0.0, 0.7};
  double hat_radius = 0.3;
};

Eigen::Vector3d body_color(const Keywords& k);
std::optional<Eigen::Vector3d> hat_color(const Keywords& k);

/// [H, W, 3] image of the scene seen from `pose` with pixel-centre rays.
Tensord target_scene(const PromptRecord& record, const CameraPose& pose, Index height, Index width,
                     double background = 1.0, const SceneGeometry& geometry = {});

}  // namespace it3d
