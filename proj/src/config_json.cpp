#include "it3d/config_json.hpp"

#include <set>

namespace it3d {

namespace {

using json = nlohmann::json;

// Reads the keys present in `j` into the bound fields; unknown keys throw.
class Reader {
 public:
  Reader(const json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j.is_object()) throw std::invalid_argument(what_ + ": expected an object");
  }
  template <typename T>
  Reader& field(const char* key, T& out) {
    known_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        it->get_to(out);
      } catch (const json::exception& e) {
        throw std::invalid_argument(what_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }
  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!known_.count(key)) throw std::invalid_argument(what_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string what_;
  std::set<std::string> known_;
};

}  // namespace

std::string shading_name(Shading s) {
  switch (s) {
    case Shading::kAlbedo: return "albedo";
    case Shading::kLambertian: return "lambertian";
    case Shading::kTextureless: return "textureless";
  }
  return "albedo";
}

Shading parse_shading(const std::string& name) {
  if (name == "albedo") return Shading::kAlbedo;
  if (name == "lambertian") return Shading::kLambertian;
  if (name == "textureless") return Shading::kTextureless;
  throw std::invalid_argument("unknown shading '" + name + "'");
}

void to_json(json& j, const DecoderConfig& c) {
  j = {{"base_channel", c.base_channel},       {"layers_per_block", c.layers_per_block},
       {"channel_multipliers", c.channel_multipliers}, {"base_resolution", c.base_resolution},
       {"stages", c.stages},                   {"style_noise_dim", c.style_noise_dim},
       {"out_channels", c.out_channels},       {"out_resolution", c.out_resolution},
       {"token_count", c.token_count},         {"token_dim", c.token_dim},
       {"token_reduce_dim", c.token_reduce_dim}, {"heads", c.heads},
       {"style_token_dim", c.style_token_dim}, {"attention_stages", c.attention_stages},
       {"extent", c.extent}};
}

void from_json(const json& j, DecoderConfig& c) {
  Reader(j, "decoder")
      .field("base_channel", c.base_channel)
      .field("layers_per_block", c.layers_per_block)
      .field("channel_multipliers", c.channel_multipliers)
      .field("base_resolution", c.base_resolution)
      .field("stages", c.stages)
      .field("style_noise_dim", c.style_noise_dim)
      .field("out_channels", c.out_channels)
      .field("out_resolution", c.out_resolution)
      .field("token_count", c.token_count)
      .field("token_dim", c.token_dim)
      .field("token_reduce_dim", c.token_reduce_dim)
      .field("heads", c.heads)
      .field("style_token_dim", c.style_token_dim)
      .field("attention_stages", c.attention_stages)
      .field("extent", c.extent)
      .finish();
}

void to_json(json& j, const HeadConfig& c) { j = {{"hidden", c.hidden}}; }
void from_json(const json& j, HeadConfig& c) { Reader(j, "head").field("hidden", c.hidden).finish(); }

void to_json(json& j, const ModelConfig& c) {
  j = {{"decoder", c.decoder}, {"head", c.head}, {"init_seed", c.init_seed}, {"embed_seed", c.embed_seed}};
}
void from_json(const json& j, ModelConfig& c) {
  Reader(j, "model")
      .field("decoder", c.decoder)
      .field("head", c.head)
      .field("init_seed", c.init_seed)
      .field("embed_seed", c.embed_seed)
      .finish();
}

void to_json(json& j, const AdamConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}
void from_json(const json& j, AdamConfig& c) {
  Reader(j, "adam")
      .field("lr", c.lr)
      .field("beta1", c.beta1)
      .field("beta2", c.beta2)
      .field("eps", c.eps)
      .field("weight_decay", c.weight_decay)
      .finish();
}

void to_json(json& j, const GuidanceConfig& c) {
  j = {{"w_guidance", c.w_guidance}, {"w_min", c.w_min}, {"delta_w", c.delta_w},
       {"t_min", c.t_min},           {"t_max", c.t_max}, {"cfg_only", c.cfg_only}};
}
void from_json(const json& j, GuidanceConfig& c) {
  Reader(j, "guidance")
      .field("w_guidance", c.w_guidance)
      .field("w_min", c.w_min)
      .field("delta_w", c.delta_w)
      .field("t_min", c.t_min)
      .field("t_max", c.t_max)
      .field("cfg_only", c.cfg_only)
      .finish();
}

void to_json(json& j, const CameraRanges& c) {
  j = {{"polar_min", c.polar_min},   {"polar_max", c.polar_max}, {"radius_min", c.radius_min},
       {"radius_max", c.radius_max}, {"fov_min", c.fov_min},     {"fov_max", c.fov_max}};
}
void from_json(const json& j, CameraRanges& c) {
  Reader(j, "cameras")
      .field("polar_min", c.polar_min)
      .field("polar_max", c.polar_max)
      .field("radius_min", c.radius_min)
      .field("radius_max", c.radius_max)
      .field("fov_min", c.fov_min)
      .field("fov_max", c.fov_max)
      .finish();
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"adam", c.adam},
       {"batch_size", c.batch_size},
       {"total_steps", c.total_steps},
       {"render_hw", c.render_hw},
       {"n_uniform", c.n_uniform},
       {"n_importance", c.n_importance},
       {"seed", c.seed},
       {"clip_weight", c.clip_weight},
       {"guidance", c.guidance},
       {"alpha_start", c.alpha_start},
       {"anneal_fraction", c.anneal_fraction},
       {"scaled_sigmoid", c.scaled_sigmoid},
       {"shading", shading_name(c.shading)},
       {"textureless_prob", c.textureless_prob},
       {"cameras", c.cameras}};
}

void from_json(const json& j, TrainConfig& c) {
  std::string shading = shading_name(c.shading);
  Reader(j, "train")
      .field("adam", c.adam)
      .field("batch_size", c.batch_size)
      .field("total_steps", c.total_steps)
      .field("render_hw", c.render_hw)
      .field("n_uniform", c.n_uniform)
      .field("n_importance", c.n_importance)
      .field("seed", c.seed)
      .field("clip_weight", c.clip_weight)
      .field("guidance", c.guidance)
      .field("alpha_start", c.alpha_start)
      .field("anneal_fraction", c.anneal_fraction)
      .field("scaled_sigmoid", c.scaled_sigmoid)
      .field("shading", shading)
      .field("textureless_prob", c.textureless_prob)
      .field("cameras", c.cameras)
      .finish();
  c.shading = parse_shading(shading);
}

}  // namespace it3d
