#pragma once

#include "it3d/diffmath/grad_check.hpp"
#include "it3d/triplane.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace it3d {

/// Token embeddings [T, D] plus the sentence embedding [D].
template <typename S>
struct TextCondition {
  Tensor<S> token_embeddings;
  Tensor<S> sentence_embedding;

  Index tokens() const { return token_embeddings.dim(0); }
  Index dim() const { return token_embeddings.dim(1); }
  void validate() const;
};

struct DecoderConfig {
  Index base_channel = 16;
  Index layers_per_block = 2;
  std::vector<Index> channel_multipliers = {2, 2, 1};
  Index base_resolution = 8;
  Index stages = 3;
  Index style_noise_dim = 64;
  Index out_channels = 8;
  Index out_resolution = 64;

  // Sizes the architecture leaves open.
  Index token_count = 16;
  Index token_dim = 64;
  Index token_reduce_dim = 16;
  Index heads = 4;
  Index style_token_dim = 8;
  /// Stages with index below this alternate attention and convolution blocks.
  Index attention_stages = 3;
  double extent = 1.0;

  static DecoderConfig desk() { return {}; }
  static DecoderConfig full_scale();

  Index stage_channels(Index stage) const { return base_channel * channel_multipliers.at(std::size_t(stage)); }
  Index style_text_dim() const { return token_count * style_token_dim; }
  Index style_dim() const { return style_text_dim() + style_noise_dim; }
  Shape output_shape() const { return {3, out_channels, out_resolution, out_resolution}; }

  /// Throws std::invalid_argument naming the violated relation.
  void validate() const;
};

struct ParamSpec {
  std::string name;
  Shape shape;
  bool bias = false;
};

/// Every decoder parameter with its shape, in a fixed order.
std::vector<ParamSpec> decoder_param_specs(const DecoderConfig& cfg);

/// Truncated-normal(0.02) weights and zero biases; one RNG stream per name.
template <typename S>
ParamSet<S> init_decoder_params(const DecoderConfig& cfg, std::uint64_t seed);

/// Registers every entry as a trainable parameter (or as a constant).
template <typename S>
VarSet<S> register_params(Graph<S>& g, const ParamSet<S>& params, bool trainable = true);

/// Collects every attention probability matrix produced during a forward pass.
template <typename S>
struct AttentionProbe {
  std::vector<Tensor<S>> probabilities;
};

/// Multi-head attention of queries x [N, C] over context [M, Ck]; projections
/// `<prefix>.{q,k,v,out}`. Returns [N, C] without a residual.
template <typename S>
Var<S> attention(const Var<S>& x, const Var<S>& context, const VarSet<S>& p, const std::string& prefix,
                 Index heads, AttentionProbe<S>* probe = nullptr);

/// tokens [T, D] -> base map [C, R0, R0]: reduce, one self-attention layer
/// with residual, then an MLP over the flattened tokens and a per-pixel layer.
template <typename S>
Var<S> token_to_plane(const Var<S>& tokens, const VarSet<S>& p, const DecoderConfig& cfg,
                      AttentionProbe<S>* probe = nullptr);

/// [text style (T * style_token_dim) | noise (style_noise_dim)].
template <typename S>
Var<S> style_inject(const Var<S>& tokens, const std::vector<S>& noise, const VarSet<S>& p,
                    const DecoderConfig& cfg, AttentionProbe<S>* probe = nullptr);

/// Instance-normalises x [C, H, W] and applies (l_s, l_b) = split(style * W + b).
template <typename S>
Var<S> adain(const Var<S>& x, const Var<S>& style, const VarSet<S>& p, const std::string& prefix);

/// x [C, H, W] plus attention from its pixels to the tokens.
template <typename S>
Var<S> cross_attention(const Var<S>& x, const Var<S>& tokens, const VarSet<S>& p, const std::string& prefix,
                       Index heads, AttentionProbe<S>* probe = nullptr);

template <typename S>
TriplaneVar<S> decode(const Var<S>& tokens, const std::vector<S>& noise, const DecoderConfig& cfg,
                      const VarSet<S>& p, AttentionProbe<S>* probe = nullptr);

/// Gradient-free decode into a plain Triplane.
template <typename S>
Triplane<S> decode(const TextCondition<S>& cond, const std::vector<S>& noise, const DecoderConfig& cfg,
                   const ParamSet<S>& params);

}  // namespace it3d
