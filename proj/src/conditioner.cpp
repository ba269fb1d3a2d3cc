#include "it3d/conditioner.hpp"

#include "it3d/diffmath/ops.hpp"
#include "it3d/rng.hpp"

#include <cmath>
#include <numeric>

namespace it3d {

namespace {

template <typename S>
const Var<S>& get(const VarSet<S>& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::out_of_range("decoder: missing parameter '" + name + "'");
  return it->second;
}

template <typename S>
Var<S> dense(const Var<S>& x, const VarSet<S>& p, const std::string& prefix) {
  return linear(x, get(p, prefix + ".weight"), get(p, prefix + ".bias"));
}

// [C, H, W] <-> [H*W, C]
template <typename S>
Var<S> to_tokens(const Var<S>& x) {
  return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

template <typename S>
Var<S> to_map(const Var<S>& t, Index h, Index w) {
  return reshape(transpose(t), {t.dim(1), h, w});
}

Index norm_groups(Index channels) { return std::gcd(channels, Index{8}); }

std::string stage_prefix(Index s) { return "decoder.stage" + std::to_string(s); }

std::string block_prefix(Index s, Index b) { return stage_prefix(s) + ".block" + std::to_string(b); }

void add_linear(std::vector<ParamSpec>& out, const std::string& name, Index in, Index out_dim) {
  out.push_back({name + ".weight", {in, out_dim}, false});
  out.push_back({name + ".bias", {out_dim}, true});
}

void add_conv(std::vector<ParamSpec>& out, const std::string& name, Index in, Index out_dim, Index k) {
  out.push_back({name + ".weight", {out_dim, in, k, k}, false});
  out.push_back({name + ".bias", {out_dim}, true});
}

void add_attention(std::vector<ParamSpec>& out, const std::string& name, Index dim, Index context_dim) {
  add_linear(out, name + ".q", dim, dim);
  add_linear(out, name + ".k", context_dim, dim);
  add_linear(out, name + ".v", context_dim, dim);
  add_linear(out, name + ".out", dim, dim);
}

template <typename S>
Var<S> attention_block(const Var<S>& x, const Var<S>& tokens, const VarSet<S>& p, const std::string& prefix,
                       Index heads, AttentionProbe<S>* probe) {
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Var<S> t = to_tokens(group_norm(x, norm_groups(c)));
  t = t + attention(layer_norm_rows(t), layer_norm_rows(t), p, prefix + ".attn.self", heads, probe);
  t = t + attention(layer_norm_rows(t), tokens, p, prefix + ".attn.cross", heads, probe);
  t = t + dense(silu(dense(layer_norm_rows(t), p, prefix + ".ff.fc1")), p, prefix + ".ff.fc2");
  return x + to_map(t, h, w);
}

template <typename S>
Var<S> conv_block(const Var<S>& x, const Var<S>& style, const VarSet<S>& p, const std::string& prefix) {
  const Var<S> y = conv2d(x, get(p, prefix + ".conv.weight"), get(p, prefix + ".conv.bias"));
  return x + silu(adain(y, style, p, prefix + ".adain"));
}

}  // namespace

DecoderConfig DecoderConfig::full_scale() {
  DecoderConfig c;
  c.base_channel = 80;
  c.layers_per_block = 10;
  c.channel_multipliers = {4, 4, 2, 1, 1};
  c.base_resolution = 8;
  c.stages = 5;
  c.out_channels = 32;
  c.out_resolution = 256;
  return c;
}

void DecoderConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("DecoderConfig: " + what); };
  if (base_channel < 1 || layers_per_block < 1 || base_resolution < 1 || stages < 1 || out_channels < 1) {
    fail("sizes must be positive");
  }
  if (Index(channel_multipliers.size()) != stages) {
    fail("channel_multipliers has " + std::to_string(channel_multipliers.size()) + " entries for " +
         std::to_string(stages) + " stages");
  }
  if (base_resolution * (Index{1} << stages) != out_resolution) {
    fail("base_resolution * 2^stages = " + std::to_string(base_resolution * (Index{1} << stages)) +
         " != out_resolution " + std::to_string(out_resolution));
  }
  if (style_noise_dim < 0) fail("style_noise_dim must be >= 0");
  if (token_count < 1 || token_dim < 1 || token_reduce_dim < 1 || style_token_dim < 1 || heads < 1) {
    fail("token sizes must be positive");
  }
  if (token_count * token_reduce_dim < base_resolution * base_resolution) {
    fail("token_count * token_reduce_dim must cover the base map");
  }
  if (token_reduce_dim % heads != 0) fail("token_reduce_dim must be divisible by heads");
  for (Index s = 0; s < std::min(stages, attention_stages); ++s) {
    if (stage_channels(s) % heads != 0) fail("stage channels must be divisible by heads");
  }
  for (Index m : channel_multipliers) {
    if (m < 1) fail("channel multipliers must be positive");
  }
  if (!(extent > 0.0)) fail("extent must be positive");
}

template <typename S>
void TextCondition<S>::validate() const {
  if (token_embeddings.rank() != 2 || sentence_embedding.rank() != 1 ||
      sentence_embedding.size() != token_embeddings.dim(1)) {
    throw_shape_error("TextCondition", "expected tokens [T, D] and sentence [D]", token_embeddings.shape(),
                      sentence_embedding.shape());
  }
  if (!token_embeddings.all_finite() || !sentence_embedding.all_finite()) {
    throw std::domain_error("TextCondition: non-finite embedding");
  }
  if (!(sentence_embedding.array().square().sum() > S(0))) {
    throw std::domain_error("TextCondition: sentence embedding has zero norm");
  }
}

std::vector<ParamSpec> decoder_param_specs(const DecoderConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  const Index r = cfg.token_reduce_dim, c0 = cfg.base_channel, r0 = cfg.base_resolution;
  add_linear(out, "t2p.reduce", cfg.token_dim, r);
  add_attention(out, "t2p.attn", r, r);
  add_linear(out, "t2p.mlp.fc1", cfg.token_count * r, r0 * r0 * c0);
  add_linear(out, "t2p.mlp.fc2", c0, c0);

  add_linear(out, "style.proj", cfg.token_dim, cfg.style_token_dim);
  add_attention(out, "style.attn", cfg.style_token_dim, cfg.style_token_dim);

  Index prev = c0;
  for (Index s = 0; s < cfg.stages; ++s) {
    const Index c = cfg.stage_channels(s);
    if (c != prev) add_conv(out, stage_prefix(s) + ".in", prev, c, 1);
    const bool with_attention = s < cfg.attention_stages;
    Index b = 0;
    for (Index l = 0; l < cfg.layers_per_block; ++l) {
      if (with_attention) {
        const std::string a = block_prefix(s, b++);
        add_attention(out, a + ".attn.self", c, c);
        add_attention(out, a + ".attn.cross", c, cfg.token_dim);
        add_linear(out, a + ".ff.fc1", c, 4 * c);
        add_linear(out, a + ".ff.fc2", 4 * c, c);
      }
      const std::string k = block_prefix(s, b++);
      add_conv(out, k + ".conv", c, c, 3);
      add_linear(out, k + ".adain", cfg.style_dim(), 2 * c);
    }
    prev = c;
  }
  add_conv(out, "decoder.out", prev, 3 * cfg.out_channels, 3);
  return out;
}

template <typename S>
ParamSet<S> init_decoder_params(const DecoderConfig& cfg, std::uint64_t seed) {
  ParamSet<S> params;
  for (const ParamSpec& spec : decoder_param_specs(cfg)) {
    Tensor<S> t(spec.shape);
    if (!spec.bias) {
      Rng rng = Rng::stream(seed, spec.name);
      for (Index i = 0; i < t.size(); ++i) t[i] = S(rng.truncated_normal(0.02));
    }
    params.emplace(spec.name, std::move(t));
  }
  return params;
}

template <typename S>
VarSet<S> register_params(Graph<S>& g, const ParamSet<S>& params, bool trainable) {
  VarSet<S> vars;
  for (const auto& [name, value] : params) vars.emplace(name, trainable ? g.param(name, value) : g.constant(value));
  return vars;
}

template <typename S>
Var<S> attention(const Var<S>& x, const Var<S>& context, const VarSet<S>& p, const std::string& prefix,
                 Index heads, AttentionProbe<S>* probe) {
  const Var<S> q = dense(x, p, prefix + ".q");
  const Var<S> k = dense(context, p, prefix + ".k");
  const Var<S> v = dense(context, p, prefix + ".v");
  const Index c = q.dim(1);
  if (c % heads != 0) {
    throw_shape_error("attention", "width must divide into " + std::to_string(heads) + " heads", q.shape());
  }
  const Index d = c / heads;
  const S inv_sqrt_d = S(1) / std::sqrt(S(d));
  std::vector<Var<S>> outs;
  for (Index h = 0; h < heads; ++h) {
    const Var<S> qh = heads == 1 ? q : slice(q, 1, h * d, d);
    const Var<S> kh = heads == 1 ? k : slice(k, 1, h * d, d);
    const Var<S> vh = heads == 1 ? v : slice(v, 1, h * d, d);
    const Var<S> w = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_d));
    if (probe) probe->probabilities.push_back(w.value());
    outs.push_back(matmul(w, vh));
  }
  const Var<S> merged = heads == 1 ? outs.front() : concat(outs, 1);
  return dense(merged, p, prefix + ".out");
}

template <typename S>
Var<S> token_to_plane(const Var<S>& tokens, const VarSet<S>& p, const DecoderConfig& cfg,
                      AttentionProbe<S>* probe) {
  const Index t = tokens.dim(0), r0 = cfg.base_resolution, c0 = cfg.base_channel;
  Var<S> x = dense(tokens, p, "t2p.reduce");
  x = x + attention(x, x, p, "t2p.attn", cfg.heads, probe);
  const Var<S> flat = reshape(x, {1, t * x.dim(1)});
  const Var<S> h = silu(dense(flat, p, "t2p.mlp.fc1"));
  if (h.dim(1) != r0 * r0 * c0) {
    throw_shape_error("token_to_plane", "projection width must equal base_resolution^2 * channels = " +
                                            std::to_string(r0 * r0 * c0),
                      h.shape());
  }
  // Pixel-major: each of the R0*R0 pixels gets a C-wide feature.
  const Var<S> pixels = dense(reshape(h, {r0 * r0, c0}), p, "t2p.mlp.fc2");
  return to_map(pixels, r0, r0);
}

template <typename S>
Var<S> style_inject(const Var<S>& tokens, const std::vector<S>& noise, const VarSet<S>& p,
                    const DecoderConfig& cfg, AttentionProbe<S>* probe) {
  if (Index(noise.size()) != cfg.style_noise_dim) {
    throw_shape_error("style_inject", "noise length must equal style_noise_dim", {Index(noise.size())},
                      {cfg.style_noise_dim});
  }
  Var<S> x = dense(tokens, p, "style.proj");
  x = x + attention(x, x, p, "style.attn", 1, probe);
  const Var<S> text = reshape(x, {x.dim(0) * x.dim(1)});
  if (noise.empty()) return text;
  Tensor<S> n({Index(noise.size())});
  std::copy(noise.begin(), noise.end(), n.data());
  return concat<S>({text, tokens.graph().constant(std::move(n))}, 0);
}

template <typename S>
Var<S> adain(const Var<S>& x, const Var<S>& style, const VarSet<S>& p, const std::string& prefix) {
  const Index c = x.dim(0);
  const Var<S> l = reshape(dense(reshape(style, {1, style.value().size()}), p, prefix), {2 * c});
  return channel_affine(instance_norm(x), slice(l, 0, 0, c), slice(l, 0, c, c));
}

template <typename S>
Var<S> cross_attention(const Var<S>& x, const Var<S>& tokens, const VarSet<S>& p, const std::string& prefix,
                       Index heads, AttentionProbe<S>* probe) {
  return x + to_map(attention(to_tokens(x), tokens, p, prefix, heads, probe), x.dim(1), x.dim(2));
}

template <typename S>
TriplaneVar<S> decode(const Var<S>& tokens, const std::vector<S>& noise, const DecoderConfig& cfg,
                      const VarSet<S>& p, AttentionProbe<S>* probe) {
  cfg.validate();
  if (tokens.value().rank() != 2 || tokens.dim(0) != cfg.token_count || tokens.dim(1) != cfg.token_dim) {
    throw_shape_error("decode", "tokens must be [token_count, token_dim]", tokens.shape(),
                      {cfg.token_count, cfg.token_dim});
  }
  const Var<S> style = style_inject(tokens, noise, p, cfg, probe);
  Var<S> x = token_to_plane(tokens, p, cfg, probe);
  for (Index s = 0; s < cfg.stages; ++s) {
    const Index c = cfg.stage_channels(s);
    if (x.dim(0) != c) x = conv2d(x, get(p, stage_prefix(s) + ".in.weight"), get(p, stage_prefix(s) + ".in.bias"));
    const bool with_attention = s < cfg.attention_stages;
    Index b = 0;
    for (Index l = 0; l < cfg.layers_per_block; ++l) {
      if (with_attention) x = attention_block(x, tokens, p, block_prefix(s, b++), cfg.heads, probe);
      x = conv_block(x, style, p, block_prefix(s, b++));
    }
    x = upsample_nearest2x(x);
  }
  x = conv2d(x, get(p, "decoder.out.weight"), get(p, "decoder.out.bias"));
  return {reshape(x, cfg.output_shape()), S(cfg.extent)};
}

template <typename S>
Triplane<S> decode(const TextCondition<S>& cond, const std::vector<S>& noise, const DecoderConfig& cfg,
                   const ParamSet<S>& params) {
  cond.validate();
  Graph<S> g;
  const VarSet<S> p = register_params(g, params, false);
  const TriplaneVar<S> tv = decode(g.constant(cond.token_embeddings), noise, cfg, p);
  return {tv.planes.value(), tv.extent};
}

#define IT3D_INSTANTIATE_CONDITIONER(S)                                                                         \
  template struct TextCondition<S>;                                                                              \
  template ParamSet<S> init_decoder_params<S>(const DecoderConfig&, std::uint64_t);                              \
  template VarSet<S> register_params<S>(Graph<S>&, const ParamSet<S>&, bool);                                   \
  template Var<S> attention<S>(const Var<S>&, const Var<S>&, const VarSet<S>&, const std::string&, Index,        \
                               AttentionProbe<S>*);                                                              \
  template Var<S> token_to_plane<S>(const Var<S>&, const VarSet<S>&, const DecoderConfig&, AttentionProbe<S>*);  \
  template Var<S> style_inject<S>(const Var<S>&, const std::vector<S>&, const VarSet<S>&, const DecoderConfig&,  \
                                  AttentionProbe<S>*);                                                           \
  template Var<S> adain<S>(const Var<S>&, const Var<S>&, const VarSet<S>&, const std::string&);                  \
  template Var<S> cross_attention<S>(const Var<S>&, const Var<S>&, const VarSet<S>&, const std::string&, Index,  \
                                     AttentionProbe<S>*);                                                        \
  template TriplaneVar<S> decode<S>(const Var<S>&, const std::vector<S>&, const DecoderConfig&, const VarSet<S>&, \
                                    AttentionProbe<S>*);                                                         \
  template Triplane<S> decode<S>(const TextCondition<S>&, const std::vector<S>&, const DecoderConfig&,           \
                                 const ParamSet<S>&);

IT3D_INSTANTIATE_CONDITIONER(float)
IT3D_INSTANTIATE_CONDITIONER(double)

}  // namespace it3d
