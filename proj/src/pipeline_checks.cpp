#include "it3d/pipeline_checks.hpp"

#include "it3d/diffmath/ops.hpp"
#include "it3d/guidance.hpp"
#include "it3d/trainer.hpp"

namespace it3d {

namespace {

template <typename S>
Tensor<S> uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = S(float(rng.uniform(lo, hi)));
  return t;
}

template <typename S>
Tensor<S> randn(Rng& rng, Shape shape, double stddev) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = S(float(rng.normal() * stddev));
  return t;
}

template <typename S>
ParamSet<S> random_head(Rng& rng, Index channels) {
  ParamSet<S> head = init_head_params<S>(channels, HeadConfig{8}, rng.below(1u << 30));
  for (auto& [name, t] : head) t = randn<S>(rng, t.shape(), 0.5);
  return head;
}

// Small decoder: two stages, attention in the first.
ModelConfig desk_check_model() {
  ModelConfig m;
  DecoderConfig& c = m.decoder;
  c.base_channel = 8;
  c.layers_per_block = 1;
  c.channel_multipliers = {2, 1};
  c.stages = 2;
  c.base_resolution = 2;
  c.out_resolution = 8;
  c.out_channels = 2;
  c.token_count = 4;
  c.token_dim = 8;
  c.token_reduce_dim = 4;
  c.heads = 2;
  c.style_token_dim = 2;
  c.style_noise_dim = 4;
  c.attention_stages = 1;
  m.head.hidden = 8;
  return m;
}

// A handful of decoder weights (one per kind of block) plus the head get
// probed; the rest enter the graph as constants.
const char* const kProbed[] = {"t2p.reduce.weight",
                               "style.attn.v.weight",
                               "decoder.stage0.in.weight",
                               "decoder.stage0.block0.attn.cross.v.weight",
                               "decoder.stage0.block1.adain.weight",
                               "decoder.stage1.block0.conv.weight",
                               "decoder.out.bias",
                               "head.fc1.weight",
                               "head.fc2.bias"};

template <typename S>
ParamSet<S> scrambled_model(const ModelConfig& m, Rng& rng) {
  ParamSet<S> all;
  for (const auto& [name, t] : init_model_params(m)) {
    const bool bias = name.ends_with(".bias");
    all[name] = randn<S>(rng, t.shape(), bias ? 0.05 : 0.3);
  }
  return all;
}

template <typename S>
VarSet<S> with_constants(Graph<S>& g, const VarSet<S>& probed, const ParamSet<S>& all) {
  VarSet<S> p = probed;
  for (const auto& [name, t] : all) {
    if (!p.count(name)) p.emplace(name, g.constant(t));
  }
  return p;
}

}  // namespace

template <typename S>
std::vector<PrimitiveCheck<S>> pipeline_checks() {
  std::vector<PrimitiveCheck<S>> checks;
  const double deep_eps = sizeof(S) == sizeof(float) ? 1e-2 : 1e-5;

  checks.push_back({"triplane_sample", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      c.params["planes"] = randn<S>(rng, {3, 2, 4, 4}, 1.0);
                      // Keep points off texel edges, where bilinear weights kink.
                      Tensor<S> pts({5, 3});
                      for (Index i = 0; i < pts.size(); ++i) {
                        const double cell = double(rng.below(3));
                        pts[i] = S(float(-1.0 + (cell + rng.uniform(0.2, 0.8)) * (2.0 / 3.0)));
                      }
                      c.params["points"] = pts;
                      c.builder = [](Graph<S>&, const VarSet<S>& v) {
                        return sample_features(TriplaneVar<S>{v.at("planes"), S(1)}, v.at("points"));
                      };
                      return c;
                    }});
  checks.push_back({"field_head", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      c.params = random_head<S>(rng, 2);
                      c.params["planes"] = randn<S>(rng, {3, 2, 4, 4}, 1.0);
                      const S alpha = S(float(rng.uniform(0.5, 1.0)));
                      c.builder = [alpha](Graph<S>& g, const VarSet<S>& v) {
                        Tensor<S> pts({4, 3});
                        for (Index i = 0; i < pts.size(); ++i) pts[i] = S(float(-0.55 + 0.3 * double(i % 4)));
                        const auto out = query_field(TriplaneVar<S>{v.at("planes"), S(1)}, v, g.constant(pts), alpha);
                        return concat(std::vector<Var<S>>{reshape(out.density, {4, 1}), out.albedo}, 1);
                      };
                      return c;
                    }});
  checks.push_back({"composite", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index rays = 1 + Index(rng.below(4)), k = 2 + Index(rng.below(7));
                      c.params["tau"] = uniform<S>(rng, {rays, k}, 0.0, 3.0);
                      c.params["color"] = uniform<S>(rng, {rays, k, 3}, 0.0, 1.0);
                      const Tensor<S> deltas = uniform<S>(rng, {rays, k}, 0.05, 0.4);
                      const S bg = S(float(rng.uniform()));
                      c.builder = [deltas, bg](Graph<S>&, const VarSet<S>& v) {
                        return composite(v.at("tau"), v.at("color"), deltas, bg);
                      };
                      return c;
                    }});
  checks.push_back({"volume_render",
                    [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      c.params = random_head<S>(rng, 2);
                      c.params["planes"] = randn<S>(rng, {3, 2, 4, 4}, 1.0);
                      CameraPose pose;
                      pose.polar = rng.uniform(60.0, 110.0);
                      pose.azimuth = rng.uniform(-180.0, 180.0);
                      pose.radius = 3.0;
                      c.builder = [pose](Graph<S>& g, const VarSet<S>& v) {
                        RenderOptions o;
                        o.height = o.width = 3;
                        o.n_uniform = 12;
                        o.n_importance = 0;
                        Rng local(0);
                        return render(g, triplane_field(TriplaneVar<S>{v.at("planes"), S(1)}, v, S(0.5)), pose, o, local)
                            .rgb;
                      };
                      return c;
                    },
                    deep_eps});
  checks.push_back({"decode_render_query",
                    [](std::uint64_t seed) {
                      Rng rng(seed);
                      const ModelConfig m = desk_check_model();
                      const ParamSet<S> all = scrambled_model<S>(m, rng);
                      GradCase<S> c;
                      for (const char* n : kProbed) c.params[n] = all.at(n);
                      const auto cond = embedder_for(m).embed(animal_text({{"species", "fox"}, {"hat", "beanie"}}));
                      TextCondition<S> cs{cond.token_embeddings.cast<float>().template cast<S>(),
                                          cond.sentence_embedding.cast<float>().template cast<S>()};
                      std::vector<S> noise;
                      for (Index i = 0; i < m.decoder.style_noise_dim; ++i) noise.push_back(S(float(rng.normal())));
                      CameraPose pose;
                      pose.azimuth = rng.uniform(-180.0, 180.0);
                      pose.radius = 3.0;
                      // The pixel-space guidance gradient and the clip anchor act as constants.
                      const Tensor<S> guide = randn<S>(rng, {4, 4, 3}, 0.1);
                      Tensord anchor = randn<double>(rng, {4}, 1.0);
                      anchor.array() /= std::sqrt(anchor.array().square().sum());
                      const Tensor<S> anchor_s = anchor.cast<float>().template cast<S>();
                      c.builder = [=](Graph<S>& g, const VarSet<S>& v) {
                        const VarSet<S> p = with_constants(g, v, all);
                        const Field<S> field = model_field(g, p, m, cs, noise, S(0.75));
                        RenderOptions o;
                        o.height = o.width = 4;
                        o.n_uniform = 8;
                        o.n_importance = 0;
                        Rng local(0);
                        const Var<S> rgb = render(g, field, pose, o, local).rgb;
                        const Var<S> sds = sum(mul(rgb, g.constant(guide)));
                        const Var<S> clip = clip_loss(DownsampleFeature(2).features(rgb), anchor_s);
                        return concat(std::vector<Var<S>>{reshape(sds, {1}), reshape(clip, {1}), reshape(rgb, {48})}, 0);
                      };
                      return c;
                    },
                    deep_eps});
  return checks;
}

std::vector<SuiteResult> run_pipeline_suite_f32(int cases, double tol, std::uint64_t base_seed, double eps) {
  const auto lo = pipeline_checks<float>();
  const auto hi = pipeline_checks<double>();
  GradCheckOptions opts;
  opts.eps = eps;
  opts.tol = tol;
  opts.max_probes = 16;
  std::vector<SuiteResult> results;
  for (std::size_t k = 0; k < lo.size(); ++k) {
    SuiteResult r;
    r.name = lo[k].name;
    for (int i = 0; i < cases; ++i) {
      const std::uint64_t seed = mix64(base_seed * 1000003ULL + std::uint64_t(i));
      const GradCase<float> a = lo[k].make(seed);
      const GradCase<double> b = hi[k].make(seed);
      opts.seed = seed;
      const GradCheckReport rep = grad_check_mixed(a.builder, b.builder, b.params, opts);
      ++r.cases;
      if (!rep.passed) ++r.failures;
      r.worst_rel_error = std::max(r.worst_rel_error, rep.max_rel_error);
    }
    results.push_back(r);
  }
  return results;
}

template <typename S>
std::vector<PrimitiveCheck<S>> full_gradient_suite() {
  auto checks = primitive_checks<S>();
  for (auto& c : pipeline_checks<S>()) checks.push_back(std::move(c));
  return checks;
}

template std::vector<PrimitiveCheck<float>> pipeline_checks<float>();
template std::vector<PrimitiveCheck<double>> pipeline_checks<double>();
template std::vector<PrimitiveCheck<float>> full_gradient_suite<float>();
template std::vector<PrimitiveCheck<double>> full_gradient_suite<double>();

}  // namespace it3d
