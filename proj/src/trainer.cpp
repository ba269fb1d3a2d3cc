#include "it3d/trainer.hpp"

#include "it3d/config_json.hpp"
#include "it3d/diffmath/ops.hpp"
#include "it3d/diffmath/serialize.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace it3d {

namespace {

using json = nlohmann::json;

template <typename S>
TextCondition<S> cast_condition(const TextCondition<double>& c) {
  return {c.token_embeddings.cast<S>(), c.sentence_embedding.cast<S>()};
}

Tensord round_to_f32(Tensord t) {
  for (Index i = 0; i < t.size(); ++i) t[i] = double(float(t[i]));
  return t;
}

struct RecordResult {
  ParamSet<float> grads;
  double loss = 0.0;
  double severity = 0.0;
  double w_neg = 0.0;
  double azimuth = 0.0;
  Tensord feature;
};

RecordResult run_record(const TrainState& st, const PromptRecord& rec, Index k, TrainContext& ctx, double alpha) {
  const TrainConfig& tc = st.train;
  const auto step = std::uint64_t(st.step);
  const auto slot = std::uint64_t(k);
  Rng camera = Rng::stream(tc.seed, "camera", step, slot);
  Rng style = Rng::stream(tc.seed, "style", step, slot);
  Rng timestep = Rng::stream(tc.seed, "timestep", step, slot);
  Rng noise = Rng::stream(tc.seed, "noise", step, slot);
  Rng render_rng = Rng::stream(tc.seed, "render", step, slot);

  const TextCondition<float> cond = cast_condition<float>(ctx.text.encode(rec.text));
  Graph<float> g;
  const VarSet<float> vars = register_params(g, st.params, true);
  const Field<float> field = model_field(g, vars, st.model, cond, style_noise(st.model.decoder, style), float(alpha));

  const CameraPose pose = sample_camera(camera, tc.cameras);
  RenderOptions opts;
  opts.height = opts.width = tc.render_hw;
  opts.n_uniform = tc.n_uniform;
  opts.n_importance = tc.n_importance;
  opts.extent = st.model.decoder.extent;
  opts.shading = pick_shading(render_rng, tc.shading, tc.textureless_prob);
  const RenderOutput<float> out = render(g, field, pose, opts, render_rng);

  RecordResult r;
  const Tensord rendered = out.rgb.value().cast<double>();
  r.feature = round_to_f32(ctx.features.features(rendered));
  r.azimuth = pose.azimuth;
  const SdsResult sds = sds_grad(rendered, pose, rec, ctx.oracle, ctx.schedule, tc.guidance, st.cache, r.feature,
                                 SdsRngs{timestep, noise});
  r.severity = sds.severity;
  r.w_neg = sds.w_neg;

  // <grad, rgb> has the SDS gradient as its derivative with respect to the image.
  Var<float> objective = sum(mul(out.rgb, g.constant(sds.grad.cast<float>())));
  // The clip term needs an anchor in the render's feature space: the front-view
  // target under DownsampleFeature. Without one (remote oracles) it is skipped.
  if (tc.clip_weight > 0.0) {
    if (auto* df = dynamic_cast<DownsampleFeature*>(&ctx.features)) {
      CameraPose front = pose;
      front.azimuth = 0.0;
      if (const auto target = ctx.oracle.target_image(rec, front, tc.render_hw, tc.render_hw)) {
        const Tensord anchor = df->features(*target);
        objective =
            add(objective, scale(clip_loss(df->features(out.rgb), anchor.cast<float>()), float(tc.clip_weight)));
      }
    }
  }
  GradientMap<float> gm = g.backward(objective);
  r.grads = std::move(gm.entries());

  if (const auto target = ctx.oracle.target_image(rec, pose, tc.render_hw, tc.render_hw)) {
    r.loss = (rendered.array() - target->array()).square().mean();
  } else {
    r.loss = sds.grad.array().square().mean();
  }
  return r;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(char((v >> (8 * b)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(char((v >> (8 * b)) & 0xff));
}
std::uint64_t get_le(const std::string& s, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int b = 0; b < bytes; ++b) v |= std::uint64_t(static_cast<unsigned char>(s[at + std::size_t(b)])) << (8 * b);
  return v;
}

std::map<std::string, Shape> expected_param_shapes(const ModelConfig& m) {
  std::map<std::string, Shape> out;
  for (const auto& spec : decoder_param_specs(m.decoder)) out[spec.name] = spec.shape;
  const Index c = m.decoder.out_channels;
  out["head.fc1.weight"] = {3 * c, m.head.hidden};
  out["head.fc1.bias"] = {m.head.hidden};
  out["head.fc2.weight"] = {m.head.hidden, 4};
  out["head.fc2.bias"] = {4};
  return out;
}

}  // namespace

template <typename S>
void adam_step(ParamSet<S>& params, const ParamSet<S>& grads, AdamState<S>& state, const AdamConfig& cfg) {
  for (const auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) throw std::invalid_argument("adam_step: no gradient for '" + name + "'");
    if (g->second.shape() != p.shape()) throw_shape_error("adam_step", name, p.shape(), g->second.shape());
  }
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient for an unknown parameter");
  const Index t = state.step + 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(t));
  for (auto& [name, p] : params) {
    const Tensor<S>& g = grads.at(name);
    Tensor<S>& m = state.m.try_emplace(name, p.shape()).first->second;
    Tensor<S>& v = state.v.try_emplace(name, p.shape()).first->second;
    if (m.shape() != p.shape() || v.shape() != p.shape()) throw_shape_error("adam_step", "moments of " + name, p.shape());
    for (Index i = 0; i < p.size(); ++i) {
      const double gi = double(g[i]);
      const double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = S(mi);
      v[i] = S(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + cfg.eps) + cfg.weight_decay * double(p[i]);
      p[i] = S(double(p[i]) - cfg.lr * update);
    }
  }
  state.step = t;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (render_hw < 1) fail("render_hw must be >= 1");
  if (n_uniform < 1 || n_importance < 0) fail("need n_uniform >= 1 and n_importance >= 0");
  if (!(adam.lr >= 0.0)) fail("lr must be >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) fail("betas in [0, 1)");
  if (!(adam.eps > 0.0) || !(adam.weight_decay >= 0.0)) fail("need eps > 0 and weight_decay >= 0");
  if (!(clip_weight >= 0.0)) fail("clip_weight must be >= 0");
  if (!(alpha_start > 0.0 && alpha_start <= 1.0)) fail("alpha_start must be in (0, 1]");
  if (!(anneal_fraction >= 0.0 && anneal_fraction <= 1.0)) fail("anneal_fraction must be in [0, 1]");
  if (!(textureless_prob >= 0.0 && textureless_prob <= 1.0)) fail("textureless_prob must be in [0, 1]");
  guidance.validate();
}

double TrainConfig::alpha_at(Index step) const {
  if (!scaled_sigmoid) return 1.0;
  const AnnealState a{alpha_start, alpha_start, anneal_fraction};
  return anneal_step(a, std::clamp<Index>(step, 0, total_steps), total_steps).alpha;
}

SyntheticEmbedder embedder_for(const ModelConfig& cfg) {
  return SyntheticEmbedder{cfg.embed_seed, cfg.decoder.token_dim, cfg.decoder.token_count};
}

ParamSet<float> init_model_params(const ModelConfig& cfg) {
  ParamSet<float> p = init_decoder_params<float>(cfg.decoder, cfg.init_seed);
  for (auto& [name, t] : init_head_params<float>(cfg.decoder.out_channels, cfg.head, cfg.init_seed)) {
    p.emplace(name, std::move(t));
  }
  return p;
}

std::vector<float> style_noise(const DecoderConfig& cfg, Rng& rng) {
  std::vector<float> n(static_cast<std::size_t>(cfg.style_noise_dim));
  for (auto& x : n) x = float(rng.normal());
  return n;
}

template <typename S>
Field<S> model_field(Graph<S>& g, const VarSet<S>& vars, const ModelConfig& cfg, const TextCondition<S>& cond,
                     const std::vector<S>& noise, S alpha) {
  const TriplaneVar<S> tp = decode(g.constant(cond.token_embeddings), noise, cfg.decoder, vars);
  return triplane_field(tp, vars, alpha);
}

TrainState init_train_state(const ModelConfig& model, const TrainConfig& train, std::size_t num_train_prompts) {
  model.decoder.validate();
  train.validate();
  TrainState st;
  st.model = model;
  st.train = train;
  st.params = init_model_params(model);
  for (const auto& [name, p] : st.params) {
    st.adam.m.emplace(name, Tensorf(p.shape()));
    st.adam.v.emplace(name, Tensorf(p.shape()));
  }
  st.cache = SeverityCache(num_train_prompts);
  return st;
}

StepMetrics train_step(TrainState& state, const std::vector<const PromptRecord*>& batch, TrainContext& ctx) {
  const auto start = std::chrono::steady_clock::now();
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  for (const auto* r : batch) {
    if (!r) throw std::invalid_argument("train_step: null record");
    if (r->split != Split::kTrain) throw std::invalid_argument("train_step: record " + std::to_string(r->id) + " is not a training prompt");
  }
  const double alpha = state.train.alpha_at(state.step);

  std::vector<RecordResult> results(batch.size());
  std::vector<std::exception_ptr> errors(batch.size());
  const auto workers = std::size_t(std::clamp<Index>(ctx.threads, 1, Index(batch.size())));
  auto work = [&](std::size_t w) {
    for (std::size_t k = w; k < batch.size(); k += workers) {
      try {
        results[k] = run_record(state, *batch[k], Index(k), ctx, alpha);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  // Everything below only runs once every record succeeded.
  ParamSet<float> grads;
  for (const auto& [name, p] : state.params) grads.emplace(name, Tensorf(p.shape()));
  StepMetrics m;
  m.step = state.step;
  m.alpha = alpha;
  const float inv = 1.0f / float(batch.size());
  for (const auto& r : results) {
    for (auto& [name, g] : grads) {
      auto it = r.grads.find(name);
      if (it != r.grads.end()) g.array() += inv * it->second.array();
    }
    m.loss += r.loss / double(batch.size());
    m.mean_severity += r.severity / double(batch.size());
    m.mean_w_neg += r.w_neg / double(batch.size());
  }
  ParamSet<float> params = state.params;
  AdamState<float> adam = state.adam;
  SeverityCache cache = state.cache;
  adam_step(params, grads, adam, state.train.adam);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    cache.update(batch[k]->id, results[k].azimuth, results[k].feature, results[k].severity);
  }
  state.params = std::move(params);
  state.adam = std::move(adam);
  state.cache = std::move(cache);
  ++state.step;
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

std::vector<const PromptRecord*> batch_for_step(const std::vector<const PromptRecord*>& train, Index batch_size,
                                                Index step, std::uint64_t seed) {
  if (train.empty()) throw std::invalid_argument("batch_for_step: no training prompts");
  const auto n = std::uint64_t(train.size());
  std::vector<const PromptRecord*> out;
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<std::size_t> order;
  for (Index i = 0; i < batch_size; ++i) {
    const std::uint64_t k = std::uint64_t(step) * std::uint64_t(batch_size) + std::uint64_t(i);
    const std::uint64_t epoch = k / n;
    if (epoch != cached_epoch) {
      order.resize(train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng = Rng::stream(seed, "batch", epoch);
      for (std::size_t j = order.size(); j > 1; --j) std::swap(order[j - 1], order[rng.below(j)]);
      cached_epoch = epoch;
    }
    out.push_back(train[order[k % n]]);
  }
  return out;
}

PromptRenders render_views(const TrainState& state, const TextCondition<double>& cond,
                           const std::vector<CameraPose>& poses, Index hw, std::uint64_t noise_seed,
                           std::optional<double> alpha, Index n_uniform, Index n_importance) {
  PromptRenders out;
  Rng style = Rng::stream(noise_seed, "style");
  const double a = alpha.value_or(state.train.alpha_at(state.step));
  const auto t0 = std::chrono::steady_clock::now();
  const Triplane<float> tp =
      decode(cast_condition<float>(cond), style_noise(state.model.decoder, style), state.model.decoder, state.params);
  out.decode_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  ParamSet<float> head;
  for (const auto& [name, t] : state.params) {
    if (name.starts_with("head.")) head.emplace(name, t);
  }
  // Row bands of about 2^18 samples keep the tape small at 256 x 256.
  const Index band = std::max<Index>(1, (Index{1} << 18) / (hw * (n_uniform + n_importance)));
  for (const CameraPose& pose : poses) {
    Rng rng = Rng::stream(noise_seed, "render");
    Tensord img({hw, hw, 3});
    for (Index row = 0; row < hw; row += band) {
      Graph<float> g;
      const VarSet<float> hv = register_params(g, head, false);
      const Field<float> field = triplane_field(TriplaneVar<float>{g.constant(tp.planes), tp.extent}, hv, float(a));
      RenderOptions opts;
      opts.height = opts.width = hw;
      opts.n_uniform = n_uniform;
      opts.n_importance = n_importance;
      opts.extent = state.model.decoder.extent;
      opts.jitter = false;
      opts.row_begin = row;
      opts.row_count = std::min(band, hw - row);
      const Tensorf part = render(g, field, pose, opts, rng).rgb.value();
      for (Index i = 0; i < part.size(); ++i) img[row * hw * 3 + i] = double(part[i]);
    }
    out.images.push_back(std::move(img));
  }
  return out;
}

Tensord render_prompt(const TrainState& state, const TextCondition<double>& cond, const CameraPose& pose, Index hw,
                      std::uint64_t noise_seed, std::optional<double> alpha, Index n_uniform, Index n_importance) {
  return render_views(state, cond, {pose}, hw, noise_seed, alpha, n_uniform, n_importance).images.front();
}

namespace {

std::string sha256_hex(const char* data, std::size_t n) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

}  // namespace

std::string checkpoint_bytes(const TrainState& st) {
  std::vector<std::pair<std::string, const Tensorf*>> tensors;
  for (const auto& [name, t] : st.params) tensors.emplace_back("param/" + name, &t);
  for (const auto& [name, t] : st.adam.m) tensors.emplace_back("adam.m/" + name, &t);
  for (const auto& [name, t] : st.adam.v) tensors.emplace_back("adam.v/" + name, &t);
  std::vector<Tensorf> features;
  features.reserve(st.cache.size());
  json cache_entries = json::array();
  for (const auto& [id, e] : st.cache.entries()) {
    features.push_back(e.feature.cast<float>());
    cache_entries.push_back({{"id", id}, {"azimuth", e.azimuth}, {"severity", e.severity}});
  }
  {
    std::size_t i = 0;
    for (const auto& [id, e] : st.cache.entries()) tensors.emplace_back("cache/" + std::to_string(id), &features[i++]);
  }

  json manifest = json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t offset = payload.size();
    append_f32_le(payload, std::span<const float>(t->array().data(), std::size_t(t->size())));
    manifest.push_back(
        {{"name", name}, {"dtype", "f32"}, {"shape", t->shape()}, {"offset", offset}, {"bytes", payload.size() - offset}});
  }
  const json header = {{"format", "it3d-checkpoint"},
                       {"step", st.step},
                       {"model", st.model},
                       {"train", st.train},
                       {"adam_step", st.adam.step},
                       {"cache", {{"capacity", st.cache.capacity()}, {"entries", cache_entries}}},
                       {"tensors", manifest},
                       {"payload_bytes", payload.size()},
                       {"payload_sha256", sha256_hex(reinterpret_cast<const char*>(payload.data()), payload.size())}};
  const std::string h = header.dump();
  std::string out = "IT3D";
  put_u32(out, kCheckpointVersion);
  put_u64(out, h.size());
  out += h;
  out.append(reinterpret_cast<const char*>(payload.data()), payload.size());
  return out;
}

TrainState checkpoint_from_bytes(const std::string& bytes) {
  auto fail = [](const std::string& m) -> void { throw CheckpointError("checkpoint: " + m); };
  if (bytes.size() < 16) fail("file too short for the fixed header (" + std::to_string(bytes.size()) + " bytes)");
  if (bytes.compare(0, 4, "IT3D") != 0) fail("bad magic (not an IT3D checkpoint)");
  const auto version = std::uint32_t(get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    fail("unsupported version " + std::to_string(version) + " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t hlen = get_le(bytes, 8, 8);
  if (hlen > bytes.size() - 16) fail("header length " + std::to_string(hlen) + " exceeds file size");
  const std::size_t payload_at = 16 + std::size_t(hlen);
  const std::size_t payload_size = bytes.size() - payload_at;

  TrainState st;
  try {
    const json h = json::parse(bytes.begin() + 16, bytes.begin() + std::ptrdiff_t(payload_at));
    if (h.at("format") != "it3d-checkpoint") fail("unknown format tag");
    if (h.at("payload_bytes").get<std::uint64_t>() != payload_size) {
      fail("payload is " + std::to_string(payload_size) + " bytes, header declares " +
           std::to_string(h.at("payload_bytes").get<std::uint64_t>()) + " (truncated or padded file)");
    }
    // Catches bit flips the structural checks cannot see.
    if (h.at("payload_sha256") != sha256_hex(bytes.data() + payload_at, payload_size)) {
      fail("payload digest mismatch (corrupted tensor data)");
    }
    st.step = h.at("step").get<Index>();
    st.model = h.at("model").get<ModelConfig>();
    st.train = h.at("train").get<TrainConfig>();
    st.model.decoder.validate();
    st.train.validate();
    st.adam.step = h.at("adam_step").get<Index>();
    if (st.step < 0 || st.adam.step < 0) fail("negative step counter");

    std::map<std::string, Tensorf> tensors;
    std::uint64_t expected_offset = 0;
    for (const auto& t : h.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto nbytes = t.at("bytes").get<std::uint64_t>();
      if (t.at("dtype") != "f32") fail("tensor '" + name + "' has unsupported dtype");
      for (Index d : shape) {
        if (d < 1) fail("tensor '" + name + "' has a non-positive extent");
      }
      if (offset != expected_offset) fail("tensor '" + name + "' offset " + std::to_string(offset) +
                                          " does not follow the previous tensor (expected " +
                                          std::to_string(expected_offset) + ")");
      if (nbytes != std::uint64_t(shape_numel(shape)) * 4) fail("tensor '" + name + "' byte count disagrees with its shape");
      if (offset + nbytes > payload_size) fail("tensor '" + name + "' runs past the payload");
      const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data() + payload_at + offset);
      const std::vector<float> v = decode_f32_le(std::span<const std::uint8_t>(p, std::size_t(nbytes)));
      Tensorf tensor(shape);
      std::memcpy(tensor.array().data(), v.data(), v.size() * sizeof(float));
      if (!tensors.emplace(name, std::move(tensor)).second) fail("duplicate tensor '" + name + "'");
      expected_offset = offset + nbytes;
    }
    if (expected_offset != payload_size) fail("payload has bytes not covered by the manifest");

    auto take = [&](const std::string& key) {
      auto it = tensors.find(key);
      if (it == tensors.end()) fail("missing tensor '" + key + "'");
      Tensorf t = std::move(it->second);
      tensors.erase(it);
      return t;
    };
    for (const auto& [name, shape] : expected_param_shapes(st.model)) {
      for (const char* group : {"param/", "adam.m/", "adam.v/"}) {
        Tensorf t = take(group + name);
        if (t.shape() != shape) {
          fail("tensor '" + std::string(group) + name + "' has shape " + shape_string(t.shape()) + ", model expects " +
               shape_string(shape));
        }
        if (!t.array().allFinite()) fail("tensor '" + std::string(group) + name + "' is not finite");
        auto& dst = group == std::string("param/") ? st.params : group == std::string("adam.m/") ? st.adam.m : st.adam.v;
        dst.emplace(name, std::move(t));
      }
    }
    const auto& cache = h.at("cache");
    st.cache = SeverityCache(cache.at("capacity").get<std::size_t>());
    for (const auto& e : cache.at("entries")) {
      const auto id = e.at("id").get<std::int64_t>();
      Tensorf f = take("cache/" + std::to_string(id));
      const double c = e.at("severity").get<double>();
      if (!(c >= 0.0 && c <= 1.0)) fail("cache entry " + std::to_string(id) + " has severity outside [0, 1]");
      st.cache.update(id, e.at("azimuth").get<double>(), f.cast<double>(), c);
    }
    if (!tensors.empty()) fail("unexpected tensor '" + tensors.begin()->first + "'");
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return st;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  const std::string bytes = checkpoint_bytes(state);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return checkpoint_from_bytes(ss.str());
}

template void adam_step<float>(ParamSet<float>&, const ParamSet<float>&, AdamState<float>&, const AdamConfig&);
template void adam_step<double>(ParamSet<double>&, const ParamSet<double>&, AdamState<double>&, const AdamConfig&);
template Field<float> model_field<float>(Graph<float>&, const VarSet<float>&, const ModelConfig&,
                                         const TextCondition<float>&, const std::vector<float>&, float);
template Field<double> model_field<double>(Graph<double>&, const VarSet<double>&, const ModelConfig&,
                                           const TextCondition<double>&, const std::vector<double>&, double);

}  // namespace it3d
