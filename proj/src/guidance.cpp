#include "it3d/guidance.hpp"

#include "it3d/diffmath/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace it3d {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

void require_same_shape(const char* op, const Tensord& a, const Tensord& b) {
  if (a.shape() != b.shape()) throw_shape_error(op, "tensors must share a shape", a.shape(), b.shape());
}

double dot(const Tensord& a, const Tensord& b) { return (a.array() * b.array()).sum(); }

double norm(const Tensord& a) { return std::sqrt(a.array().square().sum()); }

// Wraps non-oracle exceptions from an oracle call so the caller sees one error type.
DenoiseResult checked_denoise(ScoreOracle& oracle, const DenoiseQuery& q) {
  DenoiseResult r;
  try {
    r = oracle.denoise(q);
  } catch (const OracleError&) {
    throw;
  } catch (const std::exception& e) {
    throw OracleError("denoise failed for prompt '" + q.prompt + "' at t=" + std::to_string(q.t) + ": " + e.what());
  }
  auto check = [&](const Tensord& e, const std::string& what) {
    if (e.shape() != q.x_t.shape()) {
      throw OracleError("denoise: " + what + " has shape " + shape_string(e.shape()) + ", expected " +
                        shape_string(q.x_t.shape()));
    }
    if (!e.array().allFinite()) throw OracleError("denoise: " + what + " is not finite");
  };
  check(r.eps_uncond, "eps_uncond");
  check(r.eps_cond, "eps_cond");
  if (r.eps_neg.size() != q.negatives.size()) {
    throw OracleError("denoise: got " + std::to_string(r.eps_neg.size()) + " negative predictions for " +
                      std::to_string(q.negatives.size()) + " negative prompts");
  }
  for (std::size_t k = 0; k < r.eps_neg.size(); ++k) check(r.eps_neg[k], "eps_neg[" + std::to_string(k) + "]");
  return r;
}

}  // namespace

DiffusionSchedule DiffusionSchedule::linear(Index steps, double beta_start, double beta_end) {
  if (steps < 2) throw std::invalid_argument("DiffusionSchedule: need at least 2 steps");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("DiffusionSchedule: need 0 < beta_start < beta_end < 1");
  }
  DiffusionSchedule s;
  s.alpha_bar_.resize(static_cast<std::size_t>(steps));
  double prod = 1.0;
  for (Index i = 0; i < steps; ++i) {
    const double beta = beta_start + (beta_end - beta_start) * double(i) / double(steps - 1);
    prod *= 1.0 - beta;
    s.alpha_bar_[static_cast<std::size_t>(i)] = prod;
  }
  return s;
}

double DiffusionSchedule::alpha_bar(Index t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
  }
  return alpha_bar_[static_cast<std::size_t>(t - 1)];
}

Tensord forward_diffuse(const Tensord& img, Index t, const Tensord& eps, const DiffusionSchedule& sched) {
  require_same_shape("forward_diffuse", img, eps);
  const double ab = sched.alpha_bar(t);
  Tensord x = img;
  x.array() = std::sqrt(ab) * img.array() + std::sqrt(1.0 - ab) * eps.array();
  return x;
}

void GuidanceConfig::validate() const {
  if (!(w_guidance >= 0.0) || !(w_min >= 0.0) || !(delta_w >= 0.0)) {
    throw std::invalid_argument("guidance: w_guidance, w_min and delta_w must be >= 0");
  }
  if (!(t_min > 0.0 && t_min <= t_max && t_max < 1.0)) {
    throw std::invalid_argument("guidance: need 0 < t_min <= t_max < 1");
  }
}

std::pair<Index, Index> GuidanceConfig::t_bounds(Index steps) const {
  const Index lo = std::max<Index>(1, Index(std::ceil(t_min * double(steps))));
  const Index hi = std::min<Index>(steps, Index(std::floor(t_max * double(steps))));
  if (lo > hi) throw std::invalid_argument("guidance: empty timestep range");
  return {lo, hi};
}

View view_of(double azimuth) {
  double a = std::fmod(azimuth, 360.0);
  if (a < 0.0) a += 360.0;
  const double off = std::min(a, 360.0 - a);  // angular distance from the front
  if (off <= 45.0) return View::kFront;
  if (off <= 135.0) return View::kSide;
  return View::kBack;
}

const char* view_name(View v) {
  switch (v) {
    case View::kFront: return "front view";
    case View::kSide: return "side view";
    case View::kBack: return "back view";
  }
  return "";
}

double canonical_azimuth(View v) {
  switch (v) {
    case View::kFront: return 0.0;
    case View::kSide: return 90.0;
    case View::kBack: return 180.0;
  }
  return 0.0;
}

ViewPrompts view_prompts(const std::string& text, double azimuth) {
  const View pos = view_of(azimuth);
  ViewPrompts vp;
  vp.positive = text + ", " + view_name(pos);
  for (View v : {View::kFront, View::kSide, View::kBack}) {
    if (v == pos) continue;
    vp.negatives.push_back(text + ", " + view_name(v));
    vp.negative_views.push_back(v);
  }
  return vp;
}

Tensord cfg_predict(const DenoiseResult& r, double w_guidance) {
  require_same_shape("cfg_predict", r.eps_uncond, r.eps_cond);
  Tensord out = r.eps_uncond;
  out.array() += w_guidance * (r.eps_cond.array() - r.eps_uncond.array());
  return out;
}

Tensord cfg_predict(const DenoiseQuery& q, ScoreOracle& oracle, double w_guidance) {
  return cfg_predict(checked_denoise(oracle, q), w_guidance);
}

Tensord perpendicular(const Tensord& v, const Tensord& ref) {
  require_same_shape("perpendicular", v, ref);
  const double rr = dot(ref, ref);
  if (std::sqrt(rr) < 1e-8) return v;
  Tensord out = v;
  out.array() -= (dot(v, ref) / rr) * ref.array();
  return out;
}

Tensord perp_neg_predict(const DenoiseResult& r, double w_guidance, double w_neg) {
  if (r.eps_neg.empty()) throw std::invalid_argument("perp_neg_predict: no negative predictions");
  require_same_shape("perp_neg_predict", r.eps_uncond, r.eps_cond);
  Tensord pos = r.eps_cond;
  pos.array() -= r.eps_uncond.array();
  Tensord negd = Tensord::full(r.eps_uncond.shape(), 0.0);
  for (const auto& e : r.eps_neg) {
    require_same_shape("perp_neg_predict", e, r.eps_uncond);
    negd.array() += e.array();
  }
  negd.array() = negd.array() / double(r.eps_neg.size()) - r.eps_uncond.array();
  const Tensord perp = perpendicular(negd, pos);
  Tensord out = r.eps_uncond;
  out.array() += w_guidance * (pos.array() - w_neg * perp.array());
  return out;
}

Tensord perp_neg_predict(const DenoiseQuery& q, ScoreOracle& oracle, double w_guidance, double w_neg) {
  if (q.negatives.empty()) throw std::invalid_argument("perp_neg_predict: no negative prompts");
  return perp_neg_predict(checked_denoise(oracle, q), w_guidance, w_neg);
}

Tensord DownsampleFeature::features(const Tensord& image) {
  Graph<double> g;
  return features(g.constant(image)).value();
}

template <typename S>
Var<S> DownsampleFeature::features(const Var<S>& image) const {
  if (image.value().rank() != 3 || image.dim(2) != 3 || image.dim(0) != image.dim(1) ||
      image.dim(0) % side_ != 0) {
    throw_shape_error("DownsampleFeature", "image must be [H, H, 3] with H a multiple of " + std::to_string(side_),
                      image.shape());
  }
  Graph<S>& g = image.graph();
  const Index n = side_ * side_;
  const Var<S> small = box_downsample(image, image.dim(0) / side_);
  const Tensor<S> luma({3, 1}, {S(0.2126), S(0.7152), S(0.0722)});
  const Var<S> gray = matmul(reshape(small, {n, 3}), g.constant(luma));
  const Var<S> centred = sub(gray, mean(gray));
  const Var<S> len = sqrt(sum(square(centred)));
  if (!(double(len.value().item()) > 1e-12)) {
    return g.constant(Tensor<S>::full({n}, S(1.0 / std::sqrt(double(n)))));
  }
  return reshape(div(centred, len), {n});
}

double clip_loss(const Tensord& feature, const Tensord& anchor) {
  require_same_shape("clip_loss", feature, anchor);
  const double nf = norm(feature), na = norm(anchor);
  if (!(nf > 0.0 && na > 0.0)) throw std::invalid_argument("clip_loss: zero-norm input");
  return 1.0 - dot(feature, anchor) / (nf * na);
}

template <typename S>
Var<S> clip_loss(const Var<S>& feature, const Tensor<S>& anchor) {
  if (feature.value().size() != anchor.size()) {
    throw_shape_error("clip_loss", "feature and anchor sizes differ", feature.shape(), anchor.shape());
  }
  if (!(feature.value().array().square().sum() > S(0)) || !(anchor.array().square().sum() > S(0))) {
    throw std::invalid_argument("clip_loss: zero-norm input");
  }
  const Var<S> a = feature.graph().constant(anchor.reshaped(feature.shape()));
  return add_scalar(neg(cosine_similarity(feature, a)), S(1));
}

double severity(double v, const Tensord& feat, double v1, const Tensord& feat1) {
  require_same_shape("severity", feat, feat1);
  const double c = 0.25 * (1.0 - std::cos((v - v1) * kDeg)) * (1.0 + dot(feat, feat1));
  return std::clamp(c, 0.0, 1.0);
}

double severity(double v, const Tensord& feat, const SeverityEntry* cached) {
  return cached ? severity(v, feat, cached->azimuth, cached->feature) : 0.0;
}

double adaptive_w_neg(double c, const GuidanceConfig& cfg) {
  if (!(c >= 0.0 && c <= 1.0)) throw std::domain_error("adaptive_w_neg: severity outside [0, 1]");
  return cfg.w_min + c * cfg.delta_w;
}

const SeverityEntry* SeverityCache::find(std::int64_t id) const {
  auto it = entries_.find(id);
  return it == entries_.end() ? nullptr : &it->second;
}

void SeverityCache::update(std::int64_t id, double azimuth, Tensord feature, double c) {
  if (capacity_ != 0 && !entries_.count(id) && entries_.size() >= capacity_) {
    throw std::length_error("severity cache full (" + std::to_string(capacity_) + " prompts)");
  }
  entries_[id] = SeverityEntry{azimuth, std::move(feature), c};
}

SdsResult sds_grad_at(const Tensord& rendered, const CameraPose& pose, const PromptRecord& record,
                      ScoreOracle& oracle, const DiffusionSchedule& sched, const GuidanceConfig& cfg,
                      const SeverityCache& cache, const Tensord& feature, Index t, const Tensord& eps) {
  cfg.validate();
  if (!rendered.array().allFinite()) throw std::invalid_argument("sds_grad: rendered image is not finite");

  DenoiseQuery q;
  q.x_t = forward_diffuse(rendered, t, eps, sched);
  q.t = t;
  q.record = &record;
  q.pose = pose;
  const ViewPrompts vp = view_prompts(record.text, pose.azimuth);
  q.prompt = vp.positive;

  SdsResult out;
  out.t = t;
  out.weight = sched.weight(t);
  if (feature.size() > 0) out.severity = severity(pose.azimuth, feature, cache.find(record.id));
  if (!cfg.cfg_only) {
    if (feature.size() == 0) throw std::invalid_argument("sds_grad: perp-neg needs the render's feature");
    q.negatives = vp.negatives;
    for (View v : vp.negative_views) {
      CameraPose p = pose;
      p.azimuth = canonical_azimuth(v);
      q.negative_poses.push_back(p);
    }
    out.w_neg = adaptive_w_neg(out.severity, cfg);
  }

  const DenoiseResult r = checked_denoise(oracle, q);
  const double w = oracle.fixed_guidance_scale().value_or(cfg.w_guidance);
  Tensord pred = cfg.cfg_only ? cfg_predict(r, w) : perp_neg_predict(r, w, out.w_neg);
  out.residual = std::move(pred);
  out.residual.array() -= eps.array();
  out.grad = out.residual;
  out.grad.array() *= out.weight;
  return out;
}

SdsResult sds_grad(const Tensord& rendered, const CameraPose& pose, const PromptRecord& record, ScoreOracle& oracle,
                   const DiffusionSchedule& sched, const GuidanceConfig& cfg, const SeverityCache& cache,
                   const Tensord& feature, SdsRngs rngs) {
  const auto [lo, hi] = cfg.t_bounds(sched.steps());
  const Index t = lo + Index(rngs.timestep.below(std::uint64_t(hi - lo + 1)));
  Tensord eps(rendered.shape());
  for (Index i = 0; i < eps.size(); ++i) eps[i] = rngs.noise.normal();
  return sds_grad_at(rendered, pose, record, oracle, sched, cfg, cache, feature, t, eps);
}

Tensord SyntheticOracle::target(const PromptRecord& record, const CameraPose& pose, Index height,
                                Index width) const {
  return target_scene(record, pose, height, width, background_);
}

Tensord SyntheticOracle::eps_hat(const Tensord& x_t, double ab, const Tensord& target) const {
  Tensord e = x_t;
  e.array() = (x_t.array() - std::sqrt(ab) * target.array()) / std::sqrt(1.0 - ab);
  return e;
}

DenoiseResult SyntheticOracle::denoise(const DenoiseQuery& q) {
  if (!q.record) throw OracleError("synthetic oracle: query has no prompt record");
  if (q.x_t.rank() != 3 || q.x_t.dim(2) != 3) {
    throw OracleError("synthetic oracle: x_t must be [H, W, 3], got " + shape_string(q.x_t.shape()));
  }
  if (q.negative_poses.size() != q.negatives.size()) {
    throw OracleError("synthetic oracle: one pose per negative prompt required");
  }
  const Index h = q.x_t.dim(0), w = q.x_t.dim(1);
  const double ab = sched_.alpha_bar(q.t);
  DenoiseResult r;
  try {
    r.eps_uncond = eps_hat(q.x_t, ab, Tensord::full(q.x_t.shape(), gray_));
    r.eps_cond = eps_hat(q.x_t, ab, target(*q.record, q.pose, h, w));
    for (const auto& p : q.negative_poses) r.eps_neg.push_back(eps_hat(q.x_t, ab, target(*q.record, p, h, w)));
  } catch (const std::invalid_argument& e) {
    throw OracleError(std::string("synthetic oracle: ") + e.what());
  }
  return r;
}

#define IT3D_INSTANTIATE_GUIDANCE(S)                                              \
  template Var<S> DownsampleFeature::features<S>(const Var<S>&) const;           \
  template Var<S> clip_loss<S>(const Var<S>&, const Tensor<S>&);

IT3D_INSTANTIATE_GUIDANCE(float)
IT3D_INSTANTIATE_GUIDANCE(double)

}  // namespace it3d
