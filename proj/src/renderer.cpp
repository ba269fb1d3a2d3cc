#include "it3d/renderer.hpp"

#include "it3d/diffmath/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace it3d {

namespace {

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

template <typename S>
const Var<S>& head_param(const VarSet<S>& head, const std::string& name) {
  auto it = head.find(name);
  if (it == head.end()) throw std::out_of_range("field: missing parameter '" + name + "'");
  return it->second;
}

}  // namespace

Eigen::Vector3d CameraPose::eye() const {
  const double g = radians(polar), f = radians(azimuth);
  return radius * Eigen::Vector3d(std::sin(g) * std::cos(f), std::sin(g) * std::sin(f), std::cos(g));
}

CameraPose sample_camera(Rng& rng, const CameraRanges& r) {
  CameraPose p;
  p.polar = rng.uniform(r.polar_min, r.polar_max);
  p.azimuth = rng.uniform(0.0, 360.0);
  p.radius = rng.uniform(r.radius_min, r.radius_max);
  p.fov = rng.uniform(r.fov_min, r.fov_max);
  return p;
}

Rays generate_rays(const CameraPose& pose, Index height, Index width, double extent) {
  if (height < 1 || width < 1) throw std::invalid_argument("generate_rays: image size must be >= 1");
  Rays rays;
  rays.height = height;
  rays.width = width;
  rays.origin = pose.eye();
  const Eigen::Vector3d forward = (-rays.origin).normalized();
  Eigen::Vector3d right = forward.cross(Eigen::Vector3d::UnitZ());
  // Looking straight along Z: any horizontal right vector will do.
  if (right.norm() < 1e-9) right = forward.cross(Eigen::Vector3d::UnitY());
  right.normalize();
  const Eigen::Vector3d up = right.cross(forward);

  const double half = std::tan(radians(pose.fov) / 2.0);
  const double aspect = double(width) / double(height);
  rays.directions.resize(height * width, 3);
  for (Index i = 0; i < height; ++i) {
    const double y = (1.0 - 2.0 * (double(i) + 0.5) / double(height)) * half;
    for (Index j = 0; j < width; ++j) {
      const double x = (2.0 * (double(j) + 0.5) / double(width) - 1.0) * half * aspect;
      rays.directions.row(i * width + j) = (forward + x * right + y * up).normalized();
    }
  }
  rays.near = std::max(pose.radius - std::sqrt(3.0) * extent, 1e-4);
  rays.far = pose.radius + std::sqrt(3.0) * extent;
  return rays;
}

std::vector<double> stratified_depths(double near, double far, Index n, Rng* jitter) {
  std::vector<double> t(static_cast<std::size_t>(n));
  const double h = (far - near) / double(n);
  for (Index k = 0; k < n; ++k) t[std::size_t(k)] = near + (double(k) + (jitter ? jitter->uniform() : 0.5)) * h;
  return t;
}

std::vector<double> importance_depths(double near, double far, std::span<const double> weights, Index n,
                                      Rng& rng) {
  const std::size_t bins = weights.size();
  if (bins == 0) throw std::invalid_argument("importance_depths: no bins");
  std::vector<double> cdf(bins + 1, 0.0);
  for (std::size_t k = 0; k < bins; ++k) {
    if (!(weights[k] >= 0.0)) throw std::invalid_argument("importance_depths: weights must be non-negative");
    cdf[k + 1] = cdf[k] + weights[k];
  }
  const double total = cdf.back();
  for (std::size_t k = 0; k <= bins; ++k) cdf[k] = total > 0.0 ? cdf[k] / total : double(k) / double(bins);
  cdf.back() = 1.0;

  const double h = (far - near) / double(bins);
  std::vector<double> t(static_cast<std::size_t>(n));
  for (double& ti : t) {
    const double u = rng.uniform();
    // First edge above u; the bin below it has positive mass.
    const auto b = std::size_t(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin()) - 1;
    const double frac = (u - cdf[b]) / (cdf[b + 1] - cdf[b]);
    ti = near + (double(b) + frac) * h;
  }
  return t;
}

void finalize_samples(RaySamples& s, double near, double far) {
  const auto k = std::size_t(s.per_ray);
  s.deltas.assign(s.depths.size(), 0.0);
  for (Index r = 0; r < s.rays; ++r) {
    double* t = s.depths.data() + std::size_t(r) * k;
    double* d = s.deltas.data() + std::size_t(r) * k;
    std::sort(t, t + k);
    for (std::size_t i = 1; i < k; ++i) {
      if (t[i] <= t[i - 1]) t[i] = std::nextafter(t[i - 1], far + 1.0);
    }
    double lo = near;
    for (std::size_t i = 0; i < k; ++i) {
      const double hi = i + 1 < k ? 0.5 * (t[i] + t[i + 1]) : far;
      d[i] = hi - lo;
      lo = hi;
    }
  }
}

template <typename S>
ParamSet<S> init_head_params(Index channels, const HeadConfig& cfg, std::uint64_t seed) {
  ParamSet<S> p;
  auto weight = [&](const std::string& name, Shape shape) {
    Tensor<S> t(std::move(shape));
    Rng rng = Rng::stream(seed, name);
    for (Index i = 0; i < t.size(); ++i) t[i] = S(rng.truncated_normal(0.02));
    p.emplace(name, std::move(t));
  };
  weight("head.fc1.weight", {3 * channels, cfg.hidden});
  p.emplace("head.fc1.bias", Tensor<S>({cfg.hidden}));
  weight("head.fc2.weight", {cfg.hidden, 4});
  p.emplace("head.fc2.bias", Tensor<S>({4}));
  return p;
}

template <typename S>
FieldOutput<S> query_field(const TriplaneVar<S>& tp, const VarSet<S>& head, const Var<S>& points, S alpha) {
  const Var<S> feats = sample_features(tp, points);
  const Var<S> h = silu(linear(feats, head_param(head, "head.fc1.weight"), head_param(head, "head.fc1.bias")));
  const Var<S> o = linear(h, head_param(head, "head.fc2.weight"), head_param(head, "head.fc2.bias"));
  if (o.dim(1) != 4) throw_shape_error("query_field", "head must emit 4 values per point", o.shape());
  const Index n = o.dim(0);
  return {reshape(softplus(slice(o, 1, 0, 1)), {n}), scaled_sigmoid(slice(o, 1, 1, 3), alpha)};
}

template <typename S>
Field<S> triplane_field(const TriplaneVar<S>& tp, const VarSet<S>& head, S alpha) {
  Field<S> f;
  f.eval = [tp, head, alpha](const Var<S>& pts) { return query_field(tp, head, pts, alpha); };
  ParamSet<S> head_values;
  for (const auto& [name, v] : head) head_values.emplace(name, v.value());
  f.detached = [planes = tp.planes.value(), extent = tp.extent, head_values, alpha](const Var<S>& pts) {
    Graph<S>& g = pts.graph();
    VarSet<S> h;
    for (const auto& [name, t] : head_values) h.emplace(name, g.constant(t));
    return query_field(TriplaneVar<S>{g.constant(planes), extent}, h, pts, alpha);
  };
  return f;
}

template <typename S>
Tensor<S> composite_weights(const Tensor<S>& density, const Tensor<S>& deltas) {
  if (density.rank() != 2 || deltas.shape() != density.shape()) {
    throw_shape_error("composite_weights", "density and deltas must be [R, K]", density.shape(), deltas.shape());
  }
  const Index rays = density.dim(0), k = density.dim(1);
  Tensor<S> w({rays, k});
  // w_i = T_i - T_{i+1}, each rounded toward zero, so the exact row sum never
  // exceeds 1 - T_K.
  for (Index r = 0; r < rays; ++r) {
    double acc = 0.0, t = 1.0;
    for (Index i = 0; i < k; ++i) {
      acc += double(density[r * k + i]) * double(deltas[r * k + i]);
      const double next = std::exp(-acc);
      double d = t - next;
      if ((t - d) - next < 0.0) d = std::nextafter(d, 0.0);  // exact residual since t >= next
      S ws = S(d);
      if (double(ws) > d) ws = std::nextafter(ws, S(0));
      w[r * k + i] = ws;
      t = next;
    }
  }
  return w;
}

template <typename S>
Var<S> composite(const Var<S>& density, const Var<S>& color, const Tensor<S>& deltas, S background) {
  const Tensor<S>& tau = density.value();
  const Tensor<S>& col = color.value();
  if (tau.rank() != 2 || deltas.shape() != tau.shape()) {
    throw_shape_error("composite", "density and deltas must be [R, K]", tau.shape(), deltas.shape());
  }
  const Index rays = tau.dim(0), k = tau.dim(1);
  if (col.shape() != Shape{rays, k, 3}) throw_shape_error("composite", "color must be [R, K, 3]", col.shape());
  if (checked_mode() && (tau.array() < S(0)).any()) throw std::domain_error("composite: negative density");

  Tensor<S> out({rays, 4});
  for (Index r = 0; r < rays; ++r) {
    double acc = 0.0, opacity = 0.0, rgb[3] = {0, 0, 0};
    for (Index i = 0; i < k; ++i) {
      const double a = double(tau[r * k + i]) * double(deltas[r * k + i]);
      const double w = std::exp(-acc) * -std::expm1(-a);
      acc += a;
      opacity += w;
      for (int c = 0; c < 3; ++c) rgb[c] += w * double(col[(r * k + i) * 3 + c]);
      if (checked_mode() && !(w >= 0.0 && w <= 1.0)) throw std::logic_error("composite: weight outside [0, 1]");
    }
    if (checked_mode() && opacity > 1.0 + 1e-9) throw std::logic_error("composite: weights sum above 1");
    for (int c = 0; c < 3; ++c) out[r * 4 + c] = S(rgb[c] + (1.0 - opacity) * double(background));
    out[r * 4 + 3] = S(opacity);
  }

  return density.graph().record(
      "composite", std::move(out), {density, color},
      [density, color, deltas, background, rays, k](const Tensor<S>& go, std::span<Tensor<S>*> gi) {
        const Tensor<S>& tau = density.value();
        const Tensor<S>& col = color.value();
        const auto kk = static_cast<std::size_t>(k);
        std::vector<double> trans(kk + 1), w(kk), big_g(kk);
        for (Index r = 0; r < rays; ++r) {
          const double g_rgb[3] = {double(go[r * 4]), double(go[r * 4 + 1]), double(go[r * 4 + 2])};
          const double g_op = double(go[r * 4 + 3]);
          trans[0] = 1.0;
          for (Index i = 0; i < k; ++i) {
            const double a = double(tau[r * k + i]) * double(deltas[r * k + i]);
            const auto ui = std::size_t(i);
            w[ui] = trans[ui] * -std::expm1(-a);
            trans[ui + 1] = trans[ui] * std::exp(-a);
            double gk = g_op;
            for (int c = 0; c < 3; ++c) gk += g_rgb[c] * (double(col[(r * k + i) * 3 + c]) - double(background));
            big_g[ui] = gk;
          }
          double suffix = 0.0;  // sum over later samples of w_k G_k
          for (Index i = k; i-- > 0;) {
            const auto ui = std::size_t(i);
            if (gi[0]) (*gi[0])[r * k + i] += S(double(deltas[r * k + i]) * (trans[ui + 1] * big_g[ui] - suffix));
            if (gi[1]) {
              for (int c = 0; c < 3; ++c) (*gi[1])[(r * k + i) * 3 + c] += S(w[ui] * g_rgb[c]);
            }
            suffix += w[ui] * big_g[ui];
          }
        }
      });
}

Shading pick_shading(Rng& rng, Shading base, double textureless_prob) {
  const double u = rng.uniform();
  if (base == Shading::kLambertian && u < textureless_prob) return Shading::kTextureless;
  return base;
}

template <typename S>
RenderOutput<S> render(Graph<S>& g, const Field<S>& field, const CameraPose& pose, const RenderOptions& o,
                       Rng& rng) {
  if (o.n_uniform < 1 || o.n_importance < 0) throw std::invalid_argument("render: need n_uniform >= 1");
  Rays rays = generate_rays(pose, o.height, o.width, o.extent);
  const Index rows = o.row_count > 0 ? o.row_count : o.height;
  if (o.row_begin < 0 || o.row_count < 0 || o.row_begin + rows > o.height) {
    throw std::invalid_argument("render: row window outside the image");
  }
  if (rows != o.height) {
    rays.directions = rays.directions.middleRows(o.row_begin * o.width, rows * o.width).eval();
    rays.height = rows;
  }
  const Index nr = rays.count(), nu = o.n_uniform, k = o.n_uniform + o.n_importance;

  auto to_points = [&](const RaySamples& s) {
    Tensor<S> pts({s.rays * s.per_ray, 3});
    for (Index r = 0; r < s.rays; ++r) {
      const Eigen::Vector3d d = rays.directions.row(r);
      for (Index i = 0; i < s.per_ray; ++i) {
        const Eigen::Vector3d p = rays.origin + s.depths[std::size_t(r * s.per_ray + i)] * d;
        for (int c = 0; c < 3; ++c) pts[(r * s.per_ray + i) * 3 + c] = S(p[c]);
      }
    }
    return pts;
  };
  auto as_tensor = [](const std::vector<double>& v, Shape shape) {
    Tensor<S> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = S(v[std::size_t(i)]);
    return t;
  };

  RaySamples coarse{nr, nu, {}, {}};
  coarse.depths.reserve(std::size_t(nr * nu));
  for (Index r = 0; r < nr; ++r) {
    const auto t = stratified_depths(rays.near, rays.far, nu, o.jitter ? &rng : nullptr);
    coarse.depths.insert(coarse.depths.end(), t.begin(), t.end());
  }

  RaySamples fine{nr, k, {}, {}};
  if (o.n_importance == 0) {
    fine.depths = coarse.depths;
  } else {
    finalize_samples(coarse, rays.near, rays.far);
    Graph<S> cg;
    const Tensor<S> tau = field.detached(cg.constant(to_points(coarse))).density.value().reshaped({nr, nu});
    const Tensor<S> w = composite_weights(tau, as_tensor(coarse.deltas, {nr, nu}));
    fine.depths.reserve(std::size_t(nr * k));
    std::vector<double> wr(static_cast<std::size_t>(nu));
    for (Index r = 0; r < nr; ++r) {
      for (Index i = 0; i < nu; ++i) wr[std::size_t(i)] = double(w[r * nu + i]);
      const auto t = importance_depths(rays.near, rays.far, wr, o.n_importance, rng);
      fine.depths.insert(fine.depths.end(), coarse.depths.begin() + r * nu, coarse.depths.begin() + (r + 1) * nu);
      fine.depths.insert(fine.depths.end(), t.begin(), t.end());
    }
  }
  finalize_samples(fine, rays.near, rays.far);

  const Tensor<S> pts = to_points(fine);
  const Tensor<S> deltas = as_tensor(fine.deltas, {nr, k});
  const FieldOutput<S> f = field.eval(g.constant(pts));
  const Var<S> density = reshape(f.density, {nr, k});
  Var<S> color = f.albedo;

  RenderOutput<S> result;
  if (o.shading != Shading::kAlbedo) {
    // Normals are -grad(tau), taken from a detached copy of the field.
    Graph<S> ng;
    const Var<S> p = ng.param("p", pts);
    const Tensor<S> grad = ng.backward(sum(field.detached(p).density))["p"];
    const Eigen::Vector3d eye = pose.eye();
    const Eigen::Vector3d light = eye + Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    Tensor<S> shade({nr * k});
    Tensor<S> normals({nr * k, 3});
    for (Index i = 0; i < nr * k; ++i) {
      Eigen::Vector3d n(-double(grad[i * 3]), -double(grad[i * 3 + 1]), -double(grad[i * 3 + 2]));
      const double len = n.norm();
      n = len > 0.0 ? Eigen::Vector3d(n / len) : Eigen::Vector3d::Zero();
      const Eigen::Vector3d pi(pts[i * 3], pts[i * 3 + 1], pts[i * 3 + 2]);
      const double lambert = std::max(0.0, n.dot((light - pi).normalized()));
      shade[i] = S(o.ambient + o.diffuse * lambert);
      for (int c = 0; c < 3; ++c) normals[i * 3 + c] = S(n[c]);
    }
    if (o.shading == Shading::kTextureless) color = g.constant(Tensor<S>::full({nr * k, 3}, S(1)));
    color = mul_colwise(color, g.constant(shade));

    const Tensor<S> w = composite_weights(density.value(), deltas);
    Tensor<S> img({rows, o.width, 3});
    for (Index r = 0; r < nr; ++r) {
      for (Index i = 0; i < k; ++i) {
        for (int c = 0; c < 3; ++c) img[r * 3 + c] += w[r * k + i] * normals[(r * k + i) * 3 + c];
      }
    }
    result.normals = std::move(img);
  }

  const Var<S> out = composite(density, reshape(color, {nr, k, 3}), deltas, S(o.background));
  result.rgb = reshape(slice(out, 1, 0, 3), {rows, o.width, 3});
  result.opacity = reshape(slice(out, 1, 3, 1), {rows, o.width});
  return result;
}

AnnealState anneal_step(const AnnealState& state, Index step, Index total_steps) {
  if (step < 0 || step > total_steps) {
    throw std::invalid_argument("anneal_step: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
  }
  if (!(state.alpha_start > 0.0 && state.alpha_start <= 1.0)) {
    throw std::domain_error("anneal_step: alpha_start must be in (0, 1]");
  }
  AnnealState next = state;
  const double span = state.anneal_fraction * double(total_steps);
  if (!(span > 0.0) || double(step) >= span) {
    next.alpha = 1.0;
  } else {
    next.alpha = std::min(1.0, state.alpha_start + (1.0 - state.alpha_start) * double(step) / span);
  }
  return next;
}

#define IT3D_INSTANTIATE_RENDERER(S)                                                                       \
  template ParamSet<S> init_head_params<S>(Index, const HeadConfig&, std::uint64_t);                       \
  template FieldOutput<S> query_field<S>(const TriplaneVar<S>&, const VarSet<S>&, const Var<S>&, S);       \
  template Field<S> triplane_field<S>(const TriplaneVar<S>&, const VarSet<S>&, S);                         \
  template Tensor<S> composite_weights<S>(const Tensor<S>&, const Tensor<S>&);                             \
  template Var<S> composite<S>(const Var<S>&, const Var<S>&, const Tensor<S>&, S);                         \
  template RenderOutput<S> render<S>(Graph<S>&, const Field<S>&, const CameraPose&, const RenderOptions&, \
                                     Rng&);

IT3D_INSTANTIATE_RENDERER(float)
IT3D_INSTANTIATE_RENDERER(double)

}  // namespace it3d
