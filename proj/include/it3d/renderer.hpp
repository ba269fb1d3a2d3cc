#pragma once

#include "it3d/diffmath/grad_check.hpp"
#include "it3d/rng.hpp"
#include "it3d/triplane.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <span>

namespace it3d {

/// Spherical camera looking at the origin. Z is up; azimuth 0 looks from +X
/// (the front view). Angles in degrees, fov is vertical.
struct CameraPose {
  double polar = 90.0;
  double azimuth = 0.0;
  double radius = 3.3;
  double fov = 75.0;

  Eigen::Vector3d eye() const;
};

struct CameraRanges {
  double polar_min = 25.0, polar_max = 110.0;
  double radius_min = 3.0, radius_max = 3.6;
  double fov_min = 70.0, fov_max = 80.0;
};

/// Uniform draws over the ranges; azimuth uniform in [0, 360).
CameraPose sample_camera(Rng& rng, const CameraRanges& ranges = {});

/// One ray per pixel centre, row-major from the top-left pixel.
struct Rays {
  Index height = 0, width = 0;
  Eigen::Vector3d origin;
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> directions;
  double near = 0.0, far = 0.0;

  Index count() const { return height * width; }
};

/// Pinhole rays; near/far = radius -/+ sqrt(3) * extent, near clipped to > 0.
Rays generate_rays(const CameraPose& pose, Index height, Index width, double extent = 1.0);

/// Depths and segment lengths for a batch of rays, `per_ray` samples each,
/// stored ray-major. Segment edges are the midpoints between depths with
/// near/far at the ends, so the lengths of a ray sum to far - near.
struct RaySamples {
  Index rays = 0, per_ray = 0;
  std::vector<double> depths;
  std::vector<double> deltas;
};

/// Stratified draws: depth k of a ray lies in stratum [near + k h, near + (k+1) h).
/// Without jitter the stratum midpoints are used.
std::vector<double> stratified_depths(double near, double far, Index n, Rng* jitter);

/// `n` inverse-CDF draws from the piecewise-constant density over `n_bins`
/// equal strata of [near, far] with the given non-negative weights. All-zero
/// weights fall back to the uniform density.
std::vector<double> importance_depths(double near, double far, std::span<const double> weights, Index n,
                                      Rng& rng);

/// Sorts, nudges ties apart and fills the segment lengths.
void finalize_samples(RaySamples& s, double near, double far);

/// Density [N] and albedo [N, 3] of a field.
template <typename S>
struct FieldOutput {
  Var<S> density;
  Var<S> albedo;
};

template <typename S>
using FieldFn = std::function<FieldOutput<S>(const Var<S>& points)>;

/// `eval` may read trainable values; `detached` must only create constants on
/// the graph of its points, and is used for the coarse pass and normals.
template <typename S>
struct Field {
  FieldFn<S> eval;
  FieldFn<S> detached;
};

struct HeadConfig {
  Index hidden = 64;
};

/// head.fc1 [3C, hidden], head.fc2 [hidden, 4]; truncated-normal(0.02) weights.
template <typename S>
ParamSet<S> init_head_params(Index channels, const HeadConfig& cfg, std::uint64_t seed);

/// tau = softplus(o_0), albedo = scaled_sigmoid(o_1..3, alpha) of the head MLP
/// over triplane features at `points` [N, 3].
template <typename S>
FieldOutput<S> query_field(const TriplaneVar<S>& tp, const VarSet<S>& head, const Var<S>& points, S alpha);

/// Field over a triplane and head that live on a graph.
template <typename S>
Field<S> triplane_field(const TriplaneVar<S>& tp, const VarSet<S>& head, S alpha);

/// Volume compositing over [R, K] densities, [R, K, 3] colours and fixed
/// segment lengths [R, K]: returns [R, 4] = (rgb, opacity) with
/// rgb = sum w_k c_k + (1 - sum w_k) background.
template <typename S>
Var<S> composite(const Var<S>& density, const Var<S>& color, const Tensor<S>& deltas, S background);

/// Compositing weights w_k as a plain [R, K] tensor.
template <typename S>
Tensor<S> composite_weights(const Tensor<S>& density, const Tensor<S>& deltas);

enum class Shading { kAlbedo, kLambertian, kTextureless };

struct RenderOptions {
  Index height = 64, width = 64;
  Index n_uniform = 64, n_importance = 64;
  Shading shading = Shading::kAlbedo;
  double background = 1.0;
  double extent = 1.0;
  bool jitter = true;
  double ambient = 0.1, diffuse = 0.9;
  /// Renders only image rows [row_begin, row_begin + row_count); 0 means all.
  /// Outputs then have row_count rows.
  Index row_begin = 0, row_count = 0;
};

/// Picks textureless with probability `textureless_prob` when the base mode is
/// lambertian, otherwise returns `base`.
Shading pick_shading(Rng& rng, Shading base, double textureless_prob = 0.1);

template <typename S>
struct RenderOutput {
  Var<S> rgb;      // [H, W, 3]
  Var<S> opacity;  // [H, W]
  std::optional<Tensor<S>> normals;  // [H, W, 3], composited, shaded modes only
};

/// Rays -> stratified samples -> detached coarse pass -> importance samples ->
/// field -> shading -> compositing. Sample jitter and the light come from `rng`.
template <typename S>
RenderOutput<S> render(Graph<S>& g, const Field<S>& field, const CameraPose& pose, const RenderOptions& opts,
                       Rng& rng);

/// Linear alpha schedule from alpha_start to 1 over anneal_fraction of training.
struct AnnealState {
  double alpha = 0.5;
  double alpha_start = 0.5;
  double anneal_fraction = 0.8;
};

AnnealState anneal_step(const AnnealState& state, Index step, Index total_steps);

}  // namespace it3d
