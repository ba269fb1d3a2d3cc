#include "it3d/conditioner.hpp"
#include "it3d/diffmath/ops.hpp"
#include "it3d/image_io.hpp"
#include "it3d/renderer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace it3d;

namespace {

// Kolmogorov-Smirnov distance of samples against the uniform CDF on [lo, hi].
double ks_uniform(std::vector<double> x, double lo, double hi) {
  std::sort(x.begin(), x.end());
  double d = 0;
  const double n = double(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = (x[i] - lo) / (hi - lo);
    d = std::max({d, std::abs(f - double(i) / n), std::abs(double(i + 1) / n - f)});
  }
  return d;
}

// Ball of radius r0 with density `level` inside and a sharp sigmoid edge.
template <typename S>
FieldFn<S> ball(S r0, S level, S sharpness, S gray = S(0.3)) {
  return [=](const Var<S>& pts) {
    Graph<S>& g = pts.graph();
    const Index n = pts.dim(0);
    const Var<S> r2 = matmul(square(pts), g.constant(Tensor<S>::full({3, 1}, S(1))));
    const Var<S> r = sqrt(add_scalar(r2, S(1e-12)));
    const Var<S> inside = sigmoid(scale(add_scalar(neg(r), r0), sharpness));
    return FieldOutput<S>{reshape(scale(inside, level), {n}), g.constant(Tensor<S>::full({n, 3}, gray))};
  };
}

template <typename S>
Field<S> ball_field(S r0, S level, S sharpness) {
  auto f = ball<S>(r0, level, sharpness);
  return {f, f};
}

}  // namespace

TEST(Camera, SampleRangesAndDeterminism) {
  Rng rng(1);
  double gmin = 1e9, gmax = -1e9, rmin = 1e9, rmax = -1e9, fmin = 1e9, fmax = -1e9, amin = 1e9, amax = -1e9;
  for (int i = 0; i < 10000; ++i) {
    const auto p = sample_camera(rng);
    gmin = std::min(gmin, p.polar), gmax = std::max(gmax, p.polar);
    rmin = std::min(rmin, p.radius), rmax = std::max(rmax, p.radius);
    fmin = std::min(fmin, p.fov), fmax = std::max(fmax, p.fov);
    amin = std::min(amin, p.azimuth), amax = std::max(amax, p.azimuth);
  }
  EXPECT_GE(gmin, 25.0);
  EXPECT_LE(gmax, 110.0);
  EXPECT_LT(gmin, 26.0);
  EXPECT_GT(gmax, 109.0);
  EXPECT_GE(rmin, 3.0);
  EXPECT_LE(rmax, 3.6);
  EXPECT_GE(fmin, 70.0);
  EXPECT_LE(fmax, 80.0);
  EXPECT_GE(amin, 0.0);
  EXPECT_LT(amax, 360.0);

  Rng a(5), b(5);
  for (int i = 0; i < 10; ++i) {
    const auto pa = sample_camera(a), pb = sample_camera(b);
    EXPECT_EQ(pa.polar, pb.polar);
    EXPECT_EQ(pa.azimuth, pb.azimuth);
  }
}

TEST(Camera, FrontCameraSitsOnPlusX) {
  const CameraPose p{90.0, 0.0, 3.0, 75.0};
  const Eigen::Vector3d e = p.eye();
  EXPECT_NEAR(e.x(), 3.0, 1e-12);
  EXPECT_NEAR(e.y(), 0.0, 1e-12);
  EXPECT_NEAR(e.z(), 0.0, 1e-12);
  const Eigen::Vector3d top = CameraPose{0.0, 0.0, 2.0, 75.0}.eye();
  EXPECT_NEAR(top.z(), 2.0, 1e-12);
}

TEST(Rays, CenterUnitNormAndCorner) {
  const CameraPose pose{63.0, 211.0, 3.2, 72.0};
  const Index n = 9;
  const Rays rays = generate_rays(pose, n, n);
  const Eigen::Vector3d want = (-pose.eye()).normalized();
  const Eigen::Vector3d center = rays.directions.row((n / 2) * n + n / 2);
  EXPECT_LT((center - want).norm(), 1e-6);
  for (Index i = 0; i < rays.count(); ++i) EXPECT_NEAR(rays.directions.row(i).norm(), 1.0, 1e-6);

  // Pixel centres of a square image sit (1 - 1/W) of the way to the frustum edge.
  const double half = std::tan(72.0 * std::numbers::pi / 360.0);
  const double expect = std::atan(std::sqrt(2.0) * half * (1.0 - 1.0 / double(n)));
  for (Index idx : {Index(0), n - 1, n * (n - 1), n * n - 1}) {
    const double angle = std::acos(std::clamp(double(rays.directions.row(idx).dot(want)), -1.0, 1.0));
    EXPECT_NEAR(angle, expect, 1e-9);
  }
  EXPECT_NEAR(rays.near, 3.2 - std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(rays.far, 3.2 + std::sqrt(3.0), 1e-12);
  EXPECT_THROW(generate_rays(pose, 0, 4), std::invalid_argument);
}

TEST(Rays, ImageOrientation) {
  // Front view: screen right is forward x Z = +Y.
  const Rays rays = generate_rays(CameraPose{90.0, 0.0, 3.0, 75.0}, 4, 4);
  EXPECT_GT(rays.directions(0, 2), 0.0);                // top row looks up
  EXPECT_LT(rays.directions(0, 1), 0.0);                // left column looks toward -Y
  EXPECT_GT(rays.directions(4 * 4 - 1, 1), 0.0);
}

TEST(Sampling, UniformWeightsGiveUniformDraws) {
  Rng rng(2);
  std::vector<double> w(64, 0.37);
  const auto t = importance_depths(1.0, 5.0, w, 10000, rng);
  EXPECT_LT(ks_uniform(t, 1.0, 5.0), 0.05);
  // All-zero weights fall back to the same uniform density.
  std::vector<double> z(64, 0.0);
  EXPECT_LT(ks_uniform(importance_depths(1.0, 5.0, z, 10000, rng), 1.0, 5.0), 0.05);
  std::vector<double> bad(4, 1.0);
  bad[2] = -1.0;
  EXPECT_THROW(importance_depths(0.0, 1.0, bad, 3, rng), std::invalid_argument);
}

TEST(Sampling, SpikeStaysInItsBin) {
  Rng rng(3);
  std::vector<double> w(64, 0.0);
  w[17] = 2.0;
  const double near = 2.0, far = 6.0, h = (far - near) / 64.0;
  for (double t : importance_depths(near, far, w, 1000, rng)) {
    EXPECT_GE(t, near + 17 * h);
    EXPECT_LE(t, near + 18 * h);
  }
}

TEST(Sampling, MergedSamplesSortedWithExactCoverage) {
  Rng rng(4);
  const double near = 1.2, far = 4.9;
  RaySamples s{3, 128, {}, {}};
  for (int r = 0; r < 3; ++r) {
    auto u = stratified_depths(near, far, 64, &rng);
    std::vector<double> w(64);
    for (double& x : w) x = rng.uniform();
    auto t = importance_depths(near, far, w, 64, rng);
    s.depths.insert(s.depths.end(), u.begin(), u.end());
    s.depths.insert(s.depths.end(), t.begin(), t.end());
  }
  finalize_samples(s, near, far);
  ASSERT_EQ(s.depths.size(), 3u * 128u);
  for (int r = 0; r < 3; ++r) {
    double total = 0;
    for (int i = 0; i < 128; ++i) {
      const double t = s.depths[std::size_t(r * 128 + i)];
      if (i > 0) EXPECT_GT(t, s.depths[std::size_t(r * 128 + i - 1)]);
      EXPECT_GE(t, near);
      EXPECT_LE(t, far);
      EXPECT_GT(s.deltas[std::size_t(r * 128 + i)], 0.0);
      total += s.deltas[std::size_t(r * 128 + i)];
    }
    EXPECT_NEAR(total, far - near, 1e-12);
  }
  const auto mid = stratified_depths(0.0, 1.0, 4, nullptr);
  EXPECT_DOUBLE_EQ(mid[0], 0.125);
  EXPECT_DOUBLE_EQ(mid[3], 0.875);
}

TEST(Field, ScaledSigmoidValues) {
  Graphd g;
  auto zero = g.constant(Tensord::scalar(0.0));
  EXPECT_DOUBLE_EQ(scaled_sigmoid(zero, 1.0).value().item(), 0.5);
  EXPECT_DOUBLE_EQ(scaled_sigmoid(zero, 0.5).value().item(), 1.0);
  for (double a : {0.1, 0.5, 1.0}) {
    Graphd gg;
    auto x = gg.param("x", Tensord::scalar(0.0));
    auto grads = gg.backward(scaled_sigmoid(x, a));
    EXPECT_NEAR(grads["x"].item(), 0.25, 1e-12);
    Graphd gs;
    EXPECT_NEAR(scaled_sigmoid(gs.constant(Tensord::scalar(1e3)), a).value().item(), 1.0 / a, 1e-6);
  }
  EXPECT_THROW(scaled_sigmoid(zero, 0.0), std::domain_error);
  EXPECT_THROW(scaled_sigmoid(zero, 1.5), std::domain_error);
}

TEST(Field, ZeroHeadClosedForm) {
  auto head = init_head_params<double>(4, {}, 1);
  for (auto& [name, t] : head) t.array().setZero();
  auto tp = init_triplane<double>(4, 8, 1.0, InitScheme::kGaussian, 2);
  Graphd g;
  auto h = register_params(g, head, false);
  Rng rng(3);
  Tensord pts({5, 3});
  for (Index i = 0; i < pts.size(); ++i) pts[i] = rng.uniform(-1, 1);
  for (double alpha : {0.5, 1.0}) {
    const auto out = query_field(TriplaneVar<double>{g.constant(tp.planes), 1.0}, h, g.constant(pts), alpha);
    for (Index i = 0; i < 5; ++i) EXPECT_NEAR(out.density.value()[i], std::log(2.0), 1e-12);
    for (Index i = 0; i < 15; ++i) EXPECT_NEAR(out.albedo.value()[i], 0.5 / alpha, 1e-12);
  }
}

TEST(Field, AlbedoRangeAtAlphaOne) {
  auto head = init_head_params<double>(4, {}, 4);
  Rng rng(5);
  for (auto& [name, t] : head) {
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, 3.0);
  }
  auto tp = init_triplane<double>(4, 8, 1.0, InitScheme::kGaussian, 6);
  tp.planes.array() *= 100.0;
  Graphd g;
  Tensord pts({500, 3});
  for (Index i = 0; i < pts.size(); ++i) pts[i] = rng.uniform(-1, 1);
  const auto out = query_field(TriplaneVar<double>{g.constant(tp.planes), 1.0}, register_params(g, head, false),
                               g.constant(pts), 1.0);
  // Saturated logits round to the closed interval in floating point.
  EXPECT_GE(out.albedo.value().array().minCoeff(), 0.0);
  EXPECT_LE(out.albedo.value().array().maxCoeff(), 1.0);
  EXPECT_GE(out.density.value().array().minCoeff(), 0.0);

  tp.planes.array() /= 100.0;
  const auto mild = query_field(TriplaneVar<double>{g.constant(tp.planes), 1.0}, register_params(g, head, false),
                                g.constant(pts), 1.0);
  EXPECT_GT(mild.albedo.value().array().minCoeff(), 0.0);
  EXPECT_LT(mild.albedo.value().array().maxCoeff(), 1.0);
}

TEST(Field, DensityGradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto head = init_head_params<double>(3, {16}, 8);
  for (auto& [name, t] : head) {
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, 0.5);
  }
  auto tp = init_triplane<double>(3, 4, 1.0, InitScheme::kZero);
  for (Index i = 0; i < tp.planes.size(); ++i) tp.planes[i] = rng.normal();
  Tensord pts({8, 3});
  for (Index i = 0; i < pts.size(); ++i) pts[i] = rng.uniform(-0.9, 0.9);
  ParamSet<double> params = head;
  params["planes"] = tp.planes;
  params["points"] = pts;
  GraphBuilder<double> build = [](Graphd&, const VarSet<double>& v) {
    return query_field(TriplaneVar<double>{v.at("planes"), 1.0}, v, v.at("points"), 0.5).density;
  };
  GradCheckOptions opts;
  opts.eps = 1e-6;
  opts.tol = 1e-6;
  const auto report = grad_check(build, params, opts);
  EXPECT_TRUE(report.passed) << report.max_rel_error;

  // f32 with the f32 step and tolerance.
  ParamSet<float> pf;
  for (const auto& [n, t] : params) pf[n] = t.cast<float>();
  GraphBuilder<float> build_f = [](Graphf&, const VarSet<float>& v) {
    return query_field(TriplaneVar<float>{v.at("planes"), 1.0f}, v, v.at("points"), 0.5f).density;
  };
  GradCheckOptions of;
  of.eps = 1e-2;
  const auto rf = grad_check(build_f, pf, of);
  EXPECT_TRUE(rf.passed) << rf.max_rel_error;
}

TEST(Composite, ClosedFormCases) {
  Graphd g;
  Rng rng(9);
  Tensord colors({2, 5, 3});
  for (Index i = 0; i < colors.size(); ++i) colors[i] = rng.uniform();
  const Tensord deltas = Tensord::full({2, 5}, 0.3);
  const Tensord out = composite(g.constant(Tensord({2, 5})), g.constant(colors), deltas, 0.8).value();
  for (Index r = 0; r < 2; ++r) {
    for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out[r * 4 + c], 0.8);
    EXPECT_DOUBLE_EQ(out[r * 4 + 3], 0.0);
  }

  const Tensord one = composite(g.constant(Tensord({1, 1}, {std::log(2.0) / 0.5})),
                                g.constant(Tensord({1, 1, 3}, {1, 0, 0})), Tensord({1, 1}, {0.5}), 1.0).value();
  EXPECT_NEAR(one[3], 0.5, 1e-15);
  EXPECT_NEAR(one[0], 1.0, 1e-15);
  EXPECT_NEAR(one[1], 0.5, 1e-15);
}

TEST(Composite, UniformSlabTransmittance) {
  Rng rng(10);
  const double near = 1.3, far = 4.7, tau = 0.9;
  RaySamples s{1, 128, {}, {}};
  const auto u = stratified_depths(near, far, 64, &rng);
  std::vector<double> w(64, 1.0);
  const auto t = importance_depths(near, far, w, 64, rng);
  s.depths = u;
  s.depths.insert(s.depths.end(), t.begin(), t.end());
  finalize_samples(s, near, far);
  Tensord deltas({1, 128});
  for (Index i = 0; i < 128; ++i) deltas[i] = s.deltas[std::size_t(i)];
  Graphd g;
  const Tensord out = composite(g.constant(Tensord::full({1, 128}, tau)), g.constant(Tensord::full({1, 128, 3}, 0.0)),
                                deltas, 1.0).value();
  EXPECT_NEAR(out[3], 1.0 - std::exp(-tau * (far - near)), 1e-4);
  EXPECT_NEAR(out[0], std::exp(-tau * (far - near)), 1e-4);
}

TEST(Composite, WeightsBoundedOnRandomRays) {
  Rng rng(11);
  const Index rays = 10000, k = 16;
  Tensord tau({rays, k}), deltas({rays, k});
  for (Index i = 0; i < tau.size(); ++i) {
    tau[i] = std::exp(rng.uniform(-6, 4));
    deltas[i] = rng.uniform(0.0, 0.2);
  }
  const Tensord w = composite_weights(tau, deltas);
  EXPECT_GE(w.array().minCoeff(), 0.0);
  EXPECT_LE(w.array().maxCoeff(), 1.0);
  EXPECT_LE(w.matrix().rowwise().sum().maxCoeff(), 1.0 + 1e-12);
}

TEST(Composite, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  Tensord tau({3, 7}), colors({3, 7, 3}), deltas({3, 7});
  for (Index i = 0; i < tau.size(); ++i) {
    tau[i] = rng.uniform(0.0, 3.0);
    deltas[i] = rng.uniform(0.05, 0.4);
  }
  for (Index i = 0; i < colors.size(); ++i) colors[i] = rng.uniform();
  GraphBuilder<double> build = [&](Graphd&, const VarSet<double>& v) {
    return composite(v.at("tau"), v.at("color"), deltas, 0.7);
  };
  GradCheckOptions opts;
  opts.eps = 1e-6;
  opts.tol = 1e-6;
  const auto report = grad_check(build, {{"tau", tau}, {"color", colors}}, opts);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Render, EmptyFieldIsBackground) {
  Field<double> empty;
  empty.eval = [](const Var<double>& pts) {
    Graphd& g = pts.graph();
    return FieldOutput<double>{g.constant(Tensord({pts.dim(0)})), g.constant(Tensord::full({pts.dim(0), 3}, 0.2))};
  };
  empty.detached = empty.eval;
  Graphd g;
  Rng rng(13);
  RenderOptions o;
  o.height = o.width = 8;
  const auto out = render(g, empty, CameraPose{}, o, rng);
  EXPECT_EQ(out.rgb.shape(), (Shape{8, 8, 3}));
  EXPECT_EQ(out.rgb.value().array().minCoeff(), 1.0);
  EXPECT_EQ(out.rgb.value().array().maxCoeff(), 1.0);
  EXPECT_EQ(out.opacity.value().array().maxCoeff(), 0.0);
}

TEST(Render, SphereSilhouetteIoU) {
  const double r0 = 0.6;
  const CameraPose pose{70.0, 40.0, 3.3, 75.0};
  RenderOptions o;
  set_checked_mode(true);
  Graphf g;
  Rng rng(14);
  const auto out = render(g, ball_field<float>(float(r0), 60.0f, 200.0f), pose, o, rng);
  set_checked_mode(false);
  const Rays rays = generate_rays(pose, 64, 64);
  Index inter = 0, uni = 0;
  for (Index i = 0; i < rays.count(); ++i) {
    // A pixel is inside the analytic silhouette when its ray passes within r0 of the centre.
    const Eigen::Vector3d d = rays.directions.row(i);
    const double closest = (rays.origin - rays.origin.dot(d) * d).norm();
    const bool disc = closest < r0;
    const bool mask = out.opacity.value()[i] > 0.5f;
    inter += disc && mask;
    uni += disc || mask;
  }
  const double iou = double(inter) / double(uni);
  EXPECT_GT(iou, 0.95) << iou;
}

TEST(Render, LambertianNormalsFaceTheCamera) {
  Graphd g;
  Rng rng(15);
  RenderOptions o;
  o.height = o.width = 9;
  o.n_uniform = o.n_importance = 32;
  o.shading = Shading::kLambertian;
  const CameraPose pose{90.0, 0.0, 3.0, 60.0};
  const auto out = render(g, ball_field<double>(0.6, 60.0, 40.0), pose, o, rng);
  ASSERT_TRUE(out.normals.has_value());
  const Tensord& n = *out.normals;
  const Index c = 4 * 9 + 4;
  EXPECT_GT(n[c * 3], 0.9);  // centre pixel normal points toward +X, the camera side
  const Tensord rgb = out.rgb.value();
  for (Index i = 0; i < rgb.size(); ++i) {
    EXPECT_GE(rgb[i], 0.0);
    EXPECT_LE(rgb[i], 1.0);
  }

  o.shading = Shading::kTextureless;
  Graphd g2;
  const auto flat = render(g2, ball_field<double>(0.6, 60.0, 40.0), pose, o, rng);
  EXPECT_GT(flat.rgb.value()[c * 3], 0.9);  // white under a near-frontal light, grey albedo ignored
}

TEST(Render, GradientsMatchFiniteDifferences) {
  const Index channels = 2;
  Rng rng(16);
  auto head = init_head_params<double>(channels, {8}, 17);
  for (auto& [name, t] : head) {
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, 0.5);
  }
  ParamSet<double> params = head;
  Tensord planes({3, channels, 4, 4});
  for (Index i = 0; i < planes.size(); ++i) planes[i] = rng.normal();
  params["planes"] = planes;
  RenderOptions o;
  o.height = o.width = 4;
  o.n_uniform = 16;
  o.n_importance = 0;
  const CameraPose pose{80.0, 30.0, 3.0, 75.0};
  GraphBuilder<double> build = [&](Graphd& g, const VarSet<double>& v) {
    Rng local(18);
    return render(g, triplane_field(TriplaneVar<double>{v.at("planes"), 1.0}, v, 0.5), pose, o, local).rgb;
  };
  GradCheckOptions opts;
  opts.eps = 1e-6;
  opts.tol = 5e-3;
  const auto report = grad_check(build, params, opts);
  EXPECT_LT(report.max_rel_error, 1e-6);
  EXPECT_TRUE(report.passed);
}

TEST(Anneal, ScheduleEndpointsAndMonotone) {
  AnnealState s;
  EXPECT_DOUBLE_EQ(anneal_step(s, 0, 1000).alpha, 0.5);
  EXPECT_EQ(anneal_step(s, 800, 1000).alpha, 1.0);
  EXPECT_EQ(anneal_step(s, 1000, 1000).alpha, 1.0);
  s.anneal_fraction = 0.3;
  EXPECT_EQ(anneal_step(s, 3, 10).alpha, 1.0);
  double prev = 0;
  Rng rng(19);
  std::vector<Index> steps;
  for (int i = 0; i < 200; ++i) steps.push_back(Index(rng.below(1001)));
  std::sort(steps.begin(), steps.end());
  for (Index st : steps) {
    const double a = anneal_step(s, st, 1000).alpha;
    EXPECT_GE(a, prev);
    EXPECT_GT(a, 0.0);
    EXPECT_LE(a, 1.0);
    prev = a;
  }
  EXPECT_THROW(anneal_step(s, 1001, 1000), std::invalid_argument);
}

TEST(Render, ShadingPick) {
  Rng rng(20);
  int textureless = 0;
  for (int i = 0; i < 10000; ++i) textureless += pick_shading(rng, Shading::kLambertian) == Shading::kTextureless;
  EXPECT_NEAR(textureless / 10000.0, 0.1, 0.015);
  EXPECT_EQ(pick_shading(rng, Shading::kAlbedo), Shading::kAlbedo);
}

TEST(ImageIo, PngRoundTrip) {
  Tensorf img({3, 5, 3});
  Rng rng(21);
  for (Index i = 0; i < img.size(); ++i) img[i] = float(rng.uniform());
  img[0] = 1.7f;  // clamped
  const auto path = std::filesystem::temp_directory_path() / "it3d_roundtrip.png";
  save_png(path, img);
  const Tensorf back = load_png(path);
  ASSERT_EQ(back.shape(), img.shape());
  EXPECT_FLOAT_EQ(back[0], 1.0f);
  for (Index i = 1; i < img.size(); ++i) {
    // One 8-bit step of the sRGB curve is at most ~0.0125 in linear units near white.
    EXPECT_NEAR(back[i], img[i], 0.013f);
  }
  save_png(path, img, false);
  const Tensorf raw = load_png(path, false);
  for (Index i = 1; i < img.size(); ++i) EXPECT_NEAR(raw[i], img[i], 0.5f / 255.0f + 1e-6f);
  std::filesystem::remove(path);
  EXPECT_NEAR(linear_to_srgb(0.5), 0.7353569830524495, 1e-12);
  EXPECT_NEAR(srgb_to_linear(linear_to_srgb(0.2)), 0.2, 1e-12);
}

TEST(Render, RowBandsTileTheImage) {
  Rng rng(31);
  auto head = init_head_params<double>(2, {8}, 32);
  for (auto& [name, t] : head) {
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, 0.5);
  }
  Tensord planes({3, 2, 4, 4});
  for (Index i = 0; i < planes.size(); ++i) planes[i] = rng.normal();
  const CameraPose pose{75.0, 40.0, 3.2, 70.0};
  auto run = [&](Index begin, Index count) {
    Graphd g;
    const VarSet<double> hv = register_params(g, head, false);
    RenderOptions o;
    o.height = 6;
    o.width = 5;
    o.n_uniform = 8;
    o.n_importance = 0;
    o.jitter = false;
    o.row_begin = begin;
    o.row_count = count;
    Rng local(0);
    return render(g, triplane_field(TriplaneVar<double>{g.constant(planes), 1.0}, hv, 0.5), pose, o, local)
        .rgb.value();
  };
  const Tensord full = run(0, 0);
  const Tensord top = run(0, 4), bottom = run(4, 2);
  EXPECT_EQ(top.shape(), (Shape{4, 5, 3}));
  for (Index i = 0; i < top.size(); ++i) EXPECT_EQ(top[i], full[i]);
  for (Index i = 0; i < bottom.size(); ++i) EXPECT_EQ(bottom[i], full[top.size() + i]);
  EXPECT_THROW(run(5, 2), std::invalid_argument);
}
