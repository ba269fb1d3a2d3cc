#include "it3d/diffmath/grad_check.hpp"
#include "it3d/diffmath/ops.hpp"
#include "it3d/triplane.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace it3d;

namespace {

// Scalar reference: align-corners bilinear on a [C, R, R] plane at (u, v) in [-1, 1].
double ref_bilinear(const Tensord& planes, Index k, Index c, double u, double v) {
  const Index C = planes.dim(1), R = planes.dim(2);
  auto at = [&](Index row, Index col) { return planes[((k * C + c) * R + row) * R + col]; };
  auto to_pix = [&](double t) { return std::clamp((t + 1.0) * 0.5 * double(R - 1), 0.0, double(R - 1)); };
  const double px = to_pix(u), py = to_pix(v);
  const Index x0 = std::min<Index>(Index(std::floor(px)), R - 1), y0 = std::min<Index>(Index(std::floor(py)), R - 1);
  const Index x1 = std::min<Index>(x0 + 1, R - 1), y1 = std::min<Index>(y0 + 1, R - 1);
  const double fx = px - double(x0), fy = py - double(y0);
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

Triplane<double> random_triplane(Index c, Index r, double extent, std::uint64_t seed) {
  Triplane<double> tp = init_triplane<double>(c, r, extent, InitScheme::kZero);
  Rng rng(seed);
  for (Index i = 0; i < tp.planes.size(); ++i) tp.planes[i] = rng.normal();
  return tp;
}

}  // namespace

TEST(Triplane, InitShapesAndSchemes) {
  auto z = init_triplane<float>(4, 8, 1.0f, InitScheme::kZero);
  EXPECT_EQ(z.planes.shape(), (Shape{3, 4, 8, 8}));
  EXPECT_EQ(z.planes.array().abs().maxCoeff(), 0.0f);

  auto g = init_triplane<double>(8, 16, 1.0, InitScheme::kGaussian, 11);
  const double m = g.planes.array().mean();
  const double sd = std::sqrt((g.planes.array() - m).square().mean());
  EXPECT_NEAR(m, 0.0, 1e-3);
  EXPECT_NEAR(sd, 0.01, 1e-3);
  EXPECT_TRUE(init_triplane<double>(8, 16, 1.0, InitScheme::kGaussian, 11).planes == g.planes);
  EXPECT_THROW(init_triplane<float>(0, 8, 1.0f, InitScheme::kZero), std::invalid_argument);
}

TEST(Triplane, CornersHitTexels) {
  auto tp = random_triplane(2, 5, 2.0, 1);
  // (x, y, z) = (-e, e, -e): XY -> (col 0, row R-1), XZ -> (col 0, row 0), YZ -> (col R-1, row 0).
  const Tensord f = sample_features(tp, Point3{-2.0, 2.0, -2.0});
  const Index C = 2, R = 5;
  auto texel = [&](Index k, Index c, Index row, Index col) { return tp.planes[((k * C + c) * R + row) * R + col]; };
  for (Index c = 0; c < C; ++c) {
    EXPECT_DOUBLE_EQ(f[0 * C + c], texel(0, c, R - 1, 0));
    EXPECT_DOUBLE_EQ(f[1 * C + c], texel(1, c, 0, 0));
    EXPECT_DOUBLE_EQ(f[2 * C + c], texel(2, c, 0, R - 1));
  }
}

TEST(Triplane, ConstantPlanesGiveConstantFeatures) {
  auto tp = init_triplane<double>(3, 7, 1.0, InitScheme::kZero);
  tp.planes.array().setConstant(0.25);
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const Tensord f = sample_features(tp, Point3{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)});
    for (Index j = 0; j < f.size(); ++j) EXPECT_NEAR(f[j], 0.25, 1e-12);
  }
}

TEST(Triplane, MatchesScalarReference) {
  const double extent = 1.3;
  auto tp = random_triplane(3, 9, extent, 4);
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const Point3 p{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
    const Tensord f = sample_features(tp, p);
    const double uv[3][2] = {{p.x, p.y}, {p.x, p.z}, {p.y, p.z}};
    for (Index k = 0; k < 3; ++k) {
      for (Index c = 0; c < 3; ++c) {
        EXPECT_NEAR(f[k * 3 + c], ref_bilinear(tp.planes, k, c, uv[k][0] / extent, uv[k][1] / extent), 1e-6);
      }
    }
  }
}

TEST(Triplane, LinearAlongTexelEdges) {
  auto tp = random_triplane(2, 5, 1.0, 6);
  // Texel centers sit at -1, -0.5, 0, 0.5, 1; the midpoint of two samples on a
  // shared cell is the average of the two.
  const Point3 a{-0.5, 0.0, 0.5}, b{0.0, 0.0, 0.5}, mid{-0.25, 0.0, 0.5};
  const Tensord fa = sample_features(tp, a), fb = sample_features(tp, b), fm = sample_features(tp, mid);
  for (Index j = 0; j < fm.size(); ++j) EXPECT_NEAR(fm[j], 0.5 * (fa[j] + fb[j]), 1e-12);
}

TEST(Triplane, WeightsSumToOne) {
  // Feature of a one-hot plane is the bilinear weight of that texel; summing
  // over all one-hot planes gives 1.
  const Index R = 4;
  Rng rng(7);
  const Point3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  double total[3] = {0, 0, 0};
  for (Index t = 0; t < R * R; ++t) {
    auto tp = init_triplane<double>(1, R, 1.0, InitScheme::kZero);
    for (Index k = 0; k < 3; ++k) tp.planes[k * R * R + t] = 1.0;
    const Tensord f = sample_features(tp, p);
    for (Index k = 0; k < 3; ++k) total[k] += f[k];
  }
  for (double s : total) EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Triplane, GradientsMatchFiniteDifferences) {
  auto tp = random_triplane(2, 4, 1.0, 8);
  Rng rng(9);
  Tensord pts({6, 3});
  for (Index i = 0; i < pts.size(); ++i) pts[i] = rng.uniform(-0.9, 0.9);
  ParamSet<double> params{{"planes", tp.planes}, {"points", pts}};
  GraphBuilder<double> build = [](Graphd&, const VarSet<double>& v) {
    return sample_features(TriplaneVar<double>{v.at("planes"), 1.0}, v.at("points"));
  };
  GradCheckOptions opts;
  opts.eps = 1e-6;
  opts.tol = 1e-6;
  const auto report = grad_check(build, params, opts);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Triplane, NamedRoundTrip) {
  auto tp = random_triplane(2, 3, 1.0, 10);
  const auto named = tp.named();
  ASSERT_EQ(named.size(), 3u);
  EXPECT_EQ(named.at("triplane.xz").shape(), (Shape{2, 3, 3}));
  const auto back = Triplane<double>::from_named(named, 1.0);
  EXPECT_TRUE(back.planes == tp.planes);
}

TEST(Triplane, RejectsBadShapes) {
  Graphd g;
  auto bad = g.constant(Tensord({2, 2, 3, 3}));
  auto pts = g.constant(Tensord({4, 3}));
  EXPECT_THROW(sample_features(TriplaneVar<double>{bad, 1.0}, pts), ShapeError);
  auto good = g.constant(Tensord({3, 2, 3, 3}));
  EXPECT_THROW(sample_features(TriplaneVar<double>{good, 1.0}, g.constant(Tensord({4, 2}))), ShapeError);
}
