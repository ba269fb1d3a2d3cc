#pragma once

#include "it3d/diffmath/graph.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>

namespace it3d {

struct Point3 {
  double x = 0, y = 0, z = 0;
};

/// Plane order inside a triplane tensor. Plane (a, b) stores feature
/// [c, row, col] at col <- a, row <- b.
enum class PlaneAxis : Index { kXY = 0, kXZ = 1, kYZ = 2 };

inline constexpr std::array<const char*, 3> kPlaneNames = {"triplane.xy", "triplane.xz", "triplane.yz"};

/// Three axis-aligned C x R x R feature planes spanning [-extent, extent]^3,
/// stored as one [3, C, R, R] tensor in XY, XZ, YZ order.
template <typename S>
struct Triplane {
  Tensor<S> planes;
  S extent = S(1);

  Index channels() const { return planes.dim(1); }
  Index resolution() const { return planes.dim(2); }

  /// Plane k as its own [C, R, R] tensor.
  Tensor<S> plane(PlaneAxis axis) const;

  /// Names used in checkpoints ("triplane.xy", ...).
  std::map<std::string, Tensor<S>> named() const;
  static Triplane from_named(const std::map<std::string, Tensor<S>>& named, S extent);

  void validate() const;
};

enum class InitScheme { kGaussian, kZero };

/// Gaussian scheme draws N(0, 0.01^2) entries from `seed`.
template <typename S>
Triplane<S> init_triplane(Index channels, Index resolution, S extent, InitScheme scheme, std::uint64_t seed = 0);

/// A triplane living on a graph; `planes` is [3, C, R, R].
template <typename S>
struct TriplaneVar {
  Var<S> planes;
  S extent = S(1);
};

/// Features for points [N, 3]: per plane, orthogonal projection, align-corners
/// bilinear lookup with clamping, then concatenation XY | XZ | YZ -> [N, 3C].
/// Differentiable in the planes and the points.
template <typename S>
Var<S> sample_features(const TriplaneVar<S>& tp, const Var<S>& points);

/// Single-point convenience over a constant triplane; returns a length-3C vector.
template <typename S>
Tensor<S> sample_features(const Triplane<S>& tp, const Point3& p);

}  // namespace it3d
