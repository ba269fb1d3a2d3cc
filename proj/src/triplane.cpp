#include "it3d/triplane.hpp"

#include "it3d/diffmath/ops.hpp"
#include "it3d/rng.hpp"

namespace it3d {

template <typename S>
Tensor<S> Triplane<S>::plane(PlaneAxis axis) const {
  const Index c = channels(), r = resolution();
  const Index n = c * r * r;
  Tensor<S> out({c, r, r});
  const auto k = static_cast<Index>(axis);
  std::copy_n(planes.data() + k * n, n, out.data());
  return out;
}

template <typename S>
std::map<std::string, Tensor<S>> Triplane<S>::named() const {
  std::map<std::string, Tensor<S>> m;
  for (Index k = 0; k < 3; ++k) m.emplace(kPlaneNames[std::size_t(k)], plane(static_cast<PlaneAxis>(k)));
  return m;
}

template <typename S>
Triplane<S> Triplane<S>::from_named(const std::map<std::string, Tensor<S>>& named, S extent) {
  const Tensor<S>& first = named.at(kPlaneNames[0]);
  if (first.rank() != 3) throw_shape_error("Triplane::from_named", "planes must be [C, R, R]", first.shape());
  const Index c = first.dim(0), r = first.dim(1), n = c * r * r;
  Triplane<S> tp;
  tp.extent = extent;
  tp.planes = Tensor<S>({3, c, r, r});
  for (Index k = 0; k < 3; ++k) {
    const Tensor<S>& p = named.at(kPlaneNames[std::size_t(k)]);
    if (p.shape() != first.shape()) {
      throw_shape_error("Triplane::from_named", "all planes must share C and R", first.shape(), p.shape());
    }
    std::copy_n(p.data(), n, tp.planes.data() + k * n);
  }
  tp.validate();
  return tp;
}

template <typename S>
void Triplane<S>::validate() const {
  if (planes.rank() != 4 || planes.dim(0) != 3 || planes.dim(2) != planes.dim(3)) {
    throw_shape_error("Triplane", "planes must be [3, C, R, R]", planes.shape());
  }
  if (!planes.all_finite()) throw std::domain_error("Triplane: non-finite entries");
  if (!(extent > S(0))) throw std::domain_error("Triplane: extent must be positive");
}

template <typename S>
Triplane<S> init_triplane(Index channels, Index resolution, S extent, InitScheme scheme, std::uint64_t seed) {
  if (channels < 1 || resolution < 1) {
    throw std::invalid_argument("init_triplane: channels and resolution must be >= 1 (got " +
                                std::to_string(channels) + ", " + std::to_string(resolution) + ")");
  }
  Triplane<S> tp;
  tp.extent = extent;
  tp.planes = Tensor<S>({3, channels, resolution, resolution});
  if (scheme == InitScheme::kGaussian) {
    Rng rng(seed);
    for (Index i = 0; i < tp.planes.size(); ++i) tp.planes[i] = S(rng.normal(0.0, 0.01));
  }
  tp.validate();
  return tp;
}

template <typename S>
Var<S> sample_features(const TriplaneVar<S>& tp, const Var<S>& points) {
  const Shape& ps = tp.planes.shape();
  if (ps.size() != 4 || ps[0] != 3 || ps[2] != ps[3]) {
    throw_shape_error("sample_features", "planes must be [3, C, R, R]", ps);
  }
  if (points.value().rank() != 2 || points.dim(1) != 3) {
    throw_shape_error("sample_features", "points must be [N, 3]", points.shape());
  }
  const Index c = ps[1], r = ps[2];
  const S inv_extent = S(1) / tp.extent;
  const Var<S> x = slice(points, 1, 0, 1);
  const Var<S> y = slice(points, 1, 1, 1);
  const Var<S> z = slice(points, 1, 2, 1);
  const std::array<std::array<Var<S>, 2>, 3> axes = {{{x, y}, {x, z}, {y, z}}};
  std::vector<Var<S>> feats;
  for (Index k = 0; k < 3; ++k) {
    const Var<S> plane = reshape(slice(tp.planes, 0, k, 1), {c, r, r});
    const auto& [a, b] = axes[std::size_t(k)];
    const Var<S> uv = scale(concat<S>({a, b}, 1), inv_extent);
    feats.push_back(grid_sample_bilinear(plane, uv));
  }
  return concat<S>(feats, 1);
}

template <typename S>
Tensor<S> sample_features(const Triplane<S>& tp, const Point3& p) {
  Graph<S> g;
  TriplaneVar<S> tv{g.constant(tp.planes), tp.extent};
  const Var<S> pts = g.constant(Tensor<S>({1, 3}, {S(p.x), S(p.y), S(p.z)}));
  return sample_features(tv, pts).value().reshaped({3 * tp.channels()});
}

template struct Triplane<float>;
template struct Triplane<double>;
template Triplane<float> init_triplane<float>(Index, Index, float, InitScheme, std::uint64_t);
template Triplane<double> init_triplane<double>(Index, Index, double, InitScheme, std::uint64_t);
template Var<float> sample_features<float>(const TriplaneVar<float>&, const Var<float>&);
template Var<double> sample_features<double>(const TriplaneVar<double>&, const Var<double>&);
template Tensor<float> sample_features<float>(const Triplane<float>&, const Point3&);
template Tensor<double> sample_features<double>(const Triplane<double>&, const Point3&);

}  // namespace it3d
