#include "it3d/diffmath/primitive_suite.hpp"

#include "it3d/diffmath/ops.hpp"

#include <algorithm>
#include <cmath>

namespace it3d {

namespace {

template <typename S>
Tensor<S> randn(Rng& rng, Shape shape, double stddev = 1.0) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = S(rng.normal(0.0, stddev));
  return t;
}

template <typename S>
Tensor<S> uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = S(rng.uniform(lo, hi));
  return t;
}

/// Values bounded away from zero with random sign.
template <typename S>
Tensor<S> nonzero(Rng& rng, Shape shape) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = S((rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 2.0));
  return t;
}

Index extent(Rng& rng, Index lo, Index hi) { return lo + static_cast<Index>(rng.below(std::uint64_t(hi - lo + 1))); }

template <typename S>
PrimitiveCheck<S> unary_check(std::string name, std::function<Var<S>(const Var<S>&)> op, double lo, double hi) {
  return {std::move(name), [op, lo, hi](std::uint64_t seed) {
            Rng rng(seed);
            GradCase<S> c;
            c.params["x"] = uniform<S>(rng, {extent(rng, 1, 4), extent(rng, 1, 5)}, lo, hi);
            c.builder = [op](Graph<S>&, const VarSet<S>& v) { return op(v.at("x")); };
            return c;
          }};
}

template <typename S>
PrimitiveCheck<S> binary_check(std::string name, std::function<Var<S>(const Var<S>&, const Var<S>&)> op,
                               bool scalar_b, bool positive_b) {
  return {std::move(name), [op, scalar_b, positive_b](std::uint64_t seed) {
            Rng rng(seed);
            GradCase<S> c;
            const Shape shape{extent(rng, 1, 4), extent(rng, 1, 5)};
            c.params["a"] = randn<S>(rng, shape);
            const Shape bshape = scalar_b ? Shape{1} : shape;
            c.params["b"] = positive_b ? nonzero<S>(rng, bshape) : randn<S>(rng, bshape);
            c.builder = [op](Graph<S>&, const VarSet<S>& v) { return op(v.at("a"), v.at("b")); };
            return c;
          }};
}

}  // namespace

template <typename S>
std::vector<PrimitiveCheck<S>> primitive_checks() {
  std::vector<PrimitiveCheck<S>> checks;
  using V = Var<S>;

  checks.push_back(binary_check<S>("add", [](const V& a, const V& b) { return add(a, b); }, false, false));
  checks.push_back(binary_check<S>("add_broadcast", [](const V& a, const V& b) { return add(a, b); }, true, false));
  checks.push_back(binary_check<S>("sub", [](const V& a, const V& b) { return sub(a, b); }, false, false));
  checks.push_back(binary_check<S>("sub_broadcast", [](const V& a, const V& b) { return sub(a, b); }, true, false));
  checks.push_back(binary_check<S>("mul", [](const V& a, const V& b) { return mul(a, b); }, false, false));
  checks.push_back(binary_check<S>("mul_broadcast", [](const V& a, const V& b) { return mul(a, b); }, true, false));
  checks.push_back(binary_check<S>("div", [](const V& a, const V& b) { return div(a, b); }, false, true));
  checks.push_back(binary_check<S>("div_broadcast", [](const V& a, const V& b) { return div(a, b); }, true, true));

  checks.push_back(unary_check<S>("scale", [](const V& x) { return scale(x, S(-1.7)); }, -2, 2));
  checks.push_back(unary_check<S>("add_scalar", [](const V& x) { return add_scalar(x, S(0.3)); }, -2, 2));
  checks.push_back(unary_check<S>("neg", [](const V& x) { return neg(x); }, -2, 2));
  checks.push_back(unary_check<S>("exp", [](const V& x) { return exp(x); }, -2, 2));
  checks.push_back(unary_check<S>("log", [](const V& x) { return log(x); }, 0.5, 3));
  checks.push_back(unary_check<S>("sqrt", [](const V& x) { return sqrt(x); }, 0.5, 3));
  checks.push_back(unary_check<S>("square", [](const V& x) { return square(x); }, -2, 2));
  checks.push_back(unary_check<S>("cos", [](const V& x) { return cos(x); }, -3, 3));
  checks.push_back(unary_check<S>("sigmoid", [](const V& x) { return sigmoid(x); }, -4, 4));
  checks.push_back(unary_check<S>("softplus", [](const V& x) { return softplus(x); }, -4, 4));
  checks.push_back(unary_check<S>("silu", [](const V& x) { return silu(x); }, -4, 4));
  for (double alpha : {0.1, 0.5, 1.0}) {
    checks.push_back(unary_check<S>("scaled_sigmoid_a" + std::to_string(alpha).substr(0, 3),
                                    [alpha](const V& x) { return scaled_sigmoid(x, S(alpha)); }, -6, 6));
  }

  checks.push_back({"add_rowwise", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index n = extent(rng, 1, 5), k = extent(rng, 1, 4);
                      c.params["x"] = randn<S>(rng, {n, k});
                      c.params["v"] = randn<S>(rng, {k});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) { return add_rowwise(v.at("x"), v.at("v")); };
                      return c;
                    }});
  checks.push_back({"mul_rowwise", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index n = extent(rng, 1, 5), k = extent(rng, 1, 4);
                      c.params["x"] = randn<S>(rng, {n, k});
                      c.params["v"] = randn<S>(rng, {k});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) { return mul_rowwise(v.at("x"), v.at("v")); };
                      return c;
                    }});
  checks.push_back({"mul_colwise", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index n = extent(rng, 1, 5), k = extent(rng, 1, 4);
                      c.params["x"] = randn<S>(rng, {n, k});
                      c.params["v"] = randn<S>(rng, {n});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) { return mul_colwise(v.at("x"), v.at("v")); };
                      return c;
                    }});
  checks.push_back({"channel_affine", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index ch = extent(rng, 1, 4);
                      c.params["x"] = randn<S>(rng, {ch, extent(rng, 1, 4), extent(rng, 1, 4)});
                      c.params["s"] = randn<S>(rng, {ch});
                      c.params["b"] = randn<S>(rng, {ch});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) {
                        return channel_affine(v.at("x"), v.at("s"), v.at("b"));
                      };
                      return c;
                    }});
  checks.push_back({"matmul", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index m = extent(rng, 1, 4), k = extent(rng, 1, 4), n = extent(rng, 1, 4);
                      c.params["a"] = randn<S>(rng, {m, k});
                      c.params["b"] = randn<S>(rng, {k, n});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) { return matmul(v.at("a"), v.at("b")); };
                      return c;
                    }});
  checks.push_back({"transpose", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      c.params["a"] = randn<S>(rng, {extent(rng, 1, 4), extent(rng, 1, 4)});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) { return transpose(v.at("a")); };
                      return c;
                    }});
  checks.push_back({"linear", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index n = extent(rng, 1, 4), in = extent(rng, 1, 4), out = extent(rng, 1, 4);
                      c.params["x"] = randn<S>(rng, {n, in});
                      c.params["w"] = randn<S>(rng, {in, out});
                      c.params["b"] = randn<S>(rng, {out});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) {
                        return linear(v.at("x"), v.at("w"), v.at("b"));
                      };
                      return c;
                    }});
  checks.push_back({"reshape", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index a = extent(rng, 1, 4), b = extent(rng, 1, 4);
                      c.params["x"] = randn<S>(rng, {a, b});
                      c.builder = [a, b](Graph<S>&, const VarSet<S>& v) {
                        // Reshape then a nonlinearity so the gradient depends on position.
                        return mul(reshape(v.at("x"), {b, a}), reshape(v.at("x"), {b, a}));
                      };
                      return c;
                    }});
  checks.push_back({"concat", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index axis = static_cast<Index>(rng.below(3));
                      Shape s1{extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 3)};
                      Shape s2 = s1;
                      s2[std::size_t(axis)] = extent(rng, 1, 3);
                      c.params["a"] = randn<S>(rng, s1);
                      c.params["b"] = randn<S>(rng, s2);
                      c.builder = [axis](Graph<S>&, const VarSet<S>& v) {
                        return concat<S>({v.at("a"), v.at("b"), v.at("a")}, axis);
                      };
                      return c;
                    }});
  checks.push_back({"slice", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index axis = static_cast<Index>(rng.below(2));
                      Shape s{extent(rng, 2, 5), extent(rng, 2, 5)};
                      const Index ext = s[std::size_t(axis)];
                      const Index start = static_cast<Index>(rng.below(std::uint64_t(ext - 1)));
                      const Index len = 1 + static_cast<Index>(rng.below(std::uint64_t(ext - start)));
                      c.params["x"] = randn<S>(rng, s);
                      c.builder = [axis, start, len](Graph<S>&, const VarSet<S>& v) {
                        return slice(v.at("x"), axis, start, len);
                      };
                      return c;
                    }});
  checks.push_back(unary_check<S>("sum", [](const V& x) { return sum(square(x)); }, -2, 2));
  checks.push_back(unary_check<S>("mean", [](const V& x) { return mean(square(x)); }, -2, 2));
  checks.push_back(unary_check<S>("softmax_rows", [](const V& x) { return softmax_rows(x); }, -2, 2));
  checks.push_back({"layer_norm_rows", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      c.params["x"] = randn<S>(rng, {extent(rng, 1, 4), extent(rng, 6, 10)});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) { return layer_norm_rows(v.at("x")); };
                      return c;
                    }});
  checks.push_back({"group_norm", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index groups = extent(rng, 1, 3);
                      c.params["x"] =
                          randn<S>(rng, {groups * extent(rng, 1, 2), extent(rng, 3, 4), extent(rng, 3, 4)});
                      c.builder = [groups](Graph<S>&, const VarSet<S>& v) { return group_norm(v.at("x"), groups); };
                      return c;
                    }});
  checks.push_back({"instance_norm", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      c.params["x"] = randn<S>(rng, {extent(rng, 1, 3), extent(rng, 3, 4), extent(rng, 3, 4)});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) { return instance_norm(v.at("x")); };
                      return c;
                    }});
  checks.push_back({"conv2d", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index cin = extent(rng, 1, 3), cout = extent(rng, 1, 3);
                      const Index k = rng.uniform() < 0.3 ? 1 : 3;
                      c.params["x"] = randn<S>(rng, {cin, extent(rng, 1, 5), extent(rng, 1, 5)});
                      c.params["w"] = randn<S>(rng, {cout, cin, k, k}, 0.5);
                      c.params["b"] = randn<S>(rng, {cout});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) {
                        return conv2d(v.at("x"), v.at("w"), v.at("b"));
                      };
                      return c;
                    }});
  checks.push_back({"upsample_nearest2x", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      c.params["x"] = randn<S>(rng, {extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 3)});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) { return upsample_nearest2x(v.at("x")); };
                      return c;
                    }});
  checks.push_back({"box_downsample", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index f = extent(rng, 1, 3);
                      c.params["x"] = randn<S>(rng, {f * extent(rng, 1, 2), f * extent(rng, 1, 2), extent(rng, 1, 3)});
                      c.builder = [f](Graph<S>&, const VarSet<S>& v) { return box_downsample(v.at("x"), f); };
                      return c;
                    }});
  checks.push_back({"grid_sample_bilinear", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index ch = extent(rng, 1, 3), r = extent(rng, 2, 6), n = extent(rng, 1, 6);
                      c.params["plane"] = randn<S>(rng, {ch, r, r});
                      Tensor<S> uv({n, 2});
                      const double cell = 2.0 / double(r - 1);
                      for (Index i = 0; i < 2 * n; ++i) {
                        if (rng.uniform() < 0.15) {
                          // Clamped region, well outside the square.
                          uv[i] = S((rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(1.1, 1.5));
                        } else {
                          const auto k = static_cast<double>(rng.below(std::uint64_t(r - 1)));
                          uv[i] = S(-1.0 + cell * (k + rng.uniform(0.15, 0.85)));
                        }
                      }
                      c.params["uv"] = uv;
                      c.builder = [](Graph<S>&, const VarSet<S>& v) {
                        return grid_sample_bilinear(v.at("plane"), v.at("uv"));
                      };
                      return c;
                    }});
  checks.push_back({"cosine_similarity", [](std::uint64_t seed) {
                      Rng rng(seed);
                      GradCase<S> c;
                      const Index n = extent(rng, 2, 8);
                      c.params["a"] = randn<S>(rng, {n});
                      c.params["b"] = randn<S>(rng, {n});
                      c.builder = [](Graph<S>&, const VarSet<S>& v) {
                        return cosine_similarity(v.at("a"), v.at("b"));
                      };
                      return c;
                    }});
  return checks;
}

template <typename S>
PrimitiveCheck<S> faulty_check() {
  return {"faulty_double_backward", [](std::uint64_t seed) {
            Rng rng(seed);
            GradCase<S> c;
            c.params["x"] = randn<S>(rng, {3, 2});
            c.builder = [](Graph<S>& g, const VarSet<S>& v) {
              const Var<S> x = v.at("x");
              Tensor<S> y = x.value();
              y.array() *= S(3);
              return g.record("faulty", std::move(y), {x}, [](const Tensor<S>& go, std::span<Tensor<S>*> gi) {
                if (gi[0]) gi[0]->array() += S(6) * go.array();
              });
            };
            return c;
          }};
}

template <typename S>
std::vector<SuiteResult> run_primitive_suite(const std::vector<PrimitiveCheck<S>>& checks, int cases, double tol,
                                             std::uint64_t base_seed) {
  std::vector<SuiteResult> results;
  GradCheckOptions opts;
  opts.eps = default_fd_eps<S>();
  opts.tol = tol;
  opts.max_probes = 16;
  for (const auto& check : checks) {
    SuiteResult r;
    r.name = check.name;
    for (int i = 0; i < cases; ++i) {
      const std::uint64_t seed = mix64(base_seed * 1000003ULL + std::uint64_t(i));
      GradCase<S> gc = check.make(seed);
      opts.seed = seed;
      opts.eps = check.eps > 0.0 ? check.eps : default_fd_eps<S>();
      const GradCheckReport rep = grad_check<S>(gc.builder, gc.params, opts);
      ++r.cases;
      if (!rep.passed) ++r.failures;
      r.worst_rel_error = std::max(r.worst_rel_error, rep.max_rel_error);
    }
    results.push_back(r);
  }
  return results;
}

template std::vector<PrimitiveCheck<float>> primitive_checks<float>();
template std::vector<PrimitiveCheck<double>> primitive_checks<double>();
template PrimitiveCheck<float> faulty_check<float>();
template PrimitiveCheck<double> faulty_check<double>();
template std::vector<SuiteResult> run_primitive_suite<float>(const std::vector<PrimitiveCheck<float>>&, int, double,
                                                             std::uint64_t);
template std::vector<SuiteResult> run_primitive_suite<double>(const std::vector<PrimitiveCheck<double>>&, int, double,
                                                              std::uint64_t);

}  // namespace it3d
