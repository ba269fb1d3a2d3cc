#include "it3d/diffmath/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace it3d {

namespace {

template <typename S>
Tensor<S> forward_value(const GraphBuilder<S>& builder, const ParamSet<S>& params) {
  Graph<S> g;
  VarSet<S> vars;
  for (const auto& [name, value] : params) vars.emplace(name, g.param(name, value));
  return builder(g, vars).value();
}

template <typename S, typename T>
double project(const Tensor<T>& seed, const Tensor<S>& out) {
  double acc = 0.0;
  for (Index i = 0; i < out.size(); ++i) acc += double(seed[i]) * double(out[i]);
  return acc;
}

// Output seed: 1 for a single element, else N(0, 1) entries rounded to float so
// mixed-precision checks project both graphs identically.
Tensord output_seed(const Shape& shape, Rng& rng) {
  Tensord seed(shape);
  if (seed.size() == 1) {
    seed[0] = 1.0;
  } else {
    for (Index i = 0; i < seed.size(); ++i) seed[i] = double(float(rng.normal()));
  }
  return seed;
}

template <typename S>
Tensor<S> checked_reference(const GraphBuilder<S>& builder, const ParamSet<S>& params, Graph<S>& g, Var<S>& out) {
  VarSet<S> vars;
  for (const auto& [name, value] : params) vars.emplace(name, g.param(name, value));
  out = builder(g, vars);
  const Tensor<S> reference = out.value();
  if (!(forward_value(builder, params) == reference)) {
    throw NonDeterministicBuilder("grad_check: two forward passes of the builder disagree");
  }
  return reference;
}

// Central differences of <seed, builder(params)> in R against `analytic`.
template <typename R>
GradCheckReport compare(const GraphBuilder<R>& builder, const ParamSet<R>& params, const Tensord& seed,
                        const std::map<std::string, Tensord>& analytic, Rng& rng, const GradCheckOptions& opts) {
  GradCheckReport report;
  report.tol = opts.tol;
  ParamSet<R> probe = params;
  for (const auto& [name, value] : params) {
    const Tensord& grad = analytic.at(name);
    std::vector<Index> idx(static_cast<std::size_t>(value.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
    if (opts.max_probes > 0 && value.size() > opts.max_probes) {
      for (Index i = 0; i < opts.max_probes; ++i) {
        const auto j = static_cast<Index>(i + static_cast<Index>(rng.below(std::uint64_t(value.size() - i))));
        std::swap(idx[std::size_t(i)], idx[std::size_t(j)]);
      }
      idx.resize(std::size_t(opts.max_probes));
    }

    std::vector<double> num(idx.size()), ana(idx.size());
    Tensor<R>& p = probe.at(name);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Index i = idx[k];
      const R orig = p[i];
      const R up = R(double(orig) + opts.eps);
      const R down = R(double(orig) - opts.eps);
      p[i] = up;
      const double fp = project(seed, forward_value(builder, probe));
      p[i] = down;
      const double fm = project(seed, forward_value(builder, probe));
      p[i] = orig;
      num[k] = (fp - fm) / (double(up) - double(down));
      ana[k] = grad[i];
    }

    double scale = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) scale = std::max({scale, std::abs(num[k]), std::abs(ana[k])});
    const double floor = std::max(opts.relative_floor * scale, 1e-30);
    ParamCheck pc;
    pc.name = name;
    pc.probed = static_cast<Index>(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double abs_err = std::abs(num[k] - ana[k]);
      const double denom = std::max({std::abs(num[k]), std::abs(ana[k]), floor});
      pc.max_abs_error = std::max(pc.max_abs_error, abs_err);
      pc.max_rel_error = std::max(pc.max_rel_error, scale == 0.0 ? 0.0 : abs_err / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.params.push_back(pc);
  }
  report.passed = report.max_rel_error < opts.tol;
  return report;
}

void check_eps(const GradCheckOptions& opts) {
  if (!(opts.eps > 0.0 && opts.eps <= 1e-2)) throw std::invalid_argument("grad_check: eps must lie in (0, 1e-2]");
}

}  // namespace

template <typename S>
GradCheckReport grad_check(const GraphBuilder<S>& builder, const ParamSet<S>& params,
                           const GradCheckOptions& opts) {
  check_eps(opts);
  Graph<S> g;
  Var<S> out;
  const Tensor<S> reference = checked_reference(builder, params, g, out);
  Rng rng(opts.seed);
  const Tensord seed = output_seed(reference.shape(), rng);
  const GradientMap<S> grads = g.backward(out, seed.cast<S>());
  std::map<std::string, Tensord> analytic;
  for (const auto& [name, value] : params) analytic.emplace(name, grads[name].template cast<double>());
  return compare(builder, params, seed, analytic, rng, opts);
}

GradCheckReport grad_check_mixed(const GraphBuilder<float>& builder, const GraphBuilder<double>& reference,
                                 const ParamSet<double>& params, const GradCheckOptions& opts) {
  check_eps(opts);
  ParamSet<float> low;
  for (const auto& [name, value] : params) {
    low.emplace(name, value.cast<float>());
    if (!(low.at(name).cast<double>() == value))
      throw std::invalid_argument("grad_check_mixed: '" + name + "' is not representable in float");
  }
  Graph<float> g;
  Var<float> out;
  const Tensorf value = checked_reference(builder, low, g, out);
  Rng rng(opts.seed);
  const Tensord seed = output_seed(value.shape(), rng);
  const GradientMap<float> grads = g.backward(out, seed.cast<float>());
  std::map<std::string, Tensord> analytic;
  for (const auto& [name, v] : params) analytic.emplace(name, grads[name].cast<double>());
  return compare(reference, params, seed, analytic, rng, opts);
}

template GradCheckReport grad_check<float>(const GraphBuilder<float>&, const ParamSet<float>&,
                                           const GradCheckOptions&);
template GradCheckReport grad_check<double>(const GraphBuilder<double>&, const ParamSet<double>&,
                                            const GradCheckOptions&);

}  // namespace it3d
