#pragma once

#include "it3d/diffmath/graph.hpp"
#include "it3d/rng.hpp"

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace it3d {

template <typename S>
using ParamSet = std::map<std::string, Tensor<S>>;

template <typename S>
using VarSet = std::map<std::string, Var<S>>;

/// Builds a forward graph from the registered parameters and returns its output.
template <typename S>
using GraphBuilder = std::function<Var<S>(Graph<S>&, const VarSet<S>&)>;

class NonDeterministicBuilder : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double eps = 1e-3;
  double tol = 1e-3;
  std::uint64_t seed = 0;
  /// Elements probed per parameter; all of them when <= 0.
  Index max_probes = 0;
  /// Errors are divided by max(|analytic|, |numeric|, floor * scale), where
  /// scale is the tensor's largest gradient magnitude. The default 1 gives the
  /// normwise error max|a - n| / max(|a|, |n|) over the tensor.
  double relative_floor = 1.0;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index probed = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool passed = false;
};

/// Compares reverse-mode gradients with central differences
/// (f(p + eps) - f(p - eps)) / (2 eps) of <seed, output>, where the seed is a
/// fixed random projection of the output (1 for single-element outputs).
template <typename S>
GradCheckReport grad_check(const GraphBuilder<S>& builder, const ParamSet<S>& params,
                           const GradCheckOptions& opts = {});

/// f32 reverse-mode gradients of `builder` against f64 central differences of
/// `reference`, the same function built in double. f32 central differences of
/// deep graphs are limited by roundoff at any usable step, so this is how f32
/// gradients of composed paths are judged. `params` must be exactly
/// representable in float.
GradCheckReport grad_check_mixed(const GraphBuilder<float>& builder, const GraphBuilder<double>& reference,
                                 const ParamSet<double>& params, const GradCheckOptions& opts = {});

extern template GradCheckReport grad_check<float>(const GraphBuilder<float>&, const ParamSet<float>&,
                                                  const GradCheckOptions&);
extern template GradCheckReport grad_check<double>(const GraphBuilder<double>&, const ParamSet<double>&,
                                                   const GradCheckOptions&);

}  // namespace it3d
