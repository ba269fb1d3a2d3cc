#pragma once

#include "it3d/diffmath/grad_check.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace it3d {

/// One randomised instance of a primitive: inputs plus the graph that applies it.
template <typename S>
struct GradCase {
  ParamSet<S> params;
  GraphBuilder<S> builder;
};

template <typename S>
struct PrimitiveCheck {
  std::string name;
  std::function<GradCase<S>(std::uint64_t seed)> make;
  /// Finite-difference step; 0 uses default_fd_eps.
  double eps = 0.0;
};

/// Every differentiable primitive in ops.hpp, each with a seeded generator of
/// shapes and inputs kept away from kinks and domain edges.
template <typename S>
std::vector<PrimitiveCheck<S>> primitive_checks();

/// A deliberately wrong primitive (backward doubled) for exercising the checker.
template <typename S>
PrimitiveCheck<S> faulty_check();

/// Default finite-difference step for the scalar type.
template <typename S>
constexpr double default_fd_eps() {
  return sizeof(S) == sizeof(float) ? 1e-2 : 1e-6;
}

struct SuiteResult {
  std::string name;
  int cases = 0;
  int failures = 0;
  double worst_rel_error = 0.0;
};

/// Runs `cases` seeded instances of each check at tolerance `tol`.
template <typename S>
std::vector<SuiteResult> run_primitive_suite(const std::vector<PrimitiveCheck<S>>& checks, int cases, double tol,
                                             std::uint64_t base_seed = 1);

}  // namespace it3d
