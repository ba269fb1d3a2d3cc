#pragma once

// Finite-difference checks above the op level: triplane lookup, field head,
// compositing, decoder and the full decode -> render -> guidance objective.

#include "it3d/diffmath/primitive_suite.hpp"

namespace it3d {

template <typename S>
std::vector<PrimitiveCheck<S>> pipeline_checks();

/// Generators draw float-representable values, so the f32 and f64 versions of
/// a case see identical inputs. This runs the f32 cases against f64 central
/// differences of the same cases (grad_check_mixed).
std::vector<SuiteResult> run_pipeline_suite_f32(int cases, double tol, std::uint64_t base_seed = 1,
                                                double eps = 1e-5);

/// primitive_checks() followed by pipeline_checks().
template <typename S>
std::vector<PrimitiveCheck<S>> full_gradient_suite();

}  // namespace it3d
