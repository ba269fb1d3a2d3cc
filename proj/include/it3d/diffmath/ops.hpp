#pragma once

// Differentiable primitives over Graph/Var. Every function appends one node
// (composites are noted) and throws ShapeError naming the op on mismatch.
//
// Layout conventions: matrices are [rows, cols]; feature maps are [C, H, W];
// images are [H, W, C]; point batches are [N, 3].

#include "it3d/diffmath/graph.hpp"

#include <vector>

namespace it3d {

// Elementwise. `b` must have a's shape or hold a single element (broadcast).
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> div(const Var<S>& a, const Var<S>& b);

template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> add_scalar(const Var<S>& a, S offset);
template <typename S> Var<S> neg(const Var<S>& a);

template <typename S> Var<S> exp(const Var<S>& a);
template <typename S> Var<S> log(const Var<S>& a);
template <typename S> Var<S> sqrt(const Var<S>& a);
template <typename S> Var<S> square(const Var<S>& a);
template <typename S> Var<S> cos(const Var<S>& a);
template <typename S> Var<S> sigmoid(const Var<S>& a);
template <typename S> Var<S> softplus(const Var<S>& a);
template <typename S> Var<S> silu(const Var<S>& a);

/// (1/alpha) * sigmoid(alpha * x), alpha in (0, 1]. Range (0, 1/alpha);
/// derivative sigmoid'(alpha * x).
template <typename S> Var<S> scaled_sigmoid(const Var<S>& a, S alpha);

// Broadcast along the trailing axis: x is [..., C] and v is [C].
template <typename S> Var<S> add_rowwise(const Var<S>& x, const Var<S>& v);
template <typename S> Var<S> mul_rowwise(const Var<S>& x, const Var<S>& v);
/// x is [N, C] and v is [N]; scales row n by v[n].
template <typename S> Var<S> mul_colwise(const Var<S>& x, const Var<S>& v);
/// x is [C, ...]; channel c becomes scale[c] * x + bias[c].
template <typename S> Var<S> channel_affine(const Var<S>& x, const Var<S>& scale, const Var<S>& bias);

template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> transpose(const Var<S>& a);
/// Composite: x [N, in] * w [in, out] + b [out].
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b);

template <typename S> Var<S> reshape(const Var<S>& a, Shape shape);
template <typename S> Var<S> concat(const std::vector<Var<S>>& parts, Index axis);
template <typename S> Var<S> slice(const Var<S>& a, Index axis, Index start, Index length);

/// Sum or mean of all elements, as a rank-0 tensor.
template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);

/// Softmax along the trailing axis.
template <typename S> Var<S> softmax_rows(const Var<S>& a);
/// Standardises each row of [N, C] with biased variance and `eps`.
template <typename S> Var<S> layer_norm_rows(const Var<S>& a, S eps = S(1e-5));
/// Standardises each channel group of [C, H, W] (biased variance, `eps` added).
template <typename S> Var<S> group_norm(const Var<S>& a, Index groups, S eps = S(1e-5));
/// Per-channel standardisation of [C, H, W]; group_norm with one channel per group.
template <typename S> Var<S> instance_norm(const Var<S>& a, S eps = S(1e-5));

/// Same-padded stride-1 convolution. x [Cin, H, W], w [Cout, Cin, k, k] with odd k,
/// b [Cout].
template <typename S> Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b);
/// Nearest-neighbour 2x upsampling of [C, H, W].
template <typename S> Var<S> upsample_nearest2x(const Var<S>& x);
/// Box average of an image [H, W, C] by an integer factor dividing H and W.
template <typename S> Var<S> box_downsample(const Var<S>& image, Index factor);

/// Bilinear lookup of plane [C, R, R] at coords [N, 2] = (u, v) in [-1, 1]^2.
/// u indexes columns and v rows; corner texel centres sit at +-1 and coordinates
/// outside are clamped. Output [N, C]. Differentiable in plane and coords.
template <typename S> Var<S> grid_sample_bilinear(const Var<S>& plane, const Var<S>& coords);

/// Cosine of the angle between two flattened tensors; rank-0 output.
template <typename S> Var<S> cosine_similarity(const Var<S>& a, const Var<S>& b);

template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <typename S> Var<S> operator/(const Var<S>& a, const Var<S>& b) { return div(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a) { return neg(a); }
template <typename S> Var<S> operator*(const Var<S>& a, S s) { return scale(a, s); }
template <typename S> Var<S> operator*(S s, const Var<S>& a) { return scale(a, s); }

}  // namespace it3d
