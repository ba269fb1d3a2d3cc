#include "it3d/diffmath/ops.hpp"

#include <algorithm>
#include <cmath>

namespace it3d {

namespace {

template <typename S>
using T = Tensor<S>;
template <typename S>
using Arr = typename Tensor<S>::Array;
template <typename S>
using Mat = typename Tensor<S>::RowMatrix;

template <typename S>
void require_same_graph(std::string_view op, const Var<S>& a, const Var<S>& b) {
  if (a.graph_ptr() != b.graph_ptr()) throw std::logic_error(std::string(op) + ": operands from different graphs");
}

template <typename S>
void require_rank(std::string_view op, const Var<S>& a, Index rank) {
  if (a.value().rank() != rank) {
    throw_shape_error(op, "expected rank " + std::to_string(rank), a.shape());
  }
}

/// Elementwise unary op: y = f(x), dx = g * df(x, y).
template <typename S, typename F, typename D>
Var<S> unary(std::string_view op, const Var<S>& a, F f, D df) {
  const T<S>& x = a.value();
  T<S> y(x.shape(), f(x.array()));
  return a.graph().record(op, std::move(y), {a}, [a, df](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->array() += go.array() * df(a.value().array());
  });
}

enum class Broadcast { kSame, kScalarB };

template <typename S>
Broadcast binary_mode(std::string_view op, const Var<S>& a, const Var<S>& b) {
  require_same_graph(op, a, b);
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.value().size() == 1) return Broadcast::kScalarB;
  throw_shape_error(op, "operands must share a shape or the second must be a single element", a.shape(), b.shape());
}

template <typename S>
S sigmoid_scalar(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise binary

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  const Broadcast mode = binary_mode("add", a, b);
  T<S> y = a.value();
  if (mode == Broadcast::kSame) {
    y.array() += b.value().array();
  } else {
    y.array() += b.value()[0];
  }
  return a.graph().record("add", std::move(y), {a, b}, [mode](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->array() += go.array();
    if (gi[1]) {
      if (mode == Broadcast::kSame) {
        gi[1]->array() += go.array();
      } else {
        (*gi[1])[0] += go.array().sum();
      }
    }
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  const Broadcast mode = binary_mode("sub", a, b);
  T<S> y = a.value();
  if (mode == Broadcast::kSame) {
    y.array() -= b.value().array();
  } else {
    y.array() -= b.value()[0];
  }
  return a.graph().record("sub", std::move(y), {a, b}, [mode](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->array() += go.array();
    if (gi[1]) {
      if (mode == Broadcast::kSame) {
        gi[1]->array() -= go.array();
      } else {
        (*gi[1])[0] -= go.array().sum();
      }
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  const Broadcast mode = binary_mode("mul", a, b);
  T<S> y = a.value();
  if (mode == Broadcast::kSame) {
    y.array() *= b.value().array();
  } else {
    y.array() *= b.value()[0];
  }
  return a.graph().record("mul", std::move(y), {a, b}, [a, b, mode](const T<S>& go, std::span<T<S>*> gi) {
    const auto& av = a.value().array();
    const auto& bv = b.value().array();
    if (mode == Broadcast::kSame) {
      if (gi[0]) gi[0]->array() += go.array() * bv;
      if (gi[1]) gi[1]->array() += go.array() * av;
    } else {
      if (gi[0]) gi[0]->array() += go.array() * bv[0];
      if (gi[1]) (*gi[1])[0] += (go.array() * av).sum();
    }
  });
}

template <typename S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
  const Broadcast mode = binary_mode("div", a, b);
  T<S> y = a.value();
  if (mode == Broadcast::kSame) {
    y.array() /= b.value().array();
  } else {
    y.array() /= b.value()[0];
  }
  return a.graph().record("div", std::move(y), {a, b}, [a, b, mode](const T<S>& go, std::span<T<S>*> gi) {
    const auto& av = a.value().array();
    const auto& bv = b.value().array();
    if (mode == Broadcast::kSame) {
      if (gi[0]) gi[0]->array() += go.array() / bv;
      if (gi[1]) gi[1]->array() -= go.array() * av / bv.square();
    } else {
      const S d = bv[0];
      if (gi[0]) gi[0]->array() += go.array() / d;
      if (gi[1]) (*gi[1])[0] -= (go.array() * av).sum() / (d * d);
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  T<S> y = a.value();
  y.array() *= factor;
  return a.graph().record("scale", std::move(y), {a}, [factor](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->array() += factor * go.array();
  });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S offset) {
  T<S> y = a.value();
  y.array() += offset;
  return a.graph().record("add_scalar", std::move(y), {a}, [](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->array() += go.array();
  });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return scale(a, S(-1));
}

// ---------------------------------------------------------------------------
// Elementwise unary

template <typename S>
Var<S> exp(const Var<S>& a) {
  return unary<S>("exp", a, [](const Arr<S>& x) -> Arr<S> { return x.exp(); },
                  [](const Arr<S>& x) -> Arr<S> { return x.exp(); });
}

template <typename S>
Var<S> log(const Var<S>& a) {
  return unary<S>("log", a, [](const Arr<S>& x) -> Arr<S> { return x.log(); },
                  [](const Arr<S>& x) -> Arr<S> { return x.inverse(); });
}

template <typename S>
Var<S> sqrt(const Var<S>& a) {
  return unary<S>("sqrt", a, [](const Arr<S>& x) -> Arr<S> { return x.sqrt(); },
                  [](const Arr<S>& x) -> Arr<S> { return S(0.5) * x.sqrt().inverse(); });
}

template <typename S>
Var<S> square(const Var<S>& a) {
  return unary<S>("square", a, [](const Arr<S>& x) -> Arr<S> { return x.square(); },
                  [](const Arr<S>& x) -> Arr<S> { return S(2) * x; });
}

template <typename S>
Var<S> cos(const Var<S>& a) {
  return unary<S>("cos", a, [](const Arr<S>& x) -> Arr<S> { return x.cos(); },
                  [](const Arr<S>& x) -> Arr<S> { return -x.sin(); });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  return scaled_sigmoid(a, S(1));
}

template <typename S>
Var<S> softplus(const Var<S>& a) {
  return unary<S>(
      "softplus", a,
      [](const Arr<S>& x) -> Arr<S> { return x.max(S(0)) + (-x.abs()).exp().log1p(); },
      [](const Arr<S>& x) -> Arr<S> { return x.unaryExpr([](S v) { return sigmoid_scalar(v); }); });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  return unary<S>(
      "silu", a, [](const Arr<S>& x) -> Arr<S> { return x * x.unaryExpr([](S v) { return sigmoid_scalar(v); }); },
      [](const Arr<S>& x) -> Arr<S> {
        return x.unaryExpr([](S v) {
          const S s = sigmoid_scalar(v);
          return s * (S(1) + v * (S(1) - s));
        });
      });
}

template <typename S>
Var<S> scaled_sigmoid(const Var<S>& a, S alpha) {
  if (!(alpha > S(0) && alpha <= S(1))) {
    throw std::domain_error("scaled_sigmoid: alpha must lie in (0, 1], got " + std::to_string(double(alpha)));
  }
  return unary<S>(
      alpha == S(1) ? "sigmoid" : "scaled_sigmoid", a,
      [alpha](const Arr<S>& x) -> Arr<S> {
        return x.unaryExpr([alpha](S v) { return sigmoid_scalar(alpha * v) / alpha; });
      },
      [alpha](const Arr<S>& x) -> Arr<S> {
        return x.unaryExpr([alpha](S v) {
          const S s = sigmoid_scalar(alpha * v);
          return s * (S(1) - s);
        });
      });
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

template <typename S>
Var<S> add_rowwise(const Var<S>& x, const Var<S>& v) {
  require_same_graph("add_rowwise", x, v);
  const Index c = x.value().rank() == 0 ? 1 : x.value().dim(-1);
  if (v.value().rank() != 1 || v.value().size() != c) {
    throw_shape_error("add_rowwise", "vector length must equal the trailing extent", x.shape(), v.shape());
  }
  T<S> y = x.value();
  y.matrix().rowwise() += v.value().array().matrix().transpose();
  return x.graph().record("add_rowwise", std::move(y), {x, v}, [](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->array() += go.array();
    if (gi[1]) gi[1]->array() += go.matrix().colwise().sum().transpose().array();
  });
}

template <typename S>
Var<S> mul_rowwise(const Var<S>& x, const Var<S>& v) {
  require_same_graph("mul_rowwise", x, v);
  const Index c = x.value().rank() == 0 ? 1 : x.value().dim(-1);
  if (v.value().rank() != 1 || v.value().size() != c) {
    throw_shape_error("mul_rowwise", "vector length must equal the trailing extent", x.shape(), v.shape());
  }
  T<S> y = x.value();
  y.matrix().array().rowwise() *= v.value().array().transpose();
  return x.graph().record("mul_rowwise", std::move(y), {x, v}, [x, v](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->matrix().array() += go.matrix().array().rowwise() * v.value().array().transpose();
    if (gi[1]) {
      gi[1]->array() +=
          (go.matrix().array() * x.value().matrix().array()).colwise().sum().transpose();
    }
  });
}

template <typename S>
Var<S> mul_colwise(const Var<S>& x, const Var<S>& v) {
  require_same_graph("mul_colwise", x, v);
  require_rank("mul_colwise", x, 2);
  if (v.value().rank() != 1 || v.value().size() != x.dim(0)) {
    throw_shape_error("mul_colwise", "vector length must equal the row count", x.shape(), v.shape());
  }
  T<S> y = x.value();
  y.matrix().array().colwise() *= v.value().array();
  return x.graph().record("mul_colwise", std::move(y), {x, v}, [x, v](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->matrix().array() += go.matrix().array().colwise() * v.value().array();
    if (gi[1]) gi[1]->array() += (go.matrix().array() * x.value().matrix().array()).rowwise().sum();
  });
}

template <typename S>
Var<S> channel_affine(const Var<S>& x, const Var<S>& scale_v, const Var<S>& bias_v) {
  require_same_graph("channel_affine", x, scale_v);
  require_same_graph("channel_affine", x, bias_v);
  if (x.value().rank() < 1) throw_shape_error("channel_affine", "input needs a channel axis", x.shape());
  const Index c = x.dim(0);
  const Index inner = x.value().size() / c;
  if (scale_v.value().size() != c || bias_v.value().size() != c) {
    throw_shape_error("channel_affine", "scale and bias need one entry per channel", x.shape(), scale_v.shape());
  }
  T<S> y = x.value();
  auto ym = y.matrix(c, inner);
  ym.array().colwise() *= scale_v.value().array();
  ym.array().colwise() += bias_v.value().array();
  return x.graph().record(
      "channel_affine", std::move(y), {x, scale_v, bias_v},
      [x, scale_v, c, inner](const T<S>& go, std::span<T<S>*> gi) {
        const auto gm = go.matrix(c, inner);
        if (gi[0]) gi[0]->matrix(c, inner).array() += gm.array().colwise() * scale_v.value().array();
        if (gi[1]) gi[1]->array() += (gm.array() * x.value().matrix(c, inner).array()).rowwise().sum();
        if (gi[2]) gi[2]->array() += gm.array().rowwise().sum();
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  require_same_graph("matmul", a, b);
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) throw_shape_error("matmul", "inner dimensions differ", a.shape(), b.shape());
  T<S> y({a.dim(0), b.dim(1)});
  y.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return a.graph().record("matmul", std::move(y), {a, b}, [a, b](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->matrix().noalias() += go.matrix() * b.value().matrix().transpose();
    if (gi[1]) gi[1]->matrix().noalias() += a.value().matrix().transpose() * go.matrix();
  });
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
  require_rank("transpose", a, 2);
  T<S> y({a.dim(1), a.dim(0)});
  y.matrix() = a.value().matrix().transpose();
  return a.graph().record("transpose", std::move(y), {a}, [](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->matrix() += go.matrix().transpose();
  });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  return add_rowwise(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  if (shape_numel(shape) != a.value().size()) {
    throw_shape_error("reshape", "element count differs", a.shape(), shape);
  }
  T<S> y = a.value().reshaped(std::move(shape));
  return a.graph().record("reshape", std::move(y), {a}, [](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->array() += go.array();
  });
}

namespace {

// Views a tensor as [outer, axis, inner] around `axis`.
struct AxisSplit {
  Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

Index normalize_axis(std::string_view op, Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

}  // namespace

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  axis = normalize_axis("concat", axis, static_cast<Index>(first.size()));
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    require_same_graph("concat", parts[0], p);
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw_shape_error("concat", "ranks differ", first, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (static_cast<Index>(d) != axis && s[d] != first[d]) {
        throw_shape_error("concat", "non-concatenated extents differ", first, s);
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  T<S> y(out_shape);
  const AxisSplit os = split_at(out_shape, axis);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const AxisSplit ps = split_at(p.shape(), axis);
    const S* src = p.value().data();
    S* dst = y.data();
    for (Index o = 0; o < os.outer; ++o) {
      std::copy_n(src + o * ps.extent * ps.inner, ps.extent * ps.inner, dst + (o * os.extent + off) * os.inner);
    }
    off += ps.extent;
  }
  return parts[0].graph().record(
      "concat", std::move(y), parts, [parts, offsets, os, axis](const T<S>& go, std::span<T<S>*> gi) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (!gi[k]) continue;
          const AxisSplit ps = split_at(parts[k].shape(), axis);
          S* dst = gi[k]->data();
          const S* src = go.data();
          for (Index o = 0; o < os.outer; ++o) {
            const S* s = src + (o * os.extent + offsets[k]) * os.inner;
            S* d = dst + o * ps.extent * ps.inner;
            for (Index i = 0; i < ps.extent * ps.inner; ++i) d[i] += s[i];
          }
        }
      });
}

template <typename S>
Var<S> slice(const Var<S>& a, Index axis, Index start, Index length) {
  axis = normalize_axis("slice", axis, a.value().rank());
  const AxisSplit is = split_at(a.shape(), axis);
  if (start < 0 || length <= 0 || start + length > is.extent) {
    throw_shape_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                   ") outside axis " + std::to_string(axis),
                      a.shape());
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  T<S> y(out_shape);
  for (Index o = 0; o < is.outer; ++o) {
    std::copy_n(a.value().data() + (o * is.extent + start) * is.inner, length * is.inner,
                y.data() + o * length * is.inner);
  }
  return a.graph().record("slice", std::move(y), {a}, [is, start, length](const T<S>& go, std::span<T<S>*> gi) {
    if (!gi[0]) return;
    for (Index o = 0; o < is.outer; ++o) {
      S* d = gi[0]->data() + (o * is.extent + start) * is.inner;
      const S* s = go.data() + o * length * is.inner;
      for (Index i = 0; i < length * is.inner; ++i) d[i] += s[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Var<S> sum(const Var<S>& a) {
  T<S> y = T<S>::scalar(a.value().array().sum());
  return a.graph().record("sum", std::move(y), {a}, [](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->array() += go[0];
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  const S n = static_cast<S>(a.value().size());
  T<S> y = T<S>::scalar(a.value().array().sum() / n);
  return a.graph().record("mean", std::move(y), {a}, [n](const T<S>& go, std::span<T<S>*> gi) {
    if (gi[0]) gi[0]->array() += go[0] / n;
  });
}

// ---------------------------------------------------------------------------
// Normalisation

template <typename S>
Var<S> softmax_rows(const Var<S>& a) {
  if (a.value().rank() < 1) throw_shape_error("softmax_rows", "needs at least one axis", a.shape());
  T<S> y = a.value();
  auto m = y.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
  auto& g = a.graph();
  const int out_id = static_cast<int>(g.size());
  return g.record("softmax_rows", std::move(y), {a}, [&g, out_id](const T<S>& go, std::span<T<S>*> gi) {
    if (!gi[0]) return;
    const auto ym = Var<S>(&g, out_id).value().matrix();
    const auto gm = go.matrix();
    auto dm = gi[0]->matrix();
    for (Index r = 0; r < ym.rows(); ++r) {
      const S dot = ym.row(r).dot(gm.row(r));
      dm.row(r).array() += ym.row(r).array() * (gm.row(r).array() - dot);
    }
  });
}

namespace {

// Standardises each row of m (rows x n) in place and returns 1/sigma per row.
template <typename S, typename M>
Arr<S> standardize_rows(M&& m, S eps) {
  Arr<S> inv(m.rows());
  const S n = static_cast<S>(m.cols());
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    const S mu = row.sum() / n;
    row -= mu;
    const S var = row.square().sum() / n;
    inv[r] = S(1) / std::sqrt(var + eps);
    row *= inv[r];
  }
  return inv;
}

// dx = inv * (g - mean(g) - xhat * mean(g * xhat)) per row.
template <typename S, typename MX, typename MG, typename MD>
void standardize_rows_backward(const MX& xhat, const MG& g, const Arr<S>& inv, MD&& dx) {
  const S n = static_cast<S>(xhat.cols());
  for (Index r = 0; r < xhat.rows(); ++r) {
    const S mg = g.row(r).sum() / n;
    const S mgx = g.row(r).dot(xhat.row(r)) / n;
    dx.row(r).array() += inv[r] * (g.row(r).array() - mg - xhat.row(r).array() * mgx);
  }
}

template <typename S>
Var<S> standardize(std::string_view op, const Var<S>& a, Index rows, S eps) {
  const Index cols = a.value().size() / rows;
  T<S> y = a.value();
  Arr<S> inv = standardize_rows<S>(y.matrix(rows, cols), eps);
  auto& g = a.graph();
  const int out_id = static_cast<int>(g.size());
  return g.record(op, std::move(y), {a}, [&g, out_id, inv, rows, cols](const T<S>& go, std::span<T<S>*> gi) {
    if (!gi[0]) return;
    const auto xhat = Var<S>(&g, out_id).value().matrix(rows, cols);
    standardize_rows_backward<S>(xhat, go.matrix(rows, cols), inv, gi[0]->matrix(rows, cols));
  });
}

}  // namespace

template <typename S>
Var<S> layer_norm_rows(const Var<S>& a, S eps) {
  if (a.value().rank() < 1) throw_shape_error("layer_norm_rows", "needs at least one axis", a.shape());
  return standardize("layer_norm_rows", a, a.value().size() / a.dim(-1), eps);
}

template <typename S>
Var<S> group_norm(const Var<S>& a, Index groups, S eps) {
  require_rank("group_norm", a, 3);
  if (groups <= 0 || a.dim(0) % groups != 0) {
    throw_shape_error("group_norm", "group count " + std::to_string(groups) + " must divide channels", a.shape());
  }
  return standardize("group_norm", a, groups, eps);
}

template <typename S>
Var<S> instance_norm(const Var<S>& a, S eps) {
  require_rank("instance_norm", a, 3);
  return standardize("instance_norm", a, a.dim(0), eps);
}

// ---------------------------------------------------------------------------
// Convolution and resampling

namespace {

// cols[(ci * k + ky) * k + kx, y * W + x] = x[ci, y + ky - k/2, x + kx - k/2] (zero outside).
template <typename S>
void im2col(const S* x, Index cin, Index h, Index w, Index k, S* cols) {
  const Index r = k / 2;
  const Index hw = h * w;
  for (Index ci = 0; ci < cin; ++ci) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        S* dst = cols + ((ci * k + ky) * k + kx) * hw;
        const Index dy = ky - r, dx = kx - r;
        for (Index yy = 0; yy < h; ++yy) {
          const Index sy = yy + dy;
          S* row = dst + yy * w;
          if (sy < 0 || sy >= h) {
            std::fill_n(row, w, S(0));
            continue;
          }
          const S* src = x + (ci * h + sy) * w;
          const Index x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(w, w - dx);
          std::fill_n(row, x0, S(0));
          for (Index xx = x0; xx < x1; ++xx) row[xx] = src[xx + dx];
          std::fill(row + x1, row + w, S(0));
        }
      }
    }
  }
}

template <typename S>
void col2im(const S* cols, Index cin, Index h, Index w, Index k, S* x) {
  const Index r = k / 2;
  const Index hw = h * w;
  for (Index ci = 0; ci < cin; ++ci) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const S* src = cols + ((ci * k + ky) * k + kx) * hw;
        const Index dy = ky - r, dx = kx - r;
        for (Index yy = 0; yy < h; ++yy) {
          const Index sy = yy + dy;
          if (sy < 0 || sy >= h) continue;
          S* dst = x + (ci * h + sy) * w;
          const S* row = src + yy * w;
          const Index x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(w, w - dx);
          for (Index xx = x0; xx < x1; ++xx) dst[xx + dx] += row[xx];
        }
      }
    }
  }
}

}  // namespace

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& wv, const Var<S>& b) {
  require_same_graph("conv2d", x, wv);
  require_same_graph("conv2d", x, b);
  require_rank("conv2d", x, 3);
  require_rank("conv2d", wv, 4);
  const Index cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin || wv.dim(3) != k || k % 2 == 0) {
    throw_shape_error("conv2d", "weight must be [Cout, Cin, k, k] with odd k matching input channels", x.shape(),
                      wv.shape());
  }
  if (b.value().rank() != 1 || b.dim(0) != cout) {
    throw_shape_error("conv2d", "bias must have one entry per output channel", wv.shape(), b.shape());
  }
  const Index hw = h * w, ck = cin * k * k;
  T<S> y({cout, h, w});
  auto ym = y.matrix(cout, hw);
  const auto wm = wv.value().matrix(cout, ck);
  if (k == 1) {
    ym.noalias() = wm * x.value().matrix(cin, hw);
  } else {
    Mat<S> cols(ck, hw);
    im2col(x.value().data(), cin, h, w, k, cols.data());
    ym.noalias() = wm * cols;
  }
  ym.colwise() += b.value().array().matrix();
  return x.graph().record(
      "conv2d", std::move(y), {x, wv, b}, [x, wv, cin, h, w, cout, k, hw, ck](const T<S>& go, std::span<T<S>*> gi) {
        const auto gm = go.matrix(cout, hw);
        if (gi[2]) gi[2]->array() += gm.rowwise().sum().array();
        if (k == 1) {
          if (gi[1]) gi[1]->matrix(cout, ck).noalias() += gm * x.value().matrix(cin, hw).transpose();
          if (gi[0]) gi[0]->matrix(cin, hw).noalias() += wv.value().matrix(cout, ck).transpose() * gm;
          return;
        }
        if (gi[1]) {
          Mat<S> cols(ck, hw);
          im2col(x.value().data(), cin, h, w, k, cols.data());
          gi[1]->matrix(cout, ck).noalias() += gm * cols.transpose();
        }
        if (gi[0]) {
          Mat<S> dcols(ck, hw);
          dcols.noalias() = wv.value().matrix(cout, ck).transpose() * gm;
          col2im(dcols.data(), cin, h, w, k, gi[0]->data());
        }
      });
}

template <typename S>
Var<S> upsample_nearest2x(const Var<S>& x) {
  require_rank("upsample_nearest2x", x, 3);
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  T<S> y({c, 2 * h, 2 * w});
  const S* src = x.value().data();
  S* dst = y.data();
  for (Index ci = 0; ci < c; ++ci) {
    for (Index yy = 0; yy < 2 * h; ++yy) {
      const S* srow = src + (ci * h + yy / 2) * w;
      S* drow = dst + (ci * 2 * h + yy) * 2 * w;
      for (Index xx = 0; xx < 2 * w; ++xx) drow[xx] = srow[xx / 2];
    }
  }
  return x.graph().record("upsample_nearest2x", std::move(y), {x}, [c, h, w](const T<S>& go, std::span<T<S>*> gi) {
    if (!gi[0]) return;
    const S* g = go.data();
    S* d = gi[0]->data();
    for (Index ci = 0; ci < c; ++ci) {
      for (Index yy = 0; yy < 2 * h; ++yy) {
        const S* grow = g + (ci * 2 * h + yy) * 2 * w;
        S* drow = d + (ci * h + yy / 2) * w;
        for (Index xx = 0; xx < 2 * w; ++xx) drow[xx / 2] += grow[xx];
      }
    }
  });
}

template <typename S>
Var<S> box_downsample(const Var<S>& image, Index factor) {
  require_rank("box_downsample", image, 3);
  const Index h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (factor <= 0 || h % factor != 0 || w % factor != 0) {
    throw_shape_error("box_downsample", "factor " + std::to_string(factor) + " must divide height and width",
                      image.shape());
  }
  const Index oh = h / factor, ow = w / factor;
  const S inv = S(1) / static_cast<S>(factor * factor);
  T<S> y({oh, ow, c});
  const S* src = image.value().data();
  for (Index yy = 0; yy < h; ++yy) {
    for (Index xx = 0; xx < w; ++xx) {
      S* d = y.data() + ((yy / factor) * ow + xx / factor) * c;
      const S* s = src + (yy * w + xx) * c;
      for (Index ci = 0; ci < c; ++ci) d[ci] += inv * s[ci];
    }
  }
  return image.graph().record(
      "box_downsample", std::move(y), {image}, [h, w, c, ow, factor, inv](const T<S>& go, std::span<T<S>*> gi) {
        if (!gi[0]) return;
        for (Index yy = 0; yy < h; ++yy) {
          for (Index xx = 0; xx < w; ++xx) {
            const S* g = go.data() + ((yy / factor) * ow + xx / factor) * c;
            S* d = gi[0]->data() + (yy * w + xx) * c;
            for (Index ci = 0; ci < c; ++ci) d[ci] += inv * g[ci];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Bilinear plane sampling

namespace {

struct BilinearTap {
  Index i00;  // flat texel index (row * R + col) of the lower corner
  Index dx, dy;  // neighbour offsets in flat texel units (0 when R == 1)
  double wx, wy;
  bool clamped_u, clamped_v;
};

// Maps a coordinate in [-1, 1] to texel space with corner texels at +-1.
inline void texel_axis(double u, Index r, Index& i0, double& frac, bool& clamped) {
  clamped = u < -1.0 || u > 1.0;
  const double uc = std::clamp(u, -1.0, 1.0);
  if (r == 1) {
    i0 = 0;
    frac = 0.0;
    return;
  }
  const double f = (uc + 1.0) * 0.5 * static_cast<double>(r - 1);
  i0 = std::min<Index>(static_cast<Index>(std::floor(f)), r - 2);
  frac = f - static_cast<double>(i0);
}

inline BilinearTap make_tap(double u, double v, Index r) {
  BilinearTap t{};
  Index cx, cy;
  texel_axis(u, r, cx, t.wx, t.clamped_u);
  texel_axis(v, r, cy, t.wy, t.clamped_v);
  t.i00 = cy * r + cx;
  t.dx = r > 1 ? 1 : 0;
  t.dy = r > 1 ? r : 0;
  return t;
}

}  // namespace

template <typename S>
Var<S> grid_sample_bilinear(const Var<S>& plane, const Var<S>& coords) {
  require_same_graph("grid_sample_bilinear", plane, coords);
  require_rank("grid_sample_bilinear", plane, 3);
  require_rank("grid_sample_bilinear", coords, 2);
  const Index c = plane.dim(0), r = plane.dim(1);
  if (plane.dim(2) != r) throw_shape_error("grid_sample_bilinear", "plane must be square", plane.shape());
  if (coords.dim(1) != 2) throw_shape_error("grid_sample_bilinear", "coords must be [N, 2]", coords.shape());
  const Index n = coords.dim(0);

  // Channels-last copy so each tap reads C contiguous values.
  Mat<S> texels = plane.value().matrix(c, r * r).transpose();
  T<S> y({n, c});
  const S* uv = coords.value().data();
  for (Index i = 0; i < n; ++i) {
    const BilinearTap t = make_tap(double(uv[2 * i]), double(uv[2 * i + 1]), r);
    const S w00 = S((1 - t.wx) * (1 - t.wy)), w01 = S(t.wx * (1 - t.wy));
    const S w10 = S((1 - t.wx) * t.wy), w11 = S(t.wx * t.wy);
    const S* p00 = texels.data() + t.i00 * c;
    const S* p01 = p00 + t.dx * c;
    const S* p10 = p00 + t.dy * c;
    const S* p11 = p10 + t.dx * c;
    S* out = y.data() + i * c;
    for (Index k = 0; k < c; ++k) out[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
  }
  return plane.graph().record(
      "grid_sample_bilinear", std::move(y), {plane, coords},
      [plane, coords, c, r, n](const T<S>& go, std::span<T<S>*> gi) {
        const S* uv = coords.value().data();
        Mat<S> texels;
        if (gi[1]) texels = plane.value().matrix(c, r * r).transpose();
        Mat<S> dtex;
        if (gi[0]) dtex = Mat<S>::Zero(r * r, c);
        const S half_span = S(0.5) * static_cast<S>(std::max<Index>(r - 1, 0));
        for (Index i = 0; i < n; ++i) {
          const BilinearTap t = make_tap(double(uv[2 * i]), double(uv[2 * i + 1]), r);
          const S* g = go.data() + i * c;
          if (gi[0]) {
            const S w00 = S((1 - t.wx) * (1 - t.wy)), w01 = S(t.wx * (1 - t.wy));
            const S w10 = S((1 - t.wx) * t.wy), w11 = S(t.wx * t.wy);
            S* d00 = dtex.data() + t.i00 * c;
            S* d01 = d00 + t.dx * c;
            S* d10 = d00 + t.dy * c;
            S* d11 = d10 + t.dx * c;
            for (Index k = 0; k < c; ++k) {
              d00[k] += w00 * g[k];
              d01[k] += w01 * g[k];
              d10[k] += w10 * g[k];
              d11[k] += w11 * g[k];
            }
          }
          if (gi[1] && r > 1) {
            const S* p00 = texels.data() + t.i00 * c;
            const S* p01 = p00 + t.dx * c;
            const S* p10 = p00 + t.dy * c;
            const S* p11 = p10 + t.dx * c;
            S du = 0, dv = 0;
            const S wx = S(t.wx), wy = S(t.wy);
            for (Index k = 0; k < c; ++k) {
              du += g[k] * ((1 - wy) * (p01[k] - p00[k]) + wy * (p11[k] - p10[k]));
              dv += g[k] * ((1 - wx) * (p10[k] - p00[k]) + wx * (p11[k] - p01[k]));
            }
            if (!t.clamped_u) (*gi[1])[2 * i] += du * half_span;
            if (!t.clamped_v) (*gi[1])[2 * i + 1] += dv * half_span;
          }
        }
        if (gi[0]) gi[0]->matrix(c, r * r) += dtex.transpose();
      });
}

// ---------------------------------------------------------------------------

template <typename S>
Var<S> cosine_similarity(const Var<S>& a, const Var<S>& b) {
  require_same_graph("cosine_similarity", a, b);
  if (a.value().size() != b.value().size()) {
    throw_shape_error("cosine_similarity", "element counts differ", a.shape(), b.shape());
  }
  const auto& av = a.value().array();
  const auto& bv = b.value().array();
  const S na = std::sqrt(av.square().sum()), nb = std::sqrt(bv.square().sum());
  if (!(na > S(0)) || !(nb > S(0))) throw std::domain_error("cosine_similarity: zero-norm input");
  const S cs = (av * bv).sum() / (na * nb);
  return a.graph().record("cosine_similarity", T<S>::scalar(cs), {a, b},
                          [a, b, na, nb, cs](const T<S>& go, std::span<T<S>*> gi) {
                            const S g = go[0];
                            const auto& av = a.value().array();
                            const auto& bv = b.value().array();
                            if (gi[0]) gi[0]->array() += g * (bv / (na * nb) - cs * av / (na * na));
                            if (gi[1]) gi[1]->array() += g * (av / (na * nb) - cs * bv / (nb * nb));
                          });
}

// ---------------------------------------------------------------------------

#define IT3D_INSTANTIATE_OPS(S)                                                           \
  template Var<S> add(const Var<S>&, const Var<S>&);                                      \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                      \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                      \
  template Var<S> div(const Var<S>&, const Var<S>&);                                      \
  template Var<S> scale(const Var<S>&, S);                                                \
  template Var<S> add_scalar(const Var<S>&, S);                                           \
  template Var<S> neg(const Var<S>&);                                                     \
  template Var<S> exp(const Var<S>&);                                                     \
  template Var<S> log(const Var<S>&);                                                     \
  template Var<S> sqrt(const Var<S>&);                                                    \
  template Var<S> square(const Var<S>&);                                                  \
  template Var<S> cos(const Var<S>&);                                                     \
  template Var<S> sigmoid(const Var<S>&);                                                 \
  template Var<S> softplus(const Var<S>&);                                                \
  template Var<S> silu(const Var<S>&);                                                    \
  template Var<S> scaled_sigmoid(const Var<S>&, S);                                       \
  template Var<S> add_rowwise(const Var<S>&, const Var<S>&);                              \
  template Var<S> mul_rowwise(const Var<S>&, const Var<S>&);                              \
  template Var<S> mul_colwise(const Var<S>&, const Var<S>&);                              \
  template Var<S> channel_affine(const Var<S>&, const Var<S>&, const Var<S>&);            \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                   \
  template Var<S> transpose(const Var<S>&);                                               \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                    \
  template Var<S> reshape(const Var<S>&, Shape);                                          \
  template Var<S> concat(const std::vector<Var<S>>&, Index);                              \
  template Var<S> slice(const Var<S>&, Index, Index, Index);                              \
  template Var<S> sum(const Var<S>&);                                                     \
  template Var<S> mean(const Var<S>&);                                                    \
  template Var<S> softmax_rows(const Var<S>&);                                            \
  template Var<S> layer_norm_rows(const Var<S>&, S);                                      \
  template Var<S> group_norm(const Var<S>&, Index, S);                                    \
  template Var<S> instance_norm(const Var<S>&, S);                                        \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&);                    \
  template Var<S> upsample_nearest2x(const Var<S>&);                                      \
  template Var<S> box_downsample(const Var<S>&, Index);                                   \
  template Var<S> grid_sample_bilinear(const Var<S>&, const Var<S>&);                     \
  template Var<S> cosine_similarity(const Var<S>&, const Var<S>&);

IT3D_INSTANTIATE_OPS(float)
IT3D_INSTANTIATE_OPS(double)

}  // namespace it3d
