#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "mambatrans/tensor.hpp"

// Differentiable primitives over the tensor substrate. Conventions:
//  - feature maps are channel-last (H x W x C), flattened spatial-major
//  - no implicit broadcasting except scalar-with-tensor and per-channel
//    bias/scale; everything else goes through explicit reshape/slice ops
//  - every op propagates requires_grad (output requires iff any input does)
//    and records its backward rule on the active tape

namespace mambatrans {

namespace detail {

template <typename T>
inline void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

// Rows/cols view of an arbitrary-rank tensor: last axis = columns.
template <typename T>
inline int64_t last_dim(const Tensor<T>& x) {
    if (x.rank() < 1) throw DimensionError("expected rank >= 1");
    return x.dim(x.rank() - 1);
}

template <typename T>
inline T stable_sigmoid(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
inline T stable_softplus(T x) {
    // log(1 + e^x) without overflow; for large x this is x itself.
    if (x > T(30)) return x;
    if (x < T(-30)) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("add", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    record_op<T>("add", {a, b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
        const auto& g = on->grad;
        if (an->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
        if (bn->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
    });
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("sub", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    record_op<T>("sub", {a, b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
        const auto& g = on->grad;
        if (an->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
        if (bn->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
    });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("mul", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    record_op<T>("mul", {a, b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
        const auto& g = on->grad;
        if (an->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->value[i];
        if (bn->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->value[i];
    });
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
    record_op<T>("add_scalar", {a}, out, [an = a.node(), on = out.node()] {
        if (an->requires_grad)
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
    record_op<T>("mul_scalar", {a}, out, [an = a.node(), on = out.node(), s] {
        if (an->requires_grad)
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
    });
    return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return mul_scalar(a, T(-1));
}

#define MAMBATRANS_UNARY_OP(NAME, FWD, BWD)                                                   \
    template <typename T>                                                                     \
    Tensor<T> NAME(const Tensor<T>& a) {                                                      \
        Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());                       \
        const auto& av = a.data();                                                            \
        auto& ov = out.data();                                                                \
        for (size_t i = 0; i < ov.size(); ++i) {                                              \
            const T x = av[i];                                                                \
            ov[i] = (FWD);                                                                    \
        }                                                                                     \
        record_op<T>(#NAME, {a}, out, [an = a.node(), on = out.node()] {                      \
            if (!an->requires_grad) return;                                                   \
            for (size_t i = 0; i < on->grad.size(); ++i) {                                    \
                const T x = an->value[i];                                                     \
                const T y = on->value[i];                                                     \
                (void)x;                                                                      \
                (void)y;                                                                      \
                an->grad[i] += on->grad[i] * (BWD);                                           \
            }                                                                                 \
        });                                                                                   \
        return out;                                                                           \
    }

MAMBATRANS_UNARY_OP(exp, std::exp(x), y)
MAMBATRANS_UNARY_OP(log, std::log(x), T(1) / x)
MAMBATRANS_UNARY_OP(sqrt, std::sqrt(x), T(0.5) / y)
MAMBATRANS_UNARY_OP(recip, T(1) / x, -y * y)
MAMBATRANS_UNARY_OP(sigmoid, detail::stable_sigmoid(x), y * (T(1) - y))
MAMBATRANS_UNARY_OP(softplus, detail::stable_softplus(x), detail::stable_sigmoid(x))

#undef MAMBATRANS_UNARY_OP

// y = x * sigmoid(x)
template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * detail::stable_sigmoid(av[i]);
    record_op<T>("silu", {a}, out, [an = a.node(), on = out.node()] {
        if (!an->requires_grad) return;
        for (size_t i = 0; i < on->grad.size(); ++i) {
            const T s = detail::stable_sigmoid(an->value[i]);
            an->grad[i] += on->grad[i] * (s + an->value[i] * s * (T(1) - s));
        }
    });
    return out;
}

// Subgradient 0 below the floor; the kink at x == lo is measure-zero.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::max(av[i], lo);
    record_op<T>("clamp_min", {a}, out, [an = a.node(), on = out.node(), lo] {
        if (!an->requires_grad) return;
        for (size_t i = 0; i < on->grad.size(); ++i)
            if (an->value[i] > lo) an->grad[i] += on->grad[i];
    });
    return out;
}

// Inference-time range clamp; subgradient 0 outside [0, 1].
template <typename T>
Tensor<T> clamp01(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::min(std::max(av[i], T(0)), T(1));
    record_op<T>("clamp01", {a}, out, [an = a.node(), on = out.node()] {
        if (!an->requires_grad) return;
        for (size_t i = 0; i < on->grad.size(); ++i)
            if (an->value[i] > T(0) && an->value[i] < T(1)) an->grad[i] += on->grad[i];
    });
    return out;
}

// Huber-style box regression penalty: 0.5 x^2 for |x| < 1, |x| - 0.5 beyond.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) {
        const T x = av[i];
        ov[i] = std::fabs(x) < T(1) ? T(0.5) * x * x : std::fabs(x) - T(0.5);
    }
    record_op<T>("smooth_l1", {a}, out, [an = a.node(), on = out.node()] {
        if (!an->requires_grad) return;
        for (size_t i = 0; i < on->grad.size(); ++i) {
            const T x = an->value[i];
            an->grad[i] += on->grad[i] * (std::fabs(x) < T(1) ? x : (x > T(0) ? T(1) : T(-1)));
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (numel(new_shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(new_shape));
    Tensor<T> out = Tensor<T>::from_data(std::move(new_shape), a.data(), a.requires_grad());
    record_op<T>("reshape", {a}, out, [an = a.node(), on = out.node()] {
        if (!an->requires_grad) return;
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.rank() != 2) throw DimensionError("transpose2d: expected rank 2, got " + shape_str(a.shape()));
    const int r = a.dim(0), c = a.dim(1);
    Tensor<T> out = Tensor<T>::zeros({c, r}, a.requires_grad());
    const auto& av = a.data();
    auto& ov = out.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ov[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
    record_op<T>("transpose2d", {a}, out, [an = a.node(), on = out.node(), r, c] {
        if (!an->requires_grad) return;
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                an->grad[static_cast<size_t>(i) * c + j] += on->grad[static_cast<size_t>(j) * r + i];
    });
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int r0, int r1) {
    if (a.rank() != 2) throw DimensionError("slice_rows: expected rank 2");
    const int rows = a.dim(0), cols = a.dim(1);
    if (r0 < 0 || r1 > rows || r0 >= r1) throw DimensionError("slice_rows: bad range");
    Tensor<T> out = Tensor<T>::zeros({r1 - r0, cols}, a.requires_grad());
    std::copy(a.data().begin() + static_cast<size_t>(r0) * cols,
              a.data().begin() + static_cast<size_t>(r1) * cols, out.data().begin());
    record_op<T>("slice_rows", {a}, out, [an = a.node(), on = out.node(), r0, cols] {
        if (!an->requires_grad) return;
        for (size_t i = 0; i < on->grad.size(); ++i)
            an->grad[static_cast<size_t>(r0) * cols + i] += on->grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw DimensionError("concat_rows: incompatible shapes");
    const int cols = a.dim(1);
    Tensor<T> out = Tensor<T>::zeros({a.dim(0) + b.dim(0), cols}, a.requires_grad() || b.requires_grad());
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.data().size());
    record_op<T>("concat_rows", {a, b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
        const size_t na = an->value.size();
        if (an->requires_grad)
            for (size_t i = 0; i < na; ++i) an->grad[i] += on->grad[i];
        if (bn->requires_grad)
            for (size_t i = 0; i < bn->value.size(); ++i) bn->grad[i] += on->grad[na + i];
    });
    return out;
}

// Slice [c0, c1) of the last axis, any rank.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, int c0, int c1) {
    const int64_t C = detail::last_dim(a);
    if (c0 < 0 || c1 > C || c0 >= c1) throw DimensionError("slice_last: bad range");
    Shape out_shape = a.shape();
    out_shape.back() = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros(out_shape, a.requires_grad());
    const int64_t rows = a.numel() / C;
    const int64_t w = c1 - c0;
    const auto& av = a.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < rows; ++r)
        std::copy(av.begin() + r * C + c0, av.begin() + r * C + c1, ov.begin() + r * w);
    record_op<T>("slice_last", {a}, out, [an = a.node(), on = out.node(), C, rows, w, c0] {
        if (!an->requires_grad) return;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < w; ++j) an->grad[static_cast<size_t>(r * C + c0 + j)] += on->grad[static_cast<size_t>(r * w + j)];
    });
    return out;
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank()) throw DimensionError("concat_last: rank mismatch");
    for (int i = 0; i + 1 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) throw DimensionError("concat_last: leading dims differ");
    const int64_t Ca = detail::last_dim(a), Cb = detail::last_dim(b);
    Shape out_shape = a.shape();
    out_shape.back() = static_cast<int>(Ca + Cb);
    Tensor<T> out = Tensor<T>::zeros(out_shape, a.requires_grad() || b.requires_grad());
    const int64_t rows = a.numel() / Ca;
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        std::copy(av.begin() + r * Ca, av.begin() + (r + 1) * Ca, ov.begin() + r * (Ca + Cb));
        std::copy(bv.begin() + r * Cb, bv.begin() + (r + 1) * Cb, ov.begin() + r * (Ca + Cb) + Ca);
    }
    record_op<T>("concat_last", {a, b}, out, [an = a.node(), bn = b.node(), on = out.node(), Ca, Cb, rows] {
        for (int64_t r = 0; r < rows; ++r) {
            if (an->requires_grad)
                for (int64_t j = 0; j < Ca; ++j)
                    an->grad[static_cast<size_t>(r * Ca + j)] += on->grad[static_cast<size_t>(r * (Ca + Cb) + j)];
            if (bn->requires_grad)
                for (int64_t j = 0; j < Cb; ++j)
                    bn->grad[static_cast<size_t>(r * Cb + j)] += on->grad[static_cast<size_t>(r * (Ca + Cb) + Ca + j)];
        }
    });
    return out;
}

// out[i, :] = a[perm[i], :]; perm must be a bijection for the scan orderings.
template <typename T>
Tensor<T> permute_rows(const Tensor<T>& a, std::vector<int> perm) {
    if (a.rank() != 2) throw DimensionError("permute_rows: expected rank 2");
    const int rows = a.dim(0), cols = a.dim(1);
    if (static_cast<int>(perm.size()) != rows) throw DimensionError("permute_rows: perm length mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape(), a.requires_grad());
    const auto& av = a.data();
    auto& ov = out.data();
    for (int i = 0; i < rows; ++i)
        std::copy(av.begin() + static_cast<size_t>(perm[static_cast<size_t>(i)]) * cols,
                  av.begin() + static_cast<size_t>(perm[static_cast<size_t>(i)] + 1) * cols,
                  ov.begin() + static_cast<size_t>(i) * cols);
    record_op<T>("permute_rows", {a}, out,
                 [an = a.node(), on = out.node(), perm = std::move(perm), cols] {
                     if (!an->requires_grad) return;
                     for (size_t i = 0; i < perm.size(); ++i)
                         for (int j = 0; j < cols; ++j)
                             an->grad[static_cast<size_t>(perm[i]) * cols + j] +=
                                 on->grad[i * cols + j];
                 });
    return out;
}

// Row gather with repeats allowed; backward scatter-adds.
template <typename T>
Tensor<T> select_rows(const Tensor<T>& a, std::vector<int> idx) {
    if (a.rank() != 2) throw DimensionError("select_rows: expected rank 2");
    const int rows = a.dim(0), cols = a.dim(1);
    for (int i : idx)
        if (i < 0 || i >= rows) throw DimensionError("select_rows: index out of range");
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(idx.size()), cols}, a.requires_grad());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(av.begin() + static_cast<size_t>(idx[i]) * cols,
                  av.begin() + static_cast<size_t>(idx[i] + 1) * cols, ov.begin() + i * cols);
    record_op<T>("select_rows", {a}, out, [an = a.node(), on = out.node(), idx = std::move(idx), cols] {
        if (!an->requires_grad) return;
        for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < cols; ++j)
                an->grad[static_cast<size_t>(idx[i]) * cols + j] += on->grad[i * cols + j];
    });
    return out;
}

// [C] -> [rows x C]
template <typename T>
Tensor<T> broadcast_row(const Tensor<T>& v, int rows) {
    if (v.rank() != 1) throw DimensionError("broadcast_row: expected rank 1");
    const int C = v.dim(0);
    Tensor<T> out = Tensor<T>::zeros({rows, C}, v.requires_grad());
    auto& ov = out.data();
    for (int r = 0; r < rows; ++r) std::copy(v.data().begin(), v.data().end(), ov.begin() + static_cast<size_t>(r) * C);
    record_op<T>("broadcast_row", {v}, out, [vn = v.node(), on = out.node(), rows, C] {
        if (!vn->requires_grad) return;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < C; ++c) vn->grad[c] += on->grad[static_cast<size_t>(r) * C + c];
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, n}, a.requires_grad() || b.requires_grad());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const T t = av[static_cast<size_t>(i) * k + l];
            const T* brow = bv.data() + static_cast<size_t>(l) * n;
            T* orow = ov.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += t * brow[j];
        }
    record_op<T>("matmul", {a, b}, out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
        const auto& g = on->grad;
        if (an->requires_grad) {
            for (int i = 0; i < m; ++i)
                for (int l = 0; l < k; ++l) {
                    T acc = T(0);
                    const T* grow = g.data() + static_cast<size_t>(i) * n;
                    const T* brow = bn->value.data() + static_cast<size_t>(l) * n;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    an->grad[static_cast<size_t>(i) * k + l] += acc;
                }
        }
        if (bn->requires_grad) {
            for (int i = 0; i < m; ++i)
                for (int l = 0; l < k; ++l) {
                    const T t = an->value[static_cast<size_t>(i) * k + l];
                    const T* grow = g.data() + static_cast<size_t>(i) * n;
                    T* brow = bn->grad.data() + static_cast<size_t>(l) * n;
                    for (int j = 0; j < n; ++j) brow[j] += t * grow[j];
                }
        }
    });
    return out;
}

// Per-channel bias over the last axis (the one permitted broadcast besides
// scalars).
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
    const int64_t C = detail::last_dim(x);
    if (b.rank() != 1 || b.dim(0) != C)
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " vs channels " + std::to_string(C));
    Tensor<T> out = Tensor<T>::zeros(x.shape(), x.requires_grad() || b.requires_grad());
    const int64_t rows = x.numel() / C;
    const auto& xv = x.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) ov[static_cast<size_t>(r * C + c)] = xv[static_cast<size_t>(r * C + c)] + bv[static_cast<size_t>(c)];
    record_op<T>("add_bias", {x, b}, out, [xn = x.node(), bn = b.node(), on = out.node(), rows, C] {
        if (xn->requires_grad)
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        if (bn->requires_grad)
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < C; ++c) bn->grad[static_cast<size_t>(c)] += on->grad[static_cast<size_t>(r * C + c)];
    });
    return out;
}

// Per-channel scale over the last axis.
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s) {
    const int64_t C = detail::last_dim(x);
    if (s.rank() != 1 || s.dim(0) != C)
        throw DimensionError("channel_scale: scale " + shape_str(s.shape()) + " vs channels " + std::to_string(C));
    Tensor<T> out = Tensor<T>::zeros(x.shape(), x.requires_grad() || s.requires_grad());
    const int64_t rows = x.numel() / C;
    const auto& xv = x.data();
    const auto& sv = s.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) ov[static_cast<size_t>(r * C + c)] = xv[static_cast<size_t>(r * C + c)] * sv[static_cast<size_t>(c)];
    record_op<T>("channel_scale", {x, s}, out, [xn = x.node(), sn = s.node(), on = out.node(), rows, C] {
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < C; ++c) {
                const size_t i = static_cast<size_t>(r * C + c);
                if (xn->requires_grad) xn->grad[i] += on->grad[i] * sn->value[static_cast<size_t>(c)];
                if (sn->requires_grad) sn->grad[static_cast<size_t>(c)] += on->grad[i] * xn->value[i];
            }
    });
    return out;
}

// Row-wise scale of a [R x C] tensor by s[R]; used for mask gating and for
// normalizing attention transports.
template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& s) {
    if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0))
        throw DimensionError("row_scale: " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
    const int R = x.dim(0), C = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros(x.shape(), x.requires_grad() || s.requires_grad());
    const auto& xv = x.data();
    const auto& sv = s.data();
    auto& ov = out.data();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) ov[static_cast<size_t>(r) * C + c] = xv[static_cast<size_t>(r) * C + c] * sv[static_cast<size_t>(r)];
    record_op<T>("row_scale", {x, s}, out, [xn = x.node(), sn = s.node(), on = out.node(), R, C] {
        for (int r = 0; r < R; ++r) {
            const T srow = sn->value[static_cast<size_t>(r)];
            for (int c = 0; c < C; ++c) {
                const size_t i = static_cast<size_t>(r) * C + c;
                if (xn->requires_grad) xn->grad[i] += on->grad[i] * srow;
                if (sn->requires_grad) sn->grad[static_cast<size_t>(r)] += on->grad[i] * xn->value[i];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax over the last axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const int64_t C = detail::last_dim(x);
    if (C < 1) throw DimensionError("layer_norm: empty channel axis");
    if (eps <= T(0)) throw ContractError("layer_norm: eps must be positive");
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw DimensionError("layer_norm: affine params must be [C]");
    const int64_t rows = x.numel() / C;
    Tensor<T> out = Tensor<T>::zeros(x.shape(), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(rows * C));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * C;
        T mean = T(0);
        for (int64_t c = 0; c < C; ++c) mean += row[c];
        mean /= static_cast<T>(C);
        T var = T(0);
        for (int64_t c = 0; c < C; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= static_cast<T>(C);
        const T inv = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = inv;
        for (int64_t c = 0; c < C; ++c) {
            const T xh = (row[c] - mean) * inv;
            (*xhat)[static_cast<size_t>(r * C + c)] = xh;
            ov[static_cast<size_t>(r * C + c)] = gamma.data()[static_cast<size_t>(c)] * xh + beta.data()[static_cast<size_t>(c)];
        }
    }
    record_op<T>("layer_norm", {x, gamma, beta}, out,
                 [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(), xhat, inv_std, rows, C] {
                     std::vector<T> dxh(static_cast<size_t>(C));
                     for (int64_t r = 0; r < rows; ++r) {
                         const T* g = on->grad.data() + r * C;
                         const T* xh = xhat->data() + r * C;
                         if (gn->requires_grad)
                             for (int64_t c = 0; c < C; ++c) gn->grad[static_cast<size_t>(c)] += g[c] * xh[c];
                         if (bn->requires_grad)
                             for (int64_t c = 0; c < C; ++c) bn->grad[static_cast<size_t>(c)] += g[c];
                         if (xn->requires_grad) {
                             T m1 = T(0), m2 = T(0);
                             for (int64_t c = 0; c < C; ++c) {
                                 dxh[static_cast<size_t>(c)] = g[c] * gn->value[static_cast<size_t>(c)];
                                 m1 += dxh[static_cast<size_t>(c)];
                                 m2 += dxh[static_cast<size_t>(c)] * xh[c];
                             }
                             m1 /= static_cast<T>(C);
                             m2 /= static_cast<T>(C);
                             const T inv = (*inv_std)[static_cast<size_t>(r)];
                             for (int64_t c = 0; c < C; ++c)
                                 xn->grad[static_cast<size_t>(r * C + c)] += (dxh[static_cast<size_t>(c)] - m1 - xh[c] * m2) * inv;
                         }
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    const int64_t C = detail::last_dim(x);
    const int64_t rows = x.numel() / C;
    Tensor<T> out = Tensor<T>::zeros(x.shape(), x.requires_grad());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * C;
        T mx = row[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T sum = T(0);
        for (int64_t c = 0; c < C; ++c) {
            const T e = std::exp(row[c] - mx);
            ov[static_cast<size_t>(r * C + c)] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int64_t c = 0; c < C; ++c) ov[static_cast<size_t>(r * C + c)] *= inv;
    }
    record_op<T>("softmax", {x}, out, [xn = x.node(), on = out.node(), rows, C] {
        if (!xn->requires_grad) return;
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = on->value.data() + r * C;
            const T* g = on->grad.data() + r * C;
            T dot = T(0);
            for (int64_t c = 0; c < C; ++c) dot += y[c] * g[c];
            for (int64_t c = 0; c < C; ++c) xn->grad[static_cast<size_t>(r * C + c)] += y[c] * (g[c] - dot);
        }
    });
    return out;
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
    const int64_t C = detail::last_dim(x);
    const int64_t rows = x.numel() / C;
    Tensor<T> out = Tensor<T>::zeros(x.shape(), x.requires_grad());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * C;
        T mx = row[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T sum = T(0);
        for (int64_t c = 0; c < C; ++c) sum += std::exp(row[c] - mx);
        const T lse = mx + std::log(sum);
        for (int64_t c = 0; c < C; ++c) ov[static_cast<size_t>(r * C + c)] = row[c] - lse;
    }
    record_op<T>("log_softmax", {x}, out, [xn = x.node(), on = out.node(), rows, C] {
        if (!xn->requires_grad) return;
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = on->value.data() + r * C;
            const T* g = on->grad.data() + r * C;
            T gsum = T(0);
            for (int64_t c = 0; c < C; ++c) gsum += g[c];
            for (int64_t c = 0; c < C; ++c)
                xn->grad[static_cast<size_t>(r * C + c)] += g[c] - std::exp(y[c]) * gsum;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros({1}, x.requires_grad());
    T acc = T(0);
    for (const T v : x.data()) acc += v;
    out.data()[0] = acc;
    record_op<T>("sum_all", {x}, out, [xn = x.node(), on = out.node()] {
        if (!xn->requires_grad) return;
        const T g = on->grad[0];
        for (auto& gv : xn->grad) gv += g;
    });
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// [R x C] -> [C]
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
    if (x.rank() != 2) throw DimensionError("mean_rows: expected rank 2");
    const int R = x.dim(0), C = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({C}, x.requires_grad());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) ov[static_cast<size_t>(c)] += xv[static_cast<size_t>(r) * C + c];
    const T inv = T(1) / static_cast<T>(R);
    for (auto& v : ov) v *= inv;
    record_op<T>("mean_rows", {x}, out, [xn = x.node(), on = out.node(), R, C, inv] {
        if (!xn->requires_grad) return;
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) xn->grad[static_cast<size_t>(r) * C + c] += on->grad[static_cast<size_t>(c)] * inv;
    });
    return out;
}

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw DimensionError("embedding: table must be [vocab x C]");
    if (ids.empty()) throw DataError("embedding: empty id sequence");
    const int V = table.dim(0), C = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= V)
            throw DataError("embedding: token id " + std::to_string(id) + " outside vocab " + std::to_string(V));
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(ids.size()), C}, table.requires_grad());
    const auto& tv = table.data();
    auto& ov = out.data();
    for (size_t l = 0; l < ids.size(); ++l)
        std::copy(tv.begin() + static_cast<size_t>(ids[l]) * C, tv.begin() + static_cast<size_t>(ids[l] + 1) * C,
                  ov.begin() + l * C);
    record_op<T>("embedding", {table}, out, [tn = table.node(), on = out.node(), ids, C] {
        if (!tn->requires_grad) return;
        for (size_t l = 0; l < ids.size(); ++l)
            for (int c = 0; c < C; ++c)
                tn->grad[static_cast<size_t>(ids[l]) * C + c] += on->grad[l * C + c];
    });
    return out;
}

// [R x K], idx[R] -> [R]; picks one column per row.
template <typename T>
Tensor<T> gather_lastdim(const Tensor<T>& x, const std::vector<int>& idx) {
    if (x.rank() != 2) throw DimensionError("gather_lastdim: expected rank 2");
    const int R = x.dim(0), K = x.dim(1);
    if (static_cast<int>(idx.size()) != R) throw DimensionError("gather_lastdim: index length mismatch");
    for (int i : idx)
        if (i < 0 || i >= K) throw DataError("gather_lastdim: index out of range");
    Tensor<T> out = Tensor<T>::zeros({R}, x.requires_grad());
    for (int r = 0; r < R; ++r) out.data()[static_cast<size_t>(r)] = x.data()[static_cast<size_t>(r) * K + idx[static_cast<size_t>(r)]];
    record_op<T>("gather_lastdim", {x}, out, [xn = x.node(), on = out.node(), idx, K] {
        if (!xn->requires_grad) return;
        for (size_t r = 0; r < idx.size(); ++r)
            xn->grad[r * K + static_cast<size_t>(idx[r])] += on->grad[r];
    });
    return out;
}

// ---------------------------------------------------------------------------
// convolution (channel-last, zero padding)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, int stride,
                 int padding) {
    if (input.rank() != 3) throw DimensionError("conv2d: input must be [H x W x Cin]");
    if (kernel.rank() != 4) throw DimensionError("conv2d: kernel must be [k x k x Cin x Cout]");
    const int H = input.dim(0), W = input.dim(1), Cin = input.dim(2);
    const int k = kernel.dim(0), Cout = kernel.dim(3);
    if (kernel.dim(1) != k) throw DimensionError("conv2d: kernel must be square");
    if (k % 2 == 0) throw ContractError("conv2d: kernel size must be odd");
    if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    if (kernel.dim(2) != Cin)
        throw DimensionError("conv2d: input channels " + std::to_string(Cin) + " vs kernel " +
                             std::to_string(kernel.dim(2)));
    if (bias.rank() != 1 || bias.dim(0) != Cout) throw DimensionError("conv2d: bias must be [Cout]");
    const int Ho = (H + 2 * padding - k) / stride + 1;
    const int Wo = (W + 2 * padding - k) / stride + 1;
    if (Ho < 1 || Wo < 1) throw DimensionError("conv2d: empty output");

    Tensor<T> out = Tensor<T>::zeros({Ho, Wo, Cout},
                                     input.requires_grad() || kernel.requires_grad() || bias.requires_grad());
    const auto& iv = input.data();
    const auto& kv = kernel.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
            T* orow = ov.data() + (static_cast<size_t>(oy) * Wo + ox) * Cout;
            for (int co = 0; co < Cout; ++co) orow[co] = bv[static_cast<size_t>(co)];
            for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride - padding + ky;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < k; ++kx) {
                    const int ix = ox * stride - padding + kx;
                    if (ix < 0 || ix >= W) continue;
                    const T* ipix = iv.data() + (static_cast<size_t>(iy) * W + ix) * Cin;
                    const T* kpos = kv.data() + (static_cast<size_t>(ky) * k + kx) * Cin * Cout;
                    for (int ci = 0; ci < Cin; ++ci) {
                        const T v = ipix[ci];
                        const T* kr = kpos + static_cast<size_t>(ci) * Cout;
                        for (int co = 0; co < Cout; ++co) orow[co] += v * kr[co];
                    }
                }
            }
        }
    record_op<T>("conv2d", {input, kernel, bias}, out,
                 [in = input.node(), kn = kernel.node(), bn = bias.node(), on = out.node(), H, W, Cin, k,
                  Cout, Ho, Wo, stride, padding] {
                     const auto& g = on->grad;
                     if (bn->requires_grad) {
                         for (int oy = 0; oy < Ho; ++oy)
                             for (int ox = 0; ox < Wo; ++ox) {
                                 const T* grow = g.data() + (static_cast<size_t>(oy) * Wo + ox) * Cout;
                                 for (int co = 0; co < Cout; ++co) bn->grad[static_cast<size_t>(co)] += grow[co];
                             }
                     }
                     if (!in->requires_grad && !kn->requires_grad) return;
                     for (int oy = 0; oy < Ho; ++oy)
                         for (int ox = 0; ox < Wo; ++ox) {
                             const T* grow = g.data() + (static_cast<size_t>(oy) * Wo + ox) * Cout;
                             for (int ky = 0; ky < k; ++ky) {
                                 const int iy = oy * stride - padding + ky;
                                 if (iy < 0 || iy >= H) continue;
                                 for (int kx = 0; kx < k; ++kx) {
                                     const int ix = ox * stride - padding + kx;
                                     if (ix < 0 || ix >= W) continue;
                                     const size_t ibase = (static_cast<size_t>(iy) * W + ix) * Cin;
                                     const size_t kbase = (static_cast<size_t>(ky) * k + kx) * Cin * Cout;
                                     for (int ci = 0; ci < Cin; ++ci) {
                                         const size_t krow = kbase + static_cast<size_t>(ci) * Cout;
                                         if (kn->requires_grad) {
                                             const T v = in->value[ibase + ci];
                                             for (int co = 0; co < Cout; ++co)
                                                 kn->grad[krow + co] += v * grow[co];
                                         }
                                         if (in->requires_grad) {
                                             T acc = T(0);
                                             for (int co = 0; co < Cout; ++co)
                                                 acc += kn->value[krow + co] * grow[co];
                                             in->grad[ibase + ci] += acc;
                                         }
                                     }
                                 }
                             }
                         }
                 });
    return out;
}

// Depthwise 3x3-style conv: kernel [k x k x C], stride 1.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           int padding) {
    if (input.rank() != 3) throw DimensionError("depthwise_conv2d: input must be [H x W x C]");
    if (kernel.rank() != 3) throw DimensionError("depthwise_conv2d: kernel must be [k x k x C]");
    const int H = input.dim(0), W = input.dim(1), C = input.dim(2);
    const int k = kernel.dim(0);
    if (kernel.dim(1) != k || k % 2 == 0) throw ContractError("depthwise_conv2d: kernel must be square, odd");
    if (kernel.dim(2) != C) throw DimensionError("depthwise_conv2d: channel mismatch");
    if (bias.rank() != 1 || bias.dim(0) != C) throw DimensionError("depthwise_conv2d: bias must be [C]");
    const int Ho = H + 2 * padding - k + 1;
    const int Wo = W + 2 * padding - k + 1;
    if (Ho < 1 || Wo < 1) throw DimensionError("depthwise_conv2d: empty output");
    Tensor<T> out = Tensor<T>::zeros({Ho, Wo, C},
                                     input.requires_grad() || kernel.requires_grad() || bias.requires_grad());
    const auto& iv = input.data();
    const auto& kv = kernel.data();
    auto& ov = out.data();
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
            T* orow = ov.data() + (static_cast<size_t>(oy) * Wo + ox) * C;
            for (int c = 0; c < C; ++c) orow[c] = bias.data()[static_cast<size_t>(c)];
            for (int ky = 0; ky < k; ++ky) {
                const int iy = oy - padding + ky;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < k; ++kx) {
                    const int ix = ox - padding + kx;
                    if (ix < 0 || ix >= W) continue;
                    const T* ipix = iv.data() + (static_cast<size_t>(iy) * W + ix) * C;
                    const T* kr = kv.data() + (static_cast<size_t>(ky) * k + kx) * C;
                    for (int c = 0; c < C; ++c) orow[c] += ipix[c] * kr[c];
                }
            }
        }
    record_op<T>("depthwise_conv2d", {input, kernel, bias}, out,
                 [in = input.node(), kn = kernel.node(), bn = bias.node(), on = out.node(), H, W, C, k, Ho,
                  Wo, padding] {
                     const auto& g = on->grad;
                     for (int oy = 0; oy < Ho; ++oy)
                         for (int ox = 0; ox < Wo; ++ox) {
                             const T* grow = g.data() + (static_cast<size_t>(oy) * Wo + ox) * C;
                             if (bn->requires_grad)
                                 for (int c = 0; c < C; ++c) bn->grad[static_cast<size_t>(c)] += grow[c];
                             for (int ky = 0; ky < k; ++ky) {
                                 const int iy = oy - padding + ky;
                                 if (iy < 0 || iy >= H) continue;
                                 for (int kx = 0; kx < k; ++kx) {
                                     const int ix = ox - padding + kx;
                                     if (ix < 0 || ix >= W) continue;
                                     const size_t ibase = (static_cast<size_t>(iy) * W + ix) * C;
                                     const size_t kbase = (static_cast<size_t>(ky) * k + kx) * C;
                                     for (int c = 0; c < C; ++c) {
                                         if (kn->requires_grad)
                                             kn->grad[kbase + c] += in->value[ibase + c] * grow[c];
                                         if (in->requires_grad)
                                             in->grad[ibase + c] += kn->value[kbase + c] * grow[c];
                                     }
                                 }
                             }
                         }
                 });
    return out;
}

// ---------------------------------------------------------------------------
// selective-scan recurrence core
// ---------------------------------------------------------------------------

// Diagonal input-dependent SSM step over a length-L sequence:
//   abar_t[c,n] = exp(delta_t[c] * A[c,n])
//   h_t[c,n]    = abar_t[c,n] * h_{t-1}[c,n] + delta_t[c] * B_t[n] * x_t[c]
//   y_t[c]      = sum_n C_t[n] * h_t[c,n] + D[c] * x_t[c]
// with h_0 = 0. A must be strictly negative, delta strictly positive.
template <typename T>
Tensor<T> ssm_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& Bmat,
                   const Tensor<T>& Cmat, const Tensor<T>& A, const Tensor<T>& D) {
    if (x.rank() != 2) throw DimensionError("ssm_scan: x must be [L x C]");
    const int L = x.dim(0), C = x.dim(1);
    if (delta.shape() != Shape{L, C}) throw DimensionError("ssm_scan: delta must match x");
    if (Bmat.rank() != 2 || Bmat.dim(0) != L) throw DimensionError("ssm_scan: B must be [L x N]");
    const int N = Bmat.dim(1);
    if (Cmat.shape() != Shape{L, N}) throw DimensionError("ssm_scan: C must be [L x N]");
    if (A.shape() != Shape{C, N}) throw DimensionError("ssm_scan: A must be [C x N]");
    if (D.shape() != Shape{C}) throw DimensionError("ssm_scan: D must be [C]");
    for (const T a : A.data())
        if (!(a < T(0))) throw ContractError("ssm_scan: A must be strictly negative");
    for (const T d : delta.data())
        if (!(d > T(0))) throw ContractError("ssm_scan: delta must be strictly positive");

    const bool rg = x.requires_grad() || delta.requires_grad() || Bmat.requires_grad() ||
                    Cmat.requires_grad() || A.requires_grad() || D.requires_grad();
    Tensor<T> out = Tensor<T>::zeros({L, C}, rg);
    // States and discretized decays are kept for the backward sweep.
    auto hs = std::make_shared<std::vector<T>>(static_cast<size_t>(L) * C * N);
    auto abars = std::make_shared<std::vector<T>>(static_cast<size_t>(L) * C * N);
    const auto& xv = x.data();
    const auto& dv = delta.data();
    const auto& bv = Bmat.data();
    const auto& cv = Cmat.data();
    const auto& av = A.data();
    const auto& Dv = D.data();
    auto& ov = out.data();
    std::vector<T> h(static_cast<size_t>(C) * N, T(0));
    for (int t = 0; t < L; ++t) {
        const T* bt = bv.data() + static_cast<size_t>(t) * N;
        const T* ct = cv.data() + static_cast<size_t>(t) * N;
        for (int c = 0; c < C; ++c) {
            const T dt = dv[static_cast<size_t>(t) * C + c];
            const T xt = xv[static_cast<size_t>(t) * C + c];
            const T* arow = av.data() + static_cast<size_t>(c) * N;
            T* hrow = h.data() + static_cast<size_t>(c) * N;
            T y = Dv[static_cast<size_t>(c)] * xt;
            const size_t base = (static_cast<size_t>(t) * C + c) * N;
            for (int n = 0; n < N; ++n) {
                const T ab = std::exp(dt * arow[n]);
                hrow[n] = ab * hrow[n] + dt * bt[n] * xt;
                (*abars)[base + n] = ab;
                (*hs)[base + n] = hrow[n];
                y += ct[n] * hrow[n];
            }
            ov[static_cast<size_t>(t) * C + c] = y;
        }
    }
    record_op<T>("ssm_scan", {x, delta, Bmat, Cmat, A, D}, out,
                 [xn = x.node(), dn = delta.node(), bn = Bmat.node(), cn = Cmat.node(), an = A.node(),
                  Dn = D.node(), on = out.node(), hs, abars, L, C, N] {
                     const auto& g = on->grad;
                     std::vector<T> gh(static_cast<size_t>(C) * N, T(0));
                     for (int t = L - 1; t >= 0; --t) {
                         const T* bt = bn->value.data() + static_cast<size_t>(t) * N;
                         const T* ct = cn->value.data() + static_cast<size_t>(t) * N;
                         for (int c = 0; c < C; ++c) {
                             const size_t tc = static_cast<size_t>(t) * C + c;
                             const size_t base = tc * N;
                             const T gy = g[tc];
                             const T dt = dn->value[tc];
                             const T xt = xn->value[tc];
                             const T* arow = an->value.data() + static_cast<size_t>(c) * N;
                             T* ghrow = gh.data() + static_cast<size_t>(c) * N;
                             if (Dn->requires_grad) Dn->grad[static_cast<size_t>(c)] += gy * xt;
                             T gx = Dn->value[static_cast<size_t>(c)] * gy;
                             T gdt = T(0);
                             for (int n = 0; n < N; ++n) {
                                 const T ht = (*hs)[base + n];
                                 const T hprev = t > 0 ? (*hs)[base - static_cast<size_t>(C) * N + n] : T(0);
                                 const T ab = (*abars)[base + n];
                                 T ghn = ghrow[n] + gy * ct[n];
                                 if (cn->requires_grad) cn->grad[static_cast<size_t>(t) * N + n] += gy * ht;
                                 // h_t = ab * h_prev + dt * B * x
                                 if (an->requires_grad)
                                     an->grad[static_cast<size_t>(c) * N + n] += ghn * hprev * ab * dt;
                                 gdt += ghn * (hprev * ab * arow[n] + bt[n] * xt);
                                 if (bn->requires_grad) bn->grad[static_cast<size_t>(t) * N + n] += ghn * dt * xt;
                                 gx += ghn * dt * bt[n];
                                 ghrow[n] = ghn * ab;
                             }
                             if (dn->requires_grad) dn->grad[tc] += gdt;
                             if (xn->requires_grad) xn->grad[tc] += gx;
                         }
                     }
                 });
    return out;
}

}  // namespace mambatrans
