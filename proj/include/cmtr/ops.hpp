#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cmtr/tensor.hpp"

// Forward ops with reverse-mode gradients. Every op computes its value
// eagerly; when an input sits on a live tape and requires a gradient, the op
// records a backward closure that accumulates into the inputs' grad buffers.
// Reductions accumulate left-to-right so runs are bit-reproducible.

namespace cmtr {

namespace detail {

// (outer, n, inner) decomposition for per-axis loops.
struct AxisSplit {
    std::size_t outer, n, inner;
};

inline AxisSplit axis_split(const Shape& s, std::size_t axis) {
    check(axis < s.size(), "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSplit sp{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

// mm kernels; row-major. acc variants add into C.
inline void mm_nn(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
                  std::size_t N, bool acc) {
    for (std::size_t i = 0; i < M; ++i) {
        double* ci = C + i * N;
        if (!acc) std::fill(ci, ci + N, 0.0);
        const double* ai = A + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = ai[k];
            const double* bk = B + k * N;
            for (std::size_t j = 0; j < N; ++j) ci[j] += a * bk[j];
        }
    }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
inline void mm_nt(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
                  std::size_t N, bool acc) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* ai = A + i * K;
        double* ci = C + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const double* bj = B + j * K;
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) s += ai[k] * bj[k];
            ci[j] = acc ? ci[j] + s : s;
        }
    }
}

// C[K,N] (+)= A[M,K]^T * B[M,N]
inline void mm_tn(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
                  std::size_t N, bool acc) {
    if (!acc) std::fill(C, C + K * N, 0.0);
    for (std::size_t i = 0; i < M; ++i) {
        const double* ai = A + i * K;
        const double* bi = B + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = ai[k];
            double* ck = C + k * N;
            for (std::size_t j = 0; j < N; ++j) ck[j] += a * bi[j];
        }
    }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        check(da == db || da == 1 || db == 1,
              "broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// shape ops

inline Tensor broadcast_to(const Tensor& a, const Shape& target) {
    if (a.shape() == target) return a;
    const Shape& src = a.shape();
    std::size_t r = target.size();
    check(src.size() <= r, "broadcast_to: source rank exceeds target");
    // effective strides with 0 on expanded axes
    std::vector<std::size_t> sstr(r, 0);
    auto real = strides_of(src);
    std::size_t off = r - src.size();
    for (std::size_t i = 0; i < src.size(); ++i) {
        check(src[i] == target[off + i] || src[i] == 1,
              "broadcast_to: cannot expand " + shape_str(src) + " to " + shape_str(target));
        sstr[off + i] = src[i] == 1 ? 0 : real[i];
    }
    std::size_t n = numel(target);
    Shape tgt = target;
    std::vector<double> out(n);
    {
        std::vector<std::size_t> idx(r, 0);
        const double* src_data = a.data();
        std::size_t sidx = 0;
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = src_data[sidx];
            for (std::size_t ax = r; ax-- > 0;) {
                ++idx[ax];
                sidx += sstr[ax];
                if (idx[ax] < tgt[ax]) break;
                sidx -= sstr[ax] * tgt[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor res = Tensor::from_data(tgt, std::move(out));
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, tgt, sstr, r, n]() {
            // grad sums over the expanded positions
            std::vector<std::size_t> idx(r, 0);
            std::size_t sidx = 0;
            for (std::size_t i = 0; i < n; ++i) {
                an->grad[sidx] += on->grad[i];
                for (std::size_t ax = r; ax-- > 0;) {
                    ++idx[ax];
                    sidx += sstr[ax];
                    if (idx[ax] < tgt[ax]) break;
                    sidx -= sstr[ax] * tgt[ax];
                    idx[ax] = 0;
                }
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// elementwise binary with broadcasting

namespace detail {

template <class Fwd, class Bwd>
Tensor ew_binary(const Tensor& a0, const Tensor& b0, Fwd fwd, Bwd bwd, const char* /*name*/) {
    Shape os = broadcast_shape(a0.shape(), b0.shape());
    Tensor a = a0.shape() == os ? a0 : broadcast_to(a0, os);
    Tensor b = b0.shape() == os ? b0 : broadcast_to(b0, os);
    std::size_t n = numel(os);
    std::vector<double> out(n);
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    Tensor res = Tensor::from_data(os, std::move(out));
    Tape* tape = common_tape({&a, &b});
    if (tape && any_requires_grad({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = res.node();
        tape->record(res, [an, bn, on, bwd, n]() {
            for (std::size_t i = 0; i < n; ++i) {
                double ga, gb;
                bwd(an->value[i], bn->value[i], on->value[i], on->grad[i], ga, gb);
                if (an->requires_grad) an->grad[i] += ga;
                if (bn->requires_grad) bn->grad[i] += gb;
            }
        });
    }
    return res;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        a, b, [](double x, double y) { return x + y; },
        [](double, double, double, double g, double& ga, double& gb) {
            ga = g;
            gb = g;
        },
        "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        a, b, [](double x, double y) { return x - y; },
        [](double, double, double, double g, double& ga, double& gb) {
            ga = g;
            gb = -g;
        },
        "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double, double g, double& ga, double& gb) {
            ga = g * y;
            gb = g * x;
        },
        "mul");
}

// Documented domain: divisor nonzero.
inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double, double g, double& ga, double& gb) {
            ga = g / y;
            gb = -g * x / (y * y);
        },
        "div");
}

// ---------------------------------------------------------------------------
// elementwise unary

inline Tensor scale(const Tensor& a, double c) {
    std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * c;
    Tensor res = Tensor::from_data(a.shape(), std::move(out));
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, c, n]() {
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return res;
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + c;
    Tensor res = Tensor::from_data(a.shape(), std::move(out));
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, n]() {
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
        });
    }
    return res;
}

namespace detail {

// dfdx(x, y): local derivative given input x and output y.
template <class Fwd, class Dfdx>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfdx dfdx) {
    std::size_t n = a.size();
    std::vector<double> out(n);
    const double* pa = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
    Tensor res = Tensor::from_data(a.shape(), std::move(out));
    if (Tape* tape = common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, dfdx, n]() {
            for (std::size_t i = 0; i < n; ++i)
                an->grad[i] += on->grad[i] * dfdx(an->value[i], on->value[i]);
        });
    }
    return res;
}

inline double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return x > 0 ? x : 0.0; },
        [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

// Exact gelu: x * Phi(x).
inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(
        a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x, double) {
            double phi_cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double phi_pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            return phi_cdf + x * phi_pdf;
        });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    for (double x : a.value())
        if (!(x > 0.0)) throw DomainError("log: input must be positive, got " + std::to_string(x));
    return detail::unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
    for (double x : a.value())
        if (x < 0.0) throw DomainError("sqrt: input must be nonnegative, got " + std::to_string(x));
    return detail::unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

// Stable log(1+exp(x)) = max(x,0) + log1p(exp(-|x|)); for x > 30 this is x to
// machine precision.
inline Tensor softplus(const Tensor& a) {
    return detail::unary_op(
        a,
        [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
        [](double x, double) { return detail::sigmoid(x); });
}

// max(x, c); gradient passes only where x > c.
inline Tensor clamp_min(const Tensor& a, double c) {
    return detail::unary_op(
        a, [c](double x) { return x > c ? x : c; },
        [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

// Elementwise huber: 0.5 x^2 / beta for |x| <= beta, |x| - 0.5 beta otherwise.
inline Tensor huber(const Tensor& a, double beta) {
    check(beta > 0, "huber: beta must be positive");
    return detail::unary_op(
        a,
        [beta](double x) {
            double ax = std::fabs(x);
            return ax <= beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
        },
        [beta](double x, double) { return std::clamp(x / beta, -1.0, 1.0); });
}

// ---------------------------------------------------------------------------
// matmul / transpose / reshape

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: both operands must be matrices, got " +
                                              shape_str(a.shape()) + " and " +
                                              shape_str(b.shape()));
    std::size_t M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
    check(K == K2, "matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    std::vector<double> out(M * N);
    detail::mm_nn(a.data(), b.data(), out.data(), M, K, N, false);
    Tensor res = Tensor::from_data({M, N}, std::move(out));
    if (Tape* tape = detail::common_tape({&a, &b});
        tape && detail::any_requires_grad({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = res.node();
        tape->record(res, [an, bn, on, M, K, N]() {
            if (an->requires_grad)
                detail::mm_nt(on->grad.data(), bn->value.data(), an->grad.data(), M, N, K, true);
            if (bn->requires_grad)
                detail::mm_tn(an->value.data(), on->grad.data(), bn->grad.data(), M, K, N, true);
        });
    }
    return res;
}

inline Tensor transpose(const Tensor& a) {
    check(a.rank() == 2, "transpose: operand must be a matrix");
    std::size_t R = a.dim(0), C = a.dim(1);
    std::vector<double> out(R * C);
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) out[j * R + i] = a.data()[i * C + j];
    Tensor res = Tensor::from_data({C, R}, std::move(out));
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, R, C]() {
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < C; ++j) an->grad[i * C + j] += on->grad[j * R + i];
        });
    }
    return res;
}

inline Tensor reshape(const Tensor& a, Shape s) {
    check(numel(s) == a.size(), "reshape: element count mismatch, " + shape_str(a.shape()) +
                                    " to " + shape_str(s));
    Tensor res = Tensor::from_data(std::move(s), a.value());
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        std::size_t n = a.size();
        tape->record(res, [an, on, n]() {
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// concat / slice

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    check(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    check(axis < s0.size(), "concat: axis out of range");
    std::size_t axis_total = 0;
    for (const Tensor& p : parts) {
        check(p.rank() == s0.size(), "concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            check(i == axis || p.shape()[i] == s0[i], "concat: shape mismatch on axis " +
                                                          std::to_string(i));
        axis_total += p.shape()[axis];
    }
    Shape os = s0;
    os[axis] = axis_total;
    auto sp = detail::axis_split(os, axis);
    std::vector<double> out(numel(os));
    std::size_t pos = 0;  // running offset along the axis
    for (const Tensor& p : parts) {
        std::size_t pn = p.shape()[axis];
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const double* src = p.data() + o * pn * sp.inner;
            double* dst = out.data() + (o * sp.n + pos) * sp.inner;
            std::copy(src, src + pn * sp.inner, dst);
        }
        pos += pn;
    }
    Tensor res = Tensor::from_data(os, std::move(out));

    std::vector<const Tensor*> ptrs;
    for (const Tensor& p : parts) ptrs.push_back(&p);
    Tape* tape = nullptr;
    bool rg = false;
    for (const Tensor* p : ptrs) {
        if (p->tape()) {
            check(tape == nullptr || tape == p->tape(), "concat: inputs on different tapes");
            tape = p->tape();
        }
        rg = rg || p->requires_grad();
    }
    if (tape && rg) {
        std::vector<std::shared_ptr<detail::TensorNode>> nodes;
        std::vector<std::size_t> lens;
        for (const Tensor& p : parts) {
            nodes.push_back(p.node());
            lens.push_back(p.shape()[axis]);
        }
        auto on = res.node();
        tape->record(res, [nodes, lens, on, sp]() {
            std::size_t pos = 0;
            for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                auto& nd = nodes[pi];
                std::size_t pn = lens[pi];
                if (nd->requires_grad) {
                    for (std::size_t o = 0; o < sp.outer; ++o) {
                        const double* src = on->grad.data() + (o * sp.n + pos) * sp.inner;
                        double* dst = nd->grad.data() + o * pn * sp.inner;
                        for (std::size_t i = 0; i < pn * sp.inner; ++i) dst[i] += src[i];
                    }
                }
                pos += pn;
            }
        });
    }
    return res;
}

// Half-open [begin, end) along axis.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    check(axis < a.rank(), "slice: axis out of range");
    check(begin < end && end <= a.shape()[axis],
          "slice: bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis of size " +
              std::to_string(a.shape()[axis]));
    auto sp = detail::axis_split(a.shape(), axis);
    std::size_t pn = end - begin;
    Shape os = a.shape();
    os[axis] = pn;
    std::vector<double> out(numel(os));
    for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* src = a.data() + (o * sp.n + begin) * sp.inner;
        std::copy(src, src + pn * sp.inner, out.data() + o * pn * sp.inner);
    }
    Tensor res = Tensor::from_data(os, std::move(out));
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, sp, begin, pn]() {
            for (std::size_t o = 0; o < sp.outer; ++o) {
                const double* src = on->grad.data() + o * pn * sp.inner;
                double* dst = an->grad.data() + (o * sp.n + begin) * sp.inner;
                for (std::size_t i = 0; i < pn * sp.inner; ++i) dst[i] += src[i];
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.value()) s += x;
    Tensor res = Tensor::scalar(s);
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on]() {
            double g = on->grad[0];
            for (double& gi : an->grad) gi += g;
        });
    }
    return res;
}

inline Tensor mean(const Tensor& a) {
    check(a.size() > 0, "mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor sum(const Tensor& a, std::size_t axis) {
    auto sp = detail::axis_split(a.shape(), axis);
    Shape os;
    for (std::size_t i = 0; i < a.rank(); ++i)
        if (i != axis) os.push_back(a.shape()[i]);
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.n; ++i) {
            const double* src = a.data() + (o * sp.n + i) * sp.inner;
            double* dst = out.data() + o * sp.inner;
            for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
        }
    Tensor res = Tensor::from_data(os, std::move(out));
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, sp]() {
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t i = 0; i < sp.n; ++i) {
                    double* dst = an->grad.data() + (o * sp.n + i) * sp.inner;
                    const double* src = on->grad.data() + o * sp.inner;
                    for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
                }
        });
    }
    return res;
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
    auto sp = detail::axis_split(a.shape(), axis);
    check(sp.n > 0, "mean: empty axis");
    return scale(sum(a, axis), 1.0 / static_cast<double>(sp.n));
}

// ---------------------------------------------------------------------------
// softmax family

inline Tensor softmax(const Tensor& a, std::size_t axis) {
    auto sp = detail::axis_split(a.shape(), axis);
    std::vector<double> out(a.size());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < sp.n; ++i)
                mx = std::max(mx, a.data()[(o * sp.n + i) * sp.inner + in]);
            double den = 0.0;
            for (std::size_t i = 0; i < sp.n; ++i) {
                std::size_t idx = (o * sp.n + i) * sp.inner + in;
                out[idx] = std::exp(a.data()[idx] - mx);
                den += out[idx];
            }
            for (std::size_t i = 0; i < sp.n; ++i) out[(o * sp.n + i) * sp.inner + in] /= den;
        }
    Tensor res = Tensor::from_data(a.shape(), std::move(out));
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, sp]() {
            // dx = y .* (dy - sum(dy .* y))
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < sp.n; ++i) {
                        std::size_t idx = (o * sp.n + i) * sp.inner + in;
                        dot += on->grad[idx] * on->value[idx];
                    }
                    for (std::size_t i = 0; i < sp.n; ++i) {
                        std::size_t idx = (o * sp.n + i) * sp.inner + in;
                        an->grad[idx] += on->value[idx] * (on->grad[idx] - dot);
                    }
                }
        });
    }
    return res;
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis) {
    auto sp = detail::axis_split(a.shape(), axis);
    std::vector<double> out(a.size());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < sp.n; ++i)
                mx = std::max(mx, a.data()[(o * sp.n + i) * sp.inner + in]);
            double den = 0.0;
            for (std::size_t i = 0; i < sp.n; ++i)
                den += std::exp(a.data()[(o * sp.n + i) * sp.inner + in] - mx);
            double lse = mx + std::log(den);
            for (std::size_t i = 0; i < sp.n; ++i) {
                std::size_t idx = (o * sp.n + i) * sp.inner + in;
                out[idx] = a.data()[idx] - lse;
            }
        }
    Tensor res = Tensor::from_data(a.shape(), std::move(out));
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, sp]() {
            // dx = dy - softmax(x) * sum(dy)
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    double gsum = 0.0;
                    for (std::size_t i = 0; i < sp.n; ++i)
                        gsum += on->grad[(o * sp.n + i) * sp.inner + in];
                    for (std::size_t i = 0; i < sp.n; ++i) {
                        std::size_t idx = (o * sp.n + i) * sp.inner + in;
                        an->grad[idx] += on->grad[idx] - std::exp(on->value[idx]) * gsum;
                    }
                }
        });
    }
    return res;
}

// Pure normalization along `axis` (no affine): (x - mu) / sqrt(var + eps),
// biased variance.
inline Tensor layer_norm(const Tensor& a, std::size_t axis, double eps) {
    check(eps > 0, "layer_norm: eps must be positive");
    auto sp = detail::axis_split(a.shape(), axis);
    std::vector<double> out(a.size());
    std::vector<double> inv_std(sp.outer * sp.inner);
    double n = static_cast<double>(sp.n);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            double mu = 0.0;
            for (std::size_t i = 0; i < sp.n; ++i) mu += a.data()[(o * sp.n + i) * sp.inner + in];
            mu /= n;
            double var = 0.0;
            for (std::size_t i = 0; i < sp.n; ++i) {
                double d = a.data()[(o * sp.n + i) * sp.inner + in] - mu;
                var += d * d;
            }
            var /= n;
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[o * sp.inner + in] = is;
            for (std::size_t i = 0; i < sp.n; ++i) {
                std::size_t idx = (o * sp.n + i) * sp.inner + in;
                out[idx] = (a.data()[idx] - mu) * is;
            }
        }
    Tensor res = Tensor::from_data(a.shape(), std::move(out));
    if (Tape* tape = detail::common_tape({&a}); tape && a.requires_grad()) {
        auto an = a.node();
        auto on = res.node();
        tape->record(res, [an, on, sp, inv_std, n]() {
            // dx = is * (dy - mean(dy) - xhat * mean(dy .* xhat))
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    double is = inv_std[o * sp.inner + in];
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t i = 0; i < sp.n; ++i) {
                        std::size_t idx = (o * sp.n + i) * sp.inner + in;
                        m1 += on->grad[idx];
                        m2 += on->grad[idx] * on->value[idx];
                    }
                    m1 /= n;
                    m2 /= n;
                    for (std::size_t i = 0; i < sp.n; ++i) {
                        std::size_t idx = (o * sp.n + i) * sp.inner + in;
                        an->grad[idx] += is * (on->grad[idx] - m1 - on->value[idx] * m2);
                    }
                }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// batch normalization (training mode, statistics over axis 0 of a matrix)

struct BatchNormResult {
    Tensor out;
    std::vector<double> batch_mean;  // per feature, for running-stat updates
    std::vector<double> batch_var;   // biased
};

inline BatchNormResult batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                       double eps) {
    check(x.rank() == 2, "batchnorm: input must be [batch, features]");
    std::size_t B = x.dim(0), D = x.dim(1);
    check(B >= 2, "batchnorm: training mode needs a batch of at least 2");
    check(gamma.size() == D && beta.size() == D, "batchnorm: parameter size mismatch");
    std::vector<double> mu(D, 0.0), var(D, 0.0), inv_std(D);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < D; ++j) mu[j] += x.data()[b * D + j];
    for (double& m : mu) m /= static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < D; ++j) {
            double d = x.data()[b * D + j] - mu[j];
            var[j] += d * d;
        }
    for (double& v : var) v /= static_cast<double>(B);
    for (std::size_t j = 0; j < D; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);

    std::vector<double> xhat(B * D), out(B * D);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < D; ++j) {
            double h = (x.data()[b * D + j] - mu[j]) * inv_std[j];
            xhat[b * D + j] = h;
            out[b * D + j] = gamma.data()[j] * h + beta.data()[j];
        }
    Tensor res = Tensor::from_data({B, D}, std::move(out));
    if (Tape* tape = detail::common_tape({&x, &gamma, &beta});
        tape && detail::any_requires_grad({&x, &gamma, &beta})) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = res.node();
        tape->record(res, [xn, gn, bn, on, xhat, inv_std, B, D]() {
            double nb = static_cast<double>(B);
            for (std::size_t j = 0; j < D; ++j) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    double dy = on->grad[b * D + j];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat[b * D + j];
                }
                if (gn->requires_grad) gn->grad[j] += sum_dy_xhat;
                if (bn->requires_grad) bn->grad[j] += sum_dy;
                if (xn->requires_grad) {
                    double g = gn->value[j] * inv_std[j];
                    for (std::size_t b = 0; b < B; ++b) {
                        double dy = on->grad[b * D + j];
                        xn->grad[b * D + j] +=
                            g * (dy - sum_dy / nb - xhat[b * D + j] * sum_dy_xhat / nb);
                    }
                }
            }
        });
    }
    return {res, std::move(mu), std::move(var)};
}

// ---------------------------------------------------------------------------
// cosine similarity

// Epsilon-stabilized norm: sqrt(clamp(sum x^2, eps^2)) == max(||x||, eps)
// exactly, with a finite gradient everywhere.
inline constexpr double kNormEps = 1e-12;

inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    check(a.size() == b.size() && a.size() > 0, "cosine_similarity: length mismatch");
    Tensor dot = sum(mul(a, b));
    Tensor na = sqrt(clamp_min(sum(mul(a, a)), kNormEps * kNormEps));
    Tensor nb = sqrt(clamp_min(sum(mul(b, b)), kNormEps * kNormEps));
    return div(dot, mul(na, nb));
}

inline Tensor cosine_distance(const Tensor& a, const Tensor& b) {
    return add_scalar(scale(cosine_similarity(a, b), -1.0), 1.0);
}

// Row-wise cosine similarity of two [B, D] matrices -> [B].
inline Tensor rowwise_cosine_similarity(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && a.shape() == b.shape(), "rowwise cosine: shape mismatch");
    Tensor dot = sum(mul(a, b), 1);
    Tensor na = sqrt(clamp_min(sum(mul(a, a), 1), kNormEps * kNormEps));
    Tensor nb = sqrt(clamp_min(sum(mul(b, b), 1), kNormEps * kNormEps));
    return div(dot, mul(na, nb));
}

// ---------------------------------------------------------------------------
// operators

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

}  // namespace cmtr
