#pragma once

#include <functional>

#include "cmtr/ops.hpp"

namespace cmtr {

// Central-finite-difference check of reverse-mode gradients.
//
// f must be a deterministic scalar-valued function of its tensor argument;
// it is re-evaluated many times on perturbed copies. Returns the max over
// coordinates of |analytic - central| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0,
                         double eps) {
    check(eps >= 1e-7 && eps <= 1e-3, "grad_check: eps outside [1e-7, 1e-3]");

    // determinism guard: two evaluations at the same point must agree bitwise
    {
        Tensor a = x0.clone(), b = x0.clone();
        a.set_requires_grad(false);
        b.set_requires_grad(false);
        double ya = f(a).item(), yb = f(b).item();
        check(ya == yb, "grad_check: f is not deterministic, check is unreliable");
    }

    std::vector<double> analytic;
    {
        Tape tape;
        Tensor x = x0.clone();
        tape.attach(x);
        Tensor y = f(x);
        check(y.size() == 1, "grad_check: f must be scalar-valued");
        tape.backward(y);
        analytic = x.grad();
    }

    Tensor xp = x0.clone();
    xp.set_requires_grad(false);
    double max_err = 0.0;
    for (std::size_t i = 0; i < xp.size(); ++i) {
        double orig = xp.data()[i];
        xp.data()[i] = orig + eps;
        double yp = f(xp).item();
        xp.data()[i] = orig - eps;
        double ym = f(xp).item();
        xp.data()[i] = orig;
        double fd = (yp - ym) / (2.0 * eps);
        double err = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(analytic[i]));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

// Variant for functions of several tensors: checks the gradient w.r.t. the
// tensor at `which` while the others stay fixed.
inline double grad_check_multi(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                               const std::vector<Tensor>& xs, std::size_t which, double eps) {
    check(which < xs.size(), "grad_check_multi: index out of range");
    auto g = [&](const Tensor& xi) {
        std::vector<Tensor> args;
        args.reserve(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (i == which) {
                args.push_back(xi);
            } else {
                Tensor c = xs[i].clone();
                c.set_requires_grad(false);
                args.push_back(c);
            }
        }
        return f(args);
    };
    return grad_check(g, xs[which], eps);
}

}  // namespace cmtr
