#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "architts/tensor.hpp"

// Central-difference gradient checking. Meant to run in double precision so
// that eps = 1e-5 leaves several digits of headroom above rounding noise.

namespace architts {

// Numerical gradient of scalar_fn with respect to the entries of x.
// scalar_fn must treat its argument as a pure value (no graph required).
template <typename S>
std::vector<S> finite_difference_grad(const std::function<S(const std::vector<S>&)>& scalar_fn,
                                      std::vector<S> x, S eps = S(1e-5)) {
    std::vector<S> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const S saved = x[i];
        x[i] = saved + eps;
        const S up = scalar_fn(x);
        x[i] = saved - eps;
        const S down = scalar_fn(x);
        x[i] = saved;
        g[i] = (up - down) / (S(2) * eps);
    }
    return g;
}

// Relative L2 error between an analytic and a numerical gradient.
template <typename S>
S grad_rel_error(const std::vector<S>& analytic, const std::vector<S>& numeric) {
    if (analytic.size() != numeric.size())
        throw ShapeError("grad_rel_error: size mismatch");
    S diff2 = 0, ref2 = 0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const S d = analytic[i] - numeric[i];
        diff2 += d * d;
        ref2 += numeric[i] * numeric[i];
    }
    const S denom = std::max(std::sqrt(ref2), S(1e-12));
    return std::sqrt(diff2) / denom;
}

}  // namespace architts
