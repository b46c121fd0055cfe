#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "architts/errors.hpp"
#include "architts/tensor.hpp"

// CTC loss as a log-space forward dynamic program over the blank-extended
// label sequence, with an alpha-beta gradient, a brute-force enumeration
// oracle for small instances, and greedy decoding. Blank index is 0; token
// ids are shifted by +1 when entering CTC space.

namespace architts {

namespace ctc_detail {

template <typename S>
constexpr S neg_inf() {
    return -std::numeric_limits<S>::infinity();
}

template <typename S>
S lse2(S a, S b) {
    if (a == neg_inf<S>()) return b;
    if (b == neg_inf<S>()) return a;
    S m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

template <typename S>
S lse3(S a, S b, S c) {
    return lse2(lse2(a, b), c);
}

// Blank-extended labels: [0, l1, 0, l2, ..., lL, 0], length 2L+1.
inline std::vector<int64_t> extend_labels(const std::vector<int64_t>& target) {
    std::vector<int64_t> ext(2 * target.size() + 1, 0);
    for (size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
    return ext;
}

}  // namespace ctc_detail

// Fewest frames that admit any valid alignment: one per label plus a
// mandatory blank between adjacent equal labels.
inline int64_t ctc_min_frames(const std::vector<int64_t>& target) {
    int64_t extra = 0;
    for (size_t i = 1; i < target.size(); ++i)
        if (target[i] == target[i - 1]) ++extra;
    return static_cast<int64_t>(target.size()) + extra;
}

template <typename S>
void ctc_check_args(int64_t t, int64_t v, const std::vector<int64_t>& target) {
    if (v < 2) throw ValidationError("ctc: need at least blank plus one label class");
    for (int64_t l : target)
        if (l < 1 || l >= v)
            throw ValidationError("ctc: label " + std::to_string(l) + " outside [1, " + std::to_string(v) +
                                  ")");
    if (t < ctc_min_frames(target))
        throw InfeasibleError("ctc: target needs at least " + std::to_string(ctc_min_frames(target)) +
                              " frames, got " + std::to_string(t));
}

// -log of the total probability of all alignments collapsing to target.
// log_probs rows are per-frame log distributions over [blank, labels...].
// Differentiable with respect to log_probs via the alpha-beta recursion.
template <typename S>
Tensor<S> ctc_loss(const Tensor<S>& log_probs, const std::vector<int64_t>& target) {
    using ctc_detail::lse3;
    using ctc_detail::neg_inf;
    if (log_probs.rank() != 2) throw ShapeError("ctc_loss: log_probs must be rank-2");
    const int64_t t_len = log_probs.dim(0), v = log_probs.dim(1);
    ctc_check_args<S>(t_len, v, target);

    const std::vector<int64_t> ext = ctc_detail::extend_labels(target);
    const int64_t n = static_cast<int64_t>(ext.size());
    const auto& lp = log_probs.data();

    // alpha[t][s]: log mass of prefixes ending at extended label s after frame t.
    std::vector<S> alpha(static_cast<size_t>(t_len) * n, neg_inf<S>());
    alpha[0] = lp[ext[0]];
    if (n > 1) alpha[1] = lp[ext[1]];
    for (int64_t ti = 1; ti < t_len; ++ti) {
        const S* prev = alpha.data() + (ti - 1) * n;
        S* cur = alpha.data() + ti * n;
        for (int64_t s = 0; s < n; ++s) {
            S best = prev[s];
            if (s >= 1) best = ctc_detail::lse2(best, prev[s - 1]);
            if (s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2])
                best = ctc_detail::lse2(best, prev[s - 2]);
            cur[s] = best == neg_inf<S>() ? neg_inf<S>() : best + lp[ti * v + ext[s]];
        }
    }
    S log_z = alpha[(t_len - 1) * n + (n - 1)];
    if (n > 1) log_z = ctc_detail::lse2(log_z, alpha[(t_len - 1) * n + (n - 2)]);
    if (!(log_z > neg_inf<S>()))
        throw NumericError("ctc_loss: zero-probability target (vanished forward mass)");

    Tensor<S> out = detail::op_output<S>({1}, {log_probs});
    out.data()[0] = -log_z;

    if (detail::tracked(out)) {
        auto lpn = log_probs.node();
        out.node()->backward = [lpn, ext, n, t_len, v, alpha = std::move(alpha), log_z](const Node<S>& o) {
            using ctc_detail::neg_inf;
            // beta[t][s] includes lp[t][ext[s]], so path mass through (t,s)
            // is alpha + beta - lp, counted once per frame-label posterior.
            std::vector<S> beta(static_cast<size_t>(t_len) * n, neg_inf<S>());
            beta[(t_len - 1) * n + (n - 1)] = lpn->data[(t_len - 1) * v + ext[n - 1]];
            if (n > 1) beta[(t_len - 1) * n + (n - 2)] = lpn->data[(t_len - 1) * v + ext[n - 2]];
            for (int64_t ti = t_len - 2; ti >= 0; --ti) {
                const S* nxt = beta.data() + (ti + 1) * n;
                S* cur = beta.data() + ti * n;
                for (int64_t s = n - 1; s >= 0; --s) {
                    S best = nxt[s];
                    if (s + 1 < n) best = ctc_detail::lse2(best, nxt[s + 1]);
                    if (s + 2 < n && ext[s] != 0 && ext[s] != ext[s + 2])
                        best = ctc_detail::lse2(best, nxt[s + 2]);
                    cur[s] = best == neg_inf<S>() ? neg_inf<S>() : best + lpn->data[ti * v + ext[s]];
                }
            }
            lpn->ensure_grad();
            const S up = o.grad[0];
            for (int64_t ti = 0; ti < t_len; ++ti) {
                // d(-logZ)/d lp[t][k] = -sum_{s: ext[s]=k} exp(a+b-lp-logZ)
                for (int64_t s = 0; s < n; ++s) {
                    const S a = alpha[ti * n + s], b = beta[ti * n + s];
                    if (a == neg_inf<S>() || b == neg_inf<S>()) continue;
                    const S post = std::exp(a + b - lpn->data[ti * v + ext[s]] - log_z);
                    lpn->grad[ti * v + ext[s]] -= up * post;
                }
            }
        };
    }
    return out;
}

// Exhaustive oracle: enumerate every frame-label sequence, collapse repeats
// then strip blanks, and sum the probability of sequences matching target.
template <typename S>
S ctc_brute_force(const std::vector<S>& log_probs, int64_t t_len, int64_t v,
                  const std::vector<int64_t>& target) {
    if (t_len > 8 || v > 4)
        throw ValidationError("ctc_brute_force: refusing enumeration beyond T=8, V=4 (got T=" +
                              std::to_string(t_len) + ", V=" + std::to_string(v) + ")");
    if (t_len < 1 || v < 2) throw ValidationError("ctc_brute_force: need T >= 1 and V >= 2");
    if (static_cast<int64_t>(log_probs.size()) != t_len * v)
        throw ShapeError("ctc_brute_force: log_probs size mismatch");
    for (int64_t l : target)
        if (l < 1 || l >= v) throw ValidationError("ctc_brute_force: label out of range");

    std::vector<int64_t> path(t_len, 0);
    std::vector<int64_t> collapsed;
    double total = 0.0;
    for (;;) {
        collapsed.clear();
        for (int64_t i = 0; i < t_len; ++i) {
            if (i > 0 && path[i] == path[i - 1]) continue;  // merge repeats first
            if (path[i] != 0) collapsed.push_back(path[i]);
        }
        if (collapsed == target) {
            double lp = 0;
            for (int64_t i = 0; i < t_len; ++i) lp += static_cast<double>(log_probs[i * v + path[i]]);
            total += std::exp(lp);
        }
        int64_t pos = t_len - 1;
        while (pos >= 0 && path[pos] == v - 1) path[pos--] = 0;
        if (pos < 0) break;
        ++path[pos];
    }
    if (total <= 0.0) return std::numeric_limits<S>::infinity();
    return static_cast<S>(-std::log(total));
}

// Per-frame argmax, collapse repeats, strip blanks. Ties pick the lowest id.
template <typename S>
std::vector<int64_t> greedy_decode(const std::vector<S>& log_probs, int64_t t_len, int64_t v) {
    if (static_cast<int64_t>(log_probs.size()) != t_len * v)
        throw ShapeError("greedy_decode: log_probs size mismatch");
    std::vector<int64_t> out;
    int64_t prev = -1;
    for (int64_t i = 0; i < t_len; ++i) {
        const S* row = log_probs.data() + i * v;
        int64_t arg = 0;
        for (int64_t k = 1; k < v; ++k)
            if (row[k] > row[arg]) arg = k;
        if (arg != prev && arg != 0) out.push_back(arg);
        prev = arg;
    }
    return out;
}

// Validated instance: rows must be normalized log distributions and the
// target must be blank-free, non-empty, and feasible for the frame budget.
template <typename S>
struct CtcInstance {
    Tensor<S> log_probs;  // [T x V], blank at column 0
    std::vector<int64_t> target;

    void validate() const {
        if (log_probs.rank() != 2) throw ShapeError("ctc instance: log_probs must be rank-2");
        const int64_t t_len = log_probs.dim(0), v = log_probs.dim(1);
        if (target.empty()) throw ValidationError("ctc instance: empty target");
        ctc_check_args<S>(t_len, v, target);
        for (int64_t i = 0; i < t_len; ++i) {
            double sum = 0;
            for (int64_t k = 0; k < v; ++k)
                sum += std::exp(static_cast<double>(log_probs.data()[i * v + k]));
            if (std::abs(sum - 1.0) > 1e-6)
                throw ValidationError("ctc instance: row " + std::to_string(i) +
                                      " is not a normalized distribution (sum " + std::to_string(sum) +
                                      ")");
        }
    }

    Tensor<S> loss() const {
        validate();
        return ctc_loss(log_probs, target);
    }
};

}  // namespace architts
