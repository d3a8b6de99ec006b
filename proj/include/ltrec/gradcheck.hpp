#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ltrec/autodiff.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/tensor.hpp"

namespace ltrec {

// Builds a fresh scalar loss from trainable leaves. Called many times by the
// checker, so it must be a pure function of the leaf values.
using GraphBuilder = std::function<Value(Graph&, const std::vector<Value>&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    int worst_param = -1;
    int worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

namespace detail {

inline double eval_loss(const GraphBuilder& build, const std::vector<Tensor>& params,
                        int param, int coord) {
    Graph g;
    std::vector<Value> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(g.input(p));
    Value loss = build(g, leaves);
    double f = loss.scalar();
    if (!std::isfinite(f))
        throw ProbeFailure("finite_difference_check: non-finite loss while perturbing param " +
                           std::to_string(param) + " coord " + std::to_string(coord));
    return f;
}

}  // namespace detail

// Central-difference comparison of analytic gradients against numeric ones
// for every coordinate of every parameter. Relative error uses
// |a - n| / max(|a|, |n|, 1e-8) so near-zero gradients do not blow up the
// ratio.
inline GradCheckResult finite_difference_check(const GraphBuilder& build,
                                               const std::vector<Tensor>& params,
                                               double eps = 1e-5) {
    // Analytic pass.
    Graph g;
    std::vector<Value> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(g.input(p));
    Value loss = build(g, leaves);
    if (!loss.data().is_scalar())
        throw DomainError("finite_difference_check: builder must produce a scalar loss");
    if (!std::isfinite(loss.scalar()))
        throw ProbeFailure("finite_difference_check: non-finite loss at base point");
    g.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const Value& l : leaves) analytic.push_back(l.grad());

    GradCheckResult res;
    std::vector<Tensor> scratch = params;
    for (size_t p = 0; p < params.size(); ++p) {
        for (int c = 0; c < params[p].size(); ++c) {
            double orig = scratch[p].v[c];
            scratch[p].v[c] = orig + eps;
            double fp = detail::eval_loss(build, scratch, static_cast<int>(p), c);
            scratch[p].v[c] = orig - eps;
            double fm = detail::eval_loss(build, scratch, static_cast<int>(p), c);
            scratch[p].v[c] = orig;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[p].v[c];
            double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            double rel = std::abs(a - numeric) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = static_cast<int>(p);
                res.worst_coord = c;
                res.analytic = a;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace ltrec
