#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tipformer/autodiff.hpp"
#include "tipformer/common.hpp"
#include "tipformer/tensor.hpp"

namespace tipformer {

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    std::string worst;  // "<tensor>[i]" of the worst coordinate
};

namespace detail {

// denom_floor sets the magnitude below which a disagreement counts as noise.
// Central differences on a deep forward pass cannot resolve gradients smaller
// than roughly eps_machine * |loss| / h, so callers checking a whole network
// raise the floor above that; elementwise op tests keep the strict default.
inline double fd_rel_err(double analytic, double numeric, double denom_floor = 1e-8) {
    return std::abs(analytic - numeric) /
           std::max(denom_floor, std::abs(analytic) + std::abs(numeric));
}

}  // namespace detail

// Compares the analytic gradient of a scalar-valued function against central
// finite differences, elementwise. f must be deterministic (dropout in eval
// mode); this is enforced by evaluating it twice.
//
// f: (TapeT<S>&, ValueT<S> x) -> scalar ValueT<S>
template <typename S, typename F>
GradCheckReport grad_check(F&& f, const TensorT<S>& x0, S h, double tol) {
    auto eval_value = [&](const TensorT<S>& xv) -> S {
        TapeT<S> tape;
        auto x = make_constant<S>(xv);
        auto out = f(tape, x);
        if (out->value.numel() != 1) throw UsageError("grad_check: f must be scalar-valued");
        return out->value[0];
    };

    const S probe1 = eval_value(x0);
    const S probe2 = eval_value(x0);
    if (std::memcmp(&probe1, &probe2, sizeof(S)) != 0) {
        throw UsageError("grad_check: f is not deterministic");
    }

    TapeT<S> tape;
    auto x = make_leaf<S>(x0, true);
    auto loss = f(tape, x);
    tape.backward(loss);

    GradCheckReport report;
    report.pass = true;
    TensorT<S> xv = x0;
    for (i64 i = 0; i < x0.numel(); ++i) {
        const S orig = xv[i];
        xv[i] = orig + h;
        const double lp = static_cast<double>(eval_value(xv));
        xv[i] = orig - h;
        const double lm = static_cast<double>(eval_value(xv));
        xv[i] = orig;
        const double numeric = (lp - lm) / (2.0 * static_cast<double>(h));
        const double analytic = static_cast<double>(x->grad[i]);
        const double rel = detail::fd_rel_err(analytic, numeric);
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst = "x[" + std::to_string(i) + "]";
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

// Same check against a set of named parameter leaves. For large tensors a
// deterministic subsample of coordinates (seeded) keeps the runtime bounded;
// max_samples_per_tensor <= 0 checks every element.
//
// f: (TapeT<S>&) -> scalar ValueT<S>; it must read the given parameter nodes.
template <typename S, typename F>
GradCheckReport grad_check_params(F&& f, const std::vector<ValueT<S>>& params, S h, double tol,
                                  i64 max_samples_per_tensor = 0, u64 sample_seed = 0,
                                  double denom_floor = 1e-8) {
    auto eval_value = [&]() -> S {
        TapeT<S> tape;
        auto out = f(tape);
        if (out->value.numel() != 1) throw UsageError("grad_check_params: f must be scalar-valued");
        return out->value[0];
    };

    const S probe1 = eval_value();
    const S probe2 = eval_value();
    if (std::memcmp(&probe1, &probe2, sizeof(S)) != 0) {
        throw UsageError("grad_check_params: f is not deterministic");
    }

    for (const auto& p : params) p->grad.fill(S(0));
    {
        TapeT<S> tape;
        auto loss = f(tape);
        tape.backward(loss);
    }
    std::vector<TensorT<S>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p->grad);

    RngStream rng(derive_seed(sample_seed, 0xf0d5));
    GradCheckReport report;
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& p = params[t];
        std::vector<i64> coords;
        const i64 n = p->value.numel();
        if (max_samples_per_tensor <= 0 || n <= max_samples_per_tensor) {
            coords.resize(static_cast<std::size_t>(n));
            for (i64 i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            for (i64 i = 0; i < max_samples_per_tensor; ++i)
                coords.push_back(static_cast<i64>(rng.bounded(static_cast<u64>(n))));
        }
        for (const i64 i : coords) {
            const S orig = p->value[i];
            p->value[i] = orig + h;
            const double lp = static_cast<double>(eval_value());
            p->value[i] = orig - h;
            const double lm = static_cast<double>(eval_value());
            p->value[i] = orig;
            const double numeric = (lp - lm) / (2.0 * static_cast<double>(h));
            const double a = static_cast<double>(analytic[t][i]);
            const double rel = detail::fd_rel_err(a, numeric, denom_floor);
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = p->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace tipformer
