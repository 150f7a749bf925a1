#pragma once
// Central finite-difference oracle for autograd tests. Independent of the
// analytic path: it only ever calls the forward function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "duet/autograd.hpp"

namespace duet::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

// Relative error with an absolute floor so that entries where both
// gradients are ~0 do not dominate.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
    return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

// f must rebuild the graph from the current parameter values on each call.
inline GradCheckResult grad_check(const std::function<ag::Var()>& f, std::vector<ag::Var> params,
                                  double eps = 1e-5, std::size_t max_per_param = 64) {
    for (auto& p : params) p.zero_grad();
    f().backward();
    std::vector<Tensor> analytic;
    for (auto& p : params) analytic.push_back(p.grad());

    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& v = params[pi].mutable_value().data;
        const std::size_t stride = std::max<std::size_t>(1, v.size() / max_per_param);
        for (std::size_t i = 0; i < v.size(); i += stride) {
            const double orig = v[i];
            double up, down;
            {
                ag::NoGradGuard ng;
                v[i] = orig + eps;
                up = f().item();
                v[i] = orig - eps;
                down = f().item();
                v[i] = orig;
            }
            const double numeric = (up - down) / (2 * eps);
            const double a = analytic[pi].data[i];
            const double rel = rel_error(a, numeric);
            res.max_abs_error = std::max(res.max_abs_error, std::fabs(a - numeric));
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst = "param " + std::to_string(pi) + "[" + std::to_string(i) +
                            "] analytic=" + std::to_string(a) + " numeric=" + std::to_string(numeric);
            }
            ++res.checked;
        }
    }
    return res;
}

}  // namespace duet::testing
