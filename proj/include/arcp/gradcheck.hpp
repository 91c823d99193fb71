#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "arcp/tensor.hpp"

namespace arcp {

// Central finite differences against reverse-mode gradients. The oracle only
// ever calls the forward map, so it stays independent of the backward
// implementation it is checking.
struct GradCheckResult {
    bool ok = true;
    double max_rel_err = 0.0;
    std::string worst;  // description of the worst entry

    void merge(const GradCheckResult& other) {
        if (other.max_rel_err > max_rel_err) {
            max_rel_err = other.max_rel_err;
            worst = other.worst;
        }
        ok = ok && other.ok;
    }
};

struct GradCheckOptions {
    double h = 1e-5;
    double rel_tol = 1e-4;
    double abs_tol = 1e-6;
};

// `forward` maps the flat values of a set of input tensors to a scalar loss.
// `inputs` are mutated in place during probing and restored afterwards.
// `analytic` are the reverse-mode gradients, one tensor per input.
inline GradCheckResult check_gradients(const std::function<double()>& forward,
                                       std::vector<Tensor*> inputs,
                                       const std::vector<const Tensor*>& analytic,
                                       GradCheckOptions opt = {},
                                       const std::vector<std::string>& labels = {}) {
    GradCheckResult res;
    for (std::size_t n = 0; n < inputs.size(); ++n) {
        Tensor& x = *inputs[n];
        const Tensor& g = *analytic[n];
        for (std::int64_t i = 0; i < x.size(); ++i) {
            const double saved = x[i];
            x[i] = saved + opt.h;
            const double lp = forward();
            x[i] = saved - opt.h;
            const double lm = forward();
            x[i] = saved;
            const double fd = (lp - lm) / (2.0 * opt.h);
            const double err = std::abs(g[i] - fd);
            const double denom = std::max(std::abs(g[i]), std::abs(fd));
            // pass condition err <= abs_tol + rel_tol * denom, expressed as a
            // single scaled relative error so the margin is visible
            const double rel = err / (opt.abs_tol / opt.rel_tol + denom);
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = (n < labels.size() ? labels[n] : "input " + std::to_string(n)) +
                            "[" + std::to_string(i) + "]: ad=" + std::to_string(g[i]) +
                            " fd=" + std::to_string(fd);
            }
            if (rel > opt.rel_tol) res.ok = false;
        }
    }
    return res;
}

}  // namespace arcp
