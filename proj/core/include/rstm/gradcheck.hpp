#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rstm/params.hpp"
#include "rstm/rng.hpp"
#include "rstm/tape.hpp"

namespace rstm {

// Central finite-difference verification. The computation is re-run in
// double precision; rel error = |analytic - fd| / max(1e-8, |fd|), maximized
// over checked elements. samples_per_tensor <= 0 checks every element.
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
};

using ScalarFn = std::function<Var<double>(Tape<double>&, ParamStore<double>&)>;

inline double eval_scalar(const ScalarFn& f, ParamStore<double>& ps) {
    Tape<double> tape;
    Var<double> out = f(tape, ps);
    double v = out.val().data[0];
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss");
    return v;
}

inline GradCheckResult grad_check(const ScalarFn& f, ParamStore<double>& ps,
                                  const std::vector<std::string>& names, double h = 1e-4,
                                  int samples_per_tensor = 0, std::uint64_t sample_seed = 17) {
    ps.zero_grads();
    {
        Tape<double> tape;
        Var<double> out = f(tape, ps);
        if (!std::isfinite(out.val().data[0]))
            throw std::runtime_error("grad_check: non-finite loss");
        tape.backward(out);
    }
    GradCheckResult res;
    Rng rng(sample_seed);
    for (const auto& name : names) {
        Tensor<double>& p = ps.get(name);
        std::vector<std::size_t> idx;
        std::size_t n = p.data.size();
        if (samples_per_tensor <= 0 || static_cast<std::size_t>(samples_per_tensor) >= n) {
            idx.resize(n);
            for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        } else {
            for (int k = 0; k < samples_per_tensor; ++k)
                idx.push_back(static_cast<std::size_t>(rng.below(n)));
        }
        for (std::size_t i : idx) {
            double saved = p.data[i];
            p.data[i] = saved + h;
            double lp = eval_scalar(f, ps);
            p.data[i] = saved - h;
            double lm = eval_scalar(f, ps);
            p.data[i] = saved;
            double fd = (lp - lm) / (2.0 * h);
            double analytic = p.grad.empty() ? 0.0 : p.grad[i];
            double rel = std::abs(analytic - fd) / std::max(1e-8, std::abs(fd));
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = name;
            }
        }
    }
    return res;
}

}  // namespace rstm
