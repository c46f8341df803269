#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mpum/tensor.hpp"

namespace mpum {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t worst_input = -1;
    int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central-difference check of a scalar-valued function against the tape
// gradient. rel_err = |fd - an| / max(1e-8, |fd| + |an|), reported as the
// max over every element of every gradient-tracked input.
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>(Graph<T>&)>& f, std::vector<Tensor<T>> inputs,
                           T eps = T(1e-5)) {
    Graph<T> g;
    Tensor<T> loss = f(g);
    g.backward(loss);

    GradCheckResult res;
    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        Tensor<T>& x = inputs[ii];
        if (!x.requires_grad()) continue;
        const std::vector<T>& analytic = x.grad();
        for (int64_t j = 0; j < x.numel(); ++j) {
            const T orig = x.values()[static_cast<size_t>(j)];
            Graph<T> gp;
            NoGradGuard<T> np(gp);
            x.values()[static_cast<size_t>(j)] = orig + eps;
            const double fp = static_cast<double>(f(gp).scalar());
            x.values()[static_cast<size_t>(j)] = orig - eps;
            const double fm = static_cast<double>(f(gp).scalar());
            x.values()[static_cast<size_t>(j)] = orig;
            const double fd = (fp - fm) / (2.0 * static_cast<double>(eps));
            const double an = static_cast<double>(analytic[static_cast<size_t>(j)]);
            const double rel = std::abs(fd - an) / std::max(1e-8, std::abs(fd) + std::abs(an));
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_input = static_cast<int64_t>(ii);
                res.worst_index = j;
                res.analytic = an;
                res.numeric = fd;
            }
        }
    }
    return res;
}

}  // namespace mpum
