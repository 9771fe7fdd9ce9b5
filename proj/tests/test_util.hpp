#pragma once

#include <functional>
#include <vector>

#include "gbdm/rng.hpp"
#include "gbdm/tensor.hpp"

namespace gbdm::testing {

// Central finite-difference gradient of a scalar function of a flat float
// vector. Independent oracle for the tape engine.
inline std::vector<double> numeric_grad(std::function<double(const std::vector<float>&)> f,
                                        std::vector<float> x, double h = 5e-3) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        float orig = x[i];
        x[i] = static_cast<float>(orig + h);
        double fp = f(x);
        x[i] = static_cast<float>(orig - h);
        double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline bool grad_close(double ad, double fd, double rel_tol, double abs_floor = 1.0) {
    return std::abs(ad - fd) <= rel_tol * std::max(abs_floor, std::abs(fd));
}

}  // namespace gbdm::testing
