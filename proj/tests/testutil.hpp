/*
 * Copyright 2026 The cotrain Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef COTRAIN_TESTS_TESTUTIL_HPP
#define COTRAIN_TESTS_TESTUTIL_HPP

#include <cmath>
#include <functional>
#include <vector>

#include "cotrain/rng.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain::testutil {

/// Central-difference gradient of a scalar function of a flat parameter
/// vector. The independent oracle for every autodiff check.
inline std::vector<double> numerical_grad(const std::function<double(const std::vector<double>&)>& f,
                                          std::vector<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = f(x);
        x[i] = keep - h;
        const double fm = f(x);
        x[i] = keep;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Max relative disagreement between analytic and numerical gradients.
inline double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric,
                          double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric[i]), floor});
        worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

inline cotrain::TensorD random_tensor(std::vector<int> shape, cotrain::Rng& rng,
                                      double scale = 1.0) {
    cotrain::TensorD t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

}  // namespace cotrain::testutil

#endif  // COTRAIN_TESTS_TESTUTIL_HPP
