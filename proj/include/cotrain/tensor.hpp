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

#ifndef COTRAIN_TENSOR_HPP
#define COTRAIN_TENSOR_HPP

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/rng.hpp"

namespace cotrain {

/// Dense row-major tensor with value semantics. Feature maps use NCHW.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != count(shape))
            throw ConfigError("tensor shape/data size mismatch");
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// C = alpha * op(A) * op(B) + beta * C, row-major. Backed by BLAS.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc);

}  // namespace cotrain

#endif  // COTRAIN_TENSOR_HPP
