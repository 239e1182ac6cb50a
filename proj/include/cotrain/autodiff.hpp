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

#ifndef COTRAIN_AUTODIFF_HPP
#define COTRAIN_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/rng.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain {

// Reverse-mode tape over a fixed op set: conv, batchnorm, pooling, affine,
// elementwise nonlinearities, log-softmax/NLL, bilinear readout sampling,
// norms and the scalar arithmetic needed for loss weighting. Templated on the
// scalar type; double instantiation is the finite-difference check mode.

template <typename T>
class Graph;

template <typename T>
struct BilinearCorner {
    int x0, y0;
    T fx, fy;
};

template <typename T>
class Node {
public:
    Tensor<T> value;
    Tensor<T> grad;  // empty until a backward pass touches it
    bool needs_grad = false;

    bool has_grad() const { return !grad.data.empty(); }

private:
    friend class Graph<T>;
    std::vector<Node*> parents_;
    std::function<void(Node*)> backward_;
};

/// Running statistics owned by the parameter store, updated by training-mode
/// batchnorm forward passes.
template <typename T>
struct BatchNormState {
    Tensor<T>* running_mean = nullptr;
    Tensor<T>* running_var = nullptr;
    bool update = true;  // false freezes the statistics (e.g. frozen trunk)
};

template <typename T>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Node<T>* leaf(Tensor<T> value, bool needs_grad) {
        Node<T>* n = alloc();
        n->value = std::move(value);
        n->needs_grad = needs_grad;
        return n;
    }

    Node<T>* constant(Tensor<T> value) { return leaf(std::move(value), false); }

    // ---- elementwise arithmetic ----

    Node<T>* add(Node<T>* a, Node<T>* b) {
        check_same_shape(a, b, "add");
        Tensor<T> v = a->value;
        for (std::int64_t i = 0; i < v.numel(); ++i) v.data[i] += b->value.data[i];
        return make(std::move(v), {a, b}, [a, b](Node<T>* self) {
            accumulate(a, self->grad.data.data(), T(1));
            accumulate(b, self->grad.data.data(), T(1));
        });
    }

    Node<T>* sub(Node<T>* a, Node<T>* b) {
        check_same_shape(a, b, "sub");
        Tensor<T> v = a->value;
        for (std::int64_t i = 0; i < v.numel(); ++i) v.data[i] -= b->value.data[i];
        return make(std::move(v), {a, b}, [a, b](Node<T>* self) {
            accumulate(a, self->grad.data.data(), T(1));
            accumulate(b, self->grad.data.data(), T(-1));
        });
    }

    Node<T>* mul(Node<T>* a, Node<T>* b) {
        check_same_shape(a, b, "mul");
        Tensor<T> v = a->value;
        for (std::int64_t i = 0; i < v.numel(); ++i) v.data[i] *= b->value.data[i];
        return make(std::move(v), {a, b}, [a, b](Node<T>* self) {
            if (a->needs_grad) {
                ensure_grad(a);
                for (std::int64_t i = 0; i < self->grad.numel(); ++i)
                    a->grad.data[i] += self->grad.data[i] * b->value.data[i];
            }
            if (b->needs_grad) {
                ensure_grad(b);
                for (std::int64_t i = 0; i < self->grad.numel(); ++i)
                    b->grad.data[i] += self->grad.data[i] * a->value.data[i];
            }
        });
    }

    Node<T>* scale(Node<T>* a, T s) {
        Tensor<T> v = a->value;
        for (auto& x : v.data) x *= s;
        return make(std::move(v), {a},
                    [a, s](Node<T>* self) { accumulate(a, self->grad.data.data(), s); });
    }

    Node<T>* add_scalar(Node<T>* a, T c) {
        Tensor<T> v = a->value;
        for (auto& x : v.data) x += c;
        return make(std::move(v), {a},
                    [a](Node<T>* self) { accumulate(a, self->grad.data.data(), T(1)); });
    }

    Node<T>* reshape(Node<T>* a, std::vector<int> shape) {
        if (Tensor<T>::count(shape) != a->value.numel())
            throw ConfigError("reshape: element count mismatch");
        Tensor<T> v(std::move(shape), a->value.data);
        return make(std::move(v), {a},
                    [a](Node<T>* self) { accumulate(a, self->grad.data.data(), T(1)); });
    }

    Node<T>* exp_(Node<T>* a) {
        Tensor<T> v = a->value;
        for (auto& x : v.data) x = std::exp(x);
        return make(std::move(v), {a}, [a](Node<T>* self) {
            if (!a->needs_grad) return;
            ensure_grad(a);
            for (std::int64_t i = 0; i < self->grad.numel(); ++i)
                a->grad.data[i] += self->grad.data[i] * self->value.data[i];
        });
    }

    Node<T>* relu(Node<T>* a) {
        Tensor<T> v = a->value;
        for (auto& x : v.data) x = x > T(0) ? x : T(0);
        return make(std::move(v), {a}, [a](Node<T>* self) {
            if (!a->needs_grad) return;
            ensure_grad(a);
            for (std::int64_t i = 0; i < self->grad.numel(); ++i)
                if (a->value.data[i] > T(0)) a->grad.data[i] += self->grad.data[i];
        });
    }

    /// elu(x)+1: strictly positive output, used as the readout nonlinearity.
    Node<T>* elu1(Node<T>* a) {
        Tensor<T> v = a->value;
        for (auto& x : v.data) x = x > T(0) ? x + T(1) : std::exp(x);
        return make(std::move(v), {a}, [a](Node<T>* self) {
            if (!a->needs_grad) return;
            ensure_grad(a);
            for (std::int64_t i = 0; i < self->grad.numel(); ++i) {
                const T d = a->value.data[i] > T(0) ? T(1) : self->value.data[i];
                a->grad.data[i] += self->grad.data[i] * d;
            }
        });
    }

    // ---- reductions ----

    Node<T>* sum(Node<T>* a) {
        T s = T(0);
        for (T x : a->value.data) s += x;
        return make(Tensor<T>::scalar(s), {a}, [a](Node<T>* self) {
            if (!a->needs_grad) return;
            ensure_grad(a);
            const T g = self->grad.data[0];
            for (auto& x : a->grad.data) x += g;
        });
    }

    Node<T>* mean(Node<T>* a) {
        const T inv = T(1) / static_cast<T>(a->value.numel());
        T s = T(0);
        for (T x : a->value.data) s += x;
        return make(Tensor<T>::scalar(s * inv), {a}, [a, inv](Node<T>* self) {
            if (!a->needs_grad) return;
            ensure_grad(a);
            const T g = self->grad.data[0] * inv;
            for (auto& x : a->grad.data) x += g;
        });
    }

    /// sum of squares: ||a||^2
    Node<T>* sum_sq(Node<T>* a) {
        T s = T(0);
        for (T x : a->value.data) s += x * x;
        return make(Tensor<T>::scalar(s), {a}, [a](Node<T>* self) {
            if (!a->needs_grad) return;
            ensure_grad(a);
            const T g = T(2) * self->grad.data[0];
            for (std::int64_t i = 0; i < a->value.numel(); ++i)
                a->grad.data[i] += g * a->value.data[i];
        });
    }

    /// mean((a-b)^2); gradients flow into both sides.
    Node<T>* mse(Node<T>* a, Node<T>* b) {
        if (!a->value.same_shape(b->value))
            throw DataError("mse: shape mismatch " + a->value.shape_str() + " vs " +
                            b->value.shape_str());
        const T inv = T(1) / static_cast<T>(a->value.numel());
        T s = T(0);
        for (std::int64_t i = 0; i < a->value.numel(); ++i) {
            const T d = a->value.data[i] - b->value.data[i];
            s += d * d;
        }
        return make(Tensor<T>::scalar(s * inv), {a, b}, [a, b, inv](Node<T>* self) {
            const T g = T(2) * inv * self->grad.data[0];
            if (a->needs_grad) {
                ensure_grad(a);
                for (std::int64_t i = 0; i < a->value.numel(); ++i)
                    a->grad.data[i] += g * (a->value.data[i] - b->value.data[i]);
            }
            if (b->needs_grad) {
                ensure_grad(b);
                for (std::int64_t i = 0; i < a->value.numel(); ++i)
                    b->grad.data[i] -= g * (a->value.data[i] - b->value.data[i]);
            }
        });
    }

    /// mean(pred - counts*log(pred + eps)); pred must be strictly positive.
    Node<T>* poisson_nll(Node<T>* pred, const Tensor<T>& counts, T eps) {
        if (!pred->value.same_shape(counts))
            throw DataError("poisson_nll: shape mismatch");
        const T inv = T(1) / static_cast<T>(pred->value.numel());
        T s = T(0);
        for (std::int64_t i = 0; i < pred->value.numel(); ++i) {
            const T p = pred->value.data[i];
            if (!(p > T(0))) throw TrainError("poisson_nll: nonpositive prediction");
            s += p - counts.data[i] * std::log(p + eps);
        }
        Tensor<T> cts = counts;
        return make(Tensor<T>::scalar(s * inv), {pred},
                    [pred, cts = std::move(cts), inv, eps](Node<T>* self) {
                        if (!pred->needs_grad) return;
                        ensure_grad(pred);
                        const T g = self->grad.data[0] * inv;
                        for (std::int64_t i = 0; i < pred->value.numel(); ++i) {
                            const T p = pred->value.data[i];
                            pred->grad.data[i] += g * (T(1) - cts.data[i] / (p + eps));
                        }
                    });
    }

    // ---- linear algebra ----

    /// (M,K) x (K,N) -> (M,N)
    Node<T>* matmul(Node<T>* a, Node<T>* b) {
        const int m = a->value.dim(0), k = a->value.dim(1);
        if (b->value.dim(0) != k) throw ConfigError("matmul: inner dimension mismatch");
        const int n = b->value.dim(1);
        Tensor<T> v({m, n});
        gemm(false, false, m, n, k, T(1), a->value.ptr(), k, b->value.ptr(), n, T(0), v.ptr(), n);
        return make(std::move(v), {a, b}, [a, b, m, n, k](Node<T>* self) {
            if (a->needs_grad) {
                ensure_grad(a);
                gemm(false, true, m, k, n, T(1), self->grad.ptr(), n, b->value.ptr(), n, T(1),
                     a->grad.ptr(), k);
            }
            if (b->needs_grad) {
                ensure_grad(b);
                gemm(true, false, k, n, m, T(1), a->value.ptr(), k, self->grad.ptr(), n, T(1),
                     b->grad.ptr(), n);
            }
        });
    }

    /// x:(B,I) w:(O,I) b:(O) -> (B,O)
    Node<T>* linear(Node<T>* x, Node<T>* w, Node<T>* b) {
        const int bs = x->value.dim(0), in = x->value.dim(1);
        if (w->value.dim(1) != in || b->value.dim(0) != w->value.dim(0))
            throw ConfigError("linear: weight shape mismatch");
        const int out = w->value.dim(0);
        Tensor<T> v({bs, out});
        gemm(false, true, bs, out, in, T(1), x->value.ptr(), in, w->value.ptr(), in, T(0), v.ptr(),
             out);
        for (int r = 0; r < bs; ++r)
            for (int o = 0; o < out; ++o) v.data[static_cast<std::size_t>(r) * out + o] += b->value.data[o];
        return make(std::move(v), {x, w, b}, [x, w, b, bs, in, out](Node<T>* self) {
            if (x->needs_grad) {
                ensure_grad(x);
                gemm(false, false, bs, in, out, T(1), self->grad.ptr(), out, w->value.ptr(), in,
                     T(1), x->grad.ptr(), in);
            }
            if (w->needs_grad) {
                ensure_grad(w);
                gemm(true, false, out, in, bs, T(1), self->grad.ptr(), out, x->value.ptr(), in,
                     T(1), w->grad.ptr(), in);
            }
            if (b->needs_grad) {
                ensure_grad(b);
                for (int r = 0; r < bs; ++r)
                    for (int o = 0; o < out; ++o)
                        b->grad.data[o] += self->grad.data[static_cast<std::size_t>(r) * out + o];
            }
        });
    }

    // ---- convolution ----

    /// x:(N,C,H,W) w:(O,C,kh,kw) b:(O), zero padding. im2col + GEMM in
    /// image chunks sized to keep the GEMM panels large.
    Node<T>* conv2d(Node<T>* x, Node<T>* w, Node<T>* b, int stride, int pad) {
        const int bn = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
                  wd = x->value.dim(3);
        const int oc = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
        if (w->value.dim(1) != c) throw ConfigError("conv2d: channel mismatch");
        if (b->value.dim(0) != oc) throw ConfigError("conv2d: bias size mismatch");
        const int ho = (h + 2 * pad - kh) / stride + 1;
        const int wo = (wd + 2 * pad - kw) / stride + 1;
        const int K = c * kh * kw, P = ho * wo;
        const int chunk = std::max(1, std::min(bn, 32768 / std::max(1, P)));

        Tensor<T> v({bn, oc, ho, wo});
        std::vector<T> col, ybuf;
        for (int n0 = 0; n0 < bn; n0 += chunk) {
            const int nn = std::min(chunk, bn - n0);
            col.assign(static_cast<std::size_t>(K) * nn * P, T(0));
            for (int i = 0; i < nn; ++i)
                im2col(x->value.ptr() + static_cast<std::size_t>(n0 + i) * c * h * wd, c, h, wd,
                       kh, kw, stride, pad, ho, wo, col.data() + static_cast<std::size_t>(i) * P,
                       static_cast<std::size_t>(nn) * P);
            ybuf.assign(static_cast<std::size_t>(oc) * nn * P, T(0));
            gemm(false, false, oc, nn * P, K, T(1), w->value.ptr(), K, col.data(), nn * P, T(0),
                 ybuf.data(), nn * P);
            // ybuf[o][i*P+p] -> v[n0+i][o][p]
            for (int o = 0; o < oc; ++o)
                for (int i = 0; i < nn; ++i)
                    std::memcpy(v.ptr() + ((static_cast<std::size_t>(n0 + i) * oc + o) * P),
                                ybuf.data() + (static_cast<std::size_t>(o) * nn + i) * P,
                                sizeof(T) * P);
        }
        for (int n = 0; n < bn; ++n)
            for (int o = 0; o < oc; ++o) {
                T* row = v.ptr() + (static_cast<std::size_t>(n) * oc + o) * P;
                const T bias = b->value.data[o];
                for (int p = 0; p < P; ++p) row[p] += bias;
            }

        auto bw = [x, w, b, bn, c, h, wd, oc, kh, kw, stride, pad, ho, wo, K, P,
                   chunk](Node<T>* self) {
            const bool gx = x->needs_grad, gw = w->needs_grad, gb = b->needs_grad;
            if (gx) ensure_grad(x);
            if (gw) ensure_grad(w);
            if (gb) {
                ensure_grad(b);
                for (int n = 0; n < bn; ++n)
                    for (int o = 0; o < oc; ++o) {
                        const T* row = self->grad.ptr() + (static_cast<std::size_t>(n) * oc + o) * P;
                        T s = T(0);
                        for (int p = 0; p < P; ++p) s += row[p];
                        b->grad.data[o] += s;
                    }
            }
            if (!gx && !gw) return;
            std::vector<T> col, dybuf, dcol;
            for (int n0 = 0; n0 < bn; n0 += chunk) {
                const int nn = std::min(chunk, bn - n0);
                // gather dY into (oc, nn*P)
                dybuf.resize(static_cast<std::size_t>(oc) * nn * P);
                for (int o = 0; o < oc; ++o)
                    for (int i = 0; i < nn; ++i)
                        std::memcpy(dybuf.data() + (static_cast<std::size_t>(o) * nn + i) * P,
                                    self->grad.ptr() + ((static_cast<std::size_t>(n0 + i) * oc + o) * P),
                                    sizeof(T) * P);
                if (gw) {
                    col.assign(static_cast<std::size_t>(K) * nn * P, T(0));
                    for (int i = 0; i < nn; ++i)
                        im2col(x->value.ptr() + static_cast<std::size_t>(n0 + i) * c * h * wd, c,
                               h, wd, kh, kw, stride, pad, ho, wo,
                               col.data() + static_cast<std::size_t>(i) * P,
                               static_cast<std::size_t>(nn) * P);
                    gemm(false, true, oc, K, nn * P, T(1), dybuf.data(), nn * P, col.data(),
                         nn * P, T(1), w->grad.ptr(), K);
                }
                if (gx) {
                    dcol.assign(static_cast<std::size_t>(K) * nn * P, T(0));
                    gemm(true, false, K, nn * P, oc, T(1), w->value.ptr(), K, dybuf.data(),
                         nn * P, T(0), dcol.data(), nn * P);
                    for (int i = 0; i < nn; ++i)
                        col2im(dcol.data() + static_cast<std::size_t>(i) * P,
                               static_cast<std::size_t>(nn) * P, c, h, wd, kh, kw, stride, pad,
                               ho, wo,
                               x->grad.ptr() + static_cast<std::size_t>(n0 + i) * c * h * wd);
                }
            }
        };
        return make(std::move(v), {x, w, b}, std::move(bw));
    }

    // ---- pooling ----

    Node<T>* maxpool2x2(Node<T>* x) {
        const int bn = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
                  w = x->value.dim(3);
        if (h % 2 || w % 2) throw ConfigError("maxpool2x2: odd spatial size");
        const int ho = h / 2, wo = w / 2;
        Tensor<T> v({bn, c, ho, wo});
        auto argmax = std::make_shared<std::vector<std::int32_t>>(v.numel());
        const T* in = x->value.ptr();
        T* out = v.ptr();
        std::int64_t oi = 0;
        for (int n = 0; n < bn; ++n)
            for (int ch = 0; ch < c; ++ch) {
                const T* plane = in + (static_cast<std::size_t>(n) * c + ch) * h * w;
                for (int y = 0; y < ho; ++y)
                    for (int xw = 0; xw < wo; ++xw, ++oi) {
                        int best = (2 * y) * w + 2 * xw;
                        T bv = plane[best];
                        const int cands[3] = {(2 * y) * w + 2 * xw + 1, (2 * y + 1) * w + 2 * xw,
                                              (2 * y + 1) * w + 2 * xw + 1};
                        for (int cidx : cands)
                            if (plane[cidx] > bv) {
                                bv = plane[cidx];
                                best = cidx;
                            }
                        out[oi] = bv;
                        (*argmax)[oi] = best;
                    }
            }
        return make(std::move(v), {x}, [x, argmax, c, h, w, ho, wo](Node<T>* self) {
            if (!x->needs_grad) return;
            ensure_grad(x);
            const int bn = x->value.dim(0);
            std::int64_t oi = 0;
            for (int n = 0; n < bn; ++n)
                for (int ch = 0; ch < c; ++ch) {
                    T* gplane = x->grad.ptr() + (static_cast<std::size_t>(n) * c + ch) * h * w;
                    for (int p = 0; p < ho * wo; ++p, ++oi)
                        gplane[(*argmax)[oi]] += self->grad.data[oi];
                }
        });
    }

    Node<T>* global_avg_pool(Node<T>* x) {
        const int bn = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
                  w = x->value.dim(3);
        const T inv = T(1) / static_cast<T>(h * w);
        Tensor<T> v({bn, c});
        for (int n = 0; n < bn; ++n)
            for (int ch = 0; ch < c; ++ch) {
                const T* plane = x->value.ptr() + (static_cast<std::size_t>(n) * c + ch) * h * w;
                T s = T(0);
                for (int p = 0; p < h * w; ++p) s += plane[p];
                v.data[static_cast<std::size_t>(n) * c + ch] = s * inv;
            }
        return make(std::move(v), {x}, [x, c, h, w, inv](Node<T>* self) {
            if (!x->needs_grad) return;
            ensure_grad(x);
            const int bn = x->value.dim(0);
            for (int n = 0; n < bn; ++n)
                for (int ch = 0; ch < c; ++ch) {
                    const T g = self->grad.data[static_cast<std::size_t>(n) * c + ch] * inv;
                    T* gplane = x->grad.ptr() + (static_cast<std::size_t>(n) * c + ch) * h * w;
                    for (int p = 0; p < h * w; ++p) gplane[p] += g;
                }
        });
    }

    // ---- batch normalization ----

    /// Training mode normalizes with batch statistics and updates the running
    /// buffers (unless state.update is false); eval mode uses the stored
    /// statistics and is deterministic.
    Node<T>* batchnorm2d(Node<T>* x, Node<T>* gamma, Node<T>* beta, BatchNormState<T> state,
                         bool training, T momentum = T(0.1), T eps = T(1e-5)) {
        const int bn = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
                  w = x->value.dim(3);
        if (gamma->value.dim(0) != c || beta->value.dim(0) != c)
            throw ConfigError("batchnorm2d: parameter size mismatch");
        const std::int64_t m = static_cast<std::int64_t>(bn) * h * w;
        const int plane = h * w;

        if (!training) {
            Tensor<T> v({bn, c, h, w});
            // copy the statistics now; the state pointers need not outlive
            // the forward pass
            auto rm = std::make_shared<std::vector<T>>(c);
            auto istd = std::make_shared<std::vector<T>>(c);
            std::vector<T> scale(c), shift(c);
            for (int ch = 0; ch < c; ++ch) {
                (*rm)[ch] = state.running_mean->data[ch];
                (*istd)[ch] = T(1) / std::sqrt(state.running_var->data[ch] + eps);
                scale[ch] = gamma->value.data[ch] * (*istd)[ch];
                shift[ch] = beta->value.data[ch] - (*rm)[ch] * scale[ch];
            }
            for (int n = 0; n < bn; ++n)
                for (int ch = 0; ch < c; ++ch) {
                    const T* in = x->value.ptr() + (static_cast<std::size_t>(n) * c + ch) * plane;
                    T* out = v.ptr() + (static_cast<std::size_t>(n) * c + ch) * plane;
                    for (int p = 0; p < plane; ++p) out[p] = in[p] * scale[ch] + shift[ch];
                }
            auto sc = std::make_shared<std::vector<T>>(std::move(scale));
            return make(std::move(v), {x, gamma, beta},
                        [x, gamma, beta, sc, rm, istd, c, plane](Node<T>* self) {
                            const int bn2 = x->value.dim(0);
                            if (x->needs_grad) ensure_grad(x);
                            if (gamma->needs_grad) ensure_grad(gamma);
                            if (beta->needs_grad) ensure_grad(beta);
                            for (int n = 0; n < bn2; ++n)
                                for (int ch = 0; ch < c; ++ch) {
                                    const std::size_t off =
                                        (static_cast<std::size_t>(n) * c + ch) * plane;
                                    const T* g = self->grad.ptr() + off;
                                    if (x->needs_grad) {
                                        T* gx = x->grad.ptr() + off;
                                        for (int p = 0; p < plane; ++p)
                                            gx[p] += g[p] * (*sc)[ch];
                                    }
                                    if (gamma->needs_grad || beta->needs_grad) {
                                        const T* in = x->value.ptr() + off;
                                        T sg = T(0), sb = T(0);
                                        for (int p = 0; p < plane; ++p) {
                                            sg += g[p] * (in[p] - (*rm)[ch]) * (*istd)[ch];
                                            sb += g[p];
                                        }
                                        if (gamma->needs_grad) gamma->grad.data[ch] += sg;
                                        if (beta->needs_grad) beta->grad.data[ch] += sb;
                                    }
                                }
                        });
        }

        // training mode
        auto mu = std::make_shared<std::vector<T>>(c, T(0));
        auto istd = std::make_shared<std::vector<T>>(c, T(0));
        auto xhat = std::make_shared<std::vector<T>>(x->value.data.size());
        for (int ch = 0; ch < c; ++ch) {
            T s = T(0);
            for (int n = 0; n < bn; ++n) {
                const T* in = x->value.ptr() + (static_cast<std::size_t>(n) * c + ch) * plane;
                for (int p = 0; p < plane; ++p) s += in[p];
            }
            const T mean = s / static_cast<T>(m);
            T vs = T(0);
            for (int n = 0; n < bn; ++n) {
                const T* in = x->value.ptr() + (static_cast<std::size_t>(n) * c + ch) * plane;
                for (int p = 0; p < plane; ++p) {
                    const T d = in[p] - mean;
                    vs += d * d;
                }
            }
            const T var = vs / static_cast<T>(m);
            (*mu)[ch] = mean;
            (*istd)[ch] = T(1) / std::sqrt(var + eps);
            if (state.update) {
                state.running_mean->data[ch] =
                    (T(1) - momentum) * state.running_mean->data[ch] + momentum * mean;
                const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
                state.running_var->data[ch] =
                    (T(1) - momentum) * state.running_var->data[ch] + momentum * unbiased;
            }
        }
        Tensor<T> v({bn, c, h, w});
        for (int n = 0; n < bn; ++n)
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t off = (static_cast<std::size_t>(n) * c + ch) * plane;
                const T* in = x->value.ptr() + off;
                T* xh = xhat->data() + off;
                T* out = v.ptr() + off;
                const T g = gamma->value.data[ch], b = beta->value.data[ch];
                for (int p = 0; p < plane; ++p) {
                    xh[p] = (in[p] - (*mu)[ch]) * (*istd)[ch];
                    out[p] = g * xh[p] + b;
                }
            }
        return make(std::move(v), {x, gamma, beta},
                    [x, gamma, beta, xhat, istd, c, plane, m](Node<T>* self) {
                        const int bn2 = x->value.dim(0);
                        if (gamma->needs_grad) ensure_grad(gamma);
                        if (beta->needs_grad) ensure_grad(beta);
                        if (x->needs_grad) ensure_grad(x);
                        for (int ch = 0; ch < c; ++ch) {
                            T sg = T(0), sb = T(0), sgx = T(0);
                            for (int n = 0; n < bn2; ++n) {
                                const std::size_t off =
                                    (static_cast<std::size_t>(n) * c + ch) * plane;
                                const T* g = self->grad.ptr() + off;
                                const T* xh = xhat->data() + off;
                                for (int p = 0; p < plane; ++p) {
                                    sb += g[p];
                                    sg += g[p] * xh[p];
                                }
                            }
                            (void)sgx;
                            if (gamma->needs_grad) gamma->grad.data[ch] += sg;
                            if (beta->needs_grad) beta->grad.data[ch] += sb;
                            if (x->needs_grad) {
                                const T gm = gamma->value.data[ch];
                                const T inv_m = T(1) / static_cast<T>(m);
                                for (int n = 0; n < bn2; ++n) {
                                    const std::size_t off =
                                        (static_cast<std::size_t>(n) * c + ch) * plane;
                                    const T* g = self->grad.ptr() + off;
                                    const T* xh = xhat->data() + off;
                                    T* gx = x->grad.ptr() + off;
                                    for (int p = 0; p < plane; ++p)
                                        gx[p] += gm * (*istd)[ch] *
                                                 (g[p] - inv_m * sb - inv_m * sg * xh[p]);
                                }
                            }
                        }
                    });
    }

    // ---- regularization ----

    Node<T>* dropout(Node<T>* x, T p, Rng& rng, bool training) {
        if (!training || p <= T(0)) return x;
        const T keep = T(1) - p;
        auto mask = std::make_shared<std::vector<T>>(x->value.data.size());
        Tensor<T> v = x->value;
        for (std::size_t i = 0; i < v.data.size(); ++i) {
            (*mask)[i] = rng.uniform() < static_cast<double>(keep) ? T(1) / keep : T(0);
            v.data[i] *= (*mask)[i];
        }
        return make(std::move(v), {x}, [x, mask](Node<T>* self) {
            if (!x->needs_grad) return;
            ensure_grad(x);
            for (std::int64_t i = 0; i < self->grad.numel(); ++i)
                x->grad.data[i] += self->grad.data[i] * (*mask)[i];
        });
    }

    // ---- classification head ----

    /// Row-wise log-softmax over (B,K).
    Node<T>* log_softmax(Node<T>* x) {
        const int bs = x->value.dim(0), k = x->value.dim(1);
        Tensor<T> v({bs, k});
        for (int r = 0; r < bs; ++r) {
            const T* in = x->value.ptr() + static_cast<std::size_t>(r) * k;
            T* out = v.ptr() + static_cast<std::size_t>(r) * k;
            T mx = in[0];
            for (int i = 1; i < k; ++i) mx = std::max(mx, in[i]);
            T s = T(0);
            for (int i = 0; i < k; ++i) s += std::exp(in[i] - mx);
            const T lse = mx + std::log(s);
            for (int i = 0; i < k; ++i) out[i] = in[i] - lse;
        }
        return make(std::move(v), {x}, [x, bs, k](Node<T>* self) {
            if (!x->needs_grad) return;
            ensure_grad(x);
            for (int r = 0; r < bs; ++r) {
                const T* g = self->grad.ptr() + static_cast<std::size_t>(r) * k;
                const T* lv = self->value.ptr() + static_cast<std::size_t>(r) * k;
                T* gx = x->grad.ptr() + static_cast<std::size_t>(r) * k;
                T gs = T(0);
                for (int i = 0; i < k; ++i) gs += g[i];
                for (int i = 0; i < k; ++i) gx[i] += g[i] - std::exp(lv[i]) * gs;
            }
        });
    }

    /// Mean negative log-probability of the true labels.
    Node<T>* nll(Node<T>* logp, const std::vector<int>& labels) {
        const int bs = logp->value.dim(0), k = logp->value.dim(1);
        if (static_cast<int>(labels.size()) != bs) throw DataError("nll: label count mismatch");
        T s = T(0);
        for (int r = 0; r < bs; ++r) {
            if (labels[r] < 0 || labels[r] >= k)
                throw DataError("nll: label out of range: " + std::to_string(labels[r]));
            s -= logp->value.data[static_cast<std::size_t>(r) * k + labels[r]];
        }
        auto labs = std::make_shared<std::vector<int>>(labels);
        return make(Tensor<T>::scalar(s / static_cast<T>(bs)), {logp},
                    [logp, labs, bs, k](Node<T>* self) {
                        if (!logp->needs_grad) return;
                        ensure_grad(logp);
                        const T g = self->grad.data[0] / static_cast<T>(bs);
                        for (int r = 0; r < bs; ++r)
                            logp->grad.data[static_cast<std::size_t>(r) * k + (*labs)[r]] -= g;
                    });
    }

    // ---- Gaussian readout sampling ----

    /// Bilinear sample of the tap feature column at each neuron's position,
    /// then per-neuron affine map. tap:(B,C,H,W), weight:(N,C), bias:(N),
    /// pos:(N,2) in [-1,1]^2 -> (B,N) pre-activations.
    Node<T>* gaussian_readout(Node<T>* tap, Node<T>* weight, Node<T>* bias, Node<T>* pos) {
        const int bs = tap->value.dim(0), c = tap->value.dim(1), h = tap->value.dim(2),
                  w = tap->value.dim(3);
        const int nn = weight->value.dim(0);
        if (weight->value.dim(1) != c) throw ConfigError("readout: feature width mismatch");
        if (bias->value.dim(0) != nn || pos->value.dim(0) != nn || pos->value.dim(1) != 2)
            throw ConfigError("readout: parameter shape mismatch");

        auto corners = std::make_shared<std::vector<BilinearCorner<T>>>(nn);
        for (int n = 0; n < nn; ++n) {
            T px = (pos->value.data[2 * n] + T(1)) * T(0.5) * static_cast<T>(w - 1);
            T py = (pos->value.data[2 * n + 1] + T(1)) * T(0.5) * static_cast<T>(h - 1);
            px = std::min(std::max(px, T(0)), static_cast<T>(w - 1));
            py = std::min(std::max(py, T(0)), static_cast<T>(h - 1));
            int x0 = std::min(static_cast<int>(px), w - 2);
            int y0 = std::min(static_cast<int>(py), h - 2);
            if (w == 1) x0 = 0;
            if (h == 1) y0 = 0;
            (*corners)[n] = {x0, y0, px - static_cast<T>(x0), py - static_cast<T>(y0)};
        }
        // feats[b][n][c]
        auto feats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(bs) * nn * c);
        Tensor<T> v({bs, nn});
        const int plane = h * w;
        for (int b = 0; b < bs; ++b) {
            const T* base = tap->value.ptr() + static_cast<std::size_t>(b) * c * plane;
            for (int n = 0; n < nn; ++n) {
                const auto& cr = (*corners)[n];
                const T w00 = (T(1) - cr.fy) * (T(1) - cr.fx), w01 = (T(1) - cr.fy) * cr.fx;
                const T w10 = cr.fy * (T(1) - cr.fx), w11 = cr.fy * cr.fx;
                const int i00 = cr.y0 * w + cr.x0;
                T acc = bias->value.data[n];
                T* f = feats->data() + (static_cast<std::size_t>(b) * nn + n) * c;
                const T* wn = weight->value.ptr() + static_cast<std::size_t>(n) * c;
                for (int ch = 0; ch < c; ++ch) {
                    const T* pl = base + static_cast<std::size_t>(ch) * plane;
                    const T fv = w00 * pl[i00] + w01 * pl[i00 + 1] + w10 * pl[i00 + w] +
                                 w11 * pl[i00 + w + 1];
                    f[ch] = fv;
                    acc += wn[ch] * fv;
                }
                v.data[static_cast<std::size_t>(b) * nn + n] = acc;
            }
        }
        auto bw = [tap, weight, bias, pos, corners, feats, bs, c, h, w, nn,
                   plane](Node<T>* self) {
            if (bias->needs_grad) {
                ensure_grad(bias);
                for (int b = 0; b < bs; ++b)
                    for (int n = 0; n < nn; ++n)
                        bias->grad.data[n] += self->grad.data[static_cast<std::size_t>(b) * nn + n];
            }
            if (weight->needs_grad) {
                ensure_grad(weight);
                for (int b = 0; b < bs; ++b)
                    for (int n = 0; n < nn; ++n) {
                        const T g = self->grad.data[static_cast<std::size_t>(b) * nn + n];
                        const T* f = feats->data() + (static_cast<std::size_t>(b) * nn + n) * c;
                        T* gw = weight->grad.ptr() + static_cast<std::size_t>(n) * c;
                        for (int ch = 0; ch < c; ++ch) gw[ch] += g * f[ch];
                    }
            }
            if (tap->needs_grad) {
                ensure_grad(tap);
                for (int b = 0; b < bs; ++b) {
                    T* gbase = tap->grad.ptr() + static_cast<std::size_t>(b) * c * plane;
                    for (int n = 0; n < nn; ++n) {
                        const T g = self->grad.data[static_cast<std::size_t>(b) * nn + n];
                        const auto& cr = (*corners)[n];
                        const T w00 = (T(1) - cr.fy) * (T(1) - cr.fx),
                                w01 = (T(1) - cr.fy) * cr.fx, w10 = cr.fy * (T(1) - cr.fx),
                                w11 = cr.fy * cr.fx;
                        const int i00 = cr.y0 * w + cr.x0;
                        const T* wn = weight->value.ptr() + static_cast<std::size_t>(n) * c;
                        for (int ch = 0; ch < c; ++ch) {
                            const T gw = g * wn[ch];
                            T* pl = gbase + static_cast<std::size_t>(ch) * plane;
                            pl[i00] += gw * w00;
                            pl[i00 + 1] += gw * w01;
                            pl[i00 + w] += gw * w10;
                            pl[i00 + w + 1] += gw * w11;
                        }
                    }
                }
            }
            if (pos->needs_grad) {
                ensure_grad(pos);
                for (int n = 0; n < nn; ++n) {
                    const auto& cr = (*corners)[n];
                    const int i00 = cr.y0 * w + cr.x0;
                    const T* wn = weight->value.ptr() + static_cast<std::size_t>(n) * c;
                    T dpx = T(0), dpy = T(0);
                    for (int b = 0; b < bs; ++b) {
                        const T g = self->grad.data[static_cast<std::size_t>(b) * nn + n];
                        if (g == T(0)) continue;
                        const T* base = tap->value.ptr() + static_cast<std::size_t>(b) * c * plane;
                        T sx = T(0), sy = T(0);
                        for (int ch = 0; ch < c; ++ch) {
                            const T* pl = base + static_cast<std::size_t>(ch) * plane;
                            const T v00 = pl[i00], v01 = pl[i00 + 1], v10 = pl[i00 + w],
                                    v11 = pl[i00 + w + 1];
                            const T ddx = (T(1) - cr.fy) * (v01 - v00) + cr.fy * (v11 - v10);
                            const T ddy = (T(1) - cr.fx) * (v10 - v00) + cr.fx * (v11 - v01);
                            sx += wn[ch] * ddx;
                            sy += wn[ch] * ddy;
                        }
                        dpx += g * sx;
                        dpy += g * sy;
                    }
                    pos->grad.data[2 * n] += dpx * T(0.5) * static_cast<T>(w - 1);
                    pos->grad.data[2 * n + 1] += dpy * T(0.5) * static_cast<T>(h - 1);
                }
            }
        };
        return make(std::move(v), {tap, weight, bias, pos}, std::move(bw));
    }

    // ---- backward driver ----

    /// Reverse accumulation from a scalar loss. Node creation order is a
    /// topological order, so a single reverse sweep suffices.
    void backward(Node<T>* loss) {
        if (loss->value.numel() != 1) throw ConfigError("backward: loss must be scalar");
        ensure_grad(loss);
        loss->grad.data[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>& n = *it;
            if (n.backward_ && n.has_grad() && n.needs_grad) n.backward_(&n);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::deque<Node<T>> nodes_;

    Node<T>* alloc() {
        nodes_.emplace_back();
        return &nodes_.back();
    }

    Node<T>* make(Tensor<T> value, std::initializer_list<Node<T>*> parents,
                  std::function<void(Node<T>*)> bw) {
        Node<T>* n = alloc();
        n->value = std::move(value);
        n->parents_.assign(parents);
        bool ng = false;
        for (auto* p : n->parents_) ng = ng || p->needs_grad;
        n->needs_grad = ng;
        if (ng) n->backward_ = std::move(bw);
        return n;
    }

    static void ensure_grad(Node<T>* n) {
        if (!n->has_grad()) n->grad = Tensor<T>::zeros(n->value.shape);
    }

    static void accumulate(Node<T>* p, const T* g, T scale_factor) {
        if (!p->needs_grad) return;
        ensure_grad(p);
        for (std::int64_t i = 0; i < p->grad.numel(); ++i) p->grad.data[i] += g[i] * scale_factor;
    }

    static void check_same_shape(Node<T>* a, Node<T>* b, const char* op) {
        if (!a->value.same_shape(b->value))
            throw ConfigError(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                              " vs " + b->value.shape_str());
    }

    /// col has K = c*kh*kw rows; each row is `ld` wide, image-local columns
    /// start at `dst`.
    static void im2col(const T* img, int c, int h, int w, int kh, int kw, int stride, int pad,
                       int ho, int wo, T* dst, std::size_t ld) {
        for (int ch = 0; ch < c; ++ch)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    T* row = dst + (static_cast<std::size_t>(ch) * kh * kw + ky * kw + kx) * ld;
                    const T* plane = img + static_cast<std::size_t>(ch) * h * w;
                    int p = 0;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) {
                            for (int ox = 0; ox < wo; ++ox) row[p++] = T(0);
                            continue;
                        }
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            row[p++] = (ix < 0 || ix >= w) ? T(0) : plane[iy * w + ix];
                        }
                    }
                }
    }

    static void col2im(const T* col, std::size_t ld, int c, int h, int w, int kh, int kw,
                       int stride, int pad, int ho, int wo, T* img) {
        for (int ch = 0; ch < c; ++ch)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    const T* row = col + (static_cast<std::size_t>(ch) * kh * kw + ky * kw + kx) * ld;
                    T* plane = img + static_cast<std::size_t>(ch) * h * w;
                    int p = 0;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) {
                            p += wo;
                            continue;
                        }
                        for (int ox = 0; ox < wo; ++ox, ++p) {
                            const int ix = ox * stride + kx - pad;
                            if (ix >= 0 && ix < w) plane[iy * w + ix] += row[p];
                        }
                    }
                }
    }
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;
using NodeF = Node<float>;
using NodeD = Node<double>;

}  // namespace cotrain

#endif  // COTRAIN_AUTODIFF_HPP
