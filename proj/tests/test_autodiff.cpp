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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cotrain/autodiff.hpp"
#include "testutil.hpp"

using namespace cotrain;
using testutil::max_rel_err;
using testutil::numerical_grad;
using testutil::random_tensor;

namespace {

// Wraps an op into the finite-difference harness: `build` constructs the
// graph from leaves and returns the scalar loss node.
struct FdProblem {
    std::vector<std::vector<int>> shapes;
    std::function<NodeD*(GraphD&, std::vector<NodeD*>&)> build;
};

double check_gradients(const FdProblem& prob, Rng& rng, double scale = 0.5) {
    std::vector<TensorD> params;
    for (const auto& s : prob.shapes) params.push_back(random_tensor(s, rng, scale));

    auto unpack = [&](const std::vector<double>& flat) {
        std::vector<TensorD> out = params;
        std::size_t k = 0;
        for (auto& t : out)
            for (auto& v : t.data) v = flat[k++];
        return out;
    };
    std::vector<double> flat;
    for (const auto& t : params)
        for (double v : t.data) flat.push_back(v);

    auto eval = [&](const std::vector<double>& x) {
        auto ts = unpack(x);
        GraphD g;
        std::vector<NodeD*> leaves;
        for (auto& t : ts) leaves.push_back(g.leaf(t, false));
        return prob.build(g, leaves)->value.data[0];
    };

    auto ts = unpack(flat);
    GraphD g;
    std::vector<NodeD*> leaves;
    for (auto& t : ts) leaves.push_back(g.leaf(t, true));
    g.backward(prob.build(g, leaves));

    std::vector<double> analytic;
    for (auto* n : leaves) {
        if (!n->has_grad())
            analytic.insert(analytic.end(), static_cast<std::size_t>(n->value.numel()), 0.0);
        else
            analytic.insert(analytic.end(), n->grad.data.begin(), n->grad.data.end());
    }
    return max_rel_err(analytic, numerical_grad(eval, flat));
}

}  // namespace

TEST_CASE("elementwise and reduction gradients match finite differences") {
    Rng rng(7);
    SUBCASE("add/mul/scale/exp chain") {
        FdProblem p{{{3, 4}, {3, 4}}, [](GraphD& g, std::vector<NodeD*>& l) {
                        return g.sum_sq(g.mul(g.exp_(g.scale(l[0], 0.3)), g.add(l[0], l[1])));
                    }};
        CHECK(check_gradients(p, rng) < 1e-7);
    }
    SUBCASE("sub/mean/add_scalar") {
        FdProblem p{{{5}, {5}}, [](GraphD& g, std::vector<NodeD*>& l) {
                        return g.mean(g.mul(g.sub(l[0], l[1]), g.add_scalar(l[0], 0.7)));
                    }};
        CHECK(check_gradients(p, rng) < 1e-7);
    }
    SUBCASE("relu") {
        Rng r2(11);
        FdProblem p{{{4, 4}},
                    [](GraphD& g, std::vector<NodeD*>& l) { return g.sum_sq(g.relu(l[0])); }};
        CHECK(check_gradients(p, r2, 1.3) < 1e-6);
    }
    SUBCASE("elu1 positivity and gradient") {
        FdProblem p{{{6}}, [](GraphD& g, std::vector<NodeD*>& l) {
                        auto* e = g.elu1(l[0]);
                        for (double v : e->value.data) CHECK(v > 0.0);
                        return g.sum_sq(e);
                    }};
        CHECK(check_gradients(p, rng) < 1e-7);
    }
    SUBCASE("reshape is a gradient pass-through") {
        FdProblem p{{{2, 6}}, [](GraphD& g, std::vector<NodeD*>& l) {
                        return g.sum_sq(g.reshape(l[0], {3, 4}));
                    }};
        CHECK(check_gradients(p, rng) < 1e-8);
    }
}

TEST_CASE("matmul and linear gradients") {
    Rng rng(13);
    FdProblem mm{{{3, 4}, {4, 2}}, [](GraphD& g, std::vector<NodeD*>& l) {
                     return g.sum_sq(g.matmul(l[0], l[1]));
                 }};
    CHECK(check_gradients(mm, rng) < 1e-7);

    FdProblem lin{{{5, 3}, {4, 3}, {4}}, [](GraphD& g, std::vector<NodeD*>& l) {
                      return g.sum_sq(g.linear(l[0], l[1], l[2]));
                  }};
    CHECK(check_gradients(lin, rng) < 1e-7);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(17);
    SUBCASE("3x3 same padding") {
        FdProblem p{{{2, 3, 6, 6}, {4, 3, 3, 3}, {4}}, [](GraphD& g, std::vector<NodeD*>& l) {
                        return g.sum_sq(g.conv2d(l[0], l[1], l[2], 1, 1));
                    }};
        CHECK(check_gradients(p, rng) < 1e-6);
    }
    SUBCASE("1x1 no padding") {
        FdProblem p{{{2, 4, 5, 5}, {3, 4, 1, 1}, {3}}, [](GraphD& g, std::vector<NodeD*>& l) {
                        return g.sum_sq(g.conv2d(l[0], l[1], l[2], 1, 0));
                    }};
        CHECK(check_gradients(p, rng) < 1e-6);
    }
    SUBCASE("stride 2") {
        FdProblem p{{{1, 2, 8, 8}, {2, 2, 3, 3}, {2}}, [](GraphD& g, std::vector<NodeD*>& l) {
                        return g.sum_sq(g.conv2d(l[0], l[1], l[2], 2, 1));
                    }};
        CHECK(check_gradients(p, rng) < 1e-6);
    }
}

TEST_CASE("pooling gradients") {
    Rng rng(19);
    FdProblem mp{{{2, 2, 4, 4}},
                 [](GraphD& g, std::vector<NodeD*>& l) { return g.sum_sq(g.maxpool2x2(l[0])); }};
    CHECK(check_gradients(mp, rng) < 1e-6);

    FdProblem gap{{{2, 3, 4, 4}}, [](GraphD& g, std::vector<NodeD*>& l) {
                      return g.sum_sq(g.global_avg_pool(l[0]));
                  }};
    CHECK(check_gradients(gap, rng) < 1e-7);
}

TEST_CASE("batchnorm gradients, train and eval") {
    Rng rng(23);
    SUBCASE("training mode couples the batch") {
        FdProblem p{{{3, 2, 4, 4}, {2}, {2}}, [](GraphD& g, std::vector<NodeD*>& l) {
                        TensorD rm = TensorD::zeros({2});
                        TensorD rv = TensorD::full({2}, 1.0);
                        BatchNormState<double> st{&rm, &rv, true};
                        return g.sum_sq(g.batchnorm2d(l[0], l[1], l[2], st, true));
                    }};
        CHECK(check_gradients(p, rng) < 1e-6);
    }
    SUBCASE("eval mode uses stored statistics") {
        FdProblem p{{{2, 2, 3, 3}, {2}, {2}}, [](GraphD& g, std::vector<NodeD*>& l) {
                        TensorD rm({2}, {0.2, -0.1});
                        TensorD rv({2}, {1.5, 0.8});
                        BatchNormState<double> st{&rm, &rv, false};
                        return g.sum_sq(g.batchnorm2d(l[0], l[1], l[2], st, false));
                    }};
        CHECK(check_gradients(p, rng) < 1e-7);
    }
    SUBCASE("training mode updates running statistics") {
        GraphD g;
        Rng r(3);
        TensorD rm = TensorD::zeros({2});
        TensorD rv = TensorD::full({2}, 1.0);
        BatchNormState<double> st{&rm, &rv, true};
        auto* x = g.leaf(random_tensor({4, 2, 3, 3}, r), false);
        auto* gm = g.leaf(TensorD::full({2}, 1.0), false);
        auto* bt = g.leaf(TensorD::zeros({2}), false);
        g.batchnorm2d(x, gm, bt, st, true);
        CHECK(rm.data[0] != 0.0);
        CHECK(rv.data[0] != 1.0);
        // frozen state: no update
        TensorD rm2 = TensorD::zeros({2});
        TensorD rv2 = TensorD::full({2}, 1.0);
        BatchNormState<double> frozen{&rm2, &rv2, false};
        g.batchnorm2d(x, gm, bt, frozen, true);
        CHECK(rm2.data[0] == 0.0);
        CHECK(rv2.data[0] == 1.0);
    }
}

TEST_CASE("softmax, nll, mse, poisson gradients") {
    Rng rng(29);
    std::vector<int> labels{1, 0, 2};
    FdProblem ce{{{3, 4}}, [labels](GraphD& g, std::vector<NodeD*>& l) {
                     return g.nll(g.log_softmax(l[0]), labels);
                 }};
    CHECK(check_gradients(ce, rng) < 1e-7);

    FdProblem ms{{{3, 4}, {3, 4}},
                 [](GraphD& g, std::vector<NodeD*>& l) { return g.mse(l[0], l[1]); }};
    CHECK(check_gradients(ms, rng) < 1e-7);

    Rng cr(31);
    TensorD counts({2, 3});
    for (auto& v : counts.data) v = std::floor(cr.uniform(0, 5));
    FdProblem po{{{2, 3}}, [counts](GraphD& g, std::vector<NodeD*>& l) {
                     return g.poisson_nll(g.elu1(l[0]), counts, 1e-8);
                 }};
    CHECK(check_gradients(po, rng) < 1e-6);
}

TEST_CASE("gaussian readout gradients incl. positions") {
    Rng rng(37);
    FdProblem p{{{2, 4, 5, 5}, {3, 4}, {3}, {3, 2}}, [](GraphD& g, std::vector<NodeD*>& l) {
                    // keep positions inside (-1,1) and off grid lines
                    for (auto& v : l[3]->value.data) v = std::tanh(v) * 0.8;
                    return g.sum_sq(g.elu1(g.gaussian_readout(l[0], l[1], l[2], l[3])));
                }};
    // note: position leaves are transformed in-place before building, so the
    // numeric path sees the same transform
    CHECK(check_gradients(p, rng) < 1e-5);
}

TEST_CASE("dropout masks gradient identically to forward") {
    GraphD g;
    Rng rng(41);
    TensorD x = random_tensor({4, 4}, rng);
    auto* xl = g.leaf(x, true);
    Rng d1(99);
    auto* y = g.dropout(xl, 0.5, d1, true);
    auto* loss = g.sum_sq(y);
    g.backward(loss);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        if (y->value.data[i] == 0.0)
            CHECK(xl->grad.data[i] == 0.0);
        else
            CHECK(xl->grad.data[i] == doctest::Approx(2.0 * y->value.data[i] * 2.0));
    }
    // eval mode is the identity
    GraphD g2;
    auto* xe = g2.leaf(x, false);
    Rng d2(99);
    CHECK(g2.dropout(xe, 0.5, d2, false) == xe);
}

TEST_CASE("loss = ||x||^2/2 gives gradient x") {
    GraphD g;
    Rng rng(43);
    TensorD x = random_tensor({7}, rng);
    auto* xl = g.leaf(x, true);
    auto* loss = g.scale(g.sum_sq(xl), 0.5);
    g.backward(loss);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        CHECK(xl->grad.data[i] == doctest::Approx(x.data[i]).epsilon(1e-12));
}

TEST_CASE("frozen leaves receive no gradient") {
    GraphD g;
    Rng rng(47);
    auto* a = g.leaf(random_tensor({3, 3}, rng), true);
    auto* b = g.leaf(random_tensor({3, 3}, rng), false);
    auto* loss = g.sum_sq(g.mul(a, b));
    g.backward(loss);
    CHECK(a->has_grad());
    CHECK_FALSE(b->has_grad());
}

TEST_CASE("random 3-layer net end-to-end finite difference") {
    Rng rng(53);
    std::vector<int> labels{2, 0};
    FdProblem p{{{2, 1, 8, 8},     // input
                 {4, 1, 3, 3},     // conv w
                 {4},              // conv b
                 {4},              // bn gamma (offset below)
                 {4},              // bn beta
                 {3, 64},          // fc w on flattened (4,4,4)
                 {3}},             // fc b
                [labels](GraphD& g, std::vector<NodeD*>& l) {
                    for (auto& v : l[3]->value.data) v += 1.0;  // keep gamma away from 0
                    TensorD rm = TensorD::zeros({4});
                    TensorD rv = TensorD::full({4}, 1.0);
                    BatchNormState<double> st{&rm, &rv, true};
                    auto* c = g.conv2d(l[0], l[1], l[2], 1, 1);
                    auto* bn = g.batchnorm2d(c, l[3], l[4], st, true);
                    auto* act = g.elu1(bn);
                    auto* pooled = g.maxpool2x2(act);          // (2,4,4,4)
                    auto* flat = g.reshape(pooled, {2, 64});
                    auto* logits = g.linear(flat, l[5], l[6]);
                    return g.nll(g.log_softmax(logits), labels);
                }};
    CHECK(check_gradients(p, rng) < 1e-5);
}
