// Differentiable kernels: forward values against closed forms, gradients
// against central differences, stop-gradient blocking, and the Adam step.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ltrec/autodiff.hpp"
#include "ltrec/gradcheck.hpp"
#include "ltrec/optim.hpp"
#include "ltrec/rng.hpp"
#include "ltrec/tensor.hpp"

using namespace ltrec;

namespace {

Tensor random_vec(Rng& rng, int n, double lo = -1.0, double hi = 1.0) {
    Tensor t(n, 1);
    for (auto& x : t.v) x = rng.uniform(lo, hi);
    return t;
}

Tensor random_mat(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
    Tensor t(r, c);
    for (auto& x : t.v) x = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("dense_affine matches hand-computed products") {
    Graph g;
    SECTION("identity weights pass the input through") {
        Value y = dense_affine(g.input(Tensor::vec({1.0, 2.0})),
                               g.input(Tensor::mat({{1.0, 0.0}, {0.0, 1.0}})),
                               g.input(Tensor::vec({0.0, 0.0})));
        CHECK(y.data().v[0] == 1.0);
        CHECK(y.data().v[1] == 2.0);
    }
    SECTION("zero weights return the bias") {
        Value y = dense_affine(g.input(Tensor::vec({1.0, 0.0})),
                               g.input(Tensor::mat({{0.0, 0.0}, {0.0, 0.0}})),
                               g.input(Tensor::vec({3.0, 4.0})));
        CHECK(y.data().v[0] == 3.0);
        CHECK(y.data().v[1] == 4.0);
    }
    SECTION("general case") {
        Value y = dense_affine(g.input(Tensor::vec({1.0, 2.0})),
                               g.input(Tensor::mat({{1.0, 1.0}, {2.0, 0.0}})),
                               g.input(Tensor::vec({0.0, 1.0})));
        CHECK(y.data().v[0] == Catch::Approx(3.0).margin(1e-15));
        CHECK(y.data().v[1] == Catch::Approx(3.0).margin(1e-15));
    }
    SECTION("shape mismatch names both shapes") {
        CHECK_THROWS_AS(dense_affine(g.input(Tensor::vec({1.0, 2.0, 3.0})),
                                     g.input(Tensor::mat({{1.0, 0.0}, {0.0, 1.0}})),
                                     g.input(Tensor::vec({0.0, 0.0}))),
                        ShapeError);
    }
}

TEST_CASE("sigmoid hits its closed-form values") {
    Graph g;
    CHECK(sigmoid(g.input(Tensor::scalar(0.0))).scalar() == 0.5);
    CHECK(sigmoid(g.input(Tensor::scalar(50.0))).scalar() == Catch::Approx(1.0).margin(1e-12));
    CHECK(sigmoid(g.input(Tensor::scalar(std::log(3.0)))).scalar() ==
          Catch::Approx(0.75).margin(1e-15));
    CHECK(std::isfinite(sigmoid(g.input(Tensor::scalar(-1000.0))).scalar()));
}

TEST_CASE("softmax_vector normalizes, is stable, and shift-invariant") {
    Graph g;
    SECTION("uniform logits") {
        Value s = softmax_vector(g.input(Tensor::vec({0.0, 0.0, 0.0})));
        for (int i = 0; i < 3; ++i)
            CHECK(s.data().v[i] == Catch::Approx(1.0 / 3.0).margin(1e-15));
    }
    SECTION("extreme logits do not overflow") {
        Value s = softmax_vector(g.input(Tensor::vec({1000.0, 0.0})));
        CHECK(s.data().v[0] == Catch::Approx(1.0).margin(1e-12));
        CHECK(s.data().v[1] == Catch::Approx(0.0).margin(1e-12));
        CHECK(s.data().all_finite());
    }
    SECTION("ln2 case") {
        Value s = softmax_vector(g.input(Tensor::vec({std::log(2.0), 0.0})));
        CHECK(s.data().v[0] == Catch::Approx(2.0 / 3.0).margin(1e-15));
        CHECK(s.data().v[1] == Catch::Approx(1.0 / 3.0).margin(1e-15));
    }
    SECTION("sums to one and ignores constant shifts") {
        Rng rng(123);
        for (int t = 0; t < 50; ++t) {
            Tensor logits = random_vec(rng, 1 + static_cast<int>(rng.uniform_int(7)), -5, 5);
            Value a = softmax_vector(g.input(logits));
            double sum = 0.0;
            for (double x : a.data().v) sum += x;
            CHECK(std::abs(sum - 1.0) < 1e-12);
            Tensor shifted = logits;
            for (auto& x : shifted.v) x += 3.7;
            Value b = softmax_vector(g.input(shifted));
            for (int i = 0; i < logits.size(); ++i)
                CHECK(std::abs(a.data().v[i] - b.data().v[i]) < 1e-12);
        }
    }
    SECTION("empty input rejected") {
        CHECK_THROWS_AS(softmax_vector(g.input(Tensor(0, 1))), DomainError);
    }
}

TEST_CASE("cosine_similarity closed forms and degenerate rejection") {
    Graph g;
    CHECK(cosine_similarity(g.input(Tensor::vec({1.0, 0.0})),
                            g.input(Tensor::vec({0.0, 1.0}))).scalar() == 0.0);
    CHECK(cosine_similarity(g.input(Tensor::vec({3.0, 4.0})),
                            g.input(Tensor::vec({3.0, 4.0}))).scalar() ==
          Catch::Approx(1.0).margin(1e-15));
    CHECK(cosine_similarity(g.input(Tensor::vec({1.0, 0.0})),
                            g.input(Tensor::vec({1.0, 1.0}))).scalar() ==
          Catch::Approx(0.7071).margin(1e-4));
    CHECK_THROWS_AS(cosine_similarity(g.input(Tensor::vec({0.0, 0.0})),
                                      g.input(Tensor::vec({1.0, 0.0}))),
                    DomainError);
}

TEST_CASE("stop_gradient is a forward identity that blocks backward flow") {
    SECTION("forward identity") {
        Graph g;
        Value x = g.input(Tensor::vec({1.0, 2.0}));
        Value s = stop_gradient(x);
        CHECK(s.data().v[0] == 1.0);
        CHECK(s.data().v[1] == 2.0);
    }
    SECTION("sum(sg(x) * y): x gets exactly zero") {
        Graph g;
        Value x = g.input(Tensor::vec({1.5, -2.0}));
        Value y = g.input(Tensor::vec({3.0, 4.0}));
        g.backward(sum(mul(stop_gradient(x), y)));
        CHECK(x.grad().v[0] == 0.0);
        CHECK(x.grad().v[1] == 0.0);
        CHECK(y.grad().v[0] == 1.5);
        CHECK(y.grad().v[1] == -2.0);
    }
    SECTION("sum(x * sg(x)): gradient is x, not 2x") {
        Graph g;
        Value x = g.input(Tensor::vec({1.0, 2.0, -3.0}));
        g.backward(sum(mul(x, stop_gradient(x))));
        CHECK(x.grad().v[0] == 1.0);
        CHECK(x.grad().v[1] == 2.0);
        CHECK(x.grad().v[2] == -3.0);
    }
    SECTION("ancestors reachable only through sg stay bitwise zero") {
        Graph g;
        Value x = g.input(Tensor::vec({0.3, 0.7}));
        Value h = sigmoid(x);  // ancestor chain
        g.backward(sum(stop_gradient(mul(h, h))));
        CHECK(x.grad().v[0] == 0.0);
        CHECK(x.grad().v[1] == 0.0);
        // The lazily allocated grad buffer was never touched at all.
        CHECK_FALSE(g.node(x.index()).has_grad);
    }
}

TEST_CASE("backward_pass basics") {
    SECTION("scalar loss has unit self-gradient") {
        Graph g;
        Value x = g.input(Tensor::scalar(4.2));
        g.backward(x);
        CHECK(x.grad().v[0] == 1.0);
    }
    SECTION("sum of squares") {
        Graph g;
        Value x = g.input(Tensor::vec({1.0, 2.0, 3.0}));
        g.backward(sum(mul(x, x)));
        CHECK(x.grad().v[0] == 2.0);
        CHECK(x.grad().v[1] == 4.0);
        CHECK(x.grad().v[2] == 6.0);
    }
    SECTION("non-scalar loss rejected") {
        Graph g;
        Value x = g.input(Tensor::vec({1.0, 2.0}));
        CHECK_THROWS_AS(g.backward(x), DomainError);
    }
    SECTION("repeated backward accumulates") {
        Graph g;
        Value x = g.input(Tensor::scalar(3.0));
        Value loss = mul(x, x);
        g.backward(loss);
        g.backward(loss);
        CHECK(x.grad().v[0] == 12.0);  // 2 * (2x)
    }
}

TEST_CASE("adam_step hand-checked behavior") {
    AdamConfig cfg;
    cfg.lr = 0.1;
    SECTION("zero gradient leaves parameters untouched but advances the step") {
        Tensor p = Tensor::vec({1.0, -2.0});
        AdamState st;
        REQUIRE(adam_step(p, Tensor::zeros(2, 1), st, cfg));
        CHECK(p.v[0] == 1.0);
        CHECK(p.v[1] == -2.0);
        CHECK(st.step == 1);
    }
    SECTION("first step with unit gradient moves by about -lr") {
        Tensor p = Tensor::scalar(1.0);
        AdamState st;
        REQUIRE(adam_step(p, Tensor::scalar(1.0), st, cfg));
        CHECK(p.v[0] == Catch::Approx(1.0 - 0.1).margin(1e-8));
    }
    SECTION("two identical gradients move the same direction") {
        Tensor p = Tensor::scalar(0.0);
        AdamState st;
        adam_step(p, Tensor::scalar(1.0), st, cfg);
        double after1 = p.v[0];
        adam_step(p, Tensor::scalar(1.0), st, cfg);
        CHECK(after1 < 0.0);
        CHECK(p.v[0] < after1);
    }
    SECTION("non-finite gradient skips the update entirely") {
        Tensor p = Tensor::scalar(1.0);
        AdamState st;
        adam_step(p, Tensor::scalar(1.0), st, cfg);
        Tensor pm = p, m = st.m, v = st.v;
        Tensor bad = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
        REQUIRE_FALSE(adam_step(p, bad, st, cfg));
        CHECK(p.v[0] == pm.v[0]);
        CHECK(st.m.v[0] == m.v[0]);
        CHECK(st.v.v[0] == v.v[0]);
        CHECK(st.step == 1);
    }
}

TEST_CASE("central differences agree with analytic gradients for every op") {
    Rng rng(2024);
    auto check = [&](const char* name, const GraphBuilder& build,
                     const std::vector<Tensor>& params, double tol = 1e-4) {
        GradCheckResult r = finite_difference_check(build, params);
        INFO(name << ": worst param " << r.worst_param << " coord " << r.worst_coord
                  << " analytic " << r.analytic << " numeric " << r.numeric);
        CHECK(r.max_rel_err < tol);
    };

    for (int trial = 0; trial < 20; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(6));
        Tensor a = random_vec(rng, n), b = random_vec(rng, n);
        Tensor pos = random_vec(rng, n, 0.4, 1.6);  // bounded away from 0
        Tensor s = Tensor::scalar(rng.uniform(-1.0, 1.0));

        check("add+mul+sub", [](Graph& g, const std::vector<Value>& l) {
            return sum(mul(add(l[0], l[1]), sub(l[0], l[1])));
        }, {a, b});
        check("div", [](Graph& g, const std::vector<Value>& l) {
            return sum(div(l[0], l[1]));
        }, {a, pos});
        check("scale+sigmoid+tanh", [](Graph& g, const std::vector<Value>& l) {
            return sum(tanh_v(scale(sigmoid(l[0]), 2.0, -0.5)));
        }, {a});
        check("log+exp", [](Graph& g, const std::vector<Value>& l) {
            return sum(log_v(exp_v(l[0])));
        }, {a});
        check("dot", [](Graph& g, const std::vector<Value>& l) {
            return dot(l[0], l[1]);
        }, {a, b});
        check("mean", [](Graph& g, const std::vector<Value>& l) {
            return mean(mul(l[0], l[0]));
        }, {a});
        check("dense_affine", [n](Graph& g, const std::vector<Value>& l) {
            return sum(sigmoid(dense_affine(l[0], l[1], l[2])));
        }, {a, random_mat(rng, 3, n), random_vec(rng, 3)});
        check("softmax", [](Graph& g, const std::vector<Value>& l) {
            return dot(softmax_vector(l[0]), l[1]);
        }, {a, b});
        check("log_sum_exp", [](Graph& g, const std::vector<Value>& l) {
            return log_sum_exp(l[0]);
        }, {a});
        check("concat+pick", [](Graph& g, const std::vector<Value>& l) {
            Value c = concat({l[0], l[1]});
            return mul(pick(c, 0), sum(c));
        }, {a, b});
        check("scalar_mul_vec", [](Graph& g, const std::vector<Value>& l) {
            return sum(scalar_mul_vec(pick(l[0], 0), l[1]));
        }, {a, b});
        check("norm+normalize", [](Graph& g, const std::vector<Value>& l) {
            return mul(norm_l2(l[0]), sum(normalize_l2(l[1])));
        }, {pos, a});
        check("dot_rows+weighted_sum", [](Graph& g, const std::vector<Value>& l) {
            std::vector<Value> rows{l[0], l[1]};
            Value w = softmax_vector(dot_rows(l[2], rows));
            return sum(weighted_sum(w, rows));
        }, {a, b, random_vec(rng, n)});
        check("sort_desc", [](Graph& g, const std::vector<Value>& l) {
            return dot(sort_desc(l[0]), l[1]);
        }, {a, b});
        check("bce_with_logit", [](Graph& g, const std::vector<Value>& l) {
            return bce_with_logit(pick(l[0], 0), 1.0);
        }, {a});
        check("cosine_similarity", [](Graph& g, const std::vector<Value>& l) {
            return cosine_similarity(l[0], l[1]);
        }, {pos, random_vec(rng, n, 0.4, 1.6)});
    }
}

TEST_CASE("constant-gradient function passes the checker tightly") {
    GradCheckResult r = finite_difference_check(
        [](Graph& g, const std::vector<Value>& l) { return sum(l[0]); },
        {Tensor::vec({0.4, -1.2, 2.0})});
    CHECK(r.max_rel_err < 1e-10);
}

TEST_CASE("non-finite probe points are reported, not propagated") {
    // log of a negative number under perturbation.
    CHECK_THROWS_AS(finite_difference_check(
                        [](Graph& g, const std::vector<Value>& l) {
                            return sum(log_v(l[0]));
                        },
                        {Tensor::vec({1e-6})}, 1e-5),
                    ProbeFailure);
}

TEST_CASE("identical inputs give bitwise-identical forwards and gradients") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Graph g;
        Value x = g.input(random_vec(rng, 6));
        Value w = g.input(random_mat(rng, 4, 6));
        Value b = g.input(random_vec(rng, 4));
        Value loss = sum(sigmoid(dense_affine(x, w, b)));
        g.backward(loss);
        std::vector<double> out{loss.scalar()};
        for (double v : x.grad().v) out.push_back(v);
        for (double v : w.grad().v) out.push_back(v);
        return out;
    };
    CHECK(run(99) == run(99));
}
