#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <omp.h>

#include <cmath>

#include "doctest.h"
#include "mano/errors.hpp"
#include "mano/gradcheck.hpp"
#include "mano/graph.hpp"
#include "mano/multipole.hpp"
#include "mano/ref.hpp"
#include "test_util.hpp"

using namespace mano;
using testutil::bit_equal;
using testutil::random_tensor;

TEST_CASE("matmul basics") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor out;
    kernels::matmul(eye, m, out);
    CHECK(max_abs_diff(out, m) == 0.0);

    Tensor row = Tensor::from({1, 2}, {1, 2});
    Tensor col = Tensor::from({2, 1}, {3, 4});
    kernels::matmul(row, col, out);
    CHECK(out.numel() == 1);
    CHECK(out.data[0] == doctest::Approx(11.0));

    Tensor bad = Tensor::from({3, 1}, {1, 2, 3});
    CHECK_THROWS_WITH_AS(kernels::matmul(row, bad, out),
                         doctest::Contains("[1x2]"), DimError);
    try {
        kernels::matmul(row, bad, out);
    } catch (const DimError& e) {
        CHECK(std::string(e.what()).find("[3x1]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient: sum(a*b) wrt a") {
    Graph g;
    Graph::NodeId a = g.param(Tensor::from({2, 2}, {1, 0, 0, 1}), "a");
    Graph::NodeId b = g.input(Tensor::from({2, 2}, {2, 0, 0, 2}));
    Graph::NodeId loss = g.sum(g.matmul(a, b));
    g.backward(loss);
    // d sum(ab) / da[i,k] = sum_j b[k,j] = 2 everywhere here
    CHECK(max_abs_diff(g.grad(a), Tensor::from({2, 2}, {2, 2, 2, 2})) < 1e-15);
}

TEST_CASE("matmul gradient matches finite differences") {
    Tensor a0 = random_tensor({3, 4}, 11);
    Tensor b0 = random_tensor({4, 2}, 12);
    Tensor wa, wb;
    auto loss_eval = [&]() {
        Graph g;
        Graph::NodeId a = g.input(a0);
        Graph::NodeId b = g.input(b0);
        Graph::NodeId w = g.input(random_tensor({3, 2}, 13));
        return g.scalar(g.sum(g.mul(g.matmul(a, b), w)));
    };
    Graph g;
    Graph::NodeId a = g.param(a0, "a");
    Graph::NodeId b = g.param(b0, "b");
    Graph::NodeId w = g.input(random_tensor({3, 2}, 13));
    Graph::NodeId loss = g.sum(g.mul(g.matmul(a, b), w));
    g.backward(loss);
    GradCheckOptions opt;
    opt.tolerance = 1e-6;
    auto rep = grad_check({{"a", &a0}, {"b", &b0}}, loss_eval, {g.grad(a), g.grad(b)}, opt);
    CHECK(rep.pass);
    CHECK(rep.worst < 1e-6);
}

TEST_CASE("softmax rows") {
    Tensor out;
    kernels::softmax_rows(Tensor::from({1, 2}, {0, 0}), out);
    CHECK(out.data[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(out.data[1] == doctest::Approx(0.5).epsilon(1e-14));

    kernels::softmax_rows(Tensor::from({1, 2}, {1000, 0}), out);
    CHECK(out.data[0] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(out.data[1] == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(out.all_finite());

    Tensor x = random_tensor({3, 4}, 21);
    kernels::softmax_rows(x, out);
    for (std::size_t i = 0; i < 3; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 4; ++j) s += out.at2(i, j);
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }

    SUBCASE("row sums over many seeds") {
        for (int seed = 0; seed < 100; ++seed) {
            Tensor r = random_tensor({4, 5}, 1000 + static_cast<std::uint64_t>(seed), 10.0);
            kernels::softmax_rows(r, out);
            for (std::size_t i = 0; i < 4; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < 5; ++j) s += out.at2(i, j);
                CHECK(std::fabs(s - 1.0) < 1e-12);
            }
        }
    }

    SUBCASE("shift invariance") {
        Tensor shifted = x;
        for (double& v : shifted.data) v += 17.5;
        Tensor out2;
        kernels::softmax_rows(shifted, out2);
        CHECK(max_abs_diff(out, out2) < 1e-12);
    }

    SUBCASE("jacobian matches finite differences") {
        Tensor x0 = random_tensor({3, 4}, 22);
        Tensor w = random_tensor({3, 4}, 23);
        auto loss_eval = [&]() {
            Graph g;
            return g.scalar(g.sum(g.mul(g.softmax_rows(g.input(x0)), g.input(w))));
        };
        Graph g;
        Graph::NodeId xn = g.param(x0, "x");
        g.backward(g.sum(g.mul(g.softmax_rows(xn), g.input(w))));
        GradCheckOptions opt;
        opt.tolerance = 1e-6;
        auto rep = grad_check({{"x", &x0}}, loss_eval, {g.grad(xn)}, opt);
        CHECK(rep.pass);
    }
}

TEST_CASE("conv2d") {
    SUBCASE("constant field sum pooling") {
        Tensor x = Tensor::full({4, 4, 1}, 3.5);
        Tensor k = Tensor::full({2, 2, 1, 1}, 1.0);
        Tensor out;
        kernels::conv2d(x, k, 2, 0, out);
        CHECK(out.shape == Shape{2, 2, 1});
        for (double v : out.data) CHECK(v == doctest::Approx(14.0));
    }
    SUBCASE("1x1 identity kernel") {
        Tensor x = random_tensor({3, 5, 2}, 31);
        Tensor k = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
        Tensor out;
        kernels::conv2d(x, k, 1, 0, out);
        CHECK(max_abs_diff(out, x) == 0.0);
    }
    SUBCASE("matches naive loop oracle") {
        Tensor x = random_tensor({4, 4, 2}, 32);
        Tensor k = random_tensor({2, 2, 2, 2}, 33);
        Tensor out;
        kernels::conv2d(x, k, 2, 0, out);
        CHECK(max_abs_diff(out, ref::conv2d(x, k, 2, 0)) == 0.0);
    }
    SUBCASE("strided with padding matches oracle") {
        Tensor x = random_tensor({5, 7, 3}, 34);
        Tensor k = random_tensor({3, 3, 3, 2}, 35);
        Tensor out;
        kernels::conv2d(x, k, 2, 1, out);
        CHECK(max_abs_diff(out, ref::conv2d(x, k, 2, 1)) < 1e-14);
    }
    SUBCASE("kernel larger than input") {
        Tensor x = random_tensor({2, 2, 1}, 36);
        Tensor k = random_tensor({3, 3, 1, 1}, 37);
        Tensor out;
        CHECK_THROWS_AS(kernels::conv2d(x, k, 1, 0, out), DimError);
    }
}

TEST_CASE("conv_transpose2d") {
    SUBCASE("replication from one pixel") {
        Tensor x = Tensor::full({1, 1, 1}, 2.25);
        Tensor k = Tensor::full({2, 2, 1, 1}, 1.0);
        Tensor out;
        kernels::conv_transpose2d(x, k, 2, out);
        CHECK(out.shape == Shape{2, 2, 1});
        for (double v : out.data) CHECK(v == doctest::Approx(2.25));
    }
    SUBCASE("zero input gives zero output") {
        Tensor x = Tensor::zeros({3, 3, 2});
        Tensor k = random_tensor({2, 2, 2, 2}, 41);
        Tensor out;
        kernels::conv_transpose2d(x, k, 2, out);
        for (double v : out.data) CHECK(v == 0.0);
    }
    SUBCASE("adjoint identity over 100 seeded trials") {
        for (int trial = 0; trial < 100; ++trial) {
            const std::uint64_t s = 5000 + static_cast<std::uint64_t>(trial);
            Tensor x = random_tensor({4, 4, 2}, s);
            Tensor k = random_tensor({2, 2, 2, 3}, s + 100000);
            Tensor y = random_tensor({2, 2, 3}, s + 200000);
            Tensor cx, cty;
            kernels::conv2d(x, k, 2, 0, cx);
            kernels::conv_transpose2d(y, k, 2, cty);
            double lhs = 0, rhs = 0;
            for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx.data[i] * y.data[i];
            for (std::size_t i = 0; i < x.numel(); ++i) rhs += x.data[i] * cty.data[i];
            CHECK(std::fabs(lhs - rhs) < 1e-12);
        }
    }
    SUBCASE("matches naive oracle") {
        Tensor x = random_tensor({3, 3, 2}, 43);
        Tensor k = random_tensor({2, 2, 3, 2}, 44);
        Tensor out;
        kernels::conv_transpose2d(x, k, 2, out);
        CHECK(max_abs_diff(out, ref::conv_transpose2d(x, k, 2)) < 1e-14);
    }
}

TEST_CASE("layer_norm") {
    Tensor gamma = Tensor::full({4}, 1.0);
    Tensor beta = Tensor::zeros({4});
    Tensor out, mean, rstd;
    SUBCASE("constant token maps to zeros") {
        kernels::layer_norm(Tensor::full({2, 4}, 7.0), gamma, beta, 1e-5, out, mean, rstd);
        for (double v : out.data) CHECK(std::fabs(v) < 1e-12);
    }
    SUBCASE("already normalized token") {
        Tensor g2 = Tensor::full({2}, 1.0);
        Tensor b2 = Tensor::zeros({2});
        kernels::layer_norm(Tensor::from({1, 2}, {1, -1}), g2, b2, 1e-12, out, mean, rstd);
        CHECK(out.data[0] == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(out.data[1] == doctest::Approx(-1.0).epsilon(1e-9));
    }
    SUBCASE("output statistics") {
        Tensor x = random_tensor({6, 4}, 51, 3.0);
        kernels::layer_norm(x, gamma, beta, 1e-5, out, mean, rstd);
        for (std::size_t t = 0; t < 6; ++t) {
            double m = 0, v = 0;
            for (std::size_t j = 0; j < 4; ++j) m += out.at2(t, j);
            m /= 4;
            for (std::size_t j = 0; j < 4; ++j) v += (out.at2(t, j) - m) * (out.at2(t, j) - m);
            v /= 4;
            CHECK(std::fabs(m) < 1e-12);
            CHECK(std::fabs(v - 1.0) < 1e-4);  // eps-adjusted
        }
    }
    SUBCASE("matches oracle") {
        Tensor x = random_tensor({5, 4}, 52);
        Tensor gg = random_tensor({4}, 53);
        Tensor bb = random_tensor({4}, 54);
        kernels::layer_norm(x, gg, bb, 1e-5, out, mean, rstd);
        CHECK(max_abs_diff(out, ref::layer_norm(x, gg, bb, 1e-5)) < 1e-14);
    }
}

TEST_CASE("gelu") {
    Tensor out;
    kernels::gelu(Tensor::from({1}, {0.0}), out);
    CHECK(out.data[0] == 0.0);
    kernels::gelu(Tensor::from({1}, {10.0}), out);
    CHECK(std::fabs(out.data[0] - 10.0) < 1e-10);

    Tensor x0 = random_tensor({8}, 61);
    auto loss_eval = [&]() {
        Graph g;
        return g.scalar(g.sum(g.gelu(g.input(x0))));
    };
    Graph g;
    Graph::NodeId xn = g.param(x0, "x");
    g.backward(g.sum(g.gelu(xn)));
    GradCheckOptions opt;
    opt.tolerance = 1e-6;
    auto rep = grad_check({{"x", &x0}}, loss_eval, {g.grad(xn)}, opt);
    CHECK(rep.pass);
}

TEST_CASE("backward mechanics") {
    SUBCASE("non-scalar loss rejected") {
        Graph g;
        Graph::NodeId a = g.param(random_tensor({2, 2}, 71), "a");
        CHECK_THROWS_AS(g.backward(a), DimError);
    }
    SUBCASE("unused parameter gets a zero gradient of the right shape") {
        Graph g;
        Graph::NodeId a = g.param(random_tensor({2, 2}, 72), "a");
        Graph::NodeId unused = g.param(random_tensor({3}, 73), "unused");
        g.backward(g.sum(a));
        CHECK(g.grad(unused).shape == Shape{3});
        for (double v : g.grad(unused).data) CHECK(v == 0.0);
    }
    SUBCASE("gradients accumulate across shared use") {
        Graph g;
        Graph::NodeId a = g.param(Tensor::from({1}, {3.0}), "a");
        // loss = a*a -> da = 2a = 6
        g.backward(g.sum(g.mul(a, a)));
        CHECK(g.grad(a).data[0] == doctest::Approx(6.0));
    }
}

TEST_CASE("grad_check") {
    SUBCASE("quadratic loss is exact to 1e-8") {
        Tensor theta = random_tensor({5}, 81);
        auto loss_eval = [&]() {
            double s = 0;
            for (double v : theta.data) s += v * v;
            return s;
        };
        Tensor analytic(theta.shape);
        for (std::size_t i = 0; i < theta.numel(); ++i) analytic.data[i] = 2.0 * theta.data[i];
        GradCheckOptions opt;
        opt.tolerance = 1e-8;
        auto rep = grad_check({{"theta", &theta}}, loss_eval, {analytic}, opt);
        CHECK(rep.pass);
        CHECK(rep.worst < 1e-8);
    }
    SUBCASE("one-layer multipole on a 4x4 grid passes at 1e-4") {
        MultipoleLayerParams params(2, 3, 2, true, SamplerMode::LearnedConv, false);
        SplitMix64 rng(82);
        params.init(rng);
        Tensor x = random_tensor({4, 4, 6}, 83);
        Tensor w = random_tensor({4, 4, 6}, 84);
        MultipoleConfig cfg;
        cfg.levels = 1;
        cfg.window = WindowSpec{2, 1, true};

        // plist follows the registration order of register_multipole_params,
        // so trainable leaves in creation order align with it
        std::vector<std::pair<std::string, Tensor*>> plist;
        for (int h = 0; h < 2; ++h) {
            auto hs = std::to_string(h);
            plist.push_back({"wq" + hs, &params.attention.w_q[static_cast<std::size_t>(h)]});
            plist.push_back({"wk" + hs, &params.attention.w_k[static_cast<std::size_t>(h)]});
            plist.push_back({"wv" + hs, &params.attention.w_v[static_cast<std::size_t>(h)]});
            plist.push_back({"bq" + hs, &params.attention.b_q[static_cast<std::size_t>(h)]});
            plist.push_back({"bk" + hs, &params.attention.b_k[static_cast<std::size_t>(h)]});
            plist.push_back({"bv" + hs, &params.attention.b_v[static_cast<std::size_t>(h)]});
        }
        plist.push_back({"ln_g", &params.ln_gamma});
        plist.push_back({"ln_b", &params.ln_beta});
        for (int h = 0; h < 2; ++h)
            plist.push_back({"down" + std::to_string(h),
                             &params.down_kernel[static_cast<std::size_t>(h)]});
        for (int h = 0; h < 2; ++h)
            plist.push_back({"up" + std::to_string(h),
                             &params.up_kernel[static_cast<std::size_t>(h)]});

        auto build = [&](Graph& g) {
            MultipoleNodes nodes = register_multipole_params(g, params, "mp");
            Graph::NodeId out = multipole_attention(g, g.input(x), nodes, params, cfg);
            return g.sum(g.mul(out, g.input(w)));
        };
        auto loss_eval = [&]() {
            Graph g;
            return g.scalar(build(g));
        };
        Graph g;
        Graph::NodeId loss = build(g);
        g.backward(loss);
        std::vector<Tensor> analytic;
        for (std::size_t id = 0; id < g.size(); ++id)
            if (g.trainable(static_cast<Graph::NodeId>(id)))
                analytic.push_back(g.grad(static_cast<Graph::NodeId>(id)));
        REQUIRE(analytic.size() == plist.size());
        auto rep = grad_check(plist, loss_eval, analytic);
        CHECK(rep.pass);
    }
    SUBCASE("corrupted backward rule fails") {
        Tensor x0 = random_tensor({6}, 85);
        auto loss_eval = [&]() {
            Graph g;
            return g.scalar(g.sum(g.gelu(g.input(x0))));
        };
        Graph g;
        Graph::NodeId xn = g.param(x0, "x");
        debug::corrupt_gelu_backward = true;
        g.backward(g.sum(g.gelu(xn)));
        debug::corrupt_gelu_backward = false;
        auto rep = grad_check({{"x", &x0}}, loss_eval, {g.grad(xn)});
        CHECK(!rep.pass);
    }
}

TEST_CASE("matmul_nt gradient matches finite differences") {
    Tensor a0 = random_tensor({3, 4}, 301);
    Tensor b0 = random_tensor({5, 4}, 302);
    Tensor w = random_tensor({3, 5}, 303);
    auto loss_eval = [&]() {
        Graph g;
        return g.scalar(g.sum(g.mul(g.matmul_nt(g.input(a0), g.input(b0)), g.input(w))));
    };
    Graph g;
    Graph::NodeId a = g.param(a0, "a");
    Graph::NodeId b = g.param(b0, "b");
    g.backward(g.sum(g.mul(g.matmul_nt(a, b), g.input(w))));
    GradCheckOptions opt;
    opt.tolerance = 1e-6;
    auto rep = grad_check({{"a", &a0}, {"b", &b0}}, loss_eval, {g.grad(a), g.grad(b)}, opt);
    CHECK(rep.pass);
}

TEST_CASE("determinism across thread counts") {
    const int prev = omp_get_max_threads();
    Tensor a = random_tensor({37, 19}, 91);
    Tensor b = random_tensor({19, 23}, 92);
    Tensor x = random_tensor({8, 8, 4}, 93);
    Tensor k = random_tensor({2, 2, 4, 4}, 94);
    Tensor q = random_tensor({16, 3}, 95), kk = random_tensor({16, 3}, 96),
           v = random_tensor({16, 3}, 97);
    WindowPlan plan = make_window_plan(4, 4, 2, 1);

    Tensor m1, c1, w1, m2, c2, w2;
    omp_set_num_threads(1);
    kernels::matmul(a, b, m1);
    kernels::conv2d(x, k, 2, 0, c1);
    kernels::winattn_forward(q, kk, v, plan, 0.5, true, w1, nullptr);
    omp_set_num_threads(2);
    kernels::matmul(a, b, m2);
    kernels::conv2d(x, k, 2, 0, c2);
    kernels::winattn_forward(q, kk, v, plan, 0.5, true, w2, nullptr);
    omp_set_num_threads(prev);

    CHECK(bit_equal(m1, m2));
    CHECK(bit_equal(c1, c2));
    CHECK(bit_equal(w1, w2));
}
