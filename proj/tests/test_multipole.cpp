#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "mano/errors.hpp"
#include "mano/gradcheck.hpp"
#include "mano/multipole.hpp"
#include "mano/ref.hpp"
#include "test_util.hpp"

using namespace mano;
using testutil::random_tensor;

namespace {

MultipoleLayerParams random_layer(int heads, int d_head, int k, SamplerMode mode,
                                  std::uint64_t seed, bool share_du = false) {
    MultipoleLayerParams p(heads, d_head, k, true, mode, share_du);
    SplitMix64 rng(seed);
    p.init(rng);
    return p;
}

Tensor graph_multipole(const Tensor& x, MultipoleLayerParams& p, const MultipoleConfig& cfg) {
    Graph g;
    MultipoleNodes nodes = register_multipole_params(g, p, "mp");
    return g.val(multipole_attention(g, g.input(x), nodes, p, cfg));
}

}  // namespace

TEST_CASE("downsample") {
    SUBCASE("average pooling keeps a constant field constant") {
        MultipoleLayerParams p(1, 3, 2, false, SamplerMode::AveragePool, false);
        Tensor x = Tensor::full({4, 4, 3}, 1.25);
        Tensor out = downsample_eval(x, p, 2);
        CHECK(out.shape == Shape{2, 2, 3});
        for (double v : out.data) CHECK(v == doctest::Approx(1.25));
    }
    SUBCASE("uniform 1/k^2 kernel reproduces average pooling") {
        MultipoleLayerParams conv(1, 2, 2, false, SamplerMode::LearnedConv, false);
        for (int u = 0; u < 2; ++u)
            for (int v = 0; v < 2; ++v)
                for (int c = 0; c < 2; ++c)
                    for (int co = 0; co < 2; ++co)
                        conv.down_kernel[0].data[((static_cast<std::size_t>(u) * 2 + v) * 2 +
                                                  static_cast<std::size_t>(c)) * 2 + co] =
                            (c == co) ? 0.25 : 0.0;
        MultipoleLayerParams pool(1, 2, 2, false, SamplerMode::AveragePool, false);
        Tensor x = random_tensor({4, 4, 2}, 1);
        CHECK(max_abs_diff(downsample_eval(x, conv, 2), downsample_eval(x, pool, 2)) < 1e-15);
    }
    SUBCASE("random field matches the naive strided-conv oracle") {
        MultipoleLayerParams p = random_layer(2, 3, 2, SamplerMode::LearnedConv, 2);
        Tensor x = random_tensor({8, 8, 6}, 3);
        Tensor got = downsample_eval(x, p, 2);
        // per-head oracle assembly
        Tensor expect({4, 4, 6});
        for (int h = 0; h < 2; ++h) {
            Tensor xh({8, 8, 3});
            for (std::size_t t = 0; t < 64; ++t)
                for (std::size_t c = 0; c < 3; ++c)
                    xh.data[t * 3 + c] = x.data[t * 6 + static_cast<std::size_t>(h) * 3 + c];
            Tensor oh = ref::conv2d(xh, p.down_kernel[static_cast<std::size_t>(h)], 2, 0);
            for (std::size_t t = 0; t < 16; ++t)
                for (std::size_t c = 0; c < 3; ++c)
                    expect.data[t * 6 + static_cast<std::size_t>(h) * 3 + c] = oh.data[t * 3 + c];
        }
        CHECK(max_abs_diff(got, expect) < 1e-14);
    }
    SUBCASE("non-divisible side is rejected with the dimension named") {
        MultipoleLayerParams p = random_layer(1, 2, 2, SamplerMode::LearnedConv, 4);
        Tensor x = random_tensor({5, 4, 2}, 5);
        CHECK_THROWS_WITH_AS(downsample_eval(x, p, 2), doctest::Contains("5"), DimError);
    }
}

TEST_CASE("upsample") {
    SUBCASE("all-ones kernel replicates a single pixel") {
        MultipoleLayerParams p(1, 1, 2, false, SamplerMode::LearnedConv, false);
        p.up_kernel[0] = Tensor::full({2, 2, 1, 1}, 1.0);
        Tensor x = Tensor::full({1, 1, 1}, 3.0);
        Tensor out = upsample_eval(x, p, 2);
        CHECK(out.shape == Shape{2, 2, 1});
        for (double v : out.data) CHECK(v == doctest::Approx(3.0));
    }
    SUBCASE("upsample(downsample) restores the input shape") {
        MultipoleLayerParams p = random_layer(2, 2, 2, SamplerMode::LearnedConv, 6);
        Tensor x = random_tensor({8, 8, 4}, 7);
        Tensor down = downsample_eval(x, p, 2);
        Tensor up = upsample_eval(down, p, 2);
        CHECK(up.shape == x.shape);
    }
    SUBCASE("adjoint relation when the up kernel equals the down kernel") {
        MultipoleLayerParams p = random_layer(1, 2, 2, SamplerMode::LearnedConv, 8, true);
        Tensor x = random_tensor({4, 4, 2}, 9);
        Tensor y = random_tensor({2, 2, 2}, 10);
        Tensor down = downsample_eval(x, p, 2);
        Tensor up = upsample_eval(y, p, 2);
        double lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < down.numel(); ++i) lhs += down.data[i] * y.data[i];
        for (std::size_t i = 0; i < x.numel(); ++i) rhs += x.data[i] * up.data[i];
        CHECK(std::fabs(lhs - rhs) < 1e-12);
    }
    SUBCASE("nearest replication in pooling mode") {
        MultipoleLayerParams p(1, 2, 2, false, SamplerMode::AveragePool, false);
        Tensor x = random_tensor({2, 2, 2}, 11);
        Tensor out = upsample_eval(x, p, 2);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                for (std::size_t c = 0; c < 2; ++c)
                    CHECK(out.at3(i, j, c) == x.at3(i / 2, j / 2, c));
    }
}

TEST_CASE("multipole attention degeneracies") {
    SUBCASE("L=0 equals windowed attention after the level norm") {
        MultipoleLayerParams p = random_layer(2, 3, 2, SamplerMode::LearnedConv, 12);
        Tensor x = random_tensor({4, 4, 6}, 13);
        MultipoleConfig cfg;
        cfg.levels = 0;
        cfg.window = WindowSpec{2, 1, true};
        Tensor got = graph_multipole(x, p, cfg);
        Tensor normed = ref::layer_norm(x, p.ln_gamma, p.ln_beta, cfg.ln_eps);
        Tensor expect = ref::windowed_attention(normed, p.attention, 4, 4, cfg.window);
        CHECK(max_abs_diff(got, expect) < 1e-12);
    }
    SUBCASE("L=0 with a full-grid window equals dense attention") {
        MultipoleLayerParams p = random_layer(2, 2, 2, SamplerMode::LearnedConv, 14);
        Tensor x = random_tensor({4, 4, 4}, 15);
        MultipoleConfig cfg;
        cfg.levels = 0;
        cfg.window = WindowSpec{4, 4, true};
        Tensor got = graph_multipole(x, p, cfg);
        Tensor normed = ref::layer_norm(x, p.ln_gamma, p.ln_beta, cfg.ln_eps);
        Tensor expect = ref::full_attention(normed, p.attention);
        CHECK(max_abs_diff(got, expect) < 1e-12);
    }
}

TEST_CASE("multipole V-cycle matches the straight-line reference") {
    for (auto mode : {SamplerMode::LearnedConv, SamplerMode::AveragePool}) {
        MultipoleLayerParams p = random_layer(2, 3, 2, mode, 16);
        Tensor x = random_tensor({8, 8, 6}, 17);
        MultipoleConfig cfg;
        cfg.levels = 2;
        cfg.window = WindowSpec{2, 1, true};
        Tensor got = graph_multipole(x, p, cfg);
        Tensor expect = ref::multipole_attention(x, p, cfg);
        CHECK(max_abs_diff(got, expect) < 1e-12);
        CHECK(testutil::bit_equal(graph_multipole(x, p, cfg), multipole_attention_eval(x, p, cfg)));
    }
}

TEST_CASE("window must fit the coarsest level at construction") {
    MultipoleConfig cfg;
    cfg.levels = 3;
    cfg.window = WindowSpec{2, 1, true};
    CHECK_THROWS_AS(validate_multipole_config(cfg, 8, 8), ConfigError);
    cfg.levels = 2;
    CHECK_NOTHROW(validate_multipole_config(cfg, 8, 8));
    CHECK(multipole_max_levels(16, 2, 2) == 3);
    CHECK(multipole_max_levels(64, 2, 2) == 5);
}

TEST_CASE("multipole flops") {
    MultipoleConfig base;
    base.window = WindowSpec{2, 1, true};
    SUBCASE("cost is linear in N with the coarsest scale pinned") {
        std::int64_t prev = 0;
        double prev_ratio = 0;
        for (int n : {16, 32, 64, 128}) {
            MultipoleConfig cfg = base;
            cfg.levels = multipole_max_levels(n, 2, 2);
            const std::int64_t f = multipole_flops(n, n, 8, 2, cfg);
            if (prev) {
                const double ratio = static_cast<double>(f) / static_cast<double>(prev);
                CHECK(ratio > 3.9);
                CHECK(ratio < 4.1);
                prev_ratio = ratio;
            }
            prev = f;
        }
        (void)prev_ratio;
    }
    SUBCASE("flops per token constant within 3% across sizes") {
        double lo = 1e300, hi = 0.0;
        for (int n : {16, 32, 64, 128}) {
            MultipoleConfig cfg = base;
            cfg.levels = multipole_max_levels(n, 2, 2);
            const double per_token = static_cast<double>(multipole_flops(n, n, 8, 2, cfg)) /
                                     (static_cast<double>(n) * n);
            lo = std::min(lo, per_token);
            hi = std::max(hi, per_token);
        }
        CHECK(hi / lo < 1.03);
    }
    SUBCASE("dense counterpart quadruples 16x on grid doubling") {
        const std::int64_t d16 = attention_flops_breakdown(16 * 16, 16 * 16, 8, 2).score_term();
        const std::int64_t d32 = attention_flops_breakdown(32 * 32, 32 * 32, 8, 2).score_term();
        CHECK(d32 == 16 * d16);
    }
    SUBCASE("L=0 equals the windowed attention count") {
        MultipoleConfig cfg = base;
        cfg.levels = 0;
        CHECK(multipole_flops(16, 16, 8, 2, cfg) == attention_flops(256, 4, 8, 2));
    }
}

TEST_CASE("param_count") {
    SUBCASE("independent of the level count by construction") {
        // the layer owns one parameter set regardless of how many levels the
        // config requests; counts for any two configs are trivially equal
        MultipoleLayerParams p = random_layer(2, 4, 2, SamplerMode::LearnedConv, 18);
        const std::int64_t c = param_count(p);
        MultipoleConfig cfg1, cfg3;
        cfg1.levels = 1;
        cfg3.levels = 3;
        // same params drive both configs; count is a property of the params
        CHECK(param_count(p) == c);
        Tensor x = random_tensor({16, 16, 8}, 19);
        cfg1.window = cfg3.window = WindowSpec{2, 1, true};
        Tensor o1 = multipole_attention_eval(x, p, cfg1);
        Tensor o3 = multipole_attention_eval(x, p, cfg3);
        CHECK(param_count(p) == c);
        CHECK(o1.shape == x.shape);
        CHECK(o3.shape == x.shape);
    }
    SUBCASE("hand count: d_head=2, heads=1, k=2, no bias") {
        MultipoleLayerParams p(1, 2, 2, false, SamplerMode::LearnedConv, false);
        // attention 3*4, down 16, up 16, level norm 2*d = 4
        CHECK(param_count(p) == 12 + 16 + 16 + 4);
    }
    SUBCASE("shared up/down kernel drops one kernel per head") {
        MultipoleLayerParams p(1, 2, 2, false, SamplerMode::LearnedConv, true);
        CHECK(param_count(p) == 12 + 16 + 4);
    }
    SUBCASE("zero heads rejected at construction") {
        CHECK_THROWS_AS(MultipoleLayerParams(0, 2, 2, false, SamplerMode::LearnedConv, false),
                        ConfigError);
    }
}

TEST_CASE("pooling-sampler gradients match finite differences") {
    MultipoleLayerParams p = random_layer(2, 2, 2, SamplerMode::AveragePool, 21);
    Tensor x = random_tensor({8, 8, 4}, 22);
    Tensor w = random_tensor({8, 8, 4}, 23);
    MultipoleConfig cfg;
    cfg.levels = 2;
    cfg.window = WindowSpec{2, 1, true};
    std::vector<std::pair<std::string, Tensor*>> plist;
    for (int h = 0; h < 2; ++h) {
        auto hs = std::to_string(h);
        plist.push_back({"wq" + hs, &p.attention.w_q[static_cast<std::size_t>(h)]});
        plist.push_back({"wk" + hs, &p.attention.w_k[static_cast<std::size_t>(h)]});
        plist.push_back({"wv" + hs, &p.attention.w_v[static_cast<std::size_t>(h)]});
        plist.push_back({"bq" + hs, &p.attention.b_q[static_cast<std::size_t>(h)]});
        plist.push_back({"bk" + hs, &p.attention.b_k[static_cast<std::size_t>(h)]});
        plist.push_back({"bv" + hs, &p.attention.b_v[static_cast<std::size_t>(h)]});
    }
    plist.push_back({"ln_g", &p.ln_gamma});
    plist.push_back({"ln_b", &p.ln_beta});
    auto build = [&](Graph& g) {
        MultipoleNodes nodes = register_multipole_params(g, p, "mp");
        return g.sum(g.mul(multipole_attention(g, g.input(x), nodes, p, cfg), g.input(w)));
    };
    auto loss_eval = [&]() {
        Graph g;
        return g.scalar(build(g));
    };
    Graph g;
    g.backward(build(g));
    std::vector<Tensor> analytic;
    for (std::size_t id = 0; id < g.size(); ++id)
        if (g.trainable(static_cast<Graph::NodeId>(id)))
            analytic.push_back(g.grad(static_cast<Graph::NodeId>(id)));
    REQUIRE(analytic.size() == plist.size());
    auto rep = grad_check(plist, loss_eval, analytic);
    CHECK(rep.pass);
}

TEST_CASE("output shape and finiteness across configs") {
    for (int heads : {1, 2}) {
        for (int levels : {0, 1, 2}) {
            MultipoleLayerParams p = random_layer(heads, 2, 2, SamplerMode::LearnedConv,
                                                  static_cast<std::uint64_t>(100 + heads + levels));
            Tensor x = random_tensor({8, 8, static_cast<std::size_t>(2 * heads)},
                                     static_cast<std::uint64_t>(200 + heads + levels));
            MultipoleConfig cfg;
            cfg.levels = levels;
            cfg.window = WindowSpec{2, 1, true};
            Tensor out = multipole_attention_eval(x, p, cfg);
            CHECK(out.shape == x.shape);
            CHECK(out.all_finite());
        }
    }
}
