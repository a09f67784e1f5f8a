#include "mano/attention.hpp"

#include <cmath>

#include "mano/errors.hpp"

namespace mano {

AttentionParams::AttentionParams(int heads_, int d_head_, bool use_bias_)
    : heads(heads_), d_head(d_head_), use_bias(use_bias_) {
    if (heads < 1) throw ConfigError("attention needs at least one head");
    if (d_head < 1) throw ConfigError("attention head width must be >= 1");
    const std::size_t dh = static_cast<std::size_t>(d_head);
    for (int h = 0; h < heads; ++h) {
        w_q.push_back(Tensor::zeros({dh, dh}));
        w_k.push_back(Tensor::zeros({dh, dh}));
        w_v.push_back(Tensor::zeros({dh, dh}));
        if (use_bias) {
            b_q.push_back(Tensor::zeros({dh}));
            b_k.push_back(Tensor::zeros({dh}));
            b_v.push_back(Tensor::zeros({dh}));
        }
    }
}

void AttentionParams::init(SplitMix64& rng) {
    const double gain = 1.0 / std::sqrt(static_cast<double>(d_head));
    for (int h = 0; h < heads; ++h) {
        for (double& x : w_q[static_cast<std::size_t>(h)].data) x = gain * rng.gaussian();
        for (double& x : w_k[static_cast<std::size_t>(h)].data) x = gain * rng.gaussian();
        for (double& x : w_v[static_cast<std::size_t>(h)].data) x = gain * rng.gaussian();
    }
}

AttentionNodes register_attention_params(Graph& g, AttentionParams& p, const std::string& prefix) {
    AttentionNodes n;
    for (int h = 0; h < p.heads; ++h) {
        const std::string hs = prefix + ".h" + std::to_string(h);
        n.w_q.push_back(g.param(p.w_q[static_cast<std::size_t>(h)], hs + ".w_q"));
        n.w_k.push_back(g.param(p.w_k[static_cast<std::size_t>(h)], hs + ".w_k"));
        n.w_v.push_back(g.param(p.w_v[static_cast<std::size_t>(h)], hs + ".w_v"));
        if (p.use_bias) {
            n.b_q.push_back(g.param(p.b_q[static_cast<std::size_t>(h)], hs + ".b_q"));
            n.b_k.push_back(g.param(p.b_k[static_cast<std::size_t>(h)], hs + ".b_k"));
            n.b_v.push_back(g.param(p.b_v[static_cast<std::size_t>(h)], hs + ".b_v"));
        }
    }
    return n;
}

namespace {

void check_width(const Tensor& x, const AttentionParams& cfg) {
    if (x.cols() != static_cast<std::size_t>(cfg.model_dim()))
        throw DimError("attention input width " + shape_str(x) +
                       " does not equal heads*d_head = " + std::to_string(cfg.model_dim()));
}

struct HeadProj {
    Graph::NodeId q, k, v;
};

// per-head projections on the token matrix [N, dh]
HeadProj project_head(Graph& g, Graph::NodeId tokens, const AttentionNodes& p,
                      const AttentionParams& cfg, int h) {
    const std::size_t dh = static_cast<std::size_t>(cfg.d_head);
    const std::size_t hh = static_cast<std::size_t>(h);
    Graph::NodeId xh = g.slice_last(tokens, hh * dh, dh);
    HeadProj hp;
    hp.q = g.matmul(xh, p.w_q[hh]);
    hp.k = g.matmul(xh, p.w_k[hh]);
    hp.v = g.matmul(xh, p.w_v[hh]);
    if (cfg.use_bias) {
        hp.q = g.add_row(hp.q, p.b_q[hh]);
        hp.k = g.add_row(hp.k, p.b_k[hh]);
        hp.v = g.add_row(hp.v, p.b_v[hh]);
    }
    return hp;
}

}  // namespace

Graph::NodeId full_attention(Graph& g, Graph::NodeId x, const AttentionNodes& p,
                             const AttentionParams& cfg) {
    const Tensor& xv = g.val(x);
    check_width(xv, cfg);
    const Shape orig = xv.shape;
    const std::size_t N = xv.lead_rows();
    const std::size_t d = xv.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
    Graph::NodeId tokens = g.reshape(x, {N, d});
    std::vector<Graph::NodeId> heads_out;
    for (int h = 0; h < cfg.heads; ++h) {
        HeadProj hp = project_head(g, tokens, p, cfg, h);
        Graph::NodeId scores = g.scale(g.matmul_nt(hp.q, hp.k), scale);
        Graph::NodeId attn = g.softmax_rows(scores);
        heads_out.push_back(g.matmul(attn, hp.v));
    }
    return g.reshape(g.concat_last(heads_out), orig);
}

Graph::NodeId windowed_attention(Graph& g, Graph::NodeId x, const AttentionNodes& p,
                                 const AttentionParams& cfg, int H, int W,
                                 const WindowSpec& spec) {
    const Tensor& xv = g.val(x);
    check_width(xv, cfg);
    if (xv.lead_rows() != static_cast<std::size_t>(H) * static_cast<std::size_t>(W))
        throw DimError("windowed_attention: grid " + std::to_string(H) + "x" + std::to_string(W) +
                       " does not match input " + shape_str(xv));
    const Shape orig = xv.shape;
    const std::size_t N = xv.lead_rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
    auto plan = std::make_shared<const WindowPlan>(make_window_plan(H, W, spec.window, spec.stride));
    Graph::NodeId tokens = g.reshape(x, {N, xv.cols()});
    std::vector<Graph::NodeId> heads_out;
    for (int h = 0; h < cfg.heads; ++h) {
        HeadProj hp = project_head(g, tokens, p, cfg, h);
        heads_out.push_back(g.window_attention(hp.q, hp.k, hp.v, plan, scale, spec.coverage_norm));
    }
    return g.reshape(g.concat_last(heads_out), orig);
}

Tensor full_attention_eval(const Tensor& x, const AttentionParams& p) {
    check_width(x, p);
    const std::size_t N = x.lead_rows();
    const std::size_t dh = static_cast<std::size_t>(p.d_head);
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.d_head));
    Tensor out(x.shape);
    for (int h = 0; h < p.heads; ++h) {
        const std::size_t hh = static_cast<std::size_t>(h);
        Tensor xh({N, dh});
        for (std::size_t t = 0; t < N; ++t)
            for (std::size_t c = 0; c < dh; ++c)
                xh.data[t * dh + c] = x.data[t * x.cols() + hh * dh + c];
        Tensor q, k, v;
        kernels::matmul(xh, p.w_q[hh], q);
        kernels::matmul(xh, p.w_k[hh], k);
        kernels::matmul(xh, p.w_v[hh], v);
        if (p.use_bias) {
            Tensor tmp;
            kernels::add_row(q, p.b_q[hh], tmp);
            q = std::move(tmp);
            kernels::add_row(k, p.b_k[hh], tmp);
            k = std::move(tmp);
            kernels::add_row(v, p.b_v[hh], tmp);
            v = std::move(tmp);
        }
        Tensor scores_raw, scores, attn, ho;
        kernels::matmul_nt(q, k, scores_raw);
        kernels::scale(scores_raw, scale, scores);
        scores_raw = Tensor();
        kernels::softmax_rows(scores, attn);
        scores = Tensor();
        kernels::matmul(attn, v, ho);
        for (std::size_t t = 0; t < N; ++t)
            for (std::size_t c = 0; c < dh; ++c)
                out.data[t * x.cols() + hh * dh + c] = ho.data[t * dh + c];
    }
    return out;
}

Tensor windowed_attention_eval(const Tensor& x, const AttentionParams& p, int H, int W,
                               const WindowSpec& spec) {
    check_width(x, p);
    const std::size_t N = x.lead_rows();
    const std::size_t dh = static_cast<std::size_t>(p.d_head);
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.d_head));
    const WindowPlan plan = make_window_plan(H, W, spec.window, spec.stride);
    Tensor out(x.shape);
    for (int h = 0; h < p.heads; ++h) {
        const std::size_t hh = static_cast<std::size_t>(h);
        Tensor xh({N, dh});
        for (std::size_t t = 0; t < N; ++t)
            for (std::size_t c = 0; c < dh; ++c)
                xh.data[t * dh + c] = x.data[t * x.cols() + hh * dh + c];
        Tensor q, k, v;
        kernels::matmul(xh, p.w_q[hh], q);
        kernels::matmul(xh, p.w_k[hh], k);
        kernels::matmul(xh, p.w_v[hh], v);
        if (p.use_bias) {
            Tensor tmp;
            kernels::add_row(q, p.b_q[hh], tmp);
            q = std::move(tmp);
            kernels::add_row(k, p.b_k[hh], tmp);
            k = std::move(tmp);
            kernels::add_row(v, p.b_v[hh], tmp);
            v = std::move(tmp);
        }
        Tensor ho;
        kernels::winattn_forward(q, k, v, plan, scale, spec.coverage_norm, ho, nullptr);
        for (std::size_t t = 0; t < N; ++t)
            for (std::size_t c = 0; c < dh; ++c)
                out.data[t * x.cols() + hh * dh + c] = ho.data[t * dh + c];
    }
    return out;
}

AttentionFlops attention_flops_breakdown(std::int64_t N, std::int64_t M, std::int64_t d,
                                         std::int64_t heads) {
    if (N < 1 || M < 1 || d < 1 || heads < 1)
        throw DimError("attention_flops arguments must be positive");
    AttentionFlops f;
    // n_windows = N/M; n_windows*M^2 terms simplify to N*M exactly
    f.proj = 3 * N * d * d;
    f.scores = N * M * d;
    f.av = N * M * d;
    f.softmax = N * M * heads;
    return f;
}

std::int64_t attention_flops(std::int64_t N, std::int64_t M, std::int64_t d, std::int64_t heads) {
    return attention_flops_breakdown(N, M, d, heads).total();
}

}  // namespace mano
