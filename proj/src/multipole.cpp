#include "mano/multipole.hpp"

#include <cmath>

#include "mano/errors.hpp"

namespace mano {

MultipoleLayerParams::MultipoleLayerParams(int heads, int d_head, int k, bool use_bias,
                                           SamplerMode sampler_, bool share_du_)
    : attention(heads, d_head, use_bias), sampler(sampler_), share_du(share_du_) {
    if (k < 1) throw ConfigError("sampling rate must be >= 1");
    const std::size_t kk = static_cast<std::size_t>(k);
    const std::size_t dh = static_cast<std::size_t>(d_head);
    for (int h = 0; h < heads; ++h) {
        down_kernel.push_back(Tensor::zeros({kk, kk, dh, dh}));
        if (!share_du) up_kernel.push_back(Tensor::zeros({kk, kk, dh, dh}));
    }
    ln_gamma = Tensor::full({static_cast<std::size_t>(heads * d_head)}, 1.0);
    ln_beta = Tensor::zeros({static_cast<std::size_t>(heads * d_head)});
}

void MultipoleLayerParams::init(SplitMix64& rng) {
    attention.init(rng);
    const int k = sampling_rate();
    const int dh = attention.d_head;
    const double pool = 1.0 / static_cast<double>(k * k);
    auto fill = [&](Tensor& t, double diag) {
        for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v)
                for (int c = 0; c < dh; ++c)
                    for (int co = 0; co < dh; ++co) {
                        const std::size_t i =
                            ((static_cast<std::size_t>(u) * k + v) * dh + c) * dh + co;
                        t.data[i] = (c == co ? diag : 0.0) + 0.01 * rng.gaussian();
                    }
    };
    for (Tensor& t : down_kernel) fill(t, pool);   // average pooling point
    for (Tensor& t : up_kernel) fill(t, 1.0);      // nearest replication point
}

int multipole_max_levels(int side, int k, int window) {
    int L = 0;
    while (side % k == 0 && side / k >= window) {
        side /= k;
        ++L;
    }
    return L;
}

void validate_multipole_config(const MultipoleConfig& cfg, int H, int W) {
    if (cfg.levels < 0) throw ConfigError("level count must be >= 0");
    const int maxL = std::min(multipole_max_levels(H, cfg.sampling_rate, cfg.window.window),
                              multipole_max_levels(W, cfg.sampling_rate, cfg.window.window));
    if (cfg.levels > maxL)
        throw ConfigError("window " + std::to_string(cfg.window.window) +
                          " does not fit the coarsest level: grid " + std::to_string(H) + "x" +
                          std::to_string(W) + " admits at most " + std::to_string(maxL) +
                          " levels, requested " + std::to_string(cfg.levels));
}

MultipoleNodes register_multipole_params(Graph& g, MultipoleLayerParams& p,
                                         const std::string& prefix) {
    MultipoleNodes n;
    n.attention = register_attention_params(g, p.attention, prefix + ".attn");
    n.ln_gamma = g.param(p.ln_gamma, prefix + ".ln.gamma");
    n.ln_beta = g.param(p.ln_beta, prefix + ".ln.beta");
    if (p.sampler == SamplerMode::LearnedConv) {
        for (int h = 0; h < p.attention.heads; ++h)
            n.down_kernel.push_back(g.param(p.down_kernel[static_cast<std::size_t>(h)],
                                            prefix + ".h" + std::to_string(h) + ".down"));
        if (p.share_du) {
            n.up_kernel = n.down_kernel;
        } else {
            for (int h = 0; h < p.attention.heads; ++h)
                n.up_kernel.push_back(g.param(p.up_kernel[static_cast<std::size_t>(h)],
                                              prefix + ".h" + std::to_string(h) + ".up"));
        }
    }
    return n;
}

namespace {

void check_grid(const Tensor& x) {
    if (x.rank() != 3) throw DimError("multipole input must be [H,W,d], got " + shape_str(x));
}

void check_divisible(const Tensor& x, int k) {
    if (x.dim(0) % static_cast<std::size_t>(k) != 0)
        throw DimError("grid height " + std::to_string(x.dim(0)) + " not divisible by sampling rate " +
                       std::to_string(k));
    if (x.dim(1) % static_cast<std::size_t>(k) != 0)
        throw DimError("grid width " + std::to_string(x.dim(1)) + " not divisible by sampling rate " +
                       std::to_string(k));
}

}  // namespace

Graph::NodeId downsample(Graph& g, Graph::NodeId x, const MultipoleNodes& p,
                         const MultipoleLayerParams& params, int k) {
    const Tensor& xv = g.val(x);
    check_grid(xv);
    check_divisible(xv, k);
    if (params.sampler == SamplerMode::AveragePool) return g.avg_pool2d(x, k);
    const std::size_t dh = static_cast<std::size_t>(params.attention.d_head);
    std::vector<Graph::NodeId> heads_out;
    for (int h = 0; h < params.attention.heads; ++h) {
        Graph::NodeId xh = g.slice_last(x, static_cast<std::size_t>(h) * dh, dh);
        heads_out.push_back(g.conv2d(xh, p.down_kernel[static_cast<std::size_t>(h)], k, 0));
    }
    return g.concat_last(heads_out);
}

Graph::NodeId upsample(Graph& g, Graph::NodeId x, const MultipoleNodes& p,
                       const MultipoleLayerParams& params, int k) {
    const Tensor& xv = g.val(x);
    check_grid(xv);
    if (params.sampler == SamplerMode::AveragePool) return g.nearest_up2d(x, k);
    const std::size_t dh = static_cast<std::size_t>(params.attention.d_head);
    std::vector<Graph::NodeId> heads_out;
    for (int h = 0; h < params.attention.heads; ++h) {
        Graph::NodeId xh = g.slice_last(x, static_cast<std::size_t>(h) * dh, dh);
        heads_out.push_back(g.conv_transpose2d(xh, p.up_kernel[static_cast<std::size_t>(h)], k));
    }
    return g.concat_last(heads_out);
}

Graph::NodeId multipole_attention(Graph& g, Graph::NodeId x, const MultipoleNodes& p,
                                  const MultipoleLayerParams& params, const MultipoleConfig& cfg) {
    const Tensor& xv = g.val(x);
    check_grid(xv);
    validate_multipole_config(cfg, static_cast<int>(xv.dim(0)), static_cast<int>(xv.dim(1)));
    const int k = cfg.sampling_rate;
    std::vector<Graph::NodeId> levels{x};
    for (int l = 1; l <= cfg.levels; ++l)
        levels.push_back(downsample(g, levels.back(), p, params, k));
    // sum_l U^l(Attn(X_l)) accumulated coarse-to-fine: U is linear, so one
    // upsample per level boundary telescopes the whole sum and keeps the
    // sampling cost linear in N
    Graph::NodeId acc = -1;
    for (int l = cfg.levels; l >= 0; --l) {
        Graph::NodeId xl = levels[static_cast<std::size_t>(l)];
        // copy the dims up front; node creation may reallocate graph storage
        const int Hl = static_cast<int>(g.val(xl).dim(0));
        const int Wl = static_cast<int>(g.val(xl).dim(1));
        Graph::NodeId normed = g.layer_norm(xl, p.ln_gamma, p.ln_beta, cfg.ln_eps);
        Graph::NodeId attended =
            windowed_attention(g, normed, p.attention, params.attention, Hl, Wl, cfg.window);
        acc = (l == cfg.levels) ? attended : g.add(attended, upsample(g, acc, p, params, k));
    }
    return acc;
}

Tensor downsample_eval(const Tensor& x, const MultipoleLayerParams& p, int k) {
    check_grid(x);
    check_divisible(x, k);
    if (p.sampler == SamplerMode::AveragePool) {
        Tensor out;
        kernels::avg_pool2d(x, k, out);
        return out;
    }
    const std::size_t dh = static_cast<std::size_t>(p.attention.d_head);
    const std::size_t d = x.cols();
    Tensor out;
    for (int h = 0; h < p.attention.heads; ++h) {
        const std::size_t hh = static_cast<std::size_t>(h);
        Tensor xh({x.dim(0), x.dim(1), dh});
        const std::size_t T = x.lead_rows();
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < dh; ++c) xh.data[t * dh + c] = x.data[t * d + hh * dh + c];
        Tensor oh;
        kernels::conv2d(xh, p.down_kernel[hh], k, 0, oh);
        if (h == 0) out = Tensor({oh.dim(0), oh.dim(1), d});
        const std::size_t To = oh.lead_rows();
        for (std::size_t t = 0; t < To; ++t)
            for (std::size_t c = 0; c < dh; ++c) out.data[t * d + hh * dh + c] = oh.data[t * dh + c];
    }
    return out;
}

Tensor upsample_eval(const Tensor& x, const MultipoleLayerParams& p, int k) {
    check_grid(x);
    if (p.sampler == SamplerMode::AveragePool) {
        Tensor out;
        kernels::nearest_up2d(x, k, out);
        return out;
    }
    const std::size_t dh = static_cast<std::size_t>(p.attention.d_head);
    const std::size_t d = x.cols();
    const std::vector<Tensor>& up = p.share_du ? p.down_kernel : p.up_kernel;
    Tensor out;
    for (int h = 0; h < p.attention.heads; ++h) {
        const std::size_t hh = static_cast<std::size_t>(h);
        Tensor xh({x.dim(0), x.dim(1), dh});
        const std::size_t T = x.lead_rows();
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < dh; ++c) xh.data[t * dh + c] = x.data[t * d + hh * dh + c];
        Tensor oh;
        kernels::conv_transpose2d(xh, up[hh], k, oh);
        if (h == 0) out = Tensor({oh.dim(0), oh.dim(1), d});
        const std::size_t To = oh.lead_rows();
        for (std::size_t t = 0; t < To; ++t)
            for (std::size_t c = 0; c < dh; ++c) out.data[t * d + hh * dh + c] = oh.data[t * dh + c];
    }
    return out;
}

Tensor multipole_attention_eval(const Tensor& x, const MultipoleLayerParams& p,
                                const MultipoleConfig& cfg) {
    check_grid(x);
    validate_multipole_config(cfg, static_cast<int>(x.dim(0)), static_cast<int>(x.dim(1)));
    const int k = cfg.sampling_rate;
    std::vector<Tensor> levels;
    levels.push_back(x);
    for (int l = 1; l <= cfg.levels; ++l) levels.push_back(downsample_eval(levels.back(), p, k));
    // telescoped coarse-to-fine accumulation, same as the graph path
    Tensor acc;
    for (int l = cfg.levels; l >= 0; --l) {
        const Tensor& xl = levels[static_cast<std::size_t>(l)];
        Tensor normed, mean, rstd;
        kernels::layer_norm(xl, p.ln_gamma, p.ln_beta, cfg.ln_eps, normed, mean, rstd);
        Tensor attended = windowed_attention_eval(normed, p.attention, static_cast<int>(xl.dim(0)),
                                                  static_cast<int>(xl.dim(1)), cfg.window);
        if (l == cfg.levels) {
            acc = std::move(attended);
        } else {
            Tensor up = upsample_eval(acc, p, k);
            kernels::add(attended, up, acc);
        }
    }
    return acc;
}

MultipoleFlops multipole_flops_breakdown(std::int64_t H, std::int64_t W, std::int64_t d,
                                         std::int64_t heads, const MultipoleConfig& cfg) {
    MultipoleFlops f;
    const std::int64_t k = cfg.sampling_rate;
    const std::int64_t dh = d / heads;
    const std::int64_t M = static_cast<std::int64_t>(cfg.window.window) * cfg.window.window;
    const std::int64_t N = H * W;
    for (int l = 0; l <= cfg.levels; ++l) {
        std::int64_t Nl = N;
        for (int j = 0; j < l; ++j) Nl /= k * k;
        f.attention += attention_flops(Nl, M, d, heads);
        if (l >= 1) {
            f.conv_down += Nl * k * k * dh * d;  // output-pixel centric
            // the telescoped sum applies one upsample per level boundary,
            // reading N_l pixels on the way from level l to l-1
            f.conv_up += Nl * k * k * dh * d;
        }
    }
    return f;
}

std::int64_t multipole_flops(std::int64_t H, std::int64_t W, std::int64_t d, std::int64_t heads,
                             const MultipoleConfig& cfg) {
    return multipole_flops_breakdown(H, W, d, heads, cfg).total();
}

std::int64_t param_count(const MultipoleLayerParams& p) {
    std::int64_t n = 0;
    for (const Tensor& t : p.attention.w_q) n += static_cast<std::int64_t>(t.numel());
    for (const Tensor& t : p.attention.w_k) n += static_cast<std::int64_t>(t.numel());
    for (const Tensor& t : p.attention.w_v) n += static_cast<std::int64_t>(t.numel());
    for (const Tensor& t : p.attention.b_q) n += static_cast<std::int64_t>(t.numel());
    for (const Tensor& t : p.attention.b_k) n += static_cast<std::int64_t>(t.numel());
    for (const Tensor& t : p.attention.b_v) n += static_cast<std::int64_t>(t.numel());
    if (p.sampler == SamplerMode::LearnedConv) {
        for (const Tensor& t : p.down_kernel) n += static_cast<std::int64_t>(t.numel());
        if (!p.share_du)
            for (const Tensor& t : p.up_kernel) n += static_cast<std::int64_t>(t.numel());
    }
    n += static_cast<std::int64_t>(p.ln_gamma.numel());
    n += static_cast<std::int64_t>(p.ln_beta.numel());
    return n;
}

}  // namespace mano
