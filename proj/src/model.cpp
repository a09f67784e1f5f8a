#include "mano/model.hpp"

#include <cmath>

#include "mano/errors.hpp"

namespace mano {

std::string to_string(AttentionKind k) {
    switch (k) {
        case AttentionKind::Multipole: return "multipole";
        case AttentionKind::Dense: return "dense";
        case AttentionKind::Windowed: return "windowed";
    }
    return "?";
}

std::string to_string(SamplerMode m) {
    return m == SamplerMode::LearnedConv ? "conv" : "pool";
}

AttentionKind attention_kind_from_string(const std::string& s) {
    if (s == "multipole") return AttentionKind::Multipole;
    if (s == "dense") return AttentionKind::Dense;
    if (s == "windowed") return AttentionKind::Windowed;
    throw ConfigError("unknown attention kind '" + s + "' (multipole|dense|windowed)");
}

SamplerMode sampler_mode_from_string(const std::string& s) {
    if (s == "conv") return SamplerMode::LearnedConv;
    if (s == "pool") return SamplerMode::AveragePool;
    throw ConfigError("unknown sampler mode '" + s + "' (conv|pool)");
}

void ModelConfig::validate() {
    if (dim < 1 || depth < 0 || heads < 1 || mlp_dim < 1)
        throw ConfigError("model dims must be positive (dim/heads/mlp_dim), depth >= 0");
    if (d_head < 0) {
        if (dim % heads != 0)
            throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        d_head = dim / heads;
    }
    if (heads * d_head != dim)
        throw ConfigError("heads*d_head = " + std::to_string(heads * d_head) +
                          " must equal dim = " + std::to_string(dim));
    if (window < 1 || stride < 1 || stride > window)
        throw ConfigError("window must be >= 1 and 1 <= stride <= window");
    if (sampling_rate < 2) throw ConfigError("sampling rate must be >= 2");
    if (emb_dropout < 0 || emb_dropout >= 1 || att_dropout < 0 || att_dropout >= 1)
        throw ConfigError("dropout rates must lie in [0,1)");
    if (a_sigma <= 0 || u_sigma <= 0) throw ConfigError("normalizer scales must be > 0");
}

OperatorModel OperatorModel::create(ModelConfig cfg, std::uint64_t seed) {
    cfg.validate();
    OperatorModel m;
    m.cfg = cfg;
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    const std::size_t mlp = static_cast<std::size_t>(cfg.mlp_dim);
    m.embed_w = Tensor::zeros({3, d});
    m.embed_b = Tensor::zeros({d});
    for (int b = 0; b < cfg.depth; ++b) {
        Block blk;
        blk.ln1_g = Tensor::full({d}, 1.0);
        blk.ln1_b = Tensor::zeros({d});
        blk.mp = MultipoleLayerParams(cfg.heads, cfg.d_head, cfg.sampling_rate, cfg.use_bias,
                                      cfg.sampler, cfg.share_du);
        blk.w_o = Tensor::zeros({d, d});
        blk.b_o = Tensor::zeros({d});
        blk.ln2_g = Tensor::full({d}, 1.0);
        blk.ln2_b = Tensor::zeros({d});
        blk.w1 = Tensor::zeros({d, mlp});
        blk.b1 = Tensor::zeros({mlp});
        blk.w2 = Tensor::zeros({mlp, d});
        blk.b2 = Tensor::zeros({d});
        m.blocks.push_back(std::move(blk));
    }
    m.decode_w = Tensor::zeros({d, 1});
    m.decode_b = Tensor::zeros({1});

    SplitMix64 rng(mix_seed(seed, 0x696e6974));  // "init" stream
    auto fill = [&](Tensor& t, double std_dev) {
        for (double& x : t.data) x = std_dev * rng.gaussian();
    };
    fill(m.embed_w, 1.0 / std::sqrt(3.0));
    for (Block& blk : m.blocks) {
        blk.mp.init(rng);
        fill(blk.w_o, 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
        fill(blk.w1, 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
        fill(blk.w2, 1.0 / std::sqrt(static_cast<double>(cfg.mlp_dim)));
    }
    // the decode head starts at zero so initial predictions sit at the target
    // scale instead of the O(1) residual-stream scale
    return m;
}

namespace {

template <class Model, class Fn>
void visit_params(Model& m, const Fn& fn) {
    fn("embed.w", m.embed_w);
    fn("embed.b", m.embed_b);
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        auto& blk = m.blocks[b];
        const std::string p = "block" + std::to_string(b);
        fn(p + ".ln1.gamma", blk.ln1_g);
        fn(p + ".ln1.beta", blk.ln1_b);
        auto& mp = blk.mp;
        for (int h = 0; h < mp.attention.heads; ++h) {
            const std::string hp = p + ".attn.h" + std::to_string(h);
            fn(hp + ".w_q", mp.attention.w_q[static_cast<std::size_t>(h)]);
            fn(hp + ".w_k", mp.attention.w_k[static_cast<std::size_t>(h)]);
            fn(hp + ".w_v", mp.attention.w_v[static_cast<std::size_t>(h)]);
            if (mp.attention.use_bias) {
                fn(hp + ".b_q", mp.attention.b_q[static_cast<std::size_t>(h)]);
                fn(hp + ".b_k", mp.attention.b_k[static_cast<std::size_t>(h)]);
                fn(hp + ".b_v", mp.attention.b_v[static_cast<std::size_t>(h)]);
            }
        }
        fn(p + ".lvl_ln.gamma", mp.ln_gamma);
        fn(p + ".lvl_ln.beta", mp.ln_beta);
        if (mp.sampler == SamplerMode::LearnedConv) {
            for (int h = 0; h < mp.attention.heads; ++h)
                fn(p + ".samp.h" + std::to_string(h) + ".down",
                   mp.down_kernel[static_cast<std::size_t>(h)]);
            if (!mp.share_du)
                for (int h = 0; h < mp.attention.heads; ++h)
                    fn(p + ".samp.h" + std::to_string(h) + ".up",
                       mp.up_kernel[static_cast<std::size_t>(h)]);
        }
        fn(p + ".w_o", blk.w_o);
        fn(p + ".b_o", blk.b_o);
        fn(p + ".ln2.gamma", blk.ln2_g);
        fn(p + ".ln2.beta", blk.ln2_b);
        fn(p + ".mlp.w1", blk.w1);
        fn(p + ".mlp.b1", blk.b1);
        fn(p + ".mlp.w2", blk.w2);
        fn(p + ".mlp.b2", blk.b2);
    }
    fn("decode.w", m.decode_w);
    fn("decode.b", m.decode_b);
}

}  // namespace

void OperatorModel::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_params(*this, fn);
}

void OperatorModel::for_each_param(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    visit_params(*this, fn);
}

std::int64_t OperatorModel::count_params() const {
    std::int64_t n = 0;
    for_each_param([&](const std::string&, const Tensor& t) {
        n += static_cast<std::int64_t>(t.numel());
    });
    return n;
}

int OperatorModel::levels_for(int n) const {
    if (cfg.kind != AttentionKind::Multipole) return 0;
    const int maxL = multipole_max_levels(n, cfg.sampling_rate, cfg.window);
    return cfg.levels < 0 ? maxL : std::min(cfg.levels, maxL);
}

Tensor stack_input_channels(const Tensor& a, double a_mu, double a_sigma) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1))
        throw DimError("coefficient field must be [n,n], got " + shape_str(a));
    const std::size_t n = a.dim(0);
    if (n < 2) throw DimError("grid side must be >= 2");
    Tensor x({n, n, 3});
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
            const double yj = (static_cast<double>(j) + 0.5) / static_cast<double>(n);
            x.at3(i, j, 0) = xi;
            x.at3(i, j, 1) = yj;
            x.at3(i, j, 2) = (a.at2(i, j) - a_mu) / a_sigma;
        }
    }
    return x;
}

Tensor embed_input_eval(const OperatorModel& m, const Tensor& a) {
    Tensor chans = stack_input_channels(a, m.cfg.a_mu, m.cfg.a_sigma);
    Tensor lifted, out;
    kernels::matmul(chans, m.embed_w, lifted);
    kernels::add_row(lifted, m.embed_b, out);
    return out;
}

namespace {

Graph::NodeId dropout(Graph& g, Graph::NodeId x, double p, SplitMix64* rng) {
    if (!rng || p <= 0.0) return x;
    const double keep = 1.0 - p;
    Tensor mask(g.val(x).shape);
    for (double& v : mask.data) v = (rng->uniform() < keep) ? 1.0 / keep : 0.0;
    return g.mul(x, g.input(std::move(mask)));
}

MultipoleConfig block_mp_config(const ModelConfig& cfg, int n, int effective_levels) {
    MultipoleConfig mc;
    mc.sampling_rate = cfg.sampling_rate;
    switch (cfg.kind) {
        case AttentionKind::Multipole:
            mc.levels = effective_levels;
            mc.window = WindowSpec{cfg.window, cfg.stride, true};
            break;
        case AttentionKind::Windowed:
            mc.levels = 0;
            mc.window = WindowSpec{cfg.window, cfg.stride, true};
            break;
        case AttentionKind::Dense:
            mc.levels = 0;
            mc.window = WindowSpec{n, n, true};
            break;
    }
    return mc;
}

}  // namespace

ForwardGraph forward_graph(OperatorModel& m, Graph& g, const Tensor& a, SplitMix64* drop_rng) {
    const int n = static_cast<int>(a.dim(0));
    const MultipoleConfig mc = block_mp_config(m.cfg, n, m.levels_for(n));

    // register every parameter up front, in canonical order
    ForwardGraph fg;
    std::vector<Graph::NodeId>* ids = &fg.param_ids;
    std::vector<std::string>* names = &fg.param_names;
    m.for_each_param([&](const std::string& name, Tensor& t) {
        ids->push_back(g.param(t, name));
        names->push_back(name);
    });
    std::size_t cursor = 0;
    auto next_id = [&](const std::string& expect) {
        if (fg.param_names[cursor] != expect)
            throw ConfigError("parameter order mismatch: expected " + expect + ", found " +
                              fg.param_names[cursor]);
        return fg.param_ids[cursor++];
    };

    const Graph::NodeId embed_w = next_id("embed.w");
    const Graph::NodeId embed_b = next_id("embed.b");
    Graph::NodeId x = g.add_row(
        g.matmul(g.input(stack_input_channels(a, m.cfg.a_mu, m.cfg.a_sigma)), embed_w), embed_b);
    x = dropout(g, x, m.cfg.emb_dropout, drop_rng);

    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        const std::string p = "block" + std::to_string(b);
        OperatorModel::Block& blk = m.blocks[b];
        const Graph::NodeId ln1_g = next_id(p + ".ln1.gamma");
        const Graph::NodeId ln1_b = next_id(p + ".ln1.beta");
        MultipoleNodes mpn;
        for (int h = 0; h < blk.mp.attention.heads; ++h) {
            const std::string hp = p + ".attn.h" + std::to_string(h);
            mpn.attention.w_q.push_back(next_id(hp + ".w_q"));
            mpn.attention.w_k.push_back(next_id(hp + ".w_k"));
            mpn.attention.w_v.push_back(next_id(hp + ".w_v"));
            if (blk.mp.attention.use_bias) {
                mpn.attention.b_q.push_back(next_id(hp + ".b_q"));
                mpn.attention.b_k.push_back(next_id(hp + ".b_k"));
                mpn.attention.b_v.push_back(next_id(hp + ".b_v"));
            }
        }
        mpn.ln_gamma = next_id(p + ".lvl_ln.gamma");
        mpn.ln_beta = next_id(p + ".lvl_ln.beta");
        if (blk.mp.sampler == SamplerMode::LearnedConv) {
            for (int h = 0; h < blk.mp.attention.heads; ++h)
                mpn.down_kernel.push_back(next_id(p + ".samp.h" + std::to_string(h) + ".down"));
            if (blk.mp.share_du)
                mpn.up_kernel = mpn.down_kernel;
            else
                for (int h = 0; h < blk.mp.attention.heads; ++h)
                    mpn.up_kernel.push_back(next_id(p + ".samp.h" + std::to_string(h) + ".up"));
        }
        const Graph::NodeId w_o = next_id(p + ".w_o");
        const Graph::NodeId b_o = next_id(p + ".b_o");
        const Graph::NodeId ln2_g = next_id(p + ".ln2.gamma");
        const Graph::NodeId ln2_b = next_id(p + ".ln2.beta");
        const Graph::NodeId w1 = next_id(p + ".mlp.w1");
        const Graph::NodeId b1 = next_id(p + ".mlp.b1");
        const Graph::NodeId w2 = next_id(p + ".mlp.w2");
        const Graph::NodeId b2 = next_id(p + ".mlp.b2");

        Graph::NodeId h1 = g.layer_norm(x, ln1_g, ln1_b);
        Graph::NodeId att = multipole_attention(g, h1, mpn, blk.mp, mc);
        att = g.add_row(g.matmul(att, w_o), b_o);
        att = dropout(g, att, m.cfg.att_dropout, drop_rng);
        x = g.add(x, att);

        Graph::NodeId h2 = g.layer_norm(x, ln2_g, ln2_b);
        Graph::NodeId f = g.gelu(g.add_row(g.matmul(h2, w1), b1));
        f = g.add_row(g.matmul(f, w2), b2);
        x = g.add(x, f);
    }

    const Graph::NodeId decode_w = next_id("decode.w");
    const Graph::NodeId decode_b = next_id("decode.b");
    Graph::NodeId y = g.add_row(g.matmul(x, decode_w), decode_b);
    // fixed de-normalization: predictions live in raw target units
    fg.output = g.add_row(g.scale(y, m.cfg.u_sigma), g.input(Tensor::from({1}, {m.cfg.u_mu})));
    return fg;
}

Tensor forward_eval(const OperatorModel& m, const Tensor& a) {
    const int n = static_cast<int>(a.dim(0));
    const MultipoleConfig mc = block_mp_config(m.cfg, n, m.levels_for(n));
    Tensor x = embed_input_eval(m, a);
    Tensor tmp, mean, rstd;
    for (const OperatorModel::Block& blk : m.blocks) {
        Tensor h1;
        kernels::layer_norm(x, blk.ln1_g, blk.ln1_b, 1e-5, h1, mean, rstd);
        Tensor att = multipole_attention_eval(h1, blk.mp, mc);
        h1 = Tensor();
        Tensor att2;
        kernels::matmul(att, blk.w_o, tmp);
        kernels::add_row(tmp, blk.b_o, att2);
        kernels::add(x, att2, tmp);
        x = std::move(tmp);
        att2 = Tensor();

        Tensor h2;
        kernels::layer_norm(x, blk.ln2_g, blk.ln2_b, 1e-5, h2, mean, rstd);
        Tensor f1, f2;
        kernels::matmul(h2, blk.w1, tmp);
        kernels::add_row(tmp, blk.b1, f1);
        kernels::gelu(f1, f2);
        kernels::matmul(f2, blk.w2, tmp);
        kernels::add_row(tmp, blk.b2, f1);
        kernels::add(x, f1, tmp);
        x = std::move(tmp);
    }
    Tensor out;
    kernels::matmul(x, m.decode_w, tmp);
    kernels::add_row(tmp, m.decode_b, out);
    Tensor scaled;
    kernels::scale(out, m.cfg.u_sigma, scaled);
    Tensor shift({1});
    shift.data[0] = m.cfg.u_mu;
    kernels::add_row(scaled, shift, out);
    return out;
}

}  // namespace mano
