#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mano/multipole.hpp"

namespace mano {

enum class AttentionKind { Multipole, Dense, Windowed };

std::string to_string(AttentionKind k);
std::string to_string(SamplerMode m);
AttentionKind attention_kind_from_string(const std::string& s);
SamplerMode sampler_mode_from_string(const std::string& s);

struct ModelConfig {
    int dim = 128;
    int depth = 8;
    int heads = 4;
    int d_head = -1;  // -1: dim / heads
    int mlp_dim = 128;
    int window = 2;
    int stride = 1;
    int levels = -1;  // -1: maximum for the input resolution (coarsest >= window)
    int sampling_rate = 2;
    double emb_dropout = 0.1;
    double att_dropout = 0.1;
    AttentionKind kind = AttentionKind::Multipole;
    SamplerMode sampler = SamplerMode::LearnedConv;
    bool use_bias = true;
    bool share_du = false;
    // scalar input/target normalization, fit on the training split and kept
    // in the checkpoint; identity by default. Keeps the residual stream and
    // the decode head at unit scale so the optimizer is well conditioned.
    double a_mu = 0.0, a_sigma = 1.0;
    double u_mu = 0.0, u_sigma = 1.0;

    void validate();  // fills d_head when defaulted; throws ConfigError
};

/// The Darcy operator network: point-wise lift of (x, y, a) triples, depth
/// pre-norm transformer blocks whose attention sublayer is a multipole
/// attention layer, and a point-wise linear decoder. Resolution-agnostic: one
/// parameter set serves any power-of-two grid the window fits.
struct OperatorModel {
    struct Block {
        Tensor ln1_g, ln1_b;
        MultipoleLayerParams mp;
        Tensor w_o, b_o;
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
    };

    ModelConfig cfg;
    Tensor embed_w, embed_b;    // [3,d], [d]
    std::vector<Block> blocks;
    Tensor decode_w, decode_b;  // [d,1], [1]

    static OperatorModel create(ModelConfig cfg, std::uint64_t seed);

    /// visits every trainable tensor in canonical declaration order; this
    /// order defines checkpoint layout and gradient packing
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    std::int64_t count_params() const;

    /// effective level count for an n x n input under this config
    int levels_for(int n) const;
};

/// input channel stack (x_i, y_j, a_ij), coordinates at cell centers (i+1/2)/n;
/// the coefficient channel is shifted/scaled by the normalizer constants
Tensor stack_input_channels(const Tensor& a, double a_mu = 0.0, double a_sigma = 1.0);

/// point-wise lift of the channel stack; dropout only when drop_rng != nullptr
Tensor embed_input_eval(const OperatorModel& m, const Tensor& a);

struct ForwardGraph {
    Graph::NodeId output = -1;                 // [n,n,1]
    std::vector<Graph::NodeId> param_ids;      // canonical order
    std::vector<std::string> param_names;
};

/// Builds the training-mode graph. `drop_rng` enables dropout; pass nullptr
/// for a deterministic evaluation-mode graph.
ForwardGraph forward_graph(OperatorModel& m, Graph& g, const Tensor& a, SplitMix64* drop_rng);

/// Kernel-only forward (no graph, evaluation mode); bit-identical to the
/// graph forward with dropout off.
Tensor forward_eval(const OperatorModel& m, const Tensor& a);

}  // namespace mano
