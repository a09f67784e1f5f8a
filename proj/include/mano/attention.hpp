#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "mano/graph.hpp"
#include "mano/tensor.hpp"

namespace mano {

/// Per-head projection parameters. Each head owns d_head x d_head maps that
/// act on that head's channel slice; there is exactly one set shared by
/// every hierarchy level.
struct AttentionParams {
    int heads = 1;
    int d_head = 1;
    bool use_bias = true;
    std::vector<Tensor> w_q, w_k, w_v;  // heads x [d_head, d_head]
    std::vector<Tensor> b_q, b_k, b_v;  // heads x [d_head], present iff use_bias

    AttentionParams() = default;
    AttentionParams(int heads, int d_head, bool use_bias);

    int model_dim() const { return heads * d_head; }
    /// variance-scaled init, gain 1/sqrt(d_head); biases start at zero
    void init(SplitMix64& rng);
};

/// Sliding-window geometry: w tokens per axis (M = w^2 per window), stride s.
/// s == w tiles the grid exactly; s < w gives overlapping windows whose
/// outputs are averaged by coverage count.
struct WindowSpec {
    int window = 2;
    int stride = 1;
    bool coverage_norm = true;
};

/// Node handles for one parameter set registered on a graph.
struct AttentionNodes {
    std::vector<Graph::NodeId> w_q, w_k, w_v, b_q, b_k, b_v;
};

AttentionNodes register_attention_params(Graph& g, AttentionParams& p,
                                         const std::string& prefix);

/// Dense scaled-dot-product attention over the flattened grid, one softmax
/// row per token pair. x is [H,W,d] or [N,d]; output has the same shape.
Graph::NodeId full_attention(Graph& g, Graph::NodeId x, const AttentionNodes& p,
                             const AttentionParams& cfg);

/// Window-restricted attention: per head, q/k/v projections on all tokens,
/// exact attention inside each w x w window, scatter-add + coverage average.
Graph::NodeId windowed_attention(Graph& g, Graph::NodeId x, const AttentionNodes& p,
                                 const AttentionParams& cfg, int H, int W,
                                 const WindowSpec& spec);

/// Kernel-only forward paths (no graph, no saved activations).
Tensor full_attention_eval(const Tensor& x, const AttentionParams& p);
Tensor windowed_attention_eval(const Tensor& x, const AttentionParams& p, int H, int W,
                               const WindowSpec& spec);

/// Frozen analytic cost model, in multiply-adds (softmax exps count 1 each):
///   projections 3*N*d^2, scores N*M*d, AV N*M*d, softmax N*M*heads,
/// obtained from n_windows = N/M non-overlapping windows of M tokens.
struct AttentionFlops {
    std::int64_t proj = 0, scores = 0, av = 0, softmax = 0;
    std::int64_t total() const { return proj + scores + av + softmax; }
    /// the window-quadratic part (everything except projections)
    std::int64_t score_term() const { return scores + av + softmax; }
};

AttentionFlops attention_flops_breakdown(std::int64_t N, std::int64_t M, std::int64_t d,
                                         std::int64_t heads);
std::int64_t attention_flops(std::int64_t N, std::int64_t M, std::int64_t d, std::int64_t heads);

}  // namespace mano
