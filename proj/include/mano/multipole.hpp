#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mano/attention.hpp"
#include "mano/graph.hpp"

namespace mano {

enum class SamplerMode { LearnedConv, AveragePool };

/// One multipole attention layer. The attention set, the per-head sampling
/// kernels and the level norm are shared by every hierarchy level, so the
/// parameter count does not depend on the number of levels.
struct MultipoleLayerParams {
    AttentionParams attention;
    std::vector<Tensor> down_kernel;  // heads x [k,k,d_head,d_head]
    std::vector<Tensor> up_kernel;    // heads x [k,k,d_head,d_head]; aliases down if share_du
    Tensor ln_gamma, ln_beta;         // level norm over the full model dim
    SamplerMode sampler = SamplerMode::LearnedConv;
    bool share_du = false;

    MultipoleLayerParams() = default;
    MultipoleLayerParams(int heads, int d_head, int k, bool use_bias, SamplerMode sampler,
                         bool share_du);

    /// attention projections get variance-scaled noise; sampling kernels start
    /// at the average-pool / nearest-replication point plus std-0.01 noise
    void init(SplitMix64& rng);
    int sampling_rate() const {
        return down_kernel.empty() ? 2 : static_cast<int>(down_kernel[0].dim(0));
    }
};

struct MultipoleConfig {
    int levels = 0;          // L; level 0 is the input grid
    int sampling_rate = 2;   // k
    WindowSpec window;
    double ln_eps = 1e-5;
};

/// Largest L such that the grid can be halved L times by factor k with every
/// intermediate side divisible and the coarsest side still >= window.
int multipole_max_levels(int side, int k, int window);

/// Throws ConfigError unless the window fits every level down to L.
void validate_multipole_config(const MultipoleConfig& cfg, int H, int W);

struct MultipoleNodes {
    AttentionNodes attention;
    std::vector<Graph::NodeId> down_kernel, up_kernel;
    Graph::NodeId ln_gamma = -1, ln_beta = -1;
};

MultipoleNodes register_multipole_params(Graph& g, MultipoleLayerParams& p,
                                         const std::string& prefix);

/// One downsampling step h x w x d -> h/k x w/k x d (per-head shared kernel,
/// or k x k mean pooling in AveragePool mode).
Graph::NodeId downsample(Graph& g, Graph::NodeId x, const MultipoleNodes& p,
                         const MultipoleLayerParams& params, int k);
Graph::NodeId upsample(Graph& g, Graph::NodeId x, const MultipoleNodes& p,
                       const MultipoleLayerParams& params, int k);

/// The V-cycle: X_0..X_L by repeated downsampling, level norm + windowed
/// attention at every level with the shared parameter set, contributions
/// summed at full resolution as sum_l U^l(Attn(X_l)). U is linear, so the sum
/// is accumulated coarse-to-fine with a single upsample per level boundary;
/// that keeps the sampling cost linear in the token count.
Graph::NodeId multipole_attention(Graph& g, Graph::NodeId x, const MultipoleNodes& p,
                                  const MultipoleLayerParams& params, const MultipoleConfig& cfg);

/// Kernel-only forward paths.
Tensor downsample_eval(const Tensor& x, const MultipoleLayerParams& p, int k);
Tensor upsample_eval(const Tensor& x, const MultipoleLayerParams& p, int k);
Tensor multipole_attention_eval(const Tensor& x, const MultipoleLayerParams& p,
                                const MultipoleConfig& cfg);

/// Frozen cost model: attention_flops summed over levels with N_l = N/k^{2l},
/// plus per-head sampling convolutions (multiply-adds, input-pixel centric
/// for the transposed convolutions).
struct MultipoleFlops {
    std::int64_t attention = 0, conv_down = 0, conv_up = 0;
    std::int64_t total() const { return attention + conv_down + conv_up; }
};
MultipoleFlops multipole_flops_breakdown(std::int64_t H, std::int64_t W, std::int64_t d,
                                         std::int64_t heads, const MultipoleConfig& cfg);
std::int64_t multipole_flops(std::int64_t H, std::int64_t W, std::int64_t d, std::int64_t heads,
                             const MultipoleConfig& cfg);

/// Exact count of trainable scalars in the layer.
std::int64_t param_count(const MultipoleLayerParams& p);

}  // namespace mano
