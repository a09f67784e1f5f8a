#pragma once

#include <vector>

#include "mano/attention.hpp"
#include "mano/multipole.hpp"
#include "mano/tensor.hpp"

namespace mano::ref {

/// Serial straight-line reference implementations. These are written
/// independently of the kernel layer (plain nested loops, no shared helpers)
/// and exist as oracles for the tests plus the slow side of kernel_bench.
/// Keep them boring.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad);
Tensor conv_transpose2d(const Tensor& x, const Tensor& k, int stride);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Pairwise-kernel attention on one head: A_ij = exp(q_i.k_j * scale) row
/// normalized, out_i = sum_j A_ij v_j, written as explicit double loops.
Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v, double scale);

/// Dense multi-head attention over all tokens.
Tensor full_attention(const Tensor& x, const AttentionParams& p);

/// Per-window brute force with scatter-add and coverage averaging.
Tensor windowed_attention(const Tensor& x, const AttentionParams& p, int H, int W,
                          const WindowSpec& spec);

/// Straight-line multipole layer: materializes every level explicitly.
Tensor multipole_attention(const Tensor& x, const MultipoleLayerParams& p,
                           const MultipoleConfig& cfg);

/// Independent AdamW (second implementation for the optimizer trajectory test).
struct AdamWRef {
    std::vector<double> m, v;
    int t = 0;
    void step(std::vector<double>& theta, const std::vector<double>& g, double lr, double beta1,
              double beta2, double eps, double wd);
};

}  // namespace mano::ref
