#pragma once

#include <cstdint>
#include <vector>

#include "mano/tensor.hpp"

namespace mano {

/// Sliding-window geometry over an H x W grid: window starts per axis and
/// per-position coverage counts (how many windows contain each position).
struct WindowPlan {
    int H = 0, W = 0, w = 0, s = 0;
    std::vector<int> base_i, base_j;
    std::vector<double> inv_coverage;  // H*W entries, 1/count
    std::vector<int> coverage;         // H*W entries

    int windows() const { return static_cast<int>(base_i.size() * base_j.size()); }
    int tokens_per_window() const { return w * w; }
};

/// Builds the plan for valid (unpadded) windows of side `w` at stride `s`.
/// Throws if the window does not fit or some position is left uncovered.
WindowPlan make_window_plan(int H, int W, int w, int s);

/// OpenMP-parallel kernels. All of them write disjoint output elements per
/// thread and keep a fixed per-element accumulation order, so results are
/// bit-identical for any thread count. Serial naive counterparts used as
/// test oracles live in mano::ref (src/ref).
namespace kernels {

// out[r,n] = sum_k a[r,k] b[k,n]; a may have any rank (leading dims flatten to rows)
void matmul(const Tensor& a, const Tensor& b, Tensor& out);
// out = a * b^T with a [m,k], b [n,k]
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out);
// out = a^T * b with a [m,k], b [m,n] -> [k,n]; accumulates into out
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out);

void add(const Tensor& a, const Tensor& b, Tensor& out);
void sub(const Tensor& a, const Tensor& b, Tensor& out);
void mul(const Tensor& a, const Tensor& b, Tensor& out);
void scale(const Tensor& a, double c, Tensor& out);
// broadcast-add a row vector over the last axis
void add_row(const Tensor& a, const Tensor& row, Tensor& out);

void gelu(const Tensor& x, Tensor& out);
void gelu_backward(const Tensor& x, const Tensor& dy, Tensor& dx_acc);

void softmax_rows(const Tensor& x, Tensor& out);
void softmax_rows_backward(const Tensor& y, const Tensor& dy, Tensor& dx_acc);

// x [H,W,Cin], k [kh,kw,Cin,Cout], cross-correlation over valid positions
// after zero padding of width `pad`
void conv2d(const Tensor& x, const Tensor& k, int stride, int pad, Tensor& out);
void conv2d_backward(const Tensor& x, const Tensor& k, int stride, int pad,
                     const Tensor& dy, Tensor& dx_acc, Tensor& dk_acc);

// adjoint of conv2d: x [h,w,Cin], k [kh,kw,Cout,Cin] -> [(h-1)s+kh, (w-1)s+kw, Cout]
void conv_transpose2d(const Tensor& x, const Tensor& k, int stride, Tensor& out);
void conv_transpose2d_backward(const Tensor& x, const Tensor& k, int stride,
                               const Tensor& dy, Tensor& dx_acc, Tensor& dk_acc);

// k x k mean pooling / nearest-neighbour replication (parameter-free samplers)
void avg_pool2d(const Tensor& x, int k, Tensor& out);
void avg_pool2d_backward(int k, const Tensor& dy, Tensor& dx_acc);
void nearest_up2d(const Tensor& x, int k, Tensor& out);
void nearest_up2d_backward(int k, const Tensor& dy, Tensor& dx_acc);

// mean/rstd are per-token stats saved for the backward pass
void layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                Tensor& out, Tensor& mean, Tensor& rstd);
void layer_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& mean,
                         const Tensor& rstd, const Tensor& dy, Tensor& dx_acc,
                         Tensor& dgamma_acc, Tensor& dbeta_acc);

/// Windowed attention core on one head. q,k,v are [H,W,dh] (or [T,dh] with
/// T == H*W). Scores q_a . k_b * scale inside each window, softmax over the
/// window, output scatter-added across windows and divided by coverage.
/// If `attn_save` is non-null it receives the softmax blocks [nw, M, M].
void winattn_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                     const WindowPlan& plan, double scale, bool coverage_norm,
                     Tensor& out, Tensor* attn_save);
void winattn_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                      const WindowPlan& plan, double scale, bool coverage_norm,
                      const Tensor& attn, const Tensor& dy, Tensor& dq_acc,
                      Tensor& dk_acc, Tensor& dv_acc);

}  // namespace kernels
}  // namespace mano
