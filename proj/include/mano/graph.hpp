#pragma once

#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "mano/kernels.hpp"
#include "mano/tensor.hpp"

namespace mano {

namespace debug {
/// Test hook: when set, the gelu backward rule is deliberately wrong so that
/// grad_check negative-control paths have something to catch.
extern bool corrupt_gelu_backward;
}  // namespace debug

/// Define-by-run reverse-mode graph. Ops execute eagerly on construction;
/// backward() walks nodes in reverse creation order (creation order is a
/// topological order by construction), accumulating into per-node gradient
/// buffers in a fixed order so results are deterministic.
class Graph {
  public:
    using NodeId = int;

    /// trainable leaf; its gradient is always materialized by backward()
    NodeId param(Tensor value, std::string name);
    /// non-trainable leaf (inputs, targets, dropout masks)
    NodeId input(Tensor value);

    NodeId matmul(NodeId a, NodeId b);
    NodeId matmul_nt(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    NodeId add_row(NodeId a, NodeId row);
    NodeId gelu(NodeId a);
    NodeId softmax_rows(NodeId a);
    NodeId conv2d(NodeId x, NodeId kernel, int stride, int pad = 0);
    NodeId conv_transpose2d(NodeId x, NodeId kernel, int stride);
    NodeId avg_pool2d(NodeId x, int k);
    NodeId nearest_up2d(NodeId x, int k);
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
    NodeId slice_last(NodeId x, std::size_t offset, std::size_t len);
    NodeId concat_last(const std::vector<NodeId>& parts);
    NodeId reshape(NodeId x, Shape s);
    NodeId window_attention(NodeId q, NodeId k, NodeId v,
                            std::shared_ptr<const WindowPlan> plan, double scale,
                            bool coverage_norm);
    NodeId sum(NodeId a);
    /// mean((a-b)^2) over all entries, as a composition of primitive nodes
    NodeId mse(NodeId pred, NodeId target);

    const Tensor& val(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].val; }
    double scalar(NodeId id) const { return val(id).data[0]; }
    const Tensor& grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    bool trainable(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].trainable; }
    const std::string& name(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].name; }
    std::size_t size() const { return nodes_.size(); }

    /// reverse-mode accumulation from a scalar loss node
    void backward(NodeId loss);

  private:
    enum class Op {
        Leaf, MatMul, MatMulNT, Add, Sub, Mul, Scale, AddRow, Gelu, SoftmaxRows,
        Conv2d, ConvT2d, AvgPool, NearestUp, LayerNorm, SliceLast, ConcatLast,
        Reshape, WinAttn, Sum
    };

    struct Node {
        Op op = Op::Leaf;
        std::vector<NodeId> in;
        Tensor val;
        Tensor grad;
        bool trainable = false;
        bool needs_grad = false;
        std::string name;
        int i0 = 0, i1 = 0;      // stride/pad, slice offset/len, pool factor
        double x0 = 0.0;         // scale constant, eps, attention scale
        std::vector<Tensor> saved;
        std::shared_ptr<const WindowPlan> plan;
    };

    NodeId push(Node n);
    Node& at(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
    Tensor& grad_buf(NodeId id);
    bool any_needs_grad(const std::vector<NodeId>& ids) const;

    // deque keeps node references stable while builder calls append nodes
    std::deque<Node> nodes_;
};

}  // namespace mano
