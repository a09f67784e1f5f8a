#include "mano/graph.hpp"

#include <cmath>

#include "mano/errors.hpp"

namespace mano {

namespace debug {
bool corrupt_gelu_backward = false;
}

using NodeId = Graph::NodeId;

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

bool Graph::any_needs_grad(const std::vector<NodeId>& ids) const {
    for (NodeId id : ids)
        if (nodes_[static_cast<std::size_t>(id)].needs_grad) return true;
    return false;
}

Tensor& Graph::grad_buf(NodeId id) {
    Node& n = at(id);
    if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.val.shape);
    return n.grad;
}

NodeId Graph::param(Tensor value, std::string name) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(value);
    n.trainable = true;
    n.needs_grad = true;
    n.name = std::move(name);
    return push(std::move(n));
}

NodeId Graph::input(Tensor value) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(value);
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::MatMul;
    n.in = {a, b};
    n.needs_grad = any_needs_grad(n.in);
    kernels::matmul(val(a), val(b), n.val);
    return push(std::move(n));
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
    Node n;
    n.op = Op::MatMulNT;
    n.in = {a, b};
    n.needs_grad = any_needs_grad(n.in);
    kernels::matmul_nt(val(a), val(b), n.val);
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Add;
    n.in = {a, b};
    n.needs_grad = any_needs_grad(n.in);
    kernels::add(val(a), val(b), n.val);
    return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Sub;
    n.in = {a, b};
    n.needs_grad = any_needs_grad(n.in);
    kernels::sub(val(a), val(b), n.val);
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Mul;
    n.in = {a, b};
    n.needs_grad = any_needs_grad(n.in);
    kernels::mul(val(a), val(b), n.val);
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
    Node n;
    n.op = Op::Scale;
    n.in = {a};
    n.x0 = c;
    n.needs_grad = any_needs_grad(n.in);
    kernels::scale(val(a), c, n.val);
    return push(std::move(n));
}

NodeId Graph::add_row(NodeId a, NodeId row) {
    Node n;
    n.op = Op::AddRow;
    n.in = {a, row};
    n.needs_grad = any_needs_grad(n.in);
    kernels::add_row(val(a), val(row), n.val);
    return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
    Node n;
    n.op = Op::Gelu;
    n.in = {a};
    n.needs_grad = any_needs_grad(n.in);
    kernels::gelu(val(a), n.val);
    return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId a) {
    Node n;
    n.op = Op::SoftmaxRows;
    n.in = {a};
    n.needs_grad = any_needs_grad(n.in);
    kernels::softmax_rows(val(a), n.val);
    return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId kernel, int stride, int pad) {
    Node n;
    n.op = Op::Conv2d;
    n.in = {x, kernel};
    n.i0 = stride;
    n.i1 = pad;
    n.needs_grad = any_needs_grad(n.in);
    kernels::conv2d(val(x), val(kernel), stride, pad, n.val);
    return push(std::move(n));
}

NodeId Graph::conv_transpose2d(NodeId x, NodeId kernel, int stride) {
    Node n;
    n.op = Op::ConvT2d;
    n.in = {x, kernel};
    n.i0 = stride;
    n.needs_grad = any_needs_grad(n.in);
    kernels::conv_transpose2d(val(x), val(kernel), stride, n.val);
    return push(std::move(n));
}

NodeId Graph::avg_pool2d(NodeId x, int k) {
    Node n;
    n.op = Op::AvgPool;
    n.in = {x};
    n.i0 = k;
    n.needs_grad = any_needs_grad(n.in);
    kernels::avg_pool2d(val(x), k, n.val);
    return push(std::move(n));
}

NodeId Graph::nearest_up2d(NodeId x, int k) {
    Node n;
    n.op = Op::NearestUp;
    n.in = {x};
    n.i0 = k;
    n.needs_grad = any_needs_grad(n.in);
    kernels::nearest_up2d(val(x), k, n.val);
    return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
    Node n;
    n.op = Op::LayerNorm;
    n.in = {x, gamma, beta};
    n.x0 = eps;
    n.needs_grad = any_needs_grad(n.in);
    n.saved.resize(2);
    kernels::layer_norm(val(x), val(gamma), val(beta), eps, n.val, n.saved[0], n.saved[1]);
    return push(std::move(n));
}

NodeId Graph::slice_last(NodeId x, std::size_t offset, std::size_t len) {
    const Tensor& xv = val(x);
    if (offset + len > xv.cols())
        throw DimError("slice_last [" + std::to_string(offset) + "," +
                       std::to_string(offset + len) + ") out of range for " + shape_str(xv));
    Node n;
    n.op = Op::SliceLast;
    n.in = {x};
    n.i0 = static_cast<int>(offset);
    n.i1 = static_cast<int>(len);
    n.needs_grad = any_needs_grad(n.in);
    Shape os = xv.shape;
    os.back() = len;
    n.val = Tensor(std::move(os));
    const std::size_t rows = xv.lead_rows(), d = xv.cols();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < len; ++c) n.val.data[r * len + c] = xv.data[r * d + offset + c];
    return push(std::move(n));
}

NodeId Graph::concat_last(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw DimError("concat_last needs at least one input");
    Node n;
    n.op = Op::ConcatLast;
    n.in = parts;
    n.needs_grad = any_needs_grad(n.in);
    std::size_t total = 0;
    const Tensor& first = val(parts[0]);
    for (NodeId p : parts) {
        const Tensor& t = val(p);
        if (t.lead_rows() != first.lead_rows() || t.rank() != first.rank())
            throw DimError("concat_last row mismatch: " + shape_str(first) + " vs " + shape_str(t));
        total += t.cols();
    }
    Shape os = first.shape;
    os.back() = total;
    n.val = Tensor(std::move(os));
    const std::size_t rows = first.lead_rows();
    std::size_t off = 0;
    for (NodeId p : parts) {
        const Tensor& t = val(p);
        const std::size_t d = t.cols();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) n.val.data[r * total + off + c] = t.data[r * d + c];
        off += d;
    }
    return push(std::move(n));
}

NodeId Graph::reshape(NodeId x, Shape s) {
    const Tensor& xv = val(x);
    if (shape_numel(s) != xv.numel())
        throw DimError("reshape to " + shape_str(s) + " changes element count of " + shape_str(xv));
    Node n;
    n.op = Op::Reshape;
    n.in = {x};
    n.needs_grad = any_needs_grad(n.in);
    n.val = xv;
    n.val.shape = std::move(s);
    return push(std::move(n));
}

NodeId Graph::window_attention(NodeId q, NodeId k, NodeId v,
                               std::shared_ptr<const WindowPlan> plan, double scale,
                               bool coverage_norm) {
    Node n;
    n.op = Op::WinAttn;
    n.in = {q, k, v};
    n.plan = std::move(plan);
    n.x0 = scale;
    n.i0 = coverage_norm ? 1 : 0;
    n.needs_grad = any_needs_grad(n.in);
    n.saved.resize(1);
    kernels::winattn_forward(val(q), val(k), val(v), *n.plan, scale, coverage_norm, n.val,
                             n.needs_grad ? &n.saved[0] : nullptr);
    return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
    Node n;
    n.op = Op::Sum;
    n.in = {a};
    n.needs_grad = any_needs_grad(n.in);
    double acc = 0.0;
    for (double x : val(a).data) acc += x;
    n.val = Tensor::scalar(acc);
    return push(std::move(n));
}

NodeId Graph::mse(NodeId pred, NodeId target) {
    NodeId d = sub(pred, target);
    NodeId sq = mul(d, d);
    NodeId s = sum(sq);
    return scale(s, 1.0 / static_cast<double>(val(pred).numel()));
}

void Graph::backward(NodeId loss) {
    Node& ln = at(loss);
    if (ln.val.numel() != 1)
        throw DimError("backward requires a scalar loss, got " + shape_str(ln.val));
    // clear previous gradients, pre-materialize trainable leaf buffers so
    // unused parameters report zero gradients of the right shape
    for (Node& n : nodes_) {
        n.grad = Tensor();
        if (n.trainable) n.grad = Tensor::zeros(n.val.shape);
    }
    grad_buf(loss).data[0] = 1.0;
    for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) {
        Node& n = at(id);
        if (!n.needs_grad || n.grad.numel() == 0 || n.op == Op::Leaf) continue;
        const Tensor& g = n.grad;
        switch (n.op) {
            case Op::MatMul: {
                const Tensor& a = val(n.in[0]);
                const Tensor& b = val(n.in[1]);
                if (at(n.in[0]).needs_grad) {
                    // da = g b^T, with g flattened to rows
                    Tensor& da = grad_buf(n.in[0]);
                    const std::size_t rows = a.lead_rows(), K = a.cols(), N = b.dim(1);
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t k2 = 0; k2 < K; ++k2) {
                            double acc = 0.0;
                            for (std::size_t j = 0; j < N; ++j)
                                acc += g.data[i * N + j] * b.data[k2 * N + j];
                            da.data[i * K + k2] += acc;
                        }
                }
                if (at(n.in[1]).needs_grad) kernels::matmul_tn_acc(a, g, grad_buf(n.in[1]));
                break;
            }
            case Op::MatMulNT: {
                const Tensor& a = val(n.in[0]);
                const Tensor& b = val(n.in[1]);
                const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
                if (at(n.in[0]).needs_grad) {
                    Tensor& da = grad_buf(n.in[0]);  // da = g b
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t j = 0; j < N; ++j) {
                            const double gv = g.data[i * N + j];
                            for (std::size_t k2 = 0; k2 < K; ++k2)
                                da.data[i * K + k2] += gv * b.data[j * K + k2];
                        }
                }
                if (at(n.in[1]).needs_grad) {
                    Tensor& db = grad_buf(n.in[1]);  // db = g^T a
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t j = 0; j < N; ++j) {
                            const double gv = g.data[i * N + j];
                            for (std::size_t k2 = 0; k2 < K; ++k2)
                                db.data[j * K + k2] += gv * a.data[i * K + k2];
                        }
                }
                break;
            }
            case Op::Add:
                for (int s = 0; s < 2; ++s)
                    if (at(n.in[static_cast<std::size_t>(s)]).needs_grad) {
                        Tensor& d = grad_buf(n.in[static_cast<std::size_t>(s)]);
                        for (std::size_t i = 0; i < g.numel(); ++i) d.data[i] += g.data[i];
                    }
                break;
            case Op::Sub: {
                if (at(n.in[0]).needs_grad) {
                    Tensor& d = grad_buf(n.in[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i) d.data[i] += g.data[i];
                }
                if (at(n.in[1]).needs_grad) {
                    Tensor& d = grad_buf(n.in[1]);
                    for (std::size_t i = 0; i < g.numel(); ++i) d.data[i] -= g.data[i];
                }
                break;
            }
            case Op::Mul: {
                const Tensor& a = val(n.in[0]);
                const Tensor& b = val(n.in[1]);
                if (at(n.in[0]).needs_grad) {
                    Tensor& d = grad_buf(n.in[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i) d.data[i] += g.data[i] * b.data[i];
                }
                if (at(n.in[1]).needs_grad) {
                    Tensor& d = grad_buf(n.in[1]);
                    for (std::size_t i = 0; i < g.numel(); ++i) d.data[i] += g.data[i] * a.data[i];
                }
                break;
            }
            case Op::Scale: {
                if (at(n.in[0]).needs_grad) {
                    Tensor& d = grad_buf(n.in[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i) d.data[i] += n.x0 * g.data[i];
                }
                break;
            }
            case Op::AddRow: {
                if (at(n.in[0]).needs_grad) {
                    Tensor& d = grad_buf(n.in[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i) d.data[i] += g.data[i];
                }
                if (at(n.in[1]).needs_grad) {
                    Tensor& d = grad_buf(n.in[1]);
                    const std::size_t rows = g.lead_rows(), c = g.cols();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < c; ++j) d.data[j] += g.data[r * c + j];
                }
                break;
            }
            case Op::Gelu:
                if (at(n.in[0]).needs_grad) {
                    kernels::gelu_backward(val(n.in[0]), g, grad_buf(n.in[0]));
                    if (debug::corrupt_gelu_backward) {
                        Tensor& d = grad_buf(n.in[0]);
                        for (double& x : d.data) x *= 1.05;
                    }
                }
                break;
            case Op::SoftmaxRows:
                if (at(n.in[0]).needs_grad)
                    kernels::softmax_rows_backward(n.val, g, grad_buf(n.in[0]));
                break;
            case Op::Conv2d: {
                if (at(n.in[0]).needs_grad || at(n.in[1]).needs_grad) {
                    Tensor dx_dummy, dk_dummy;
                    Tensor& dx = at(n.in[0]).needs_grad ? grad_buf(n.in[0])
                                                        : (dx_dummy = Tensor::zeros(val(n.in[0]).shape));
                    Tensor& dk = at(n.in[1]).needs_grad ? grad_buf(n.in[1])
                                                        : (dk_dummy = Tensor::zeros(val(n.in[1]).shape));
                    kernels::conv2d_backward(val(n.in[0]), val(n.in[1]), n.i0, n.i1, g, dx, dk);
                }
                break;
            }
            case Op::ConvT2d: {
                if (at(n.in[0]).needs_grad || at(n.in[1]).needs_grad) {
                    Tensor dx_dummy, dk_dummy;
                    Tensor& dx = at(n.in[0]).needs_grad ? grad_buf(n.in[0])
                                                        : (dx_dummy = Tensor::zeros(val(n.in[0]).shape));
                    Tensor& dk = at(n.in[1]).needs_grad ? grad_buf(n.in[1])
                                                        : (dk_dummy = Tensor::zeros(val(n.in[1]).shape));
                    kernels::conv_transpose2d_backward(val(n.in[0]), val(n.in[1]), n.i0, g, dx, dk);
                }
                break;
            }
            case Op::AvgPool:
                if (at(n.in[0]).needs_grad) kernels::avg_pool2d_backward(n.i0, g, grad_buf(n.in[0]));
                break;
            case Op::NearestUp:
                if (at(n.in[0]).needs_grad) kernels::nearest_up2d_backward(n.i0, g, grad_buf(n.in[0]));
                break;
            case Op::LayerNorm: {
                Tensor dx_dummy, dg_dummy, db_dummy;
                Tensor& dx = at(n.in[0]).needs_grad ? grad_buf(n.in[0])
                                                    : (dx_dummy = Tensor::zeros(val(n.in[0]).shape));
                Tensor& dgm = at(n.in[1]).needs_grad ? grad_buf(n.in[1])
                                                     : (dg_dummy = Tensor::zeros(val(n.in[1]).shape));
                Tensor& dbt = at(n.in[2]).needs_grad ? grad_buf(n.in[2])
                                                     : (db_dummy = Tensor::zeros(val(n.in[2]).shape));
                kernels::layer_norm_backward(val(n.in[0]), val(n.in[1]), n.saved[0], n.saved[1], g,
                                             dx, dgm, dbt);
                break;
            }
            case Op::SliceLast: {
                if (at(n.in[0]).needs_grad) {
                    Tensor& d = grad_buf(n.in[0]);
                    const Tensor& xv = val(n.in[0]);
                    const std::size_t rows = xv.lead_rows(), dcols = xv.cols();
                    const std::size_t off = static_cast<std::size_t>(n.i0);
                    const std::size_t len = static_cast<std::size_t>(n.i1);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < len; ++c)
                            d.data[r * dcols + off + c] += g.data[r * len + c];
                }
                break;
            }
            case Op::ConcatLast: {
                const std::size_t rows = n.val.lead_rows(), total = n.val.cols();
                std::size_t off = 0;
                for (NodeId p : n.in) {
                    const std::size_t dcols = val(p).cols();
                    if (at(p).needs_grad) {
                        Tensor& d = grad_buf(p);
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < dcols; ++c)
                                d.data[r * dcols + c] += g.data[r * total + off + c];
                    }
                    off += dcols;
                }
                break;
            }
            case Op::Reshape: {
                if (at(n.in[0]).needs_grad) {
                    Tensor& d = grad_buf(n.in[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i) d.data[i] += g.data[i];
                }
                break;
            }
            case Op::WinAttn: {
                Tensor dq_dummy, dk_dummy, dv_dummy;
                Tensor& dq = at(n.in[0]).needs_grad ? grad_buf(n.in[0])
                                                    : (dq_dummy = Tensor::zeros(val(n.in[0]).shape));
                Tensor& dk = at(n.in[1]).needs_grad ? grad_buf(n.in[1])
                                                    : (dk_dummy = Tensor::zeros(val(n.in[1]).shape));
                Tensor& dv = at(n.in[2]).needs_grad ? grad_buf(n.in[2])
                                                    : (dv_dummy = Tensor::zeros(val(n.in[2]).shape));
                kernels::winattn_backward(val(n.in[0]), val(n.in[1]), val(n.in[2]), *n.plan, n.x0,
                                          n.i0 != 0, n.saved[0], g, dq, dk, dv);
                break;
            }
            case Op::Sum: {
                if (at(n.in[0]).needs_grad) {
                    Tensor& d = grad_buf(n.in[0]);
                    const double gv = g.data[0];
                    for (double& x : d.data) x += gv;
                }
                break;
            }
            case Op::Leaf:
                break;
        }
    }
}

}  // namespace mano
