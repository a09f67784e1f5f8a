#include "mano/kernels.hpp"

#include <cmath>
#include <cstddef>

#include "mano/errors.hpp"

namespace mano {

WindowPlan make_window_plan(int H, int W, int w, int s) {
    if (w < 1 || s < 1) throw ConfigError("window and stride must be >= 1");
    if (s > w) throw ConfigError("window stride " + std::to_string(s) + " exceeds window size " +
                                 std::to_string(w));
    if (w > H || w > W)
        throw ConfigError("window size " + std::to_string(w) + " does not fit grid " +
                          std::to_string(H) + "x" + std::to_string(W) +
                          "; shrink the window or enlarge the grid");
    WindowPlan p;
    p.H = H;
    p.W = W;
    p.w = w;
    p.s = s;
    for (int i = 0; i + w <= H; i += s) p.base_i.push_back(i);
    for (int j = 0; j + w <= W; j += s) p.base_j.push_back(j);
    p.coverage.assign(static_cast<std::size_t>(H) * W, 0);
    for (int bi : p.base_i)
        for (int bj : p.base_j)
            for (int u = 0; u < w; ++u)
                for (int v = 0; v < w; ++v) p.coverage[(bi + u) * W + (bj + v)] += 1;
    p.inv_coverage.resize(p.coverage.size());
    for (std::size_t t = 0; t < p.coverage.size(); ++t) {
        if (p.coverage[t] == 0)
            throw ConfigError("stride " + std::to_string(s) + " leaves grid position " +
                              std::to_string(t) + " uncovered; use a stride dividing " +
                              "(side - window)");
        p.inv_coverage[t] = 1.0 / p.coverage[t];
    }
    return p;
}

namespace kernels {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw DimError(msg);
}

std::ptrdiff_t sp(std::size_t v) { return static_cast<std::ptrdiff_t>(v); }

}  // namespace

void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
    require(a.rank() >= 2 && b.rank() == 2, "matmul expects [.,k] x [k,n], got " + shape_str(a) +
                                                " and " + shape_str(b));
    const std::size_t rows = a.lead_rows(), K = a.cols(), N = b.dim(1);
    require(b.dim(0) == K,
            "matmul inner dimensions disagree: " + shape_str(a) + " vs " + shape_str(b));
    Shape os = a.shape;
    os.back() = N;
    out = Tensor(std::move(os));
    const double* A = a.data.data();
    const double* B = b.data.data();
    double* O = out.data.data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < sp(rows); ++i) {
        double* orow = O + i * sp(N);
        for (std::size_t k = 0; k < K; ++k) {
            const double av = A[i * sp(K) + sp(k)];
            const double* brow = B + k * N;
            for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
            "matmul_nt expects [m,k] x [n,k], got " + shape_str(a) + " and " + shape_str(b));
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
    out = Tensor(Shape{M, N});
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < sp(M); ++i) {
        const double* arow = a.data.data() + i * sp(K);
        for (std::size_t j = 0; j < N; ++j) {
            const double* brow = b.data.data() + j * K;
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            out.data[i * sp(N) + sp(j)] = acc;
        }
    }
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t M = a.lead_rows(), K = a.cols(), N = b.cols();
    require(b.lead_rows() == M,
            "matmul_tn expects matching rows: " + shape_str(a) + " vs " + shape_str(b));
    require(out.numel() == K * N, "matmul_tn output shape mismatch");
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t k = 0; k < sp(K); ++k) {
        double* orow = out.data.data() + k * sp(N);
        for (std::size_t i = 0; i < M; ++i) {
            const double av = a.data[i * K + static_cast<std::size_t>(k)];
            const double* brow = b.data.data() + i * N;
            for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    }
}

#define MANO_ELEMENTWISE_LOOP(expr)                                  \
    const std::size_t n = a.numel();                                 \
    _Pragma("omp parallel for schedule(static)")                     \
    for (std::ptrdiff_t i = 0; i < sp(n); ++i) {                     \
        expr;                                                        \
    }

void add(const Tensor& a, const Tensor& b, Tensor& out) {
    require(a.same_shape(b), "add shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    out = Tensor(a.shape);
    MANO_ELEMENTWISE_LOOP(out.data[i] = a.data[i] + b.data[i])
}

void sub(const Tensor& a, const Tensor& b, Tensor& out) {
    require(a.same_shape(b), "sub shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    out = Tensor(a.shape);
    MANO_ELEMENTWISE_LOOP(out.data[i] = a.data[i] - b.data[i])
}

void mul(const Tensor& a, const Tensor& b, Tensor& out) {
    require(a.same_shape(b), "mul shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    out = Tensor(a.shape);
    MANO_ELEMENTWISE_LOOP(out.data[i] = a.data[i] * b.data[i])
}

void scale(const Tensor& a, double c, Tensor& out) {
    out = Tensor(a.shape);
    MANO_ELEMENTWISE_LOOP(out.data[i] = c * a.data[i])
}

#undef MANO_ELEMENTWISE_LOOP

void add_row(const Tensor& a, const Tensor& row, Tensor& out) {
    require(row.rank() == 1 && row.dim(0) == a.cols(),
            "add_row expects a [" + std::to_string(a.cols()) + "] vector, got " + shape_str(row));
    out = Tensor(a.shape);
    const std::size_t rows = a.lead_rows(), d = a.cols();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < sp(rows); ++i)
        for (std::size_t j = 0; j < d; ++j)
            out.data[i * sp(d) + sp(j)] = a.data[i * sp(d) + sp(j)] + row.data[j];
}

namespace {
const double kInvSqrt2 = 0.70710678118654752440;
const double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

void gelu(const Tensor& x, Tensor& out) {
    out = Tensor(x.shape);
    const std::size_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < sp(n); ++i) {
        const double v = x.data[i];
        out.data[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
}

void gelu_backward(const Tensor& x, const Tensor& dy, Tensor& dx_acc) {
    const std::size_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < sp(n); ++i) {
        const double v = x.data[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        dx_acc.data[i] += dy.data[i] * (cdf + v * pdf);
    }
}

void softmax_rows(const Tensor& x, Tensor& out) {
    require(x.rank() == 2, "softmax_rows expects a matrix, got " + shape_str(x));
    out = Tensor(x.shape);
    const std::size_t m = x.dim(0), n = x.dim(1);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < sp(m); ++i) {
        const double* xr = x.data.data() + i * sp(n);
        double* yr = out.data.data() + i * sp(n);
        double mx = xr[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
    }
}

void softmax_rows_backward(const Tensor& y, const Tensor& dy, Tensor& dx_acc) {
    const std::size_t m = y.dim(0), n = y.dim(1);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < sp(m); ++i) {
        const double* yr = y.data.data() + i * sp(n);
        const double* gr = dy.data.data() + i * sp(n);
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
        double* dr = dx_acc.data.data() + i * sp(n);
        for (std::size_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
}

namespace {

void check_conv_args(const Tensor& x, const Tensor& k, int stride, int pad) {
    require(x.rank() == 3, "conv input must be [H,W,C], got " + shape_str(x));
    require(k.rank() == 4, "conv kernel must be [kh,kw,Cin,Cout], got " + shape_str(k));
    if (stride < 1) throw DimError("conv stride must be >= 1");
    if (pad < 0) throw DimError("conv padding must be >= 0");
}

}  // namespace

void conv2d(const Tensor& x, const Tensor& k, int stride, int pad, Tensor& out) {
    check_conv_args(x, k, stride, pad);
    const int H = static_cast<int>(x.dim(0)), W = static_cast<int>(x.dim(1));
    const int C = static_cast<int>(x.dim(2));
    const int kh = static_cast<int>(k.dim(0)), kw = static_cast<int>(k.dim(1));
    const int Co = static_cast<int>(k.dim(3));
    require(static_cast<int>(k.dim(2)) == C, "conv kernel channels " + shape_str(k) +
                                                 " do not match input " + shape_str(x));
    if (kh > H + 2 * pad || kw > W + 2 * pad)
        throw DimError("conv kernel " + shape_str(k) + " larger than padded input " + shape_str(x));
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    out = Tensor(Shape{static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo),
                       static_cast<std::size_t>(Co)});
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < Ho; ++i) {
        for (int j = 0; j < Wo; ++j) {
            double* opix = out.data.data() + (i * Wo + j) * Co;
            for (int u = 0; u < kh; ++u) {
                const int xi = static_cast<int>(i) * stride + u - pad;
                if (xi < 0 || xi >= H) continue;
                for (int v = 0; v < kw; ++v) {
                    const int xj = j * stride + v - pad;
                    if (xj < 0 || xj >= W) continue;
                    const double* xpix = x.data.data() + (static_cast<std::size_t>(xi) * W + xj) * C;
                    const double* krow = k.data.data() + ((static_cast<std::size_t>(u) * kw + v) * C) * Co;
                    for (int c = 0; c < C; ++c) {
                        const double xv = xpix[c];
                        const double* kc = krow + static_cast<std::size_t>(c) * Co;
                        for (int co = 0; co < Co; ++co) opix[co] += xv * kc[co];
                    }
                }
            }
        }
    }
}

void conv2d_backward(const Tensor& x, const Tensor& k, int stride, int pad, const Tensor& dy,
                     Tensor& dx_acc, Tensor& dk_acc) {
    const int H = static_cast<int>(x.dim(0)), W = static_cast<int>(x.dim(1));
    const int C = static_cast<int>(x.dim(2));
    const int kh = static_cast<int>(k.dim(0)), kw = static_cast<int>(k.dim(1));
    const int Co = static_cast<int>(k.dim(3));
    const int Ho = static_cast<int>(dy.dim(0)), Wo = static_cast<int>(dy.dim(1));
    // serial scatter keeps the accumulation order fixed; batch-level
    // parallelism above this kernel soaks up the cores during training
    for (int i = 0; i < Ho; ++i) {
        for (int j = 0; j < Wo; ++j) {
            const double* gpix = dy.data.data() + (static_cast<std::size_t>(i) * Wo + j) * Co;
            for (int u = 0; u < kh; ++u) {
                const int xi = i * stride + u - pad;
                if (xi < 0 || xi >= H) continue;
                for (int v = 0; v < kw; ++v) {
                    const int xj = j * stride + v - pad;
                    if (xj < 0 || xj >= W) continue;
                    const std::size_t xoff = (static_cast<std::size_t>(xi) * W + xj) * C;
                    const std::size_t koff = (static_cast<std::size_t>(u) * kw + v) * C * Co;
                    for (int c = 0; c < C; ++c) {
                        const std::size_t kco = koff + static_cast<std::size_t>(c) * Co;
                        double dxv = 0.0;
                        for (int co = 0; co < Co; ++co) {
                            dxv += k.data[kco + co] * gpix[co];
                            dk_acc.data[kco + co] += x.data[xoff + c] * gpix[co];
                        }
                        dx_acc.data[xoff + c] += dxv;
                    }
                }
            }
        }
    }
}

void conv_transpose2d(const Tensor& x, const Tensor& k, int stride, Tensor& out) {
    require(x.rank() == 3, "conv_transpose input must be [h,w,C], got " + shape_str(x));
    require(k.rank() == 4, "conv_transpose kernel must be [kh,kw,Cout,Cin], got " + shape_str(k));
    if (stride < 1) throw DimError("conv_transpose stride must be >= 1");
    const int h = static_cast<int>(x.dim(0)), w = static_cast<int>(x.dim(1));
    const int C = static_cast<int>(x.dim(2));
    const int kh = static_cast<int>(k.dim(0)), kw = static_cast<int>(k.dim(1));
    const int Co = static_cast<int>(k.dim(2));
    require(static_cast<int>(k.dim(3)) == C, "conv_transpose kernel channels " + shape_str(k) +
                                                 " do not match input " + shape_str(x));
    const int Ho = (h - 1) * stride + kh;
    const int Wo = (w - 1) * stride + kw;
    out = Tensor(Shape{static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo),
                       static_cast<std::size_t>(Co)});
    // gather form: each output pixel sums its contributing taps, so rows can
    // be processed in parallel with a fixed inner order
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t p = 0; p < Ho; ++p) {
        for (int q = 0; q < Wo; ++q) {
            double* opix = out.data.data() + (p * Wo + q) * Co;
            for (int u = 0; u < kh; ++u) {
                const int ip = static_cast<int>(p) - u;
                if (ip < 0 || ip % stride != 0) continue;
                const int i = ip / stride;
                if (i >= h) continue;
                for (int v = 0; v < kw; ++v) {
                    const int jq = q - v;
                    if (jq < 0 || jq % stride != 0) continue;
                    const int j = jq / stride;
                    if (j >= w) continue;
                    const double* xpix = x.data.data() + (static_cast<std::size_t>(i) * w + j) * C;
                    const double* ktap = k.data.data() + ((static_cast<std::size_t>(u) * kw + v) * Co) * C;
                    for (int co = 0; co < Co; ++co) {
                        const double* kc = ktap + static_cast<std::size_t>(co) * C;
                        double acc = 0.0;
                        for (int c = 0; c < C; ++c) acc += xpix[c] * kc[c];
                        opix[co] += acc;
                    }
                }
            }
        }
    }
}

void conv_transpose2d_backward(const Tensor& x, const Tensor& k, int stride, const Tensor& dy,
                               Tensor& dx_acc, Tensor& dk_acc) {
    const int h = static_cast<int>(x.dim(0)), w = static_cast<int>(x.dim(1));
    const int C = static_cast<int>(x.dim(2));
    const int kh = static_cast<int>(k.dim(0)), kw = static_cast<int>(k.dim(1));
    const int Co = static_cast<int>(k.dim(2));
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const std::size_t xoff = (static_cast<std::size_t>(i) * w + j) * C;
            for (int u = 0; u < kh; ++u) {
                for (int v = 0; v < kw; ++v) {
                    const std::size_t goff =
                        ((static_cast<std::size_t>(i) * stride + u) * dy.dim(1) +
                         (static_cast<std::size_t>(j) * stride + v)) *
                        Co;
                    const std::size_t koff = (static_cast<std::size_t>(u) * kw + v) * Co * C;
                    for (int co = 0; co < Co; ++co) {
                        const double g = dy.data[goff + co];
                        const std::size_t kco = koff + static_cast<std::size_t>(co) * C;
                        for (int c = 0; c < C; ++c) {
                            dx_acc.data[xoff + c] += k.data[kco + c] * g;
                            dk_acc.data[kco + c] += x.data[xoff + c] * g;
                        }
                    }
                }
            }
        }
    }
}

void avg_pool2d(const Tensor& x, int k, Tensor& out) {
    const int H = static_cast<int>(x.dim(0)), W = static_cast<int>(x.dim(1));
    const int C = static_cast<int>(x.dim(2));
    if (H % k != 0) throw DimError("grid height " + std::to_string(H) + " not divisible by " + std::to_string(k));
    if (W % k != 0) throw DimError("grid width " + std::to_string(W) + " not divisible by " + std::to_string(k));
    const int Ho = H / k, Wo = W / k;
    const double inv = 1.0 / (k * k);
    out = Tensor(Shape{static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo),
                       static_cast<std::size_t>(C)});
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j)
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int u = 0; u < k; ++u)
                    for (int v = 0; v < k; ++v)
                        acc += x.at3(static_cast<std::size_t>(i * k + u),
                                     static_cast<std::size_t>(j * k + v),
                                     static_cast<std::size_t>(c));
                out.at3(static_cast<std::size_t>(i), static_cast<std::size_t>(j),
                        static_cast<std::size_t>(c)) = acc * inv;
            }
}

void avg_pool2d_backward(int k, const Tensor& dy, Tensor& dx_acc) {
    const int Ho = static_cast<int>(dy.dim(0)), Wo = static_cast<int>(dy.dim(1));
    const int C = static_cast<int>(dy.dim(2));
    const double inv = 1.0 / (k * k);
    for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j)
            for (int c = 0; c < C; ++c) {
                const double g = dy.at3(static_cast<std::size_t>(i), static_cast<std::size_t>(j),
                                        static_cast<std::size_t>(c)) *
                                 inv;
                for (int u = 0; u < k; ++u)
                    for (int v = 0; v < k; ++v)
                        dx_acc.at3(static_cast<std::size_t>(i * k + u),
                                   static_cast<std::size_t>(j * k + v),
                                   static_cast<std::size_t>(c)) += g;
            }
}

void nearest_up2d(const Tensor& x, int k, Tensor& out) {
    const int h = static_cast<int>(x.dim(0)), w = static_cast<int>(x.dim(1));
    const int C = static_cast<int>(x.dim(2));
    out = Tensor(Shape{static_cast<std::size_t>(h * k), static_cast<std::size_t>(w * k),
                       static_cast<std::size_t>(C)});
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t p = 0; p < h * k; ++p)
        for (int q = 0; q < w * k; ++q)
            for (int c = 0; c < C; ++c)
                out.at3(static_cast<std::size_t>(p), static_cast<std::size_t>(q),
                        static_cast<std::size_t>(c)) =
                    x.at3(static_cast<std::size_t>(p / k), static_cast<std::size_t>(q / k),
                          static_cast<std::size_t>(c));
}

void nearest_up2d_backward(int k, const Tensor& dy, Tensor& dx_acc) {
    const int Ho = static_cast<int>(dy.dim(0)), Wo = static_cast<int>(dy.dim(1));
    const int C = static_cast<int>(dy.dim(2));
    for (int p = 0; p < Ho; ++p)
        for (int q = 0; q < Wo; ++q)
            for (int c = 0; c < C; ++c)
                dx_acc.at3(static_cast<std::size_t>(p / k), static_cast<std::size_t>(q / k),
                           static_cast<std::size_t>(c)) +=
                    dy.at3(static_cast<std::size_t>(p), static_cast<std::size_t>(q),
                           static_cast<std::size_t>(c));
}

void layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, Tensor& out,
                Tensor& mean, Tensor& rstd) {
    const std::size_t d = x.cols(), T = x.lead_rows();
    require(gamma.numel() == d && beta.numel() == d,
            "layer_norm affine params must be [" + std::to_string(d) + "], got " +
                shape_str(gamma) + " and " + shape_str(beta));
    if (eps <= 0) throw DimError("layer_norm eps must be > 0");
    out = Tensor(x.shape);
    mean = Tensor(Shape{T});
    rstd = Tensor(Shape{T});
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t t = 0; t < sp(T); ++t) {
        const double* xr = x.data.data() + t * sp(d);
        double* yr = out.data.data() + t * sp(d);
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double r = 1.0 / std::sqrt(var + eps);
        mean.data[t] = mu;
        rstd.data[t] = r;
        for (std::size_t j = 0; j < d; ++j)
            yr[j] = (xr[j] - mu) * r * gamma.data[j] + beta.data[j];
    }
}

void layer_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& mean,
                         const Tensor& rstd, const Tensor& dy, Tensor& dx_acc, Tensor& dgamma_acc,
                         Tensor& dbeta_acc) {
    const std::size_t d = x.cols(), T = x.lead_rows();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t t = 0; t < sp(T); ++t) {
        const double* xr = x.data.data() + t * sp(d);
        const double* gr = dy.data.data() + t * sp(d);
        double* dxr = dx_acc.data.data() + t * sp(d);
        const double mu = mean.data[t], r = rstd.data[t];
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (xr[j] - mu) * r;
            const double gg = gr[j] * gamma.data[j];
            sum_g += gg;
            sum_gx += gg * xhat;
        }
        const double invd = 1.0 / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (xr[j] - mu) * r;
            const double gg = gr[j] * gamma.data[j];
            dxr[j] += r * (gg - invd * sum_g - xhat * invd * sum_gx);
        }
    }
    // parameter grads: gather over tokens per output column, parallel across columns
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < sp(d); ++j) {
        double dg = 0.0, db = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            const double xhat = (x.data[t * d + static_cast<std::size_t>(j)] - mean.data[t]) * rstd.data[t];
            const double g = dy.data[t * d + static_cast<std::size_t>(j)];
            dg += g * xhat;
            db += g;
        }
        dgamma_acc.data[j] += dg;
        dbeta_acc.data[j] += db;
    }
}

void winattn_forward(const Tensor& q, const Tensor& k, const Tensor& v, const WindowPlan& plan,
                     double scale, bool coverage_norm, Tensor& out, Tensor* attn_save) {
    const std::size_t dh = q.cols();
    const std::size_t T = q.lead_rows();
    require(k.lead_rows() == T && v.lead_rows() == T && k.cols() == dh && v.cols() == dh,
            "winattn q/k/v shapes disagree");
    require(T == static_cast<std::size_t>(plan.H) * plan.W, "winattn token count mismatch");
    const int nw = plan.windows();
    const int M = plan.tokens_per_window();
    const int nbj = static_cast<int>(plan.base_j.size());
    Tensor blocks(Shape{static_cast<std::size_t>(nw), static_cast<std::size_t>(M), dh});
    if (attn_save)
        *attn_save = Tensor(Shape{static_cast<std::size_t>(nw), static_cast<std::size_t>(M),
                                  static_cast<std::size_t>(M)});
#pragma omp parallel
    {
        Tensor qw(Shape{static_cast<std::size_t>(M), dh});
        Tensor kw(Shape{static_cast<std::size_t>(M), dh});
        Tensor vw(Shape{static_cast<std::size_t>(M), dh});
        Tensor sc(Shape{static_cast<std::size_t>(M), static_cast<std::size_t>(M)});
#pragma omp for schedule(static)
        for (std::ptrdiff_t wi = 0; wi < nw; ++wi) {
            const int bi = plan.base_i[static_cast<std::size_t>(wi) / nbj];
            const int bj = plan.base_j[static_cast<std::size_t>(wi) % nbj];
            for (int u = 0; u < plan.w; ++u)
                for (int vv = 0; vv < plan.w; ++vv) {
                    const std::size_t t = static_cast<std::size_t>(bi + u) * plan.W + (bj + vv);
                    const std::size_t a = static_cast<std::size_t>(u * plan.w + vv);
                    for (std::size_t c = 0; c < dh; ++c) {
                        qw.data[a * dh + c] = q.data[t * dh + c];
                        kw.data[a * dh + c] = k.data[t * dh + c];
                        vw.data[a * dh + c] = v.data[t * dh + c];
                    }
                }
            // scores, softmax, weighted values inside the window
            for (int a = 0; a < M; ++a) {
                double mx = -1e300;
                for (int b = 0; b < M; ++b) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c)
                        acc += qw.data[static_cast<std::size_t>(a) * dh + c] *
                               kw.data[static_cast<std::size_t>(b) * dh + c];
                    acc *= scale;
                    sc.at2(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) = acc;
                    mx = std::max(mx, acc);
                }
                double sum = 0.0;
                for (int b = 0; b < M; ++b) {
                    const double e = std::exp(sc.at2(static_cast<std::size_t>(a),
                                                     static_cast<std::size_t>(b)) - mx);
                    sc.at2(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) = e;
                    sum += e;
                }
                const double inv = 1.0 / sum;
                double* orow = blocks.data.data() + (static_cast<std::size_t>(wi) * M + a) * dh;
                for (std::size_t c = 0; c < dh; ++c) orow[c] = 0.0;
                for (int b = 0; b < M; ++b) {
                    const double p = sc.at2(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) * inv;
                    if (attn_save)
                        attn_save->data[(static_cast<std::size_t>(wi) * M + a) * M + b] = p;
                    const double* vrow = vw.data.data() + static_cast<std::size_t>(b) * dh;
                    for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vrow[c];
                }
            }
        }
    }
    // scatter-add in fixed window order, then coverage average
    out = Tensor(q.shape);
    for (int wi = 0; wi < nw; ++wi) {
        const int bi = plan.base_i[static_cast<std::size_t>(wi) / nbj];
        const int bj = plan.base_j[static_cast<std::size_t>(wi) % nbj];
        for (int u = 0; u < plan.w; ++u)
            for (int vv = 0; vv < plan.w; ++vv) {
                const std::size_t t = static_cast<std::size_t>(bi + u) * plan.W + (bj + vv);
                const std::size_t a = static_cast<std::size_t>(u * plan.w + vv);
                const double* brow = blocks.data.data() + (static_cast<std::size_t>(wi) * M + a) * dh;
                for (std::size_t c = 0; c < dh; ++c) out.data[t * dh + c] += brow[c];
            }
    }
    if (coverage_norm) {
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t t = 0; t < sp(T); ++t) {
            const double ic = plan.inv_coverage[t];
            for (std::size_t c = 0; c < dh; ++c) out.data[t * dh + c] *= ic;
        }
    }
}

void winattn_backward(const Tensor& q, const Tensor& k, const Tensor& v, const WindowPlan& plan,
                      double scale, bool coverage_norm, const Tensor& attn, const Tensor& dy,
                      Tensor& dq_acc, Tensor& dk_acc, Tensor& dv_acc) {
    const std::size_t dh = q.cols();
    const std::size_t T = q.lead_rows();
    const int nw = plan.windows();
    const int M = plan.tokens_per_window();
    const int nbj = static_cast<int>(plan.base_j.size());
    Tensor dq_blocks(Shape{static_cast<std::size_t>(nw), static_cast<std::size_t>(M), dh});
    Tensor dk_blocks(Shape{static_cast<std::size_t>(nw), static_cast<std::size_t>(M), dh});
    Tensor dv_blocks(Shape{static_cast<std::size_t>(nw), static_cast<std::size_t>(M), dh});
#pragma omp parallel
    {
        Tensor qw(Shape{static_cast<std::size_t>(M), dh});
        Tensor kw(Shape{static_cast<std::size_t>(M), dh});
        Tensor vw(Shape{static_cast<std::size_t>(M), dh});
        Tensor gw(Shape{static_cast<std::size_t>(M), dh});
        Tensor dA(Shape{static_cast<std::size_t>(M), static_cast<std::size_t>(M)});
#pragma omp for schedule(static)
        for (std::ptrdiff_t wi = 0; wi < nw; ++wi) {
            const int bi = plan.base_i[static_cast<std::size_t>(wi) / nbj];
            const int bj = plan.base_j[static_cast<std::size_t>(wi) % nbj];
            for (int u = 0; u < plan.w; ++u)
                for (int vv = 0; vv < plan.w; ++vv) {
                    const std::size_t t = static_cast<std::size_t>(bi + u) * plan.W + (bj + vv);
                    const std::size_t a = static_cast<std::size_t>(u * plan.w + vv);
                    const double cov = coverage_norm ? plan.inv_coverage[t] : 1.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        qw.data[a * dh + c] = q.data[t * dh + c];
                        kw.data[a * dh + c] = k.data[t * dh + c];
                        vw.data[a * dh + c] = v.data[t * dh + c];
                        gw.data[a * dh + c] = dy.data[t * dh + c] * cov;
                    }
                }
            const double* A = attn.data.data() + static_cast<std::size_t>(wi) * M * M;
            double* dqb = dq_blocks.data.data() + static_cast<std::size_t>(wi) * M * dh;
            double* dkb = dk_blocks.data.data() + static_cast<std::size_t>(wi) * M * dh;
            double* dvb = dv_blocks.data.data() + static_cast<std::size_t>(wi) * M * dh;
            // dv = A^T g
            for (int b = 0; b < M; ++b)
                for (std::size_t c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (int a = 0; a < M; ++a)
                        acc += A[static_cast<std::size_t>(a) * M + b] *
                               gw.data[static_cast<std::size_t>(a) * dh + c];
                    dvb[static_cast<std::size_t>(b) * dh + c] = acc;
                }
            // dA = g v^T, then softmax backward to scores
            for (int a = 0; a < M; ++a) {
                double dot = 0.0;
                for (int b = 0; b < M; ++b) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c)
                        acc += gw.data[static_cast<std::size_t>(a) * dh + c] *
                               vw.data[static_cast<std::size_t>(b) * dh + c];
                    dA.at2(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) = acc;
                    dot += acc * A[static_cast<std::size_t>(a) * M + b];
                }
                for (int b = 0; b < M; ++b) {
                    const double ds = A[static_cast<std::size_t>(a) * M + b] *
                                      (dA.at2(static_cast<std::size_t>(a),
                                              static_cast<std::size_t>(b)) -
                                       dot) *
                                      scale;
                    dA.at2(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) = ds;
                }
            }
            // dq = dS k, dk = dS^T q
            for (int a = 0; a < M; ++a)
                for (std::size_t c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (int b = 0; b < M; ++b)
                        acc += dA.at2(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) *
                               kw.data[static_cast<std::size_t>(b) * dh + c];
                    dqb[static_cast<std::size_t>(a) * dh + c] = acc;
                }
            for (int b = 0; b < M; ++b)
                for (std::size_t c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (int a = 0; a < M; ++a)
                        acc += dA.at2(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) *
                               qw.data[static_cast<std::size_t>(a) * dh + c];
                    dkb[static_cast<std::size_t>(b) * dh + c] = acc;
                }
        }
    }
    (void)T;
    for (int wi = 0; wi < nw; ++wi) {
        const int bi = plan.base_i[static_cast<std::size_t>(wi) / nbj];
        const int bj = plan.base_j[static_cast<std::size_t>(wi) % nbj];
        for (int u = 0; u < plan.w; ++u)
            for (int vv = 0; vv < plan.w; ++vv) {
                const std::size_t t = static_cast<std::size_t>(bi + u) * plan.W + (bj + vv);
                const std::size_t a = static_cast<std::size_t>(u * plan.w + vv);
                const std::size_t boff = (static_cast<std::size_t>(wi) * M + a) * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                    dq_acc.data[t * dh + c] += dq_blocks.data[boff + c];
                    dk_acc.data[t * dh + c] += dk_blocks.data[boff + c];
                    dv_acc.data[t * dh + c] += dv_blocks.data[boff + c];
                }
            }
    }
}

}  // namespace kernels
}  // namespace mano
