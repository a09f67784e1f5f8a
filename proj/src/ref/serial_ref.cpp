#include "mano/ref.hpp"

#include <cmath>

#include "mano/errors.hpp"

namespace mano::ref {

Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.lead_rows(), k = a.cols(), n = b.dim(1);
    Shape os = a.shape;
    os.back() = n;
    Tensor out(os);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += a.data[i * k + t] * b.data[t * n + j];
            out.data[i * n + j] = acc;
        }
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad) {
    const int H = static_cast<int>(x.dim(0)), W = static_cast<int>(x.dim(1));
    const int C = static_cast<int>(x.dim(2));
    const int kh = static_cast<int>(k.dim(0)), kw = static_cast<int>(k.dim(1));
    const int Co = static_cast<int>(k.dim(3));
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor out({static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo),
                static_cast<std::size_t>(Co)});
    for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j)
            for (int co = 0; co < Co; ++co) {
                double acc = 0.0;
                for (int u = 0; u < kh; ++u)
                    for (int v = 0; v < kw; ++v)
                        for (int c = 0; c < C; ++c) {
                            const int xi = i * stride + u - pad;
                            const int xj = j * stride + v - pad;
                            if (xi < 0 || xi >= H || xj < 0 || xj >= W) continue;
                            acc += x.at3(static_cast<std::size_t>(xi), static_cast<std::size_t>(xj),
                                         static_cast<std::size_t>(c)) *
                                   k.data[((static_cast<std::size_t>(u) * kw + v) * C + c) * Co + co];
                        }
                out.at3(static_cast<std::size_t>(i), static_cast<std::size_t>(j),
                        static_cast<std::size_t>(co)) = acc;
            }
    return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& k, int stride) {
    const int h = static_cast<int>(x.dim(0)), w = static_cast<int>(x.dim(1));
    const int C = static_cast<int>(x.dim(2));
    const int kh = static_cast<int>(k.dim(0)), kw = static_cast<int>(k.dim(1));
    const int Co = static_cast<int>(k.dim(2));
    const int Ho = (h - 1) * stride + kh;
    const int Wo = (w - 1) * stride + kw;
    Tensor out({static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo),
                static_cast<std::size_t>(Co)});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int u = 0; u < kh; ++u)
                for (int v = 0; v < kw; ++v)
                    for (int co = 0; co < Co; ++co)
                        for (int c = 0; c < C; ++c)
                            out.at3(static_cast<std::size_t>(i * stride + u),
                                    static_cast<std::size_t>(j * stride + v),
                                    static_cast<std::size_t>(co)) +=
                                x.at3(static_cast<std::size_t>(i), static_cast<std::size_t>(j),
                                      static_cast<std::size_t>(c)) *
                                k.data[((static_cast<std::size_t>(u) * kw + v) * Co + co) * C + c];
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t T = x.lead_rows(), d = x.cols();
    Tensor out(x.shape);
    for (std::size_t t = 0; t < T; ++t) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x.data[t * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x.data[t * d + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double r = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j)
            out.data[t * d + j] = (x.data[t * d + j] - mu) * r * gamma.data[j] + beta.data[j];
    }
    return out;
}

Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
    const std::size_t N = q.lead_rows(), d = q.cols();
    Tensor out(q.shape);
    for (std::size_t i = 0; i < N; ++i) {
        double mx = -1e300;
        std::vector<double> logits(N);
        for (std::size_t j = 0; j < N; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += q.data[i * d + c] * k.data[j * d + c];
            logits[j] = dot * scale;
            mx = std::max(mx, logits[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < N; ++j) denom += std::exp(logits[j] - mx);
        for (std::size_t j = 0; j < N; ++j) {
            const double a = std::exp(logits[j] - mx) / denom;
            for (std::size_t c = 0; c < d; ++c) out.data[i * d + c] += a * v.data[j * d + c];
        }
    }
    return out;
}

namespace {

Tensor project(const Tensor& xh, const Tensor& w, const Tensor* b) {
    Tensor p = matmul(xh, w);
    if (b)
        for (std::size_t t = 0; t < p.lead_rows(); ++t)
            for (std::size_t c = 0; c < p.cols(); ++c) p.data[t * p.cols() + c] += b->data[c];
    return p;
}

Tensor head_slice(const Tensor& x, int h, int d_head) {
    const std::size_t dh = static_cast<std::size_t>(d_head);
    const std::size_t T = x.lead_rows(), d = x.cols();
    Tensor out({T, dh});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < dh; ++c)
            out.data[t * dh + c] = x.data[t * d + static_cast<std::size_t>(h) * dh + c];
    return out;
}

void head_store(Tensor& x, const Tensor& part, int h, int d_head) {
    const std::size_t dh = static_cast<std::size_t>(d_head);
    const std::size_t T = x.lead_rows(), d = x.cols();
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < dh; ++c)
            x.data[t * d + static_cast<std::size_t>(h) * dh + c] = part.data[t * dh + c];
}

}  // namespace

Tensor full_attention(const Tensor& x, const AttentionParams& p) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.d_head));
    Tensor out(x.shape);
    for (int h = 0; h < p.heads; ++h) {
        const std::size_t hh = static_cast<std::size_t>(h);
        const Tensor xh = head_slice(x, h, p.d_head);
        const Tensor q = project(xh, p.w_q[hh], p.use_bias ? &p.b_q[hh] : nullptr);
        const Tensor k = project(xh, p.w_k[hh], p.use_bias ? &p.b_k[hh] : nullptr);
        const Tensor v = project(xh, p.w_v[hh], p.use_bias ? &p.b_v[hh] : nullptr);
        head_store(out, attention_head(q, k, v, scale), h, p.d_head);
    }
    return out;
}

Tensor windowed_attention(const Tensor& x, const AttentionParams& p, int H, int W,
                          const WindowSpec& spec) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.d_head));
    const int w = spec.window, s = spec.stride;
    const std::size_t d = x.cols();
    Tensor out(x.shape);
    std::vector<int> coverage(static_cast<std::size_t>(H) * W, 0);
    for (int bi = 0; bi + w <= H; bi += s)
        for (int bj = 0; bj + w <= W; bj += s)
            for (int u = 0; u < w; ++u)
                for (int vv = 0; vv < w; ++vv) coverage[(bi + u) * W + (bj + vv)] += 1;

    for (int h = 0; h < p.heads; ++h) {
        const std::size_t hh = static_cast<std::size_t>(h);
        const std::size_t dh = static_cast<std::size_t>(p.d_head);
        const Tensor xh = head_slice(x, h, p.d_head);
        const Tensor q = project(xh, p.w_q[hh], p.use_bias ? &p.b_q[hh] : nullptr);
        const Tensor k = project(xh, p.w_k[hh], p.use_bias ? &p.b_k[hh] : nullptr);
        const Tensor v = project(xh, p.w_v[hh], p.use_bias ? &p.b_v[hh] : nullptr);
        Tensor acc({static_cast<std::size_t>(H) * W, dh});
        for (int bi = 0; bi + w <= H; bi += s)
            for (int bj = 0; bj + w <= W; bj += s) {
                const int M = w * w;
                Tensor qw({static_cast<std::size_t>(M), dh});
                Tensor kw({static_cast<std::size_t>(M), dh});
                Tensor vw({static_cast<std::size_t>(M), dh});
                for (int u = 0; u < w; ++u)
                    for (int vv = 0; vv < w; ++vv) {
                        const std::size_t t = static_cast<std::size_t>(bi + u) * W + (bj + vv);
                        const std::size_t a = static_cast<std::size_t>(u * w + vv);
                        for (std::size_t c = 0; c < dh; ++c) {
                            qw.data[a * dh + c] = q.data[t * dh + c];
                            kw.data[a * dh + c] = k.data[t * dh + c];
                            vw.data[a * dh + c] = v.data[t * dh + c];
                        }
                    }
                const Tensor ow = attention_head(qw, kw, vw, scale);
                for (int u = 0; u < w; ++u)
                    for (int vv = 0; vv < w; ++vv) {
                        const std::size_t t = static_cast<std::size_t>(bi + u) * W + (bj + vv);
                        const std::size_t a = static_cast<std::size_t>(u * w + vv);
                        for (std::size_t c = 0; c < dh; ++c)
                            acc.data[t * dh + c] += ow.data[a * dh + c];
                    }
            }
        for (std::size_t t = 0; t < acc.lead_rows(); ++t)
            for (std::size_t c = 0; c < dh; ++c) {
                const double val = spec.coverage_norm ? acc.data[t * dh + c] / coverage[t]
                                                      : acc.data[t * dh + c];
                out.data[t * d + hh * dh + c] = val;
            }
    }
    return out;
}

Tensor multipole_attention(const Tensor& x, const MultipoleLayerParams& p,
                           const MultipoleConfig& cfg) {
    const int k = cfg.sampling_rate;
    const std::size_t d = x.cols();
    const std::size_t dh = static_cast<std::size_t>(p.attention.d_head);

    std::vector<Tensor> levels{x};
    for (int l = 1; l <= cfg.levels; ++l) {
        const Tensor& prev = levels.back();
        Tensor next;
        if (p.sampler == SamplerMode::AveragePool) {
            const std::size_t Ho = prev.dim(0) / static_cast<std::size_t>(k);
            const std::size_t Wo = prev.dim(1) / static_cast<std::size_t>(k);
            next = Tensor({Ho, Wo, d});
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j)
                    for (std::size_t c = 0; c < d; ++c) {
                        double acc = 0.0;
                        for (int u = 0; u < k; ++u)
                            for (int v = 0; v < k; ++v)
                                acc += prev.at3(i * k + static_cast<std::size_t>(u),
                                                j * k + static_cast<std::size_t>(v), c);
                        next.at3(i, j, c) = acc / (k * k);
                    }
        } else {
            for (int h = 0; h < p.attention.heads; ++h) {
                Tensor xh({prev.dim(0), prev.dim(1), dh});
                for (std::size_t t = 0; t < prev.lead_rows(); ++t)
                    for (std::size_t c = 0; c < dh; ++c)
                        xh.data[t * dh + c] = prev.data[t * d + static_cast<std::size_t>(h) * dh + c];
                const Tensor oh = conv2d(xh, p.down_kernel[static_cast<std::size_t>(h)], k, 0);
                if (h == 0) next = Tensor({oh.dim(0), oh.dim(1), d});
                for (std::size_t t = 0; t < oh.lead_rows(); ++t)
                    for (std::size_t c = 0; c < dh; ++c)
                        next.data[t * d + static_cast<std::size_t>(h) * dh + c] = oh.data[t * dh + c];
            }
        }
        levels.push_back(std::move(next));
    }

    Tensor out;
    for (int l = 0; l <= cfg.levels; ++l) {
        const Tensor& xl = levels[static_cast<std::size_t>(l)];
        Tensor contrib = windowed_attention(layer_norm(xl, p.ln_gamma, p.ln_beta, cfg.ln_eps),
                                            p.attention, static_cast<int>(xl.dim(0)),
                                            static_cast<int>(xl.dim(1)), cfg.window);
        for (int j = 0; j < l; ++j) {
            if (p.sampler == SamplerMode::AveragePool) {
                const std::size_t Ho = contrib.dim(0) * static_cast<std::size_t>(k);
                const std::size_t Wo = contrib.dim(1) * static_cast<std::size_t>(k);
                Tensor up({Ho, Wo, d});
                for (std::size_t i = 0; i < Ho; ++i)
                    for (std::size_t jj = 0; jj < Wo; ++jj)
                        for (std::size_t c = 0; c < d; ++c)
                            up.at3(i, jj, c) = contrib.at3(i / static_cast<std::size_t>(k),
                                                           jj / static_cast<std::size_t>(k), c);
                contrib = std::move(up);
            } else {
                const std::vector<Tensor>& upk = p.share_du ? p.down_kernel : p.up_kernel;
                Tensor up;
                for (int h = 0; h < p.attention.heads; ++h) {
                    Tensor xh({contrib.dim(0), contrib.dim(1), dh});
                    for (std::size_t t = 0; t < contrib.lead_rows(); ++t)
                        for (std::size_t c = 0; c < dh; ++c)
                            xh.data[t * dh + c] =
                                contrib.data[t * d + static_cast<std::size_t>(h) * dh + c];
                    const Tensor oh = conv_transpose2d(xh, upk[static_cast<std::size_t>(h)], k);
                    if (h == 0) up = Tensor({oh.dim(0), oh.dim(1), d});
                    for (std::size_t t = 0; t < oh.lead_rows(); ++t)
                        for (std::size_t c = 0; c < dh; ++c)
                            up.data[t * d + static_cast<std::size_t>(h) * dh + c] =
                                oh.data[t * dh + c];
                }
                contrib = std::move(up);
            }
        }
        if (l == 0) {
            out = std::move(contrib);
        } else {
            for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += contrib.data[i];
        }
    }
    return out;
}

void AdamWRef::step(std::vector<double>& theta, const std::vector<double>& g, double lr,
                    double beta1, double beta2, double eps, double wd) {
    if (m.size() != theta.size()) {
        m.assign(theta.size(), 0.0);
        v.assign(theta.size(), 0.0);
    }
    ++t;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] = theta[i] - lr * wd * theta[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        const double mh = m[i] / (1.0 - std::pow(beta1, t));
        const double vh = v[i] / (1.0 - std::pow(beta2, t));
        theta[i] = theta[i] - lr * mh / (std::sqrt(vh) + eps);
    }
}

}  // namespace mano::ref
