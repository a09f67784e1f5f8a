#include "mano/darcy.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <memory>

#include "mano/errors.hpp"
#include "mano/rng.hpp"

namespace {
const double kPi = 3.14159265358979323846;
}

namespace mano {

Field sample_coefficient(int n, std::uint64_t seed, double low, double high, double alpha,
                         double tau) {
    if (n < 2) throw DimError("grid side must be >= 2");
    if (low <= 0.0)
        throw ConfigError("coefficient low value must be > 0 (a <= 0 degenerates the PDE)");
    if (high <= low) throw ConfigError("coefficient high value must exceed low");

    // i.i.d. frequency coefficients, fixed draw order, constant mode dropped
    SplitMix64 rng(seed);
    const std::size_t nn = static_cast<std::size_t>(n);
    Tensor coef({nn, nn});
    for (int kx = 0; kx < n; ++kx)
        for (int ky = 0; ky < n; ++ky) {
            const double xi = rng.gaussian();
            if (kx == 0 && ky == 0) continue;
            const double amp = std::pow(static_cast<double>(kx * kx + ky * ky) + tau * tau, -alpha);
            coef.at2(static_cast<std::size_t>(kx), static_cast<std::size_t>(ky)) = amp * xi;
        }

    // cosine basis b_0 = 1, b_k(x) = sqrt(2) cos(pi k x) on cell centers;
    // the field is B^T C B evaluated with two small matrix products
    Tensor basis({nn, nn});  // [k, i]
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i) {
            const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
            basis.at2(static_cast<std::size_t>(k), static_cast<std::size_t>(i)) =
                k == 0 ? 1.0 : std::sqrt(2.0) * std::cos(kPi * k * x);
        }
    Tensor g({nn, nn});
    // t[kx, j] = sum_ky coef[kx,ky] basis[ky,j]; g[i,j] = sum_kx basis[kx,i] t[kx,j]
    Tensor t({nn, nn});
    for (std::size_t kx = 0; kx < nn; ++kx)
        for (std::size_t ky = 0; ky < nn; ++ky) {
            const double c = coef.at2(kx, ky);
            if (c == 0.0) continue;
            for (std::size_t j = 0; j < nn; ++j) t.at2(kx, j) += c * basis.at2(ky, j);
        }
    for (std::size_t kx = 0; kx < nn; ++kx)
        for (std::size_t i = 0; i < nn; ++i) {
            const double b = basis.at2(kx, i);
            if (b == 0.0) continue;
            for (std::size_t j = 0; j < nn; ++j) g.at2(i, j) += b * t.at2(kx, j);
        }

    Field a({nn, nn});
    for (std::size_t i = 0; i < a.numel(); ++i) a.data[i] = g.data[i] >= 0.0 ? high : low;
    return a;
}

StencilOp assemble_stencil(const Field& a, FaceMean mean) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1))
        throw DimError("coefficient field must be [n,n], got " + shape_str(a));
    const int n = static_cast<int>(a.dim(0));
    for (double v : a.data)
        if (v <= 0.0) throw ConfigError("coefficient field must be strictly positive");
    StencilOp op;
    op.n = n;
    op.h = 1.0 / static_cast<double>(n);
    const double inv_h2 = 1.0 / (op.h * op.h);
    const std::size_t N = static_cast<std::size_t>(n) * n;
    op.diag.assign(N, 0.0);
    op.east.assign(N, 0.0);
    op.north.assign(N, 0.0);
    auto face = [&](double ai, double aj) {
        return mean == FaceMean::Harmonic ? 2.0 * ai * aj / (ai + aj) : 0.5 * (ai + aj);
    };
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const std::size_t t = static_cast<std::size_t>(i) * n + j;
            const double ac = a.at2(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
            // east/west faces (j direction), then north/south (i direction);
            // wall faces sit half a cell away, ghost elimination gives 2a
            if (j + 1 < n) {
                const double c = face(ac, a.at2(static_cast<std::size_t>(i),
                                                static_cast<std::size_t>(j + 1))) * inv_h2;
                op.east[t] = c;
                op.diag[t] += c;
                op.diag[t + 1] += c;
            } else {
                op.diag[t] += 2.0 * ac * inv_h2;
            }
            if (j == 0) op.diag[t] += 2.0 * ac * inv_h2;
            if (i + 1 < n) {
                const double c = face(ac, a.at2(static_cast<std::size_t>(i + 1),
                                                static_cast<std::size_t>(j))) * inv_h2;
                op.north[t] = c;
                op.diag[t] += c;
                op.diag[t + static_cast<std::size_t>(n)] += c;
            } else {
                op.diag[t] += 2.0 * ac * inv_h2;
            }
            if (i == 0) op.diag[t] += 2.0 * ac * inv_h2;
        }
    }
    return op;
}

void StencilOp::apply(const std::vector<double>& x, std::vector<double>& y) const {
    const std::size_t N = static_cast<std::size_t>(n) * n;
    y.assign(N, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const std::size_t t = static_cast<std::size_t>(i) * n + j;
            double acc = diag[t] * x[t];
            if (j + 1 < n) acc -= east[t] * x[t + 1];
            if (j > 0) acc -= east[t - 1] * x[t - 1];
            if (i + 1 < n) acc -= north[t] * x[t + static_cast<std::size_t>(n)];
            if (i > 0) acc -= north[t - static_cast<std::size_t>(n)] * x[t - static_cast<std::size_t>(n)];
            y[t] = acc;
        }
    }
}

std::vector<double> uniform_rhs(int n) {
    return std::vector<double>(static_cast<std::size_t>(n) * n, 1.0);
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

CgResult cg_solve(const std::function<void(const std::vector<double>&, std::vector<double>&)>& apply,
                  const std::vector<double>& diag, const std::vector<double>& rhs, double tol,
                  int max_iter) {
    const std::size_t N = rhs.size();
    CgResult res;
    res.x.assign(N, 0.0);
    std::vector<double> r = rhs, z(N), p(N), ap(N);
    const double fnorm = std::sqrt(dot(rhs, rhs));
    if (fnorm == 0.0) return res;
    for (std::size_t i = 0; i < N; ++i) z[i] = r[i] / diag[i];
    p = z;
    double rz = dot(r, z);
    for (int it = 1; it <= max_iter; ++it) {
        apply(p, ap);
        const double alpha = rz / dot(p, ap);
        for (std::size_t i = 0; i < N; ++i) {
            res.x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res.iterations = it;
        res.rel_residual = std::sqrt(dot(r, r)) / fnorm;
        if (res.rel_residual < tol) return res;
        for (std::size_t i = 0; i < N; ++i) z[i] = r[i] / diag[i];
        const double rz_new = dot(r, z);
        const double beta = rz_new / rz;
        rz = rz_new;
        for (std::size_t i = 0; i < N; ++i) p[i] = z[i] + beta * p[i];
    }
    throw NumericError("conjugate gradient failed to reach tol " + std::to_string(tol) + " in " +
                       std::to_string(max_iter) + " iterations (residual " +
                       std::to_string(res.rel_residual) + ")");
}

CgResult cg_solve(const StencilOp& op, const std::vector<double>& rhs, double tol, int max_iter) {
    return cg_solve([&op](const std::vector<double>& x, std::vector<double>& y) { op.apply(x, y); },
                    op.diag, rhs, tol, max_iter);
}

DarcySample solve_darcy(Field a, FaceMean mean, double tol) {
    const StencilOp op = assemble_stencil(a, mean);
    const CgResult res = cg_solve(op, uniform_rhs(op.n), tol);
    DarcySample s;
    s.u = Field({a.dim(0), a.dim(1)});
    for (std::size_t i = 0; i < s.u.numel(); ++i) s.u.data[i] = res.x[i];
    s.a = std::move(a);
    return s;
}

double sample_residual(const DarcySample& s, FaceMean mean) {
    const StencilOp op = assemble_stencil(s.a, mean);
    const std::vector<double> f = uniform_rhs(op.n);
    std::vector<double> u(s.u.data.begin(), s.u.data.end()), au;
    op.apply(u, au);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        const double d = au[i] - f[i];
        num += d * d;
        den += f[i] * f[i];
    }
    return std::sqrt(num / den);
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_u32(std::FILE* f, std::uint32_t v) {
    if (std::fwrite(&v, 4, 1, f) != 1) throw IoError("dataset write failed");
}

std::uint32_t read_u32(std::FILE* f) {
    std::uint32_t v = 0;
    if (std::fread(&v, 4, 1, f) != 1) throw IoError("dataset read failed (truncated header)");
    return v;
}

}  // namespace

void write_dataset(const std::vector<DarcySample>& samples, const std::string& path) {
    if (samples.empty()) throw ConfigError("dataset must contain at least one sample");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    const std::uint32_t n = static_cast<std::uint32_t>(samples[0].a.dim(0));
    if (std::fwrite("MNO1", 4, 1, f.get()) != 1) throw IoError("dataset write failed");
    write_u32(f.get(), 1);
    write_u32(f.get(), static_cast<std::uint32_t>(samples.size()));
    write_u32(f.get(), n);
    write_u32(f.get(), 0);
    for (const DarcySample& s : samples) {
        if (s.a.dim(0) != n || s.u.dim(0) != n)
            throw ConfigError("dataset samples must share one resolution");
        if (std::fwrite(s.a.data.data(), 8, s.a.numel(), f.get()) != s.a.numel() ||
            std::fwrite(s.u.data.data(), 8, s.u.numel(), f.get()) != s.u.numel())
            throw IoError("dataset write failed");
    }
    if (std::fflush(f.get()) != 0) throw IoError("dataset flush failed");
}

std::vector<DarcySample> load_dataset(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    char magic[4];
    if (std::fread(magic, 4, 1, f.get()) != 1 || std::memcmp(magic, "MNO1", 4) != 0)
        throw IoError("'" + path + "' is not a MNO1 dataset");
    const std::uint32_t version = read_u32(f.get());
    if (version != 1) throw IoError("unsupported dataset version " + std::to_string(version));
    const std::uint32_t count = read_u32(f.get());
    const std::uint32_t n = read_u32(f.get());
    read_u32(f.get());  // reserved
    std::vector<DarcySample> samples;
    samples.reserve(count);
    const std::size_t nn = static_cast<std::size_t>(n);
    for (std::uint32_t s = 0; s < count; ++s) {
        DarcySample d;
        d.a = Field({nn, nn});
        d.u = Field({nn, nn});
        if (std::fread(d.a.data.data(), 8, d.a.numel(), f.get()) != d.a.numel() ||
            std::fread(d.u.data.data(), 8, d.u.numel(), f.get()) != d.u.numel())
            throw IoError("dataset truncated at sample " + std::to_string(s));
        samples.push_back(std::move(d));
    }
    return samples;
}

DatasetSummary generate_dataset(int n, int count, std::uint64_t seed, const std::string& path,
                                const GenOptions& opt) {
    if (count < 1) throw ConfigError("sample count must be >= 1");
    if (opt.low <= 0.0)
        throw ConfigError("coefficient low value must be > 0 (a <= 0 degenerates the PDE)");
    if (opt.high <= opt.low) throw ConfigError("coefficient high value must exceed low");
    std::vector<DarcySample> samples(static_cast<std::size_t>(count));
    // embarrassingly parallel: sample i depends only on splitmix(seed, i);
    // exceptions may not cross the omp region, so failures are collected
    std::string error;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < count; ++i) {
        try {
            const std::uint64_t si = mix_seed(seed, static_cast<std::uint64_t>(i));
            Field a = sample_coefficient(n, si, opt.low, opt.high);
            samples[static_cast<std::size_t>(i)] = solve_darcy(std::move(a), opt.mean, opt.tol);
        } catch (const std::exception& e) {
#pragma omp critical
            if (error.empty()) error = "sample " + std::to_string(i) + ": " + e.what();
        }
    }
    if (!error.empty()) throw NumericError("dataset generation failed: " + error);
    write_dataset(samples, path);
    DatasetSummary sum;
    sum.count = static_cast<std::uint32_t>(count);
    sum.n = static_cast<std::uint32_t>(n);
    double acc = 0.0, acc2 = 0.0;
    std::size_t total = 0;
    for (const DarcySample& s : samples) {
        for (double v : s.u.data) {
            acc += v;
            acc2 += v * v;
        }
        total += s.u.numel();
    }
    sum.u_mean = acc / static_cast<double>(total);
    sum.u_std = std::sqrt(std::max(0.0, acc2 / static_cast<double>(total) - sum.u_mean * sum.u_mean));
    return sum;
}

}  // namespace mano
