#include "mano/bench.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>

#include "mano/errors.hpp"
#include "mano/rng.hpp"

namespace mano {

namespace {

std::int64_t now_ns() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

MultipoleConfig variant_config(const std::string& variant, const BenchOptions& opt, int n) {
    MultipoleConfig mc;
    mc.sampling_rate = 2;
    if (variant == "dense") {
        mc.levels = 0;
        mc.window = WindowSpec{n, n, true};
    } else if (variant == "windowed") {
        mc.levels = 0;
        mc.window = WindowSpec{opt.window, opt.stride, true};
    } else if (variant == "multipole") {
        mc.levels = multipole_max_levels(n, 2, opt.window);
        mc.window = WindowSpec{opt.window, opt.stride, true};
    } else {
        throw ConfigError("unknown bench variant '" + variant + "'");
    }
    return mc;
}

std::int64_t variant_flops(const std::string& variant, const BenchOptions& opt,
                           const MultipoleConfig& mc, int n) {
    const std::int64_t N = static_cast<std::int64_t>(n) * n;
    if (variant == "dense")
        return attention_flops_breakdown(N, N, opt.d, opt.heads).score_term();
    if (variant == "windowed")
        return attention_flops(N, static_cast<std::int64_t>(opt.window) * opt.window, opt.d,
                               opt.heads);
    return multipole_flops(n, n, opt.d, opt.heads, mc);
}

}  // namespace

std::vector<BenchRecord> run_scaling(const BenchOptions& opt, std::vector<std::string>* notes) {
    if (opt.repeats < 1) throw ConfigError("bench repeats must be >= 1");
    for (int n : opt.sizes)
        if (n < opt.window || (n & (n - 1)) != 0)
            throw ConfigError("bench sizes must be powers of two fitting the window, got " +
                              std::to_string(n));
    // benchmarks are strictly single-threaded so timings stay comparable
    const int prev_threads = omp_get_max_threads();
    omp_set_num_threads(1);
    std::vector<BenchRecord> records;
    for (const std::string& variant : opt.variants) {
        for (int n : opt.sizes) {
            if (variant == "dense" && n > opt.dense_cap) {
                if (notes)
                    notes->push_back("dense skipped for n=" + std::to_string(n) + " (cap " +
                                     std::to_string(opt.dense_cap) + ")");
                continue;
            }
            const MultipoleConfig mc = variant_config(variant, opt, n);
            MultipoleLayerParams params(opt.heads, opt.d / opt.heads, 2, true,
                                        SamplerMode::LearnedConv, false);
            SplitMix64 rng(mix_seed(opt.seed, std::hash<std::string>{}(variant),
                                    static_cast<std::uint64_t>(n)));
            params.init(rng);
            Tensor x = Tensor::gaussian({static_cast<std::size_t>(n), static_cast<std::size_t>(n),
                                         static_cast<std::size_t>(opt.d)},
                                        rng);
            // one untimed warm pass, with the arena peak measured around it
            const std::int64_t live_before = arena::live_bytes();
            arena::reset_peak();
            Tensor warm = multipole_attention_eval(x, params, mc);
            const std::int64_t peak = arena::peak_bytes() - live_before;
            if (!warm.all_finite()) throw NumericError("bench forward produced non-finite values");
            std::vector<std::int64_t> times;
            for (int r = 0; r < opt.repeats; ++r) {
                const std::int64_t t0 = now_ns();
                Tensor out = multipole_attention_eval(x, params, mc);
                times.push_back(now_ns() - t0);
            }
            std::sort(times.begin(), times.end());
            BenchRecord rec;
            rec.variant = variant;
            rec.n = n;
            rec.N = static_cast<std::int64_t>(n) * n;
            rec.wall_ns = times[times.size() / 2];
            rec.flops = variant_flops(variant, opt, mc, n);
            rec.peak_bytes = peak;
            records.push_back(rec);
        }
    }
    omp_set_num_threads(prev_threads);
    std::sort(records.begin(), records.end(), [](const BenchRecord& a, const BenchRecord& b) {
        return a.variant != b.variant ? a.variant < b.variant : a.n < b.n;
    });
    return records;
}

void append_scaling_csv(const std::string& path, const BenchOptions& opt,
                        const std::vector<BenchRecord>& records,
                        const std::vector<std::string>& notes) {
    std::FILE* f = std::fopen(path.c_str(), "ab");
    if (!f) throw IoError("cannot open '" + path + "' for appending");
    // deterministic run id: a hash of the configuration, not a timestamp
    std::uint64_t id = mix_seed(opt.seed, static_cast<std::uint64_t>(opt.d),
                                static_cast<std::uint64_t>(opt.heads),
                                static_cast<std::uint64_t>(opt.repeats));
    for (int n : opt.sizes) id = mix_seed(id, static_cast<std::uint64_t>(n));
    for (const std::string& v : opt.variants) id = mix_seed(id, std::hash<std::string>{}(v));
    std::fprintf(f, "# run=%016llx\n", static_cast<unsigned long long>(id));
    std::fprintf(f, "variant,n,N,wall_ns_median,flops,peak_bytes\n");
    for (const BenchRecord& r : records)
        std::fprintf(f, "%s,%d,%lld,%lld,%lld,%lld\n", r.variant.c_str(), r.n,
                     static_cast<long long>(r.N), static_cast<long long>(r.wall_ns),
                     static_cast<long long>(r.flops), static_cast<long long>(r.peak_bytes));
    for (const std::string& note : notes) std::fprintf(f, "# %s\n", note.c_str());
    if (std::fflush(f) != 0) {
        std::fclose(f);
        throw IoError("csv flush failed");
    }
    std::fclose(f);
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw ConfigError("slope fit needs >= 2 matched points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::map<std::string, ScalingFit> fit_scaling_exponent(const std::vector<BenchRecord>& records) {
    std::map<std::string, std::vector<const BenchRecord*>> by_variant;
    for (const BenchRecord& r : records) by_variant[r.variant].push_back(&r);
    std::map<std::string, ScalingFit> out;
    for (auto& [variant, recs] : by_variant) {
        if (recs.size() < 3)
            throw ConfigError("variant '" + variant + "' has fewer than 3 sizes; cannot fit");
        std::vector<double> N, flops, wall;
        for (const BenchRecord* r : recs) {
            N.push_back(static_cast<double>(r->N));
            flops.push_back(static_cast<double>(r->flops));
            wall.push_back(static_cast<double>(std::max<std::int64_t>(1, r->wall_ns)));
        }
        ScalingFit fit;
        fit.flops_slope = loglog_slope(N, flops);
        fit.wall_slope = loglog_slope(N, wall);
        out[variant] = fit;
    }
    return out;
}

}  // namespace mano
