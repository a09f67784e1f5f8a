#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mano/multipole.hpp"

namespace mano {

struct BenchRecord {
    std::string variant;        // dense | windowed | multipole
    int n = 0;                  // grid side
    std::int64_t N = 0;         // n^2 tokens
    std::int64_t wall_ns = 0;   // median of >= warm repeats
    std::int64_t flops = 0;     // frozen analytic count (dense rows hold the
                                // quadratic score term; see run_scaling)
    std::int64_t peak_bytes = 0;
};

struct BenchOptions {
    std::vector<std::string> variants{"dense", "windowed", "multipole"};
    std::vector<int> sizes{16, 32, 64, 128};
    int d = 32;
    int heads = 2;
    int window = 2;
    int stride = 1;
    int repeats = 5;
    int dense_cap = 64;  // dense runs above this side are skipped with a note
    std::uint64_t seed = 0;
};

/// Times single-threaded forward passes of the attention variants on random
/// inputs, recording wall time, the frozen analytic flop count and the tensor
/// arena's peak allocation during one pass. The analytic `flops` column is a
/// pure function of the configuration; timers never feed into it. Dense rows
/// record the window-quadratic score/AV/softmax term (the projections are
/// linear and identical across variants), so the dense log-log slope isolates
/// the O(N^2) part the variant is named for.
std::vector<BenchRecord> run_scaling(const BenchOptions& opt, std::vector<std::string>* notes);

/// Appends one run block to the CSV: a deterministic run-id comment line, the
/// header `variant,n,N,wall_ns_median,flops,peak_bytes`, one row per record,
/// plus any skip notes as comment lines.
void append_scaling_csv(const std::string& path, const BenchOptions& opt,
                        const std::vector<BenchRecord>& records,
                        const std::vector<std::string>& notes);

struct ScalingFit {
    double flops_slope = 0.0;
    double wall_slope = 0.0;
};

/// Least-squares slope of log(cost) vs log(N) per variant; needs >= 3 sizes.
std::map<std::string, ScalingFit> fit_scaling_exponent(const std::vector<BenchRecord>& records);

/// slope of log(y) vs log(x) by ordinary least squares
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace mano
