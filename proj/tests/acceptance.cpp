// Acceptance suite: one pass/fail line per criterion.
//
//  1 oracle equivalence of the degenerate hierarchy against naive attention
//  2 finite-difference gradient check on a full tiny model
//  3 linear-complexity scaling (analytic flops tight, wall time loose)
//  4 parameter-count invariance across hierarchy depths
//  5 solver convergence order and dataset residuals
//  6 Darcy training at desk scale (absolute quality, baseline margin,
//    multipole vs windowed ordering across seeds)
//  7 sampler ablation trains end to end in both modes
//  8 bit-identical artifacts on rerun (wall-clock columns excluded)
//
// Usage: acceptance [criterion numbers...]   (default: all)
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mano/bench.hpp"
#include "mano/gradcheck.hpp"
#include "mano/ref.hpp"
#include "mano/training.hpp"

using namespace mano;

namespace {

int g_pass = 0, g_fail = 0;
std::string g_log;

void report(int criterion, bool ok, const std::string& detail) {
    char line[512];
    std::snprintf(line, sizeof(line), "[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", criterion,
                  detail.c_str());
    std::fputs(line, stdout);
    std::fflush(stdout);
    g_log += line;
    (ok ? g_pass : g_fail) += 1;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

/// drops the trailing wall-clock column of a metrics csv
std::string strip_last_column(const std::string& csv) {
    std::string out;
    std::istringstream is(csv);
    std::string line;
    while (std::getline(is, line)) {
        out += line.substr(0, line.rfind(','));
        out += '\n';
    }
    return out;
}

/// drops the wall_ns_median column (index 3) of a scaling csv
std::string strip_wall_column(const std::string& csv) {
    std::string out;
    std::istringstream is(csv);
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line[0] != '#') {
            std::vector<std::string> cells;
            std::istringstream ls(line);
            std::string cell;
            while (std::getline(ls, cell, ',')) cells.push_back(cell);
            if (cells.size() == 6) {
                line = cells[0] + "," + cells[1] + "," + cells[2] + "," + cells[4] + "," + cells[5];
            }
        }
        out += line;
        out += '\n';
    }
    return out;
}

std::string out_dir() {
    const char* env = std::getenv("MANO_ACCEPT_OUT");
    return env && *env ? env : "acceptance_out";
}

// ---------------------------------------------------------------- criterion 1

bool criterion1(std::string& detail) {
    double worst = 0.0;
    int trials = 0;
    for (int t = 0; t < 108; ++t) {
        const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(t);
        const int n = 2 + t % 3;            // 2, 3, 4
        const int d = 1 << (1 + (t / 3) % 3);  // 2, 4, 8
        MultipoleLayerParams params(1, d, 2, true, SamplerMode::LearnedConv, false);
        SplitMix64 rng(seed);
        params.init(rng);
        for (double& v : params.ln_gamma.data) v = 1.0 + 0.1 * rng.gaussian();
        for (double& v : params.ln_beta.data) v = 0.1 * rng.gaussian();
        for (int h = 0; h < 1; ++h) {
            for (double& v : params.attention.b_q[0].data) v = 0.1 * rng.gaussian();
            for (double& v : params.attention.b_k[0].data) v = 0.1 * rng.gaussian();
            for (double& v : params.attention.b_v[0].data) v = 0.1 * rng.gaussian();
        }
        Tensor x = Tensor::gaussian({static_cast<std::size_t>(n), static_cast<std::size_t>(n),
                                     static_cast<std::size_t>(d)},
                                    rng);
        MultipoleConfig cfg;
        cfg.levels = 0;
        cfg.window = WindowSpec{n, n, true};  // one full-grid window
        Graph g;
        MultipoleNodes nodes = register_multipole_params(g, params, "mp");
        Tensor got = g.val(multipole_attention(g, g.input(x), nodes, params, cfg));
        // independent route: straight-line layer norm + pairwise attention loops
        Tensor expect = ref::full_attention(
            ref::layer_norm(x, params.ln_gamma, params.ln_beta, cfg.ln_eps), params.attention);
        worst = std::max(worst, max_abs_diff(got, expect));
        ++trials;
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "oracle equivalence: %d instances (n in {2,3,4}, d in {2,4,8}), max |diff| "
                  "%.2e (tolerance 1e-12)",
                  trials, worst);
    detail = buf;
    return worst < 1e-12;
}

// ---------------------------------------------------------------- criterion 2

GradCheckReport run_grad_check() {
    ModelConfig cfg;
    cfg.dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.d_head = -1;
    cfg.mlp_dim = 8;
    cfg.window = 2;
    cfg.stride = 1;
    cfg.levels = 2;
    cfg.emb_dropout = 0.0;
    cfg.att_dropout = 0.0;
    OperatorModel m = OperatorModel::create(cfg, 7);
    SplitMix64 rng(77);
    m.decode_w = Tensor::gaussian(m.decode_w.shape, rng, 0.5);  // open the gradient path
    Field a({8, 8});
    for (double& v : a.data) v = 3.0 + 9.0 * (rng.uniform() < 0.5);
    Tensor target = Tensor::gaussian({8, 8, 1}, rng, 0.5);

    auto loss_eval = [&]() {
        Graph g;
        ForwardGraph fg = forward_graph(m, g, a, nullptr);
        return g.scalar(g.mse(fg.output, g.input(target)));
    };
    Graph g;
    ForwardGraph fg = forward_graph(m, g, a, nullptr);
    g.backward(g.mse(fg.output, g.input(target)));
    std::vector<std::pair<std::string, Tensor*>> plist;
    m.for_each_param([&](const std::string& name, Tensor& t) { plist.emplace_back(name, &t); });
    std::vector<Tensor> analytic;
    for (Graph::NodeId id : fg.param_ids) analytic.push_back(g.grad(id));
    GradCheckOptions opt;  // step 1e-5, tolerance 1e-4, 64-scalar subsample
    return grad_check(plist, loss_eval, analytic, opt);
}

bool criterion2(std::string& detail) {
    const GradCheckReport rep = run_grad_check();
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "gradient check (n=8, d=8, depth=2, L=2, w=2, s=1): worst rel err %.2e at %s "
                  "(tolerance 1e-4)",
                  rep.worst, rep.worst_param.c_str());
    detail = buf;
    return rep.pass;
}

// ---------------------------------------------------------------- criterion 3

BenchOptions accept_bench_options() {
    BenchOptions opt;
    opt.variants = {"dense", "windowed", "multipole"};
    opt.sizes = {16, 32, 64, 128};
    opt.d = 32;
    opt.heads = 2;
    opt.window = 2;
    opt.stride = 1;
    opt.repeats = 5;
    opt.dense_cap = 64;
    opt.seed = 0;
    return opt;
}

bool criterion3(std::string& detail, std::vector<BenchRecord>* records_out) {
    const BenchOptions opt = accept_bench_options();
    std::vector<std::string> notes;
    const std::vector<BenchRecord> recs = run_scaling(opt, &notes);
    std::filesystem::remove(out_dir() + "/scaling.csv");  // one block per suite run
    append_scaling_csv(out_dir() + "/scaling.csv", opt, recs, notes);
    if (records_out) *records_out = recs;
    const auto fits = fit_scaling_exponent(recs);
    const double mpf = fits.at("multipole").flops_slope;
    const double df = fits.at("dense").flops_slope;
    const double mpw = fits.at("multipole").wall_slope;
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "scaling slopes: multipole flops %.3f (in [0.95,1.05]), dense score flops %.3f "
                  "(in [1.95,2.05]), multipole wall %.3f (in [0.8,1.5])",
                  mpf, df, mpw);
    detail = buf;
    return mpf > 0.95 && mpf < 1.05 && df > 1.95 && df < 2.05 && mpw > 0.8 && mpw < 1.5;
}

// ---------------------------------------------------------------- criterion 4

bool criterion4(std::string& detail) {
    std::vector<std::int64_t> counts;
    for (int L : {1, 2, 3}) {
        ModelConfig cfg;
        cfg.dim = 32;
        cfg.depth = 2;
        cfg.heads = 2;
        cfg.d_head = -1;
        cfg.mlp_dim = 128;
        cfg.levels = L;
        OperatorModel m = OperatorModel::create(cfg, 5);
        counts.push_back(m.count_params());
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "parameter counts for L in {1,2,3}: %lld / %lld / %lld (exact equality)",
                  static_cast<long long>(counts[0]), static_cast<long long>(counts[1]),
                  static_cast<long long>(counts[2]));
    detail = buf;
    return counts[0] == counts[1] && counts[1] == counts[2];
}

// ---------------------------------------------------------------- criterion 5

double mms_max_error(int n) {
    const double pi = 3.14159265358979323846;
    Field a = Tensor::full({static_cast<std::size_t>(n), static_cast<std::size_t>(n)}, 1.0);
    const StencilOp op = assemble_stencil(a);
    std::vector<double> rhs(static_cast<std::size_t>(n) * n), exact(rhs.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double x = (i + 0.5) / n, y = (j + 0.5) / n;
            exact[static_cast<std::size_t>(i) * n + j] = std::sin(pi * x) * std::sin(pi * y);
            rhs[static_cast<std::size_t>(i) * n + j] =
                2.0 * pi * pi * exact[static_cast<std::size_t>(i) * n + j];
        }
    const CgResult res = cg_solve(op, rhs, 1e-12, 200000);
    double err = 0;
    for (std::size_t t = 0; t < rhs.size(); ++t)
        err = std::max(err, std::fabs(res.x[t] - exact[t]));
    return err;
}

const char* kDatasetPath = "darcy_n16.bin";

bool criterion5(std::string& detail) {
    const double e16 = mms_max_error(16), e32 = mms_max_error(32), e64 = mms_max_error(64);
    const double r1 = e16 / e32, r2 = e32 / e64;
    generate_dataset(16, 500, 0, out_dir() + "/" + kDatasetPath);
    const std::vector<DarcySample> data = load_dataset(out_dir() + "/" + kDatasetPath);
    double worst_res = 0.0;
    for (const DarcySample& s : data) worst_res = std::max(worst_res, sample_residual(s));
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "solver order: error ratios %.2f, %.2f (in [3.5,4.5]); worst reload residual "
                  "%.2e over 500 samples (< 1e-8)",
                  r1, r2, worst_res);
    detail = buf;
    return r1 > 3.5 && r1 < 4.5 && r2 > 3.5 && r2 < 4.5 && worst_res < 1e-8;
}

// ---------------------------------------------------------------- criterion 6

ModelConfig accept_model_config(AttentionKind kind, SamplerMode sampler) {
    ModelConfig cfg;
    cfg.dim = 32;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.d_head = -1;
    cfg.mlp_dim = 128;
    cfg.window = 2;
    cfg.stride = 1;
    cfg.levels = -1;
    cfg.kind = kind;
    cfg.sampler = sampler;
    // dropout off at this scale: train and validation error track each other
    // (nothing to regularize), and 0.1 only slows fitting within 50 epochs
    cfg.emb_dropout = 0.0;
    cfg.att_dropout = 0.0;
    return cfg;
}

TrainConfig accept_train_config(std::uint64_t seed) {
    TrainConfig tc;  // epochs 50, batch 16, lr 3e-4 cosine to 1e-6, wd 0.01
    tc.seed = seed;
    return tc;
}

/// trains one acceptance-scale model; returns the final-epoch val rel mse
double run_training(const std::vector<DarcySample>& data, AttentionKind kind, SamplerMode sampler,
                    std::uint64_t seed, const std::string& run_dir) {
    ModelConfig cfg = accept_model_config(kind, sampler);
    const TrainConfig tc = accept_train_config(seed);
    fit_normalizer(cfg, data, split_dataset(data.size(), tc.train_frac).train);
    OperatorModel m = OperatorModel::create(cfg, seed);
    const RunMetrics r = train(m, data, tc, run_dir);
    return r.epochs.back().val_rel_mse;
}

double baseline_mean_field(const std::vector<DarcySample>& data) {
    const SplitIndices split = split_dataset(data.size(), 0.9);
    const std::size_t n2 = data[0].u.numel();
    Field mean_u(data[0].u.shape);
    for (std::size_t i : split.train)
        for (std::size_t t = 0; t < n2; ++t) mean_u.data[t] += data[i].u.data[t];
    for (double& v : mean_u.data) v /= static_cast<double>(split.train.size());
    double acc = 0.0;
    for (std::size_t i : split.val) acc += rel_mse(mean_u, data[i].u);
    return acc / static_cast<double>(split.val.size());
}

bool criterion6(std::string& detail) {
    const std::vector<DarcySample> data = load_dataset(out_dir() + "/" + kDatasetPath);
    const double baseline = baseline_mean_field(data);

    std::map<std::uint64_t, double> mp_final, win_final;
    for (std::uint64_t seed : {0, 1, 2}) {
        mp_final[seed] =
            run_training(data, AttentionKind::Multipole, SamplerMode::LearnedConv, seed,
                         out_dir() + "/train_multipole_seed" + std::to_string(seed));
        win_final[seed] =
            run_training(data, AttentionKind::Windowed, SamplerMode::LearnedConv, seed,
                         out_dir() + "/train_windowed_seed" + std::to_string(seed));
    }
    const bool a_ok = mp_final[0] < 0.10;
    const bool b_ok = mp_final[0] * 2.0 <= baseline;
    bool c_ok = true;
    for (std::uint64_t seed : {0, 1, 2}) c_ok = c_ok && mp_final[seed] <= win_final[seed];
    char buf[320];
    std::snprintf(buf, sizeof(buf),
                  "desk-scale training: multipole final val rel MSE %.4f (< 0.10 %s); mean-field "
                  "baseline %.4f (2x margin %s); multipole vs windowed per seed: %.4f/%.4f, "
                  "%.4f/%.4f, %.4f/%.4f (ordering %s)",
                  mp_final[0], a_ok ? "ok" : "FAIL", baseline, b_ok ? "ok" : "FAIL", mp_final[0],
                  win_final[0], mp_final[1], win_final[1], mp_final[2], win_final[2],
                  c_ok ? "ok" : "FAIL");
    detail = buf;
    return a_ok && b_ok && c_ok;
}

// ---------------------------------------------------------------- criterion 7

bool criterion7(std::string& detail) {
    const std::vector<DarcySample> data = load_dataset(out_dir() + "/" + kDatasetPath);
    // learned-convolution run artifacts come from criterion 6 (seed 0); the
    // pooling sampler trains here under identical settings
    const std::string conv_dir = out_dir() + "/train_multipole_seed0";
    const std::string pool_dir = out_dir() + "/train_pool_seed0";
    if (!std::filesystem::exists(conv_dir + "/metrics.csv"))
        run_training(data, AttentionKind::Multipole, SamplerMode::LearnedConv, 0, conv_dir);
    const double pool_final =
        run_training(data, AttentionKind::Multipole, SamplerMode::AveragePool, 0, pool_dir);
    // read the conv run's final val back from its metrics file
    std::istringstream is(slurp(conv_dir + "/metrics.csv"));
    std::string line, last;
    while (std::getline(is, line))
        if (!line.empty() && line[0] != 'e') last = line;
    double conv_final = 0.0;
    {
        std::istringstream ls(last);
        std::string cell;
        for (int c = 0; c <= 3 && std::getline(ls, cell, ','); ++c)
            if (c == 3) conv_final = std::stod(cell);
    }
    const bool both_exist = std::filesystem::exists(conv_dir + "/metrics.csv") &&
                            std::filesystem::exists(pool_dir + "/metrics.csv");
    char buf[240];
    std::snprintf(buf, sizeof(buf),
                  "sampler ablation: learned conv final val %.4f, average pool final val %.4f "
                  "(direction: conv %s pool; both runs completed, CSVs recorded)",
                  conv_final, pool_final,
                  conv_final < pool_final ? "better than" : "not better than");
    detail = buf;
    return both_exist && std::isfinite(conv_final) && std::isfinite(pool_final);
}

// ---------------------------------------------------------------- criterion 8

bool criterion8(std::string& detail) {
    const std::string dir = out_dir();
    const std::string rerun = dir + "/rerun";
    std::filesystem::create_directories(rerun);
    std::vector<std::string> problems;

    // dataset bytes
    generate_dataset(16, 500, 0, rerun + "/" + kDatasetPath);
    if (slurp(dir + "/" + kDatasetPath) != slurp(rerun + "/" + kDatasetPath))
        problems.push_back("dataset bytes differ");

    // every training run from criteria 6 and 7
    const std::vector<DarcySample> data = load_dataset(dir + "/" + kDatasetPath);
    struct Run {
        std::string name;
        AttentionKind kind;
        SamplerMode sampler;
        std::uint64_t seed;
    };
    std::vector<Run> runs;
    for (std::uint64_t seed : {0, 1, 2}) {
        runs.push_back({"train_multipole_seed" + std::to_string(seed), AttentionKind::Multipole,
                        SamplerMode::LearnedConv, seed});
        runs.push_back({"train_windowed_seed" + std::to_string(seed), AttentionKind::Windowed,
                        SamplerMode::LearnedConv, seed});
    }
    runs.push_back({"train_pool_seed0", AttentionKind::Multipole, SamplerMode::AveragePool, 0});
    for (const Run& r : runs) {
        run_training(data, r.kind, r.sampler, r.seed, rerun + "/" + r.name);
        if (strip_last_column(slurp(dir + "/" + r.name + "/metrics.csv")) !=
            strip_last_column(slurp(rerun + "/" + r.name + "/metrics.csv")))
            problems.push_back(r.name + " metrics differ");
        for (const char* ck : {"/best.ckpt", "/last.ckpt"})
            if (slurp(dir + "/" + r.name + ck) != slurp(rerun + "/" + r.name + ck))
                problems.push_back(r.name + ck + " bytes differ");
    }

    // bench CSV, wall-clock column excluded
    {
        const BenchOptions opt = accept_bench_options();
        std::vector<std::string> notes;
        const auto recs = run_scaling(opt, &notes);
        append_scaling_csv(rerun + "/scaling.csv", opt, recs, notes);
        if (strip_wall_column(slurp(dir + "/scaling.csv")) !=
            strip_wall_column(slurp(rerun + "/scaling.csv")))
            problems.push_back("bench CSV differs beyond wall-clock columns");
    }

    // grad-check report values
    {
        const GradCheckReport r1 = run_grad_check();
        const GradCheckReport r2 = run_grad_check();
        if (r1.worst != r2.worst || r1.pass != r2.pass)
            problems.push_back("grad-check report not reproducible");
    }

    if (problems.empty()) {
        detail = "rerun of criteria 1-7 artifacts: dataset, 7 training runs (metrics + "
                 "checkpoints), bench CSV and grad-check all bit-identical "
                 "(wall-clock columns excluded)";
        return true;
    }
    detail = "rerun mismatches:";
    for (const std::string& p : problems) detail += " [" + p + "]";
    return false;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    auto enabled = [&](int c) { return wanted.empty() || wanted.count(c) > 0; };
    std::filesystem::create_directories(out_dir());

    std::string detail;
    if (enabled(1)) report(1, criterion1(detail), detail);
    if (enabled(2)) report(2, criterion2(detail), detail);
    if (enabled(3)) report(3, criterion3(detail, nullptr), detail);
    if (enabled(4)) report(4, criterion4(detail), detail);
    if (enabled(5) || enabled(6) || enabled(7) || enabled(8)) {
        // criteria 6-8 consume the dataset criterion 5 generates
        const bool ok5 = criterion5(detail);
        if (enabled(5)) report(5, ok5, detail);
    }
    if (enabled(6)) report(6, criterion6(detail), detail);
    if (enabled(7)) report(7, criterion7(detail), detail);
    if (enabled(8)) report(8, criterion8(detail), detail);

    char tail[64];
    std::snprintf(tail, sizeof(tail), "%d passed, %d failed\n", g_pass, g_fail);
    std::fputs(tail, stdout);
    g_log += tail;
    std::ofstream(out_dir() + "/acceptance.log", std::ios::binary) << g_log;
    return g_fail == 0 ? 0 : 1;
}
