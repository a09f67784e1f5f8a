// mano: data generation, training, evaluation, gradient checking, solver
// verification and scaling benchmarks for the multipole attention operator.
//
// Exit codes: 0 success, 2 argument/config error, 3 I/O failure,
// 4 numerical abort, 5 verification failure.
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mano/bench.hpp"
#include "mano/errors.hpp"
#include "mano/gradcheck.hpp"
#include "mano/ref.hpp"
#include "mano/training.hpp"

namespace {

using namespace mano;

constexpr int kExitOk = 0;
constexpr int kExitArg = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitVerify = 5;

std::string default_outdir() {
    const char* env = std::getenv("MANO_OUTDIR");
    return env && *env ? env : ".";
}

/// applies key=value lines to options the command line left unset; command
/// line flags override the file, unknown keys are hard errors
void apply_config_file(CLI::App& cmd, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config file '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": expected key=value, got '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        CLI::Option* opt = nullptr;
        for (CLI::Option* o : cmd.get_options()) {
            for (const std::string& lname : o->get_lnames())
                if (lname == key) opt = o;
        }
        if (!opt || key == "config" || key == "help")
            throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key '" + key +
                              "' for subcommand " + cmd.get_name());
        if (!opt->results().empty()) continue;  // flags override the file
        opt->add_result(value);
        opt->run_callback();
    }
}

/// every subcommand echoes its effective configuration before doing work
void write_resolved_config(CLI::App& app, const std::string& outdir) {
    std::filesystem::create_directories(outdir);
    std::ofstream f(outdir + "/config.resolved", std::ios::binary);
    if (!f) throw IoError("cannot write " + outdir + "/config.resolved");
    f << "subcommand=" << app.get_name() << "\n";
    for (const CLI::Option* opt : app.get_options()) {
        const std::string name = opt->get_lnames().empty() ? "" : opt->get_lnames()[0];
        if (name.empty() || name == "help" || name == "config") continue;
        std::string value;
        if (!opt->results().empty()) {
            for (const std::string& r : opt->results()) value += (value.empty() ? "" : ",") + r;
        } else {
            value = opt->get_default_str();
        }
        f << name << "=" << value << "\n";
    }
}

struct ModelFlags {
    int dim = 128, depth = 8, heads = 4, d_head = -1, mlp_dim = 128;
    int window = 2, stride = 1, levels = -1, sampling_rate = 2;
    double emb_dropout = 0.1, att_dropout = 0.1;
    std::string attention = "multipole";
    std::string sampler = "conv";
    bool no_qkv_bias = false, share_du = false;

    void attach(CLI::App& cmd) {
        cmd.add_option("--dim", dim, "embedding dimension");
        cmd.add_option("--depth", depth, "transformer blocks");
        cmd.add_option("--heads", heads, "attention heads");
        cmd.add_option("--d-head", d_head, "per-head width (-1: dim/heads)");
        cmd.add_option("--mlp-dim", mlp_dim, "MLP hidden width");
        cmd.add_option("--window", window, "attention window side");
        cmd.add_option("--stride", stride, "window stride (< window overlaps)");
        cmd.add_option("--levels", levels, "hierarchy levels (-1: max for resolution)");
        cmd.add_option("--sampling-rate", sampling_rate, "down/upsampling factor");
        cmd.add_option("--emb-dropout", emb_dropout, "embedding dropout");
        cmd.add_option("--att-dropout", att_dropout, "attention output dropout");
        cmd.add_option("--attention", attention, "multipole|dense|windowed");
        cmd.add_option("--sampler", sampler, "conv|pool sampling mode");
        cmd.add_flag("--no-qkv-bias", no_qkv_bias, "disable q/k/v biases");
        cmd.add_flag("--share-du", share_du, "share one kernel for down and up sampling");
    }

    ModelConfig to_config() const {
        ModelConfig cfg;
        cfg.dim = dim;
        cfg.depth = depth;
        cfg.heads = heads;
        cfg.d_head = d_head;
        cfg.mlp_dim = mlp_dim;
        cfg.window = window;
        cfg.stride = stride;
        cfg.levels = levels;
        cfg.sampling_rate = sampling_rate;
        cfg.emb_dropout = emb_dropout;
        cfg.att_dropout = att_dropout;
        cfg.kind = attention_kind_from_string(attention);
        cfg.sampler = sampler_mode_from_string(sampler);
        cfg.use_bias = !no_qkv_bias;
        cfg.share_du = share_du;
        cfg.validate();
        return cfg;
    }
};

int cmd_gen_data(int n, int count, std::uint64_t seed, double low, double high,
                 const std::string& out) {
    GenOptions opt;
    opt.low = low;
    opt.high = high;
    const DatasetSummary sum = generate_dataset(n, count, seed, out, opt);
    std::printf("wrote %s: count=%u n=%u u_mean=%.6g u_std=%.6g\n", out.c_str(), sum.count, sum.n,
                sum.u_mean, sum.u_std);
    return kExitOk;
}

int cmd_train(const std::string& data_path, const std::string& outdir, const ModelFlags& mf,
              TrainConfig tc, const std::string& resume) {
    const std::vector<DarcySample> data = load_dataset(data_path);
    OperatorModel model;
    int start_epoch = 0, start_step = 0;
    if (!resume.empty()) {
        Checkpoint ck = load_checkpoint(resume);
        model = std::move(ck.model);
        start_epoch = ck.epoch + 1;
        start_step = ck.step;
        std::printf("resuming from %s at epoch %d\n", resume.c_str(), start_epoch);
    } else {
        ModelConfig cfg = mf.to_config();
        fit_normalizer(cfg, data, split_dataset(data.size(), tc.train_frac).train);
        model = OperatorModel::create(cfg, tc.seed);
    }
    tc.verbose = true;
    const RunMetrics r = train(model, data, tc, outdir, start_epoch, start_step);
    std::printf("done: best val_rel_mse %.6g at epoch %d; artifacts in %s\n", r.best_val,
                r.best_epoch, outdir.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& data_path, const std::string& ckpt, const std::string& outdir,
             const std::string& split_name, double train_frac) {
    const std::vector<DarcySample> data = load_dataset(data_path);
    Checkpoint ck = load_checkpoint(ckpt);
    SplitIndices split = split_dataset(data.size(), train_frac);
    std::vector<std::size_t> idx;
    if (split_name == "val") idx = split.val;
    else if (split_name == "train") idx = split.train;
    else if (split_name == "all")
        for (std::size_t i = 0; i < data.size(); ++i) idx.push_back(i);
    else throw ConfigError("unknown split '" + split_name + "' (val|train|all)");
    const EvalResult r = evaluate(ck.model, data, idx);
    std::filesystem::create_directories(outdir);
    const std::string csv_path = outdir + "/eval.csv";
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw IoError("cannot write " + csv_path);
    csv << "index,rel_mse\n";
    char buf[64];
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", idx[i], r.per_sample[i]);
        csv << buf;
    }
    std::printf("eval over %zu samples (%s split): mean rel_mse %.6g median %.6g -> %s\n",
                idx.size(), split_name.c_str(), r.mean, r.median, csv_path.c_str());
    return kExitOk;
}

int cmd_grad_check(int n, const ModelFlags& mf, double step, double tol, bool corrupt,
                   std::uint64_t seed) {
    ModelConfig cfg = mf.to_config();
    OperatorModel m = OperatorModel::create(cfg, seed);
    SplitMix64 rng(mix_seed(seed, 0x67636b));
    // the decode head is zero-initialized for training; give it signal so
    // gradients flow through every path under test
    m.decode_w = Tensor::gaussian(m.decode_w.shape, rng, 0.5);
    Field a({static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
    for (double& v : a.data) v = 3.0 + 9.0 * (rng.uniform() < 0.5);
    Field u = Tensor::gaussian({static_cast<std::size_t>(n), static_cast<std::size_t>(n)}, rng);
    Tensor target = u;
    target.shape = {u.dim(0), u.dim(1), 1};

    auto loss_eval = [&]() {
        Graph g;
        ForwardGraph fg = forward_graph(m, g, a, nullptr);
        return g.scalar(g.mse(fg.output, g.input(target)));
    };
    Graph g;
    ForwardGraph fg = forward_graph(m, g, a, nullptr);
    debug::corrupt_gelu_backward = corrupt;
    g.backward(g.mse(fg.output, g.input(target)));
    debug::corrupt_gelu_backward = false;
    std::vector<std::pair<std::string, Tensor*>> plist;
    m.for_each_param([&](const std::string& name, Tensor& t) { plist.emplace_back(name, &t); });
    std::vector<Tensor> analytic;
    for (Graph::NodeId id : fg.param_ids) analytic.push_back(g.grad(id));
    GradCheckOptions opt;
    opt.step = step;
    opt.tolerance = tol;
    const GradCheckReport rep = grad_check(plist, loss_eval, analytic, opt);
    for (const GradCheckEntry& e : rep.params)
        std::printf("  %-28s checked %3zu  max_rel_err %.3e\n", e.name.c_str(), e.checked,
                    e.max_rel_err);
    std::printf("grad-check %s: worst %.3e at %s (tolerance %.1e)\n",
                rep.pass ? "PASS" : "FAIL", rep.worst, rep.worst_param.c_str(), rep.tolerance);
    return rep.pass ? kExitOk : kExitVerify;
}

int cmd_verify_solver(const std::vector<int>& sizes) {
    for (int n : sizes)
        if (n < 8 || n > 512 || (n & (n - 1)) != 0)
            throw ConfigError("unknown size " + std::to_string(n) +
                              " (power of two in [8,512] expected)");
    const double pi = 3.14159265358979323846;
    std::vector<double> errs;
    std::vector<int> iters;
    for (int n : sizes) {
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
        errs.push_back(err);
        iters.push_back(res.iterations);
    }
    std::printf("%6s  %12s  %8s  %s\n", "n", "max_err", "ratio", "cg_iters");
    bool ok = true;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (i == 0) {
            std::printf("%6d  %12.4e  %8s  %d\n", sizes[i], errs[i], "-", iters[i]);
        } else {
            const double ratio = errs[i - 1] / errs[i];
            ok = ok && ratio > 3.5 && ratio < 4.5;
            std::printf("%6d  %12.4e  %8.3f  %d\n", sizes[i], errs[i], ratio, iters[i]);
        }
    }
    std::printf("convergence order %s\n", ok ? "PASS (second order)" : "FAIL");
    return ok ? kExitOk : kExitVerify;
}

int cmd_bench(const BenchOptions& opt, const std::string& outdir) {
    std::vector<std::string> notes;
    const std::vector<BenchRecord> records = run_scaling(opt, &notes);
    std::filesystem::create_directories(outdir);
    const std::string csv = outdir + "/scaling.csv";
    append_scaling_csv(csv, opt, records, notes);
    std::printf("%-10s %5s %9s %14s %14s %12s\n", "variant", "n", "N", "wall_ns", "flops",
                "peak_bytes");
    for (const BenchRecord& r : records)
        std::printf("%-10s %5d %9lld %14lld %14lld %12lld\n", r.variant.c_str(), r.n,
                    static_cast<long long>(r.N), static_cast<long long>(r.wall_ns),
                    static_cast<long long>(r.flops), static_cast<long long>(r.peak_bytes));
    for (const std::string& n : notes) std::printf("note: %s\n", n.c_str());
    for (const auto& [variant, fit] : fit_scaling_exponent(records))
        std::printf("%-10s analytic-flops slope %.3f, wall-time slope %.3f\n", variant.c_str(),
                    fit.flops_slope, fit.wall_slope);
    std::printf("scaling CSV appended to %s\n", csv.c_str());
    return kExitOk;
}

}  // namespace

namespace {
std::string g_config_path;
}

int main(int argc, char** argv) {
    CLI::App app{"multipole attention operator: Darcy-flow training and verification"};
    app.require_subcommand(1);
    std::string outdir = default_outdir();
    app.add_option("--outdir", outdir, "output directory (env MANO_OUTDIR)")
        ->capture_default_str();

    // gen-data
    CLI::App* gen = app.add_subcommand("gen-data", "generate a Darcy dataset");
    int gen_n = 16, gen_count = 100;
    std::uint64_t gen_seed = 0;
    double gen_low = 3.0, gen_high = 12.0;
    std::string gen_out = "darcy.bin";
    gen->add_option("--n", gen_n, "grid side")->capture_default_str();
    gen->add_option("--count", gen_count, "number of samples")->capture_default_str();
    gen->add_option("--seed", gen_seed, "master seed")->capture_default_str();
    gen->add_option("--low", gen_low, "coefficient low value")->capture_default_str();
    gen->add_option("--high", gen_high, "coefficient high value")->capture_default_str();
    gen->add_option("--out", gen_out, "output file")->capture_default_str();
    gen->add_option("--config", g_config_path, "key=value config file");

    // train
    CLI::App* tr = app.add_subcommand("train", "train an operator model");
    std::string tr_data, tr_resume;
    ModelFlags tr_mf;
    TrainConfig tr_tc;
    tr->add_option("--data", tr_data, "dataset file")->required();
    tr->add_option("--resume", tr_resume, "checkpoint to continue from");
    tr_mf.attach(*tr);
    tr->add_option("--epochs", tr_tc.epochs, "training epochs")->capture_default_str();
    tr->add_option("--batch", tr_tc.batch_size, "batch size")->capture_default_str();
    tr->add_option("--lr", tr_tc.lr0, "initial learning rate")->capture_default_str();
    tr->add_option("--lr-min", tr_tc.lr_min, "final learning rate")->capture_default_str();
    tr->add_option("--wd", tr_tc.weight_decay, "weight decay")->capture_default_str();
    tr->add_option("--seed", tr_tc.seed, "global seed")->capture_default_str();
    tr->add_option("--train-frac", tr_tc.train_frac, "training split fraction")
        ->capture_default_str();
    tr->add_option("--config", g_config_path, "key=value config file");

    // eval
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_data, ev_ckpt, ev_split = "val";
    double ev_frac = 0.9;
    ev->add_option("--data", ev_data, "dataset file")->required();
    ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--split", ev_split, "val|train|all")->capture_default_str();
    ev->add_option("--train-frac", ev_frac, "split fraction used in training")
        ->capture_default_str();
    ev->add_option("--config", g_config_path, "key=value config file");

    // grad-check
    CLI::App* gc = app.add_subcommand("grad-check", "finite-difference gradient check");
    int gc_n = 8;
    double gc_step = 1e-5, gc_tol = 1e-4;
    bool gc_corrupt = false;
    std::uint64_t gc_seed = 0;
    ModelFlags gc_mf;
    gc_mf.dim = 8;
    gc_mf.depth = 2;
    gc_mf.heads = 2;
    gc_mf.mlp_dim = 8;
    gc_mf.levels = 2;
    gc_mf.emb_dropout = 0.0;
    gc_mf.att_dropout = 0.0;
    gc->add_option("--n", gc_n, "grid side")->capture_default_str();
    gc->add_option("--step", gc_step, "finite-difference step")->capture_default_str();
    gc->add_option("--tol", gc_tol, "pass tolerance")->capture_default_str();
    gc->add_option("--seed", gc_seed, "seed")->capture_default_str();
    gc->add_flag("--corrupt", gc_corrupt, "corrupt a backward rule (negative control)");
    gc_mf.attach(*gc);
    gc->add_option("--config", g_config_path, "key=value config file");

    // verify-solver
    CLI::App* vs = app.add_subcommand("verify-solver", "manufactured-solution convergence table");
    std::vector<int> vs_sizes{16, 32, 64};
    vs->add_option("--sizes", vs_sizes, "grid sides")->delimiter(',')->capture_default_str();
    vs->add_option("--config", g_config_path, "key=value config file");

    // bench
    CLI::App* bn = app.add_subcommand("bench", "scaling benchmark of attention variants");
    BenchOptions bo;
    bn->add_option("--variants", bo.variants, "dense,windowed,multipole")
        ->delimiter(',')
        ->capture_default_str();
    bn->add_option("--sizes", bo.sizes, "grid sides")->delimiter(',')->capture_default_str();
    bn->add_option("--d", bo.d, "embedding dimension")->capture_default_str();
    bn->add_option("--heads", bo.heads, "attention heads")->capture_default_str();
    bn->add_option("--window", bo.window, "window side")->capture_default_str();
    bn->add_option("--stride", bo.stride, "window stride")->capture_default_str();
    bn->add_option("--repeats", bo.repeats, "timed repeats per point")->capture_default_str();
    bn->add_option("--dense-cap", bo.dense_cap, "skip dense above this side")
        ->capture_default_str();
    bn->add_option("--seed", bo.seed, "seed")->capture_default_str();
    bn->add_option("--config", g_config_path, "key=value config file");

    CLI::App* picked = nullptr;
    try {
        app.parse(argc, argv);
        picked = app.get_subcommands().front();
        if (!g_config_path.empty()) apply_config_file(*picked, g_config_path);
        write_resolved_config(*picked, outdir);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitArg;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitArg;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    }

    try {
        if (picked == gen) return cmd_gen_data(gen_n, gen_count, gen_seed, gen_low, gen_high, gen_out);
        if (picked == tr) return cmd_train(tr_data, outdir, tr_mf, tr_tc, tr_resume);
        if (picked == ev) return cmd_eval(ev_data, ev_ckpt, outdir, ev_split, ev_frac);
        if (picked == gc) return cmd_grad_check(gc_n, gc_mf, gc_step, gc_tol, gc_corrupt, gc_seed);
        if (picked == vs) return cmd_verify_solver(vs_sizes);
        if (picked == bn) return cmd_bench(bo, outdir);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitArg;
    } catch (const DimError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitArg;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
    return kExitArg;
}
