#include "mano/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <sstream>

#include "mano/errors.hpp"
#include "mano/graph.hpp"

namespace mano {

namespace {
const double kPi = 3.14159265358979323846;

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (lr0 <= 0.0) throw ConfigError("learning rate must be > 0");
    if (lr_min < 0.0 || lr_min > lr0) throw ConfigError("lr_min must lie in [0, lr0]");
    if (train_frac <= 0.0 || val_frac < 0.0 ||
        std::fabs(train_frac + val_frac - 1.0) > 1e-12)
        throw ConfigError("split fractions must be positive and sum to 1");
}

double rel_mse(const Tensor& pred, const Tensor& truth) {
    if (pred.numel() != truth.numel())
        throw DimError("rel_mse shape mismatch: " + shape_str(pred) + " vs " + shape_str(truth));
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = pred.data[i] - truth.data[i];
        num += d * d;
        den += truth.data[i] * truth.data[i];
    }
    if (den == 0.0) throw DimError("rel_mse is undefined for a zero truth field");
    return std::sqrt(num / den);
}

void adamw_step(std::vector<double>& params, const std::vector<double>& grads, AdamWState& state,
                int t, double lr, double beta1, double beta2, double eps, double weight_decay) {
    if (state.m.size() != params.size()) state.m.assign(params.size(), 0.0);
    if (state.v.size() != params.size()) state.v.assign(params.size(), 0.0);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= lr * weight_decay * params[i];
        const double g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

double cosine_lr(int t, int T, double lr0, double lr_min) {
    if (t < 0 || t > T) throw ConfigError("cosine_lr step outside [0, T]");
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(kPi * static_cast<double>(t) /
                                                           static_cast<double>(T)));
}

SplitIndices split_dataset(std::size_t count, double train_frac) {
    SplitIndices s;
    const std::size_t n_train = static_cast<std::size_t>(
        std::floor(train_frac * static_cast<double>(count) + 1e-9));
    for (std::size_t i = 0; i < count; ++i)
        (i < n_train ? s.train : s.val).push_back(i);
    return s;
}

void fit_normalizer(ModelConfig& cfg, const std::vector<DarcySample>& data,
                    const std::vector<std::size_t>& train_indices) {
    if (train_indices.empty()) throw ConfigError("normalizer needs a non-empty training split");
    double sa = 0, sa2 = 0, su = 0, su2 = 0;
    std::size_t n = 0;
    for (std::size_t i : train_indices) {
        const DarcySample& s = data[i];
        for (std::size_t t = 0; t < s.a.numel(); ++t) {
            sa += s.a.data[t];
            sa2 += s.a.data[t] * s.a.data[t];
            su += s.u.data[t];
            su2 += s.u.data[t] * s.u.data[t];
        }
        n += s.a.numel();
    }
    const double dn = static_cast<double>(n);
    cfg.a_mu = sa / dn;
    cfg.a_sigma = std::sqrt(std::max(1e-12, sa2 / dn - cfg.a_mu * cfg.a_mu));
    cfg.u_mu = su / dn;
    cfg.u_sigma = std::sqrt(std::max(1e-12, su2 / dn - cfg.u_mu * cfg.u_mu));
}

EvalResult evaluate(const OperatorModel& m, const std::vector<DarcySample>& data,
                    const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ConfigError("evaluation split is empty");
    EvalResult r;
    r.per_sample.resize(indices.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(indices.size()); ++i) {
        const DarcySample& s = data[indices[static_cast<std::size_t>(i)]];
        Tensor pred = forward_eval(m, s.a);
        r.per_sample[static_cast<std::size_t>(i)] = rel_mse(pred, s.u);
    }
    double acc = 0.0;
    for (double v : r.per_sample) acc += v;
    r.mean = acc / static_cast<double>(r.per_sample.size());
    std::vector<double> sorted = r.per_sample;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t h = sorted.size() / 2;
    r.median = sorted.size() % 2 ? sorted[h] : 0.5 * (sorted[h - 1] + sorted[h]);
    return r;
}

std::string config_to_text(const ModelConfig& cfg) {
    std::ostringstream os;
    os << "dim=" << cfg.dim << "\n";
    os << "depth=" << cfg.depth << "\n";
    os << "heads=" << cfg.heads << "\n";
    os << "d_head=" << cfg.d_head << "\n";
    os << "mlp_dim=" << cfg.mlp_dim << "\n";
    os << "window=" << cfg.window << "\n";
    os << "stride=" << cfg.stride << "\n";
    os << "levels=" << cfg.levels << "\n";
    os << "sampling_rate=" << cfg.sampling_rate << "\n";
    os << "emb_dropout=" << fmt_double(cfg.emb_dropout) << "\n";
    os << "att_dropout=" << fmt_double(cfg.att_dropout) << "\n";
    os << "attention=" << to_string(cfg.kind) << "\n";
    os << "sampler=" << to_string(cfg.sampler) << "\n";
    os << "use_bias=" << (cfg.use_bias ? 1 : 0) << "\n";
    os << "share_du=" << (cfg.share_du ? 1 : 0) << "\n";
    os << "a_mu=" << fmt_double(cfg.a_mu) << "\n";
    os << "a_sigma=" << fmt_double(cfg.a_sigma) << "\n";
    os << "u_mu=" << fmt_double(cfg.u_mu) << "\n";
    os << "u_sigma=" << fmt_double(cfg.u_sigma) << "\n";
    return os.str();
}

ModelConfig config_from_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw IoError("bad checkpoint config line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "dim") cfg.dim = std::stoi(val);
        else if (key == "depth") cfg.depth = std::stoi(val);
        else if (key == "heads") cfg.heads = std::stoi(val);
        else if (key == "d_head") cfg.d_head = std::stoi(val);
        else if (key == "mlp_dim") cfg.mlp_dim = std::stoi(val);
        else if (key == "window") cfg.window = std::stoi(val);
        else if (key == "stride") cfg.stride = std::stoi(val);
        else if (key == "levels") cfg.levels = std::stoi(val);
        else if (key == "sampling_rate") cfg.sampling_rate = std::stoi(val);
        else if (key == "emb_dropout") cfg.emb_dropout = std::stod(val);
        else if (key == "att_dropout") cfg.att_dropout = std::stod(val);
        else if (key == "attention") cfg.kind = attention_kind_from_string(val);
        else if (key == "sampler") cfg.sampler = sampler_mode_from_string(val);
        else if (key == "use_bias") cfg.use_bias = val == "1";
        else if (key == "share_du") cfg.share_du = val == "1";
        else if (key == "a_mu") cfg.a_mu = std::stod(val);
        else if (key == "a_sigma") cfg.a_sigma = std::stod(val);
        else if (key == "u_mu") cfg.u_mu = std::stod(val);
        else if (key == "u_sigma") cfg.u_sigma = std::stod(val);
        else throw IoError("unknown checkpoint config key: " + key);
    }
    return cfg;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_u32(std::FILE* f, std::uint32_t v) {
    if (std::fwrite(&v, 4, 1, f) != 1) throw IoError("checkpoint write failed");
}

std::uint32_t read_u32(std::FILE* f) {
    std::uint32_t v = 0;
    if (std::fread(&v, 4, 1, f) != 1) throw IoError("checkpoint read failed");
    return v;
}

}  // namespace

void save_checkpoint(const OperatorModel& m, const std::string& path, int epoch, int step) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    // trainer state rides along as two extra key=value lines in the text block
    const std::string cfg = config_to_text(m.cfg) + "epoch=" + std::to_string(epoch) +
                            "\nstep=" + std::to_string(step) + "\n";
    if (std::fwrite("MNOC", 4, 1, f.get()) != 1) throw IoError("checkpoint write failed");
    write_u32(f.get(), 1);
    write_u32(f.get(), static_cast<std::uint32_t>(cfg.size()));
    if (std::fwrite(cfg.data(), 1, cfg.size(), f.get()) != cfg.size())
        throw IoError("checkpoint write failed");
    bool fail = false;
    m.for_each_param([&](const std::string&, const Tensor& t) {
        if (std::fwrite(t.data.data(), 8, t.numel(), f.get()) != t.numel()) fail = true;
    });
    if (fail || std::fflush(f.get()) != 0) throw IoError("checkpoint write failed");
}

namespace {

Checkpoint load_checkpoint_impl(const std::string& path, OperatorModel* into) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    char magic[4];
    if (std::fread(magic, 4, 1, f.get()) != 1 || std::memcmp(magic, "MNOC", 4) != 0)
        throw IoError("'" + path + "' is not a MNOC checkpoint");
    const std::uint32_t version = read_u32(f.get());
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t cfg_len = read_u32(f.get());
    std::string cfg_text(cfg_len, '\0');
    if (std::fread(cfg_text.data(), 1, cfg_len, f.get()) != cfg_len)
        throw IoError("checkpoint truncated in config block");
    // peel the trainer-state lines off the model config
    Checkpoint ck;
    std::string model_text;
    {
        std::istringstream is(cfg_text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.rfind("epoch=", 0) == 0) ck.epoch = std::stoi(line.substr(6));
            else if (line.rfind("step=", 0) == 0) ck.step = std::stoi(line.substr(5));
            else if (!line.empty()) model_text += line + "\n";
        }
    }
    ModelConfig cfg = config_from_text(model_text);
    if (into) {
        const std::string a = config_to_text(into->cfg), b = model_text;
        if (a != b) {
            // name the first parameter whose shape disagrees, if any does
            OperatorModel file_model = OperatorModel::create(cfg, 0);
            std::vector<std::pair<std::string, Shape>> mine, theirs;
            into->for_each_param([&](const std::string& n, const Tensor& t) {
                mine.emplace_back(n, t.shape);
            });
            file_model.for_each_param([&](const std::string& n, const Tensor& t) {
                theirs.emplace_back(n, t.shape);
            });
            for (std::size_t i = 0; i < std::min(mine.size(), theirs.size()); ++i) {
                if (mine[i].first != theirs[i].first || mine[i].second != theirs[i].second)
                    throw ConfigError("checkpoint parameter mismatch at '" + theirs[i].first +
                                      "' " + shape_str(theirs[i].second) + " vs model '" +
                                      mine[i].first + "' " + shape_str(mine[i].second));
            }
            if (mine.size() != theirs.size())
                throw ConfigError("checkpoint parameter mismatch: model has " +
                                  std::to_string(mine.size()) + " tensors, checkpoint has " +
                                  std::to_string(theirs.size()) + " (first extra: '" +
                                  (mine.size() > theirs.size() ? mine[theirs.size()].first
                                                               : theirs[mine.size()].first) +
                                  "')");
            throw ConfigError("checkpoint hyperparameters do not match the model configuration");
        }
        ck.model = std::move(*into);
    } else {
        ck.model = OperatorModel::create(cfg, 0);
    }
    std::string err;
    ck.model.for_each_param([&](const std::string& name, Tensor& t) {
        if (!err.empty()) return;
        if (std::fread(t.data.data(), 8, t.numel(), f.get()) != t.numel())
            err = "checkpoint parameter '" + name + "' is truncated or shaped differently (" +
                  shape_str(t) + " expected)";
    });
    if (!err.empty()) throw ConfigError(err);
    // a well-formed checkpoint ends exactly at the last parameter
    char extra;
    if (std::fread(&extra, 1, 1, f.get()) == 1)
        throw ConfigError("checkpoint has trailing data; parameter shapes do not match the config");
    return ck;
}

}  // namespace

Checkpoint load_checkpoint(const std::string& path) { return load_checkpoint_impl(path, nullptr); }

void load_checkpoint_into(OperatorModel& m, const std::string& path) {
    Checkpoint ck = load_checkpoint_impl(path, &m);
    m = std::move(ck.model);
}

namespace {

std::vector<std::pair<std::string, Tensor*>> param_ptrs(OperatorModel& m) {
    std::vector<std::pair<std::string, Tensor*>> out;
    m.for_each_param([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

void pack_params(OperatorModel& m, std::vector<double>& flat) {
    flat.clear();
    m.for_each_param([&](const std::string&, Tensor& t) {
        flat.insert(flat.end(), t.data.begin(), t.data.end());
    });
}

void unpack_params(OperatorModel& m, const std::vector<double>& flat) {
    std::size_t off = 0;
    m.for_each_param([&](const std::string&, Tensor& t) {
        for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = flat[off + i];
        off += t.numel();
    });
}

void shuffle_indices(std::vector<std::size_t>& idx, SplitMix64& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.below(i)]);
}

}  // namespace

RunMetrics train(OperatorModel& m, const std::vector<DarcySample>& data, const TrainConfig& cfg,
                 const std::string& out_dir, int start_epoch, int start_step) {
    cfg.validate();
    if (data.empty()) throw ConfigError("training dataset is empty");
    std::filesystem::create_directories(out_dir);
    const SplitIndices split = split_dataset(data.size(), cfg.train_frac);
    if (split.train.empty()) throw ConfigError("training split is empty");
    if (split.val.empty()) throw ConfigError("validation split is empty");

    const std::string metrics_path = out_dir + "/metrics.csv";
    FilePtr metrics(std::fopen(metrics_path.c_str(), start_epoch == 0 ? "wb" : "ab"));
    if (!metrics) throw IoError("cannot open '" + metrics_path + "' for writing");
    if (start_epoch == 0) std::fprintf(metrics.get(), "epoch,lr,train_mse,val_rel_mse,seconds\n");

    const int steps_per_epoch =
        (static_cast<int>(split.train.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = cfg.epochs * steps_per_epoch;
    const std::int64_t n_params = m.count_params();

    std::vector<double> flat_params, flat_grads(static_cast<std::size_t>(n_params));
    AdamWState opt_state;
    RunMetrics metrics_out;
    metrics_out.best_val = 1e300;

    int step = start_step;
    std::vector<std::size_t> order = split.train;
    std::vector<std::vector<double>> sample_grads;
    std::vector<double> sample_losses;
    std::vector<double> last_good;
    pack_params(m, last_good);

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        SplitMix64 shuffle_rng(mix_seed(cfg.seed, 0x73687566, static_cast<std::uint64_t>(epoch)));
        order = split.train;
        shuffle_indices(order, shuffle_rng);

        double train_loss_acc = 0.0;
        std::size_t train_loss_count = 0;
        for (int b = 0; b < steps_per_epoch; ++b) {
            const std::size_t lo = static_cast<std::size_t>(b) * cfg.batch_size;
            const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
            const std::size_t bs = hi - lo;
            sample_grads.assign(bs, {});
            sample_losses.assign(bs, 0.0);

            std::string error;
            // batch elements in parallel; gradients summed in index order below
#pragma omp parallel for schedule(dynamic)
            for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(bs); ++si) {
                try {
                    const std::size_t di = order[lo + static_cast<std::size_t>(si)];
                    const DarcySample& sample = data[di];
                    SplitMix64 drop_rng(mix_seed(cfg.seed, 0x64726f70,
                                                 static_cast<std::uint64_t>(step),
                                                 static_cast<std::uint64_t>(di)));
                    Graph g;
                    ForwardGraph fg = forward_graph(m, g, sample.a, &drop_rng);
                    Tensor target = sample.u;
                    target.shape = {sample.u.dim(0), sample.u.dim(1), 1};
                    const Graph::NodeId loss = g.mse(fg.output, g.input(std::move(target)));
                    sample_losses[static_cast<std::size_t>(si)] = g.scalar(loss);
                    g.backward(loss);
                    std::vector<double>& grads = sample_grads[static_cast<std::size_t>(si)];
                    grads.reserve(static_cast<std::size_t>(n_params));
                    for (Graph::NodeId id : fg.param_ids) {
                        const Tensor& gr = g.grad(id);
                        grads.insert(grads.end(), gr.data.begin(), gr.data.end());
                    }
                } catch (const std::exception& e) {
#pragma omp critical
                    if (error.empty()) error = e.what();
                }
            }
            if (!error.empty()) throw NumericError("training step failed: " + error);

            double batch_loss = 0.0;
            for (double l : sample_losses) batch_loss += l;
            batch_loss /= static_cast<double>(bs);
            if (!std::isfinite(batch_loss)) {
                unpack_params(m, last_good);
                save_checkpoint(m, out_dir + "/last.ckpt", epoch, step);
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(step) + "; last good checkpoint written to " +
                                   out_dir + "/last.ckpt");
            }
            train_loss_acc += batch_loss * static_cast<double>(bs);
            train_loss_count += bs;

            const double inv_bs = 1.0 / static_cast<double>(bs);
            std::fill(flat_grads.begin(), flat_grads.end(), 0.0);
            for (const std::vector<double>& gr : sample_grads)
                for (std::size_t i = 0; i < gr.size(); ++i) flat_grads[i] += gr[i];
            for (double& g : flat_grads) g *= inv_bs;

            const double lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min);
            pack_params(m, flat_params);
            adamw_step(flat_params, flat_grads, opt_state, step + 1, lr, cfg.beta1, cfg.beta2,
                       cfg.eps, cfg.weight_decay);
            unpack_params(m, flat_params);
            ++step;
        }
        const EvalResult val = evaluate(m, data, split.val);
        if (!std::isfinite(val.mean)) {
            unpack_params(m, last_good);
            save_checkpoint(m, out_dir + "/last.ckpt", epoch, step);
            throw NumericError("non-finite validation error after epoch " + std::to_string(epoch) +
                               "; last good checkpoint written to " + out_dir + "/last.ckpt");
        }
        pack_params(m, last_good);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = cosine_lr(step - 1, total_steps, cfg.lr0, cfg.lr_min);
        rec.train_mse = train_loss_acc / static_cast<double>(train_loss_count);
        rec.val_rel_mse = val.mean;
        rec.seconds = secs;
        metrics_out.epochs.push_back(rec);
        std::fprintf(metrics.get(), "%d,%s,%s,%s,%.6f\n", rec.epoch, fmt_double(rec.lr).c_str(),
                     fmt_double(rec.train_mse).c_str(), fmt_double(rec.val_rel_mse).c_str(),
                     rec.seconds);
        std::fflush(metrics.get());
        if (cfg.verbose)
            std::printf("epoch %3d  lr %.3e  train_mse %.6e  val_rel_mse %.6e  (%.1fs)\n",
                        rec.epoch, rec.lr, rec.train_mse, rec.val_rel_mse, rec.seconds);

        if (rec.val_rel_mse < metrics_out.best_val) {
            metrics_out.best_val = rec.val_rel_mse;
            metrics_out.best_epoch = epoch;
            save_checkpoint(m, out_dir + "/best.ckpt", epoch, step);
        }
        save_checkpoint(m, out_dir + "/last.ckpt", epoch, step);
    }
    return metrics_out;
}

}  // namespace mano
