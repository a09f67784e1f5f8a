#include "mano/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mano/errors.hpp"
#include "mano/rng.hpp"

namespace mano {

GradCheckReport grad_check(const std::vector<std::pair<std::string, Tensor*>>& params,
                           const std::function<double()>& loss_fn,
                           const std::vector<Tensor>& analytic, const GradCheckOptions& opt) {
    if (opt.step <= 0) throw DimError("grad_check step must be > 0");
    if (analytic.size() != params.size())
        throw DimError("grad_check: analytic gradient count mismatch");
    GradCheckReport rep;
    rep.tolerance = opt.tolerance;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& theta = *params[p].second;
        const Tensor& an = analytic[p];
        if (!theta.same_shape(an))
            throw DimError("grad_check: gradient shape mismatch for " + params[p].first);
        std::vector<std::size_t> idx;
        if (theta.numel() <= opt.subsample_limit) {
            for (std::size_t i = 0; i < theta.numel(); ++i) idx.push_back(i);
        } else {
            SplitMix64 rng(mix_seed(opt.seed, p));
            for (std::size_t i = 0; i < opt.subsample_limit; ++i)
                idx.push_back(rng.below(theta.numel()));
            std::sort(idx.begin(), idx.end());
            idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
        }
        GradCheckEntry e;
        e.name = params[p].first;
        e.checked = idx.size();
        for (std::size_t i : idx) {
            const double orig = theta.data[i];
            theta.data[i] = orig + opt.step;
            const double lp = loss_fn();
            theta.data[i] = orig - opt.step;
            const double lm = loss_fn();
            theta.data[i] = orig;
            const double fd = (lp - lm) / (2.0 * opt.step);
            const double a = an.data[i];
            const double denom = std::max({std::fabs(fd), std::fabs(a), opt.tolerance});
            e.max_rel_err = std::max(e.max_rel_err, std::fabs(fd - a) / denom);
        }
        if (e.max_rel_err >= rep.worst) {
            rep.worst = e.max_rel_err;
            rep.worst_param = e.name;
        }
        rep.params.push_back(std::move(e));
    }
    rep.pass = rep.worst < opt.tolerance;
    return rep;
}

}  // namespace mano
