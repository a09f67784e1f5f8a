#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mano/tensor.hpp"

namespace mano {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> params;
    double worst = 0.0;
    std::string worst_param;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // tensors with more scalars than this get a seeded random subsample
    std::size_t subsample_limit = 64;
    std::uint64_t seed = 0x6d616e6f;
};

/// Compares analytic gradients against central finite differences of
/// `loss_fn`, perturbing the parameter tensors in place. `analytic[i]` must
/// be the gradient for `params[i].second`, computed before the call. The
/// relative error uses max(|fd|, |an|, tolerance) as denominator so tiny
/// gradients are compared absolutely at the tolerance scale. Failures are
/// reported, not thrown.
GradCheckReport grad_check(const std::vector<std::pair<std::string, Tensor*>>& params,
                           const std::function<double()>& loss_fn,
                           const std::vector<Tensor>& analytic,
                           const GradCheckOptions& opt = {});

}  // namespace mano
