#include "mano/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "mano/errors.hpp"

namespace mano {

namespace arena {

namespace {
std::atomic<std::int64_t> g_live{0};
std::atomic<std::int64_t> g_peak{0};
}  // namespace

void add(std::size_t bytes) {
    const std::int64_t live = g_live.fetch_add(static_cast<std::int64_t>(bytes)) +
                              static_cast<std::int64_t>(bytes);
    std::int64_t peak = g_peak.load(std::memory_order_relaxed);
    while (live > peak && !g_peak.compare_exchange_weak(peak, live)) {
    }
}

void sub(std::size_t bytes) { g_live.fetch_sub(static_cast<std::int64_t>(bytes)); }

std::int64_t live_bytes() { return g_live.load(); }
std::int64_t peak_bytes() { return g_peak.load(); }
void reset_peak() { g_peak.store(g_live.load()); }

}  // namespace arena

Tensor::Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {
    for (std::size_t d : shape) {
        if (d == 0) throw DimError("tensor dimension must be positive, got shape " + shape_str(shape));
    }
}

Tensor Tensor::full(Shape s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = v;
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t(Shape{1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::from(Shape s, std::initializer_list<double> values) {
    Tensor t(std::move(s));
    if (values.size() != t.numel())
        throw DimError("initializer has " + std::to_string(values.size()) + " values for shape " +
                       shape_str(t.shape));
    std::size_t i = 0;
    for (double v : values) t.data[i++] = v;
    return t;
}

Tensor Tensor::gaussian(Shape s, SplitMix64& rng, double std_dev) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = std_dev * rng.gaussian();
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

std::string shape_str(const Tensor& t) { return shape_str(t.shape); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimError("shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace mano
