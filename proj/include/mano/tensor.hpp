#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "mano/rng.hpp"

namespace mano {

/// Byte counters over every tensor allocation. The bench harness resets the
/// peak around a single forward pass to obtain a deterministic memory figure
/// that does not depend on OS-level accounting.
namespace arena {
void add(std::size_t bytes);
void sub(std::size_t bytes);
std::int64_t live_bytes();
std::int64_t peak_bytes();
void reset_peak();
}  // namespace arena

template <class T>
struct ArenaAllocator {
    using value_type = T;
    ArenaAllocator() = default;
    template <class U>
    ArenaAllocator(const ArenaAllocator<U>&) {}
    T* allocate(std::size_t n) {
        arena::add(n * sizeof(T));
        return static_cast<T*>(::operator new(n * sizeof(T)));
    }
    void deallocate(T* p, std::size_t n) {
        arena::sub(n * sizeof(T));
        ::operator delete(p);
    }
    bool operator==(const ArenaAllocator&) const { return true; }
    bool operator!=(const ArenaAllocator&) const { return false; }
};

using dvec = std::vector<double, ArenaAllocator<double>>;
using Shape = std::vector<std::size_t>;

/// Dense row-major tensor of 64-bit floats. Immutable by convention once an
/// op has produced it; ops build new tensors instead of mutating inputs.
struct Tensor {
    Shape shape;
    dvec data;

    Tensor() = default;
    explicit Tensor(Shape s);

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v);
    static Tensor scalar(double v);
    static Tensor from(Shape s, std::initializer_list<double> values);
    static Tensor gaussian(Shape s, SplitMix64& rng, double std_dev = 1.0);

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape[i]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
    double& at3(std::size_t i, std::size_t j, std::size_t c) {
        return data[(i * shape[1] + j) * shape[2] + c];
    }
    double at3(std::size_t i, std::size_t j, std::size_t c) const {
        return data[(i * shape[1] + j) * shape[2] + c];
    }

    /// number of rows when the last axis is treated as columns
    std::size_t lead_rows() const { return shape.empty() ? 0 : numel() / shape.back(); }
    std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
};

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
std::string shape_str(const Tensor& t);

/// max |a-b| over all entries; throws DimError on shape mismatch
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mano
