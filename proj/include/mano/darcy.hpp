#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mano/tensor.hpp"

namespace mano {

/// n x n scalar field on cell centers of (0,1)^2, row-major.
using Field = Tensor;  // shape {n, n}

struct DarcySample {
    Field a;  // permeability, strictly positive
    Field u;  // pressure, solves -div(a grad u) = 1 with zero Dirichlet walls
};

enum class FaceMean { Harmonic, Arithmetic };

/// 5-point finite-volume operator for -div(a grad u) on cell centers with
/// homogeneous Dirichlet walls eliminated through ghost cells. Scaled by
/// 1/h^2 so the a = 1 interior row is (4,-1,-1,-1,-1)/h^2 and the matching
/// right-hand side for f = 1 is the constant 1.
struct StencilOp {
    int n = 0;
    double h = 0.0;
    std::vector<double> diag, east, north;  // symmetric: west/south mirror east/north

    void apply(const std::vector<double>& x, std::vector<double>& y) const;
};

/// Gaussian-random-field coefficient: spectral synthesis with amplitude decay
/// (kx^2 + ky^2 + tau^2)^(-alpha) over a cosine basis, thresholded at zero to
/// the binary values {low, high}.
Field sample_coefficient(int n, std::uint64_t seed, double low = 3.0, double high = 12.0,
                         double alpha = 2.0, double tau = 3.0);

StencilOp assemble_stencil(const Field& a, FaceMean mean = FaceMean::Harmonic);
std::vector<double> uniform_rhs(int n);  // f = 1 at every cell

struct CgResult {
    std::vector<double> x;
    int iterations = 0;
    double rel_residual = 0.0;
};

/// Jacobi-preconditioned conjugate gradient on an SPD operator given by
/// `apply`; `diag` supplies the preconditioner. Throws NumericError with the
/// final residual when max_iter is exhausted.
CgResult cg_solve(const std::function<void(const std::vector<double>&, std::vector<double>&)>& apply,
                  const std::vector<double>& diag, const std::vector<double>& rhs,
                  double tol = 1e-10, int max_iter = 20000);

CgResult cg_solve(const StencilOp& op, const std::vector<double>& rhs, double tol = 1e-10,
                  int max_iter = 20000);

/// a -> u for one coefficient field.
DarcySample solve_darcy(Field a, FaceMean mean = FaceMean::Harmonic, double tol = 1e-10);

/// ||A u - f|| / ||f|| for a stored sample.
double sample_residual(const DarcySample& s, FaceMean mean = FaceMean::Harmonic);

struct DatasetSummary {
    std::uint32_t count = 0;
    std::uint32_t n = 0;
    double u_mean = 0.0;
    double u_std = 0.0;
};

struct GenOptions {
    double low = 3.0;
    double high = 12.0;
    FaceMean mean = FaceMean::Harmonic;
    double tol = 1e-10;
};

/// Writes `count` samples to the binary dataset format. Per-sample seeds are
/// splitmix-derived from (seed, index), so the file content is independent of
/// generation parallelism.
DatasetSummary generate_dataset(int n, int count, std::uint64_t seed, const std::string& path,
                                const GenOptions& opt = {});

/// Dataset file: magic "MNO1", u32 version=1, u32 count, u32 n, u32 reserved,
/// then per sample n^2 f64 of a and n^2 f64 of u, row-major, little-endian.
void write_dataset(const std::vector<DarcySample>& samples, const std::string& path);
std::vector<DarcySample> load_dataset(const std::string& path);

}  // namespace mano
