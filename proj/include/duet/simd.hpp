#pragma once
// Data-parallel inner loops used by the tensor engine.
//
// Every kernel has a scalar reference implementation. Vectorized variants
// (AVX2+FMA on x86-64, NEON on aarch64) are selected once at startup from
// the CPU's capabilities; DUET_SIMD=scalar|avx2|neon in the environment
// forces a particular table.

#include <cstddef>
#include <span>
#include <string_view>

namespace duet::simd {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

struct Kernels {
    Isa isa;
    double (*dot)(const double* a, const double* b, std::size_t n);
    // y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    // C[n x m] += A[n x k] * B[k x m], all row-major and densely packed.
    void (*gemm)(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                 std::size_t m);
    double (*sum_sq)(const double* x, std::size_t n);
};

bool isa_available(Isa isa);

// Kernel table for a specific ISA. Throws std::invalid_argument when the
// ISA is not available on this machine or in this build.
const Kernels& kernels_for(Isa isa);

// The active table. Chosen on first use.
const Kernels& kernels();

// Overrides the active table (tests, benchmarks). Not thread-safe with
// concurrent kernel use.
void set_active_isa(Isa isa);

inline double dot(std::span<const double> a, std::span<const double> b) {
    return kernels().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    kernels().axpy(alpha, x.data(), y.data(), x.size());
}

inline double sum_sq(std::span<const double> x) { return kernels().sum_sq(x.data(), x.size()); }

namespace detail {
extern const Kernels scalar_kernels;
#if defined(__x86_64__) || defined(_M_X64)
extern const Kernels avx2_kernels;
#endif
#if defined(__aarch64__)
extern const Kernels neon_kernels;
#endif
}  // namespace detail

}  // namespace duet::simd
