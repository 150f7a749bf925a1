#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "duet/simd.hpp"

namespace duet::simd {

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar: return "scalar";
        case Isa::avx2: return "avx2";
        case Isa::neon: return "neon";
    }
    return "unknown";
}

bool isa_available(Isa isa) {
    switch (isa) {
        case Isa::scalar: return true;
        case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
        case Isa::neon:
#if defined(__aarch64__)
            return true;
#else
            return false;
#endif
    }
    return false;
}

const Kernels& kernels_for(Isa isa) {
    if (!isa_available(isa))
        throw std::invalid_argument("SIMD variant not available: " + std::string(isa_name(isa)));
    switch (isa) {
#if defined(__x86_64__) || defined(_M_X64)
        case Isa::avx2: return detail::avx2_kernels;
#endif
#if defined(__aarch64__)
        case Isa::neon: return detail::neon_kernels;
#endif
        default: return detail::scalar_kernels;
    }
}

namespace {

const Kernels* pick_default() {
    if (const char* env = std::getenv("DUET_SIMD")) {
        const std::string want(env);
        for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon})
            if (want == isa_name(isa) && isa_available(isa)) return &kernels_for(isa);
    }
    if (isa_available(Isa::avx2)) return &kernels_for(Isa::avx2);
    if (isa_available(Isa::neon)) return &kernels_for(Isa::neon);
    return &detail::scalar_kernels;
}

std::atomic<const Kernels*> active{nullptr};

}  // namespace

const Kernels& kernels() {
    const Kernels* k = active.load(std::memory_order_acquire);
    if (k == nullptr) {
        k = pick_default();
        active.store(k, std::memory_order_release);
    }
    return *k;
}

void set_active_isa(Isa isa) { active.store(&kernels_for(isa), std::memory_order_release); }

}  // namespace duet::simd
