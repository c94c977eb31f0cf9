#include "vmath.hpp"

#include <cmath>

namespace cnerf::ad::vmath {

void sin(const double* in, double* out, std::size_t n) {
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) out[i] = std::sin(in[i]);
}

void cos(const double* in, double* out, std::size_t n) {
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) out[i] = std::cos(in[i]);
}

}  // namespace cnerf::ad::vmath
