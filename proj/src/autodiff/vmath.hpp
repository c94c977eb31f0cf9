#pragma once

#include <cstddef>

// Vectorised elementwise kernels. Built in their own translation unit so the
// compiler may use the SIMD math library without relaxing IEEE semantics
// anywhere else.
namespace cnerf::ad::vmath {

void sin(const double* in, double* out, std::size_t n);
void cos(const double* in, double* out, std::size_t n);

}  // namespace cnerf::ad::vmath
