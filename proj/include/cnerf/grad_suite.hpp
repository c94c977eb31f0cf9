#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cnerf/autodiff/gradcheck.hpp"

namespace cnerf {

struct GradSuiteEntry {
    std::string name;
    ad::GradCheckReport report;
};

/// Central-difference checks of every differentiable op, the volume renderer
/// and every training loss on small (4x4 to 8x8) inputs.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 1, const ad::GradCheckOptions& opts = {});

}  // namespace cnerf
