#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cnerf/autodiff/tape.hpp"
#include "cnerf/util/rng.hpp"

namespace cnerf::ad {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Relative error is |ad - fd| / max(|ad|, |fd|, abs_floor).
    double abs_floor = 1e-4;
    /// One-sided slopes differing by more than this fraction flag a candidate kink.
    double kink_tolerance = 0.1;
};

struct GradCheckEntry {
    std::string where;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    GradCheckEntry worst;
    std::size_t checked = 0;
    /// Coordinates at a non-differentiable point; excluded from the error.
    std::vector<GradCheckEntry> kinks;
    /// Coordinates where a perturbed evaluation was not finite.
    std::vector<GradCheckEntry> non_finite;
    bool passed = false;

    std::string summary() const;
};

/// Compares the reverse-mode gradient of scalar `f` at `x` against central
/// differences on every coordinate.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, const GradCheckOptions& opts = {});

/// Same comparison for a loss over parameters. At most `coords_per_param`
/// coordinates of each parameter are probed (chosen by `rng`; all if 0).
GradCheckReport grad_check_params(const std::function<Tensor()>& loss, const ParameterList& params,
                                  const GradCheckOptions& opts = {}, std::size_t coords_per_param = 0,
                                  Rng* rng = nullptr);

}  // namespace cnerf::ad
