#pragma once

#include <cstdint>
#include <vector>

#include "cnerf/autodiff/tape.hpp"

namespace cnerf::ad {

struct AdamConfig {
    double lr = 2e-5;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list. Moment buffers follow the
/// list order, which is also the checkpoint order.
class Adam {
public:
    Adam(ParameterList params, AdamConfig config);

    /// Applies one update. Parameters absent from `grads` see a zero gradient.
    void step(const Gradients& grads);

    const AdamConfig& config() const noexcept { return config_; }
    void set_lr(double lr) { config_.lr = lr; }
    std::int64_t steps() const noexcept { return step_; }
    const ParameterList& params() const noexcept { return params_; }

    std::vector<std::vector<double>>& first_moments() noexcept { return m_; }
    std::vector<std::vector<double>>& second_moments() noexcept { return v_; }
    const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
    const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }
    void set_steps(std::int64_t steps);

private:
    ParameterList params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::int64_t step_ = 0;
};

}  // namespace cnerf::ad
