#include "cnerf/autodiff/adam.hpp"

#include <cmath>
#include <string>

namespace cnerf::ad {

Adam::Adam(ParameterList params, AdamConfig config) : params_(std::move(params)), config_(config) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Parameter* p : params_) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
    }
}

void Adam::set_steps(std::int64_t steps) {
    if (steps < 0) throw std::invalid_argument("adam: negative step count");
    step_ = steps;
}

void Adam::step(const Gradients& grads) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto* g = grads.find(*params_[i]);
        if (g == nullptr) continue;
        if (g->size() != params_[i]->size())
            throw ShapeError("adam: gradient for " + params_[i]->name() + " has " + std::to_string(g->size()) +
                             " elements, expected " + std::to_string(params_[i]->size()));
        if (checked_mode())
            for (double x : *g)
                if (!std::isfinite(x)) throw NumericError("adam: non-finite gradient for " + params_[i]->name());
    }

    ++step_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        const auto* g = grads.find(p);
        auto& m = m_[i];
        auto& v = v_[i];
        std::vector<double> value = p.value().to_vector();
        for (std::size_t j = 0; j < value.size(); ++j) {
            const double gj = g ? (*g)[j] : 0.0;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            value[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.epsilon);
        }
        p.assign(std::move(value));
    }
}

}  // namespace cnerf::ad
