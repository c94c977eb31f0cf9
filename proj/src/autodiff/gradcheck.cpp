#include "cnerf/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cnerf::ad {

namespace {

/// Probes one coordinate given a setter that evaluates f with that coordinate
/// displaced by `delta`.
void probe(const std::function<double(double)>& eval_at, double f0, double analytic, const std::string& where,
           std::size_t index, const GradCheckOptions& opts, GradCheckReport& report) {
    const double h = opts.step;
    const double fp = eval_at(h);
    const double fm = eval_at(-h);
    GradCheckEntry e{where, index, analytic, 0.0, 0.0};
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.non_finite.push_back(e);
        return;
    }
    e.numeric = (fp - fm) / (2.0 * h);

    const double fwd = (fp - f0) / h;
    const double bwd = (f0 - fm) / h;
    const double jump = std::abs(fwd - bwd);
    if (jump > opts.kink_tolerance * std::max({std::abs(fwd), std::abs(bwd), opts.abs_floor})) {
        // Smooth curvature doubles the one-sided gap when the step doubles; a
        // kink leaves it unchanged.
        const double fp2 = eval_at(2 * h);
        const double fm2 = eval_at(-2 * h);
        const double jump2 = std::abs((fp2 - f0) / (2 * h) - (f0 - fm2) / (2 * h));
        if (std::abs(jump2 - 2 * jump) > 0.25 * jump) {
            report.kinks.push_back(e);
            return;
        }
    }

    e.rel_error = std::abs(analytic - e.numeric) / std::max({std::abs(analytic), std::abs(e.numeric), opts.abs_floor});
    ++report.checked;
    if (e.rel_error >= report.max_rel_error) {
        report.max_rel_error = e.rel_error;
        report.worst = e;
    }
}

void finish(GradCheckReport& r, const GradCheckOptions& opts) {
    r.passed = r.non_finite.empty() && r.checked > 0 && r.max_rel_error < opts.tolerance;
}

}  // namespace

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (passed ? "pass" : "FAIL") << " checked=" << checked << " max_rel=" << max_rel_error;
    if (checked > 0)
        os << " worst=" << worst.where << "[" << worst.index << "] ad=" << worst.analytic << " fd=" << worst.numeric;
    if (!kinks.empty()) os << " kinks=" << kinks.size();
    if (!non_finite.empty()) os << " non_finite=" << non_finite.size();
    return os.str();
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, const GradCheckOptions& opts) {
    if (opts.step <= 0) throw std::invalid_argument("grad_check: step must be positive");
    std::vector<double> analytic;
    double f0 = 0.0;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor xv = tape.watch(x);
        Tensor y = f(xv);
        f0 = y.item();
        analytic = tape.backward(y).wrt(xv).to_vector();
    }
    GradCheckReport report;
    NoGradScope nograd;
    std::vector<double> base = x.to_vector();
    for (std::size_t i = 0; i < base.size(); ++i) {
        auto eval_at = [&](double delta) {
            std::vector<double> v = base;
            v[i] += delta;
            return f(Tensor(x.shape(), std::move(v))).item();
        };
        probe(eval_at, f0, analytic[i], "x", i, opts, report);
    }
    finish(report, opts);
    return report;
}

GradCheckReport grad_check_params(const std::function<Tensor()>& loss, const ParameterList& params,
                                  const GradCheckOptions& opts, std::size_t coords_per_param, Rng* rng) {
    if (opts.step <= 0) throw std::invalid_argument("grad_check: step must be positive");
    Gradients grads;
    double f0 = 0.0;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor y = loss();
        f0 = y.item();
        grads = tape.backward(y);
    }
    GradCheckReport report;
    NoGradScope nograd;
    for (Parameter* p : params) {
        const std::vector<double> analytic = grads.of(*p);
        std::vector<std::size_t> coords(p->size());
        std::iota(coords.begin(), coords.end(), 0);
        if (coords_per_param > 0 && coords.size() > coords_per_param) {
            Rng local(coords.size());
            Rng& r = rng ? *rng : local;
            for (std::size_t i = 0; i < coords_per_param; ++i)
                std::swap(coords[i], coords[i + r.below(coords.size() - i)]);
            coords.resize(coords_per_param);
        }
        const Tensor original = p->value();
        for (std::size_t i : coords) {
            auto eval_at = [&](double delta) {
                std::vector<double> v = original.to_vector();
                v[i] += delta;
                p->assign(std::move(v));
                const double out = loss().item();
                p->assign(original);
                return out;
            };
            probe(eval_at, f0, analytic[i], p->name(), i, opts, report);
        }
    }
    finish(report, opts);
    return report;
}

}  // namespace cnerf::ad
