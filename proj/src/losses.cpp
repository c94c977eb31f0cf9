#include "cnerf/losses.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace cnerf {

namespace {

struct WeightField {
    const char* key;
    double LossWeights::*field;
};

constexpr WeightField kWeightFields[] = {
    {"adv_global", &LossWeights::adv_global},
    {"view", &LossWeights::view},
    {"adv_semantic", &LossWeights::adv_semantic},
    {"classify", &LossWeights::classify},
    {"std", &LossWeights::std_},
    {"eikonal", &LossWeights::eikonal},
    {"minimal_surface", &LossWeights::minimal_surface},
    {"r1_image", &LossWeights::r1_image},
    {"r1_mask", &LossWeights::r1_mask},
    {"std_margin", &LossWeights::std_margin},
    {"minimal_surface_sharpness", &LossWeights::ms_sharpness},
};

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

ad::Tensor sum_logits(const ad::Tensor& logits) {
    if (logits.rank() == 2 && logits.dim(1) != 1)
        throw ad::ShapeError("r1_penalty: critic logits must be [B] or [B,1], got " + ad::to_string(logits.shape()));
    return ad::sum(logits);
}

}  // namespace

void LossWeights::validate() const {
    for (const auto& f : kWeightFields) {
        const double v = this->*f.field;
        if (!std::isfinite(v) || v < 0)
            throw std::invalid_argument(std::string("loss weight '") + f.key + "' must be finite and >= 0");
    }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
    j = nlohmann::json::object();
    for (const auto& f : kWeightFields) j[f.key] = w.*f.field;
}

void from_json(const nlohmann::json& j, LossWeights& w) {
    w = LossWeights{};
    for (const auto& f : kWeightFields)
        if (j.contains(f.key)) w.*f.field = j.at(f.key).get<double>();
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const auto& f : kWeightFields) known = known || key == f.key;
        if (!known) throw std::invalid_argument("loss weights: unknown key '" + key + "'");
    }
    w.validate();
}

ad::Tensor eikonal_loss(const ad::Tensor& gradient) {
    if (gradient.rank() != 2 || gradient.dim(1) != 3)
        throw ad::ShapeError("eikonal_loss: gradient must be [P,3], got " + ad::to_string(gradient.shape()));
    const auto g = gradient.data();
    for (std::size_t p = 0; p < gradient.dim(0); ++p)
        if (!all_finite(g.subspan(p * 3, 3)))
            throw ad::NumericError("eikonal_loss: non-finite SDF gradient at row " + std::to_string(p));
    // The floor keeps sqrt differentiable where the gradient vanishes.
    const auto norm = ad::sqrt(ad::clamp_min(ad::sum_axis(ad::square(gradient), 1), 1e-24));
    return ad::mean(ad::square(ad::shift(norm, -1.0)));
}

ad::Tensor eikonal_loss(const CNeRFModel& model, const ad::Tensor& points, const LatentAssignment& latents) {
    const auto sdf = scene_sdf_with_gradient(model, points, latents);
    const auto g = sdf.gradient.data();
    const auto x = points.data();
    for (std::size_t p = 0; p < points.dim(0); ++p) {
        if (all_finite(g.subspan(p * 3, 3))) continue;
        std::ostringstream msg;
        msg << "eikonal_loss: non-finite SDF gradient at point (" << x[p * 3] << ", " << x[p * 3 + 1] << ", "
            << x[p * 3 + 2] << ")";
        throw ad::NumericError(msg.str());
    }
    return eikonal_loss(sdf.gradient);
}

ad::Tensor minimal_surface_loss(const ad::Tensor& d, double sharpness) {
    return ad::mean(ad::exp(ad::scale(ad::abs(d), -sharpness)));
}

FeatureExtractor::FeatureExtractor(std::uint64_t seed, std::size_t channels) : channels_(channels) {
    Rng rng(seed);
    const std::size_t widths[] = {channels, 16, 32, 32};
    for (std::size_t s = 0; s < 3; ++s) {
        const std::size_t in = widths[s], out = widths[s + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));
        stages_.push_back({nn::uniform({out, in, 3, 3}, bound, rng), nn::uniform({out}, 0.1, rng)});
    }
}

ad::Tensor FeatureExtractor::operator()(const ad::Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != channels_)
        throw ad::ShapeError("feature extractor: expected [N," + std::to_string(channels_) + ",H,W], got " +
                             ad::to_string(images.shape()));
    ad::Tensor x = images;
    for (const auto& st : stages_) {
        x = ad::leaky_relu(ad::conv2d(x, st.weight, st.bias, {1, 1}), 0.2);
        if (x.dim(2) >= 2 && x.dim(3) >= 2 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0) x = ad::avgpool2d(x, 2);
    }
    const std::size_t n = x.dim(0);
    return ad::reshape(x, {n, x.size() / n});
}

LatentAssignment combine_latents(const LatentAssignment& shape, const LatentAssignment& texture) {
    if (shape.size() != texture.size())
        throw std::invalid_argument("combine_latents: " + std::to_string(shape.size()) + " vs " +
                                    std::to_string(texture.size()) + " regions");
    std::vector<RegionLatent> regions;
    for (std::size_t i = 0; i < shape.size(); ++i)
        regions.push_back({shape.regions[i].shape, texture.regions[i].texture});
    return explicit_latents(std::move(regions));
}

StdLoss std_loss(const CNeRFModel& model, const Camera& camera, const LatentAssignment& s1,
                 const LatentAssignment& s2, const LatentAssignment& t1, const LatentAssignment& t2,
                 const FeatureExtractor& phi, double margin, const RenderOptions& base) {
    if (!base.pixels.empty()) throw std::invalid_argument("std_loss: needs full-image renders");
    RenderOptions opts = base;
    opts.jitter = false;
    opts.want_features = false;
    opts.keep_raw = false;

    const auto r11 = render(model, camera, combine_latents(s1, t1), opts);
    const auto r12 = render(model, camera, combine_latents(s1, t2), opts);
    const auto r21 = render(model, camera, combine_latents(s2, t1), opts);
    const auto r22 = render(model, camera, combine_latents(s2, t2), opts);

    const double pixels = static_cast<double>(camera.width * camera.height);
    StdLoss out;
    out.mask_term = ad::scale(ad::sum(ad::abs(ad::sub(r11.masks, r12.masks))), 1.0 / pixels);

    auto features = [&](const RenderOutput& r) { return phi(to_image(r.color, camera.height, camera.width)); };
    const auto f11 = features(r11);
    const auto positive = ad::mean(ad::abs(ad::sub(f11, features(r21))));
    const auto negative = ad::mean(ad::abs(ad::sub(f11, features(r22))));
    out.contrast_term = ad::relu(ad::shift(ad::sub(positive, negative), margin));
    out.total = ad::add(out.mask_term, out.contrast_term);
    return out;
}

ad::Tensor generator_adv_loss(const ad::Tensor& fake_logits) { return ad::mean(ad::softplus(ad::neg(fake_logits))); }

ad::Tensor discriminator_adv_loss(const ad::Tensor& real_logits, const ad::Tensor& fake_logits) {
    return ad::add(ad::mean(ad::softplus(ad::neg(real_logits))), ad::mean(ad::softplus(fake_logits)));
}

AdversarialLosses adv_losses(const ad::Tensor& real_logits, const ad::Tensor& fake_logits) {
    return {generator_adv_loss(fake_logits), discriminator_adv_loss(real_logits, fake_logits)};
}

R1Result r1_penalty(const Critic& critic, std::span<const ad::Tensor> real_inputs, std::span<const double> weights,
                    double step) {
    if (real_inputs.empty() || real_inputs.size() != weights.size())
        throw std::invalid_argument("r1_penalty: need one weight per input branch");
    const std::size_t batch = real_inputs[0].rank() > 0 ? real_inputs[0].dim(0) : 1;

    // Input gradients at the real samples.
    std::vector<ad::Tensor> input_grads;
    {
        ad::Tape tape;
        ad::TapeScope scope(tape);
        std::vector<ad::Tensor> watched;
        for (const auto& x : real_inputs) watched.push_back(tape.watch(x.detach()));
        const auto total = sum_logits(critic(watched));
        // A critic that ignores its inputs and parameters leaves nothing on the tape.
        if (!total.tracked_on(&tape)) return {0.0, std::vector<double>(real_inputs.size(), 0.0), {}};
        const auto grads = tape.backward(total);
        for (const auto& w : watched) input_grads.push_back(grads.wrt(w));
    }

    R1Result out;
    double norm2 = 0.0;
    std::vector<std::vector<double>> direction;
    for (std::size_t b = 0; b < real_inputs.size(); ++b) {
        const auto g = input_grads[b].data();
        if (!all_finite(g)) throw ad::NumericError("r1_penalty: non-finite input gradient in branch " + std::to_string(b));
        double sq = 0.0;
        for (double v : g) sq += v * v;
        out.per_branch.push_back(0.5 * weights[b] * sq / static_cast<double>(batch));
        out.penalty += out.per_branch.back();
        // d penalty / d g_b = (weight_b / B) g_b
        std::vector<double> u(g.begin(), g.end());
        for (auto& v : u) v *= weights[b] / static_cast<double>(batch);
        for (double v : u) norm2 += v * v;
        direction.push_back(std::move(u));
    }
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) return out;

    auto param_grads = [&](double sign) {
        std::vector<ad::Tensor> shifted;
        for (std::size_t b = 0; b < real_inputs.size(); ++b) {
            const auto x = real_inputs[b].data();
            std::vector<double> v(x.begin(), x.end());
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += sign * step * direction[b][i] / norm;
            shifted.emplace_back(real_inputs[b].shape(), std::move(v));
        }
        ad::Tape tape;
        ad::TapeScope scope(tape);
        const auto total = sum_logits(critic(shifted));
        return total.tracked_on(&tape) ? tape.backward(total) : ad::Gradients{};
    };
    const double factor = norm / (2.0 * step);
    out.grads.merge(param_grads(+1.0), factor);
    out.grads.merge(param_grads(-1.0), -factor);
    return out;
}

ad::Tensor view_loss(const ad::Tensor& predicted, const ad::Tensor& truth) {
    if (predicted.shape() != truth.shape() || predicted.rank() != 2 || predicted.dim(1) != 2)
        throw ad::ShapeError("view_loss: expected matching [B,2], got " + ad::to_string(predicted.shape()) + " and " +
                             ad::to_string(truth.shape()));
    return ad::scale(ad::sum(ad::smooth_l1(ad::sub(predicted, truth), 1.0)), 1.0 / static_cast<double>(predicted.dim(0)));
}

ad::Tensor class_loss(const ad::Tensor& logits, std::span<const int> labels) {
    return ad::softmax_cross_entropy(logits, labels);
}

ad::Tensor overall_loss(const LossComponents& c, const LossWeights& w) {
    const std::pair<const char*, std::pair<const std::optional<ad::Tensor>*, double>> terms[] = {
        {"adv_global", {&c.adv_global, w.adv_global}}, {"view", {&c.view, w.view}},
        {"adv_semantic", {&c.adv_semantic, w.adv_semantic}}, {"classify", {&c.classify, w.classify}},
        {"std", {&c.std_, w.std_}}, {"eikonal", {&c.eikonal, w.eikonal}},
        {"minimal_surface", {&c.minimal_surface, w.minimal_surface}},
    };
    ad::Tensor total = ad::Tensor::scalar(0.0);
    for (const auto& [name, term] : terms) {
        if (!term.first->has_value()) throw std::invalid_argument(std::string("overall_loss: missing component '") + name + "'");
        const auto& v = **term.first;
        if (v.size() != 1) throw ad::ShapeError(std::string("overall_loss: component '") + name + "' is not a scalar");
        total = ad::add(total, ad::scale(ad::reshape(v, {}), term.second));
    }
    return total;
}

}  // namespace cnerf
