#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cnerf/autodiff/ops.hpp"
#include "cnerf/autodiff/tape.hpp"
#include "cnerf/generator.hpp"
#include "json.hpp"

namespace cnerf {

struct LossWeights {
    double adv_global = 1.0;
    double view = 15.0;
    double adv_semantic = 1.0;
    double classify = 1.0;
    double std_ = 1.0;
    double eikonal = 0.1;
    double minimal_surface = 0.001;
    double r1_image = 10.0;
    double r1_mask = 1000.0;
    double std_margin = 0.5;
    double ms_sharpness = 100.0;

    void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, LossWeights& w);

/// mean((|g| - 1)^2) over gradient rows [P, 3]. Throws ad::NumericError
/// naming the first row with a non-finite gradient.
ad::Tensor eikonal_loss(const ad::Tensor& gradient);
/// Same, with the gradient of the full scene SDF at `points`; the error
/// message carries the offending point.
ad::Tensor eikonal_loss(const CNeRFModel& model, const ad::Tensor& points, const LatentAssignment& latents);

/// mean(exp(-sharpness |d|)).
ad::Tensor minimal_surface_loss(const ad::Tensor& d, double sharpness = 100.0);

/// Frozen convolutional feature map used by the decoupling loss: three
/// conv/leaky-ReLU/pool stages with fixed random weights.
class FeatureExtractor {
public:
    static constexpr std::uint64_t kDefaultSeed = 0x7068690000000001ULL;

    explicit FeatureExtractor(std::uint64_t seed = kDefaultSeed, std::size_t channels = 3);

    /// images [N, C, H, W] -> [N, F]. Pooling stops once the map is 1x1.
    ad::Tensor operator()(const ad::Tensor& images) const;

private:
    struct Stage {
        ad::Tensor weight;
        ad::Tensor bias;
    };
    std::vector<Stage> stages_;
    std::size_t channels_ = 3;
};

/// Latents for one side of the decoupling loss: per-region shape and texture
/// are taken from separate assignments.
LatentAssignment combine_latents(const LatentAssignment& shape, const LatentAssignment& texture);

struct StdLoss {
    ad::Tensor total;
    ad::Tensor mask_term;
    ad::Tensor contrast_term;
};

/// Mask term: per-pixel L1 over the k-channel mask stacks of (s1,t1) and
/// (s1,t2), averaged over pixels. Contrast term: hinge on mean absolute
/// feature distances, max(|phi(s1,t1) - phi(s2,t1)| - |phi(s1,t1) - phi(s2,t2)| + margin, 0).
/// All four renders share `camera` with unjittered sampling.
StdLoss std_loss(const CNeRFModel& model, const Camera& camera, const LatentAssignment& s1,
                 const LatentAssignment& s2, const LatentAssignment& t1, const LatentAssignment& t2,
                 const FeatureExtractor& phi, double margin, const RenderOptions& base = {});

struct AdversarialLosses {
    ad::Tensor generator;
    ad::Tensor discriminator;
};

/// Non-saturating losses: G = mean softplus(-fake), D = mean softplus(-real) + mean softplus(fake).
AdversarialLosses adv_losses(const ad::Tensor& real_logits, const ad::Tensor& fake_logits);
ad::Tensor generator_adv_loss(const ad::Tensor& fake_logits);
ad::Tensor discriminator_adv_loss(const ad::Tensor& real_logits, const ad::Tensor& fake_logits);

/// Discriminator as a function of its input branches, returning logits [B] or [B, 1].
/// Parameters must be read through Parameter::var() so they land on the current tape.
using Critic = std::function<ad::Tensor(std::span<const ad::Tensor>)>;

struct R1Result {
    double penalty = 0.0;
    std::vector<double> per_branch;
    /// Gradient of the penalty with respect to every parameter the critic read.
    ad::Gradients grads;
};

/// sum_b (weight_b / 2) E_batch |dD/dx_b|^2 at real inputs x_b [B, ...].
/// Parameter gradients come from a central-difference Hessian-vector product:
/// grad_theta D is differenced at x +- step * u, with u the penalty's
/// direction in input space.
R1Result r1_penalty(const Critic& critic, std::span<const ad::Tensor> real_inputs, std::span<const double> weights,
                    double step = 1e-4);

/// Smooth L1 (beta 1) over the angle pair, summed per sample and averaged over the batch.
/// predicted, truth: [B, 2].
ad::Tensor view_loss(const ad::Tensor& predicted, const ad::Tensor& truth);

/// Softmax cross-entropy of logits [B, k]; throws std::out_of_range for a bad label.
ad::Tensor class_loss(const ad::Tensor& logits, std::span<const int> labels);

/// Generator-side terms of one step. Every field must be set before overall_loss.
struct LossComponents {
    std::optional<ad::Tensor> adv_global;
    std::optional<ad::Tensor> view;
    std::optional<ad::Tensor> adv_semantic;
    std::optional<ad::Tensor> classify;
    std::optional<ad::Tensor> std_;
    std::optional<ad::Tensor> eikonal;
    std::optional<ad::Tensor> minimal_surface;
};

/// Weighted sum; throws std::invalid_argument naming the first missing term.
ad::Tensor overall_loss(const LossComponents& c, const LossWeights& w);

}  // namespace cnerf
