#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cnerf/autodiff/ops.hpp"
#include "cnerf/autodiff/tape.hpp"
#include "cnerf/camera.hpp"
#include "cnerf/nn.hpp"
#include "cnerf/util/rng.hpp"
#include "json.hpp"

namespace cnerf {

struct GeneratorConfig {
    std::size_t regions = 3;
    std::size_t hidden = 128;
    std::size_t latent = 256;
    std::size_t feature = 128;
    std::size_t shape_layers = 3;
    std::size_t texture_layers = 2;
    std::size_t mapping_layers = 3;
    /// Radius of the fixed base sphere.
    double r0 = 0.1;
    double alpha_init = 0.1;
    double omega0 = 30.0;
    /// Points are divided by this before the first sine layer so the sampled
    /// volume maps to roughly [-1, 1]^3.
    double input_extent = 0.12;
    /// Initial scale of the residual SDF and mask heads relative to a default init.
    double head_gain = 0.01;
    std::vector<std::string> labels;

    void validate() const;
    std::string label(std::size_t region) const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

/// z -> w: fully connected layers with leaky ReLU between them.
class MappingNetwork {
public:
    MappingNetwork() = default;
    MappingNetwork(std::size_t width, std::size_t layers, Rng& rng);

    /// z[B, width] -> w[B, width].
    ad::Tensor forward(const ad::Tensor& z) const;
    std::size_t width() const { return width_; }
    void collect(ad::ParameterList& out);

private:
    std::size_t width_ = 0;
    std::vector<nn::Linear> layers_;
};

/// Frequency and phase of one modulated sine layer, each [1, hidden], folded
/// into the layer's weights: gamma * (x W + b) + beta = x W' + b'.
struct Modulation {
    ad::Tensor gamma;
    ad::Tensor beta;
    ad::Tensor weight;  // W' = W * gamma, [in, hidden]
    ad::Tensor bias;    // b' = b * gamma + beta, [hidden]
};

/// h = sin(gamma * (x W + b) + beta), with gamma = omega0 * (1 + A_g w + c_g)
/// and beta = A_b w + c_b.
class ModulatedSineLayer {
public:
    ModulatedSineLayer() = default;
    ModulatedSineLayer(const std::string& name, std::size_t in, std::size_t out, std::size_t latent, bool first,
                       double omega0, Rng& rng);

    Modulation modulation(const ad::Tensor& w) const;
    /// Pre-activation gamma * (x W + b) + beta.
    ad::Tensor preactivation(const ad::Tensor& x, const Modulation& mod) const;
    ad::Tensor forward(const ad::Tensor& x, const Modulation& mod) const;

    void collect(ad::ParameterList& out);

private:
    nn::Linear fc_;
    nn::Linear to_gamma_;
    nn::Linear to_beta_;
    double omega0_ = 30.0;
};

/// Raw per-point outputs of one region generator.
struct LocalOutputs {
    ad::Tensor feature;  // [P, feature]; empty when not requested
    ad::Tensor color;    // [P, 3] in [-1, 1]
    ad::Tensor mask;     // [P, 1], unbounded
    ad::Tensor delta_sdf;  // [P, 1]
};

struct SdfWithGradient {
    ad::Tensor value;     // [P, 1]
    ad::Tensor gradient;  // [P, 3]
};

/// One semantic region: a shape net conditioned on w_shape feeding a texture
/// net conditioned on w_texture, with single-layer output heads.
class LocalGenerator {
public:
    LocalGenerator(const GeneratorConfig& cfg, std::size_t index, Rng& rng);
    LocalGenerator(const LocalGenerator&) = delete;
    LocalGenerator& operator=(const LocalGenerator&) = delete;

    /// points/views [P, 3], latents [1, latent].
    LocalOutputs eval(const ad::Tensor& points, const ad::Tensor& views, const ad::Tensor& w_shape,
                      const ad::Tensor& w_texture, bool want_features = true) const;
    ad::Tensor delta_sdf(const ad::Tensor& points, const ad::Tensor& w_shape) const;
    /// Residual SDF and its spatial gradient. The gradient is built from
    /// forward tangents as ordinary tape ops, so it is itself differentiable
    /// with respect to every parameter.
    SdfWithGradient delta_sdf_with_gradient(const ad::Tensor& points, const ad::Tensor& w_shape) const;

    void collect(ad::ParameterList& out);

    nn::Linear& sdf_head() { return sdf_head_; }
    nn::Linear& color_head() { return color_head_; }
    nn::Linear& mask_head() { return mask_head_; }

private:
    ad::Tensor shape_trunk(const ad::Tensor& points, const ad::Tensor& w_shape) const;

    double input_scale_ = 1.0;
    std::vector<ModulatedSineLayer> shape_;
    std::vector<ModulatedSineLayer> texture_;
    nn::Linear sdf_head_;
    nn::Linear feature_head_;
    nn::Linear color_head_;
    nn::Linear mask_head_;
    std::size_t hidden_ = 0;
};

/// Per-region conditioning. In training mode every region holds one of two
/// sampled w (source 0 or 1) for both halves; editing mode stores arbitrary
/// latents with source -1.
struct RegionLatent {
    ad::Tensor shape;    // [1, latent]
    ad::Tensor texture;  // [1, latent]
};

struct LatentAssignment {
    std::vector<RegionLatent> regions;
    std::vector<int> source;

    std::size_t size() const { return regions.size(); }
};

class CNeRFModel {
public:
    CNeRFModel(const GeneratorConfig& cfg, Rng& rng);
    CNeRFModel(const CNeRFModel&) = delete;
    CNeRFModel& operator=(const CNeRFModel&) = delete;

    const GeneratorConfig& config() const { return cfg_; }
    std::size_t regions() const { return cfg_.regions; }

    const MappingNetwork& mapping() const { return mapping_; }
    MappingNetwork& mapping() { return mapping_; }
    const LocalGenerator& region(std::size_t i) const { return *regions_.at(i); }
    LocalGenerator& region(std::size_t i) { return *regions_.at(i); }

    /// alpha = softplus(alpha_raw), tracked when a tape is active.
    ad::Tensor alpha() const;
    double alpha_value() const;
    ad::Parameter& alpha_raw() { return alpha_raw_; }
    void set_alpha(double alpha);

    /// Every generator parameter: mapping network, region generators, alpha.
    ad::ParameterList parameters();
    /// Region generators and alpha only.
    ad::ParameterList field_parameters();

private:
    GeneratorConfig cfg_;
    MappingNetwork mapping_;
    std::vector<std::unique_ptr<LocalGenerator>> regions_;
    ad::Parameter alpha_raw_;
};

/// Two w drawn through the mapping network; each region takes one of them
/// uniformly at random for both its shape and texture latent.
LatentAssignment assign_latents(Rng& rng, const MappingNetwork& net, std::size_t k);
/// Standard normal z of length `width` mapped to w.
ad::Tensor sample_w(Rng& rng, const MappingNetwork& net);
/// Editing mode: the caller's latents, unchanged.
LatentAssignment explicit_latents(std::vector<RegionLatent> regions);

/// d0(x) = |x| - r0 for points [P, 3] -> [P, 1].
ad::Tensor sphere_sdf(const ad::Tensor& points, double r0);
/// d = d0 + sum_i delta_i.
ad::Tensor aggregate_sdf(const ad::Tensor& points, double r0, std::span<const ad::Tensor> deltas);
/// sigma = sigmoid(-d / alpha) / alpha.
ad::Tensor sdf_to_density(const ad::Tensor& d, const ad::Tensor& alpha);
ad::Tensor sdf_to_density(const ad::Tensor& d, double alpha);

/// Full-scene SDF and its spatial gradient at points [P, 3].
SdfWithGradient scene_sdf_with_gradient(const CNeRFModel& model, const ad::Tensor& points,
                                        const LatentAssignment& latents);

/// Mask-weighted sum over regions: sum_i values_i * masks_i, restricted to
/// `active` (all regions when empty). values_i [P, C], masks_i [P, 1].
ad::Tensor fuse(std::span<const ad::Tensor> values, std::span<const ad::Tensor> masks,
                std::span<const std::size_t> active = {});

/// Quantities per ray, R rays with S samples each.
struct VolumeResult {
    ad::Tensor color;         // [R, 3]
    ad::Tensor feature;       // [R, F]; empty if no features were given
    ad::Tensor masks;         // [R, k]
    ad::Tensor depth;         // [R]
    ad::Tensor weights;       // [R, S]
    ad::Tensor accumulation;  // [R]
};

/// Discrete volume rendering. sigma, deltas, t: [R, S]; color [R, S, 3];
/// feature [R, S, F] or a default (rank 0) tensor; masks [R, S, k].
VolumeResult volume_aggregate(const ad::Tensor& sigma, const ad::Tensor& deltas, const ad::Tensor& t,
                              const ad::Tensor& color, const ad::Tensor& feature, const ad::Tensor& masks,
                              double depth_epsilon = 1e-10);

struct RenderOptions {
    SamplingConfig sampling;
    bool jitter = false;
    Rng* rng = nullptr;
    /// Regions fused into color and feature; empty means all.
    std::vector<std::size_t> active_regions;
    bool want_features = false;
    /// Row-major pixel indices to render; empty means the full image.
    std::vector<std::size_t> pixels;
    bool keep_raw = false;
};

struct RenderOutput {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::size_t> pixels;  // rendered pixel indices, in output row order
    ad::Tensor color;         // [R, 3]
    ad::Tensor feature;       // [R, feature] or empty
    ad::Tensor masks;         // [R, k]
    ad::Tensor depth;         // [R]
    ad::Tensor accumulation;  // [R]
    ad::Tensor sdf;           // [R * S, 1] scene SDF at every sample
    ad::Tensor weights;       // [R, S]
    std::vector<LocalOutputs> raw;  // per region, when requested
};

RenderOutput render(const CNeRFModel& model, const Camera& camera, const LatentAssignment& latents,
                    const RenderOptions& opts = {});

/// [H*W, C] pixel rows -> [1, C, H, W].
ad::Tensor to_image(const ad::Tensor& rows, std::size_t height, std::size_t width);

}  // namespace cnerf
