#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cnerf/autodiff/ops.hpp"
#include "cnerf/autodiff/tape.hpp"
#include "cnerf/nn.hpp"
#include "cnerf/util/rng.hpp"
#include "json.hpp"

namespace cnerf {

struct DiscriminatorConfig {
    std::size_t resolution = 32;
    /// Channel width of each residual block; each block halves the resolution.
    std::vector<std::size_t> widths = {32, 64, 128};
    double slope = 0.2;

    void validate() const;
};

void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);

/// conv3x3 -> leaky -> conv3x3/stride 2, plus an avg-pooled 1x1 skip, summed
/// and scaled by 1/sqrt(2).
class ResidualBlock {
public:
    ResidualBlock(const std::string& name, std::size_t in, std::size_t out, double slope, Rng& rng);
    ad::Tensor operator()(const ad::Tensor& x) const;
    void collect(ad::ParameterList& out);

private:
    nn::Conv2d conv1_;
    nn::Conv2d conv2_;
    nn::Conv2d skip_;
    double slope_;
};

/// Residual stack followed by global average pooling: [B, C, H, W] -> [B, widths.back()].
class ConvTrunk {
public:
    ConvTrunk(const std::string& name, std::size_t channels, const DiscriminatorConfig& cfg, Rng& rng);
    ad::Tensor operator()(const ad::Tensor& x) const;
    std::size_t channels() const { return channels_; }
    void collect(ad::ParameterList& out);

private:
    std::size_t channels_;
    std::vector<ResidualBlock> blocks_;
};

struct GlobalOutput {
    ad::Tensor logit;  // [B]
    ad::Tensor view;   // [B, 2] (azimuth, elevation)
};

/// Image and mask branches whose pooled features are added, then one shared
/// linear layer split into a real/fake logit and a view prediction.
class GlobalDiscriminator {
public:
    GlobalDiscriminator(std::size_t regions, const DiscriminatorConfig& cfg, Rng& rng);
    GlobalDiscriminator(const GlobalDiscriminator&) = delete;
    GlobalDiscriminator& operator=(const GlobalDiscriminator&) = delete;

    /// color [B, 3, H, W], masks [B, k, H, W].
    GlobalOutput operator()(const ad::Tensor& color, const ad::Tensor& masks) const;

    ad::Tensor image_features(const ad::Tensor& color) const;
    ad::Tensor mask_features(const ad::Tensor& masks) const;
    GlobalOutput head(const ad::Tensor& features) const;

    std::size_t regions() const { return regions_; }
    const DiscriminatorConfig& config() const { return cfg_; }
    ad::ParameterList parameters();

private:
    std::size_t regions_;
    DiscriminatorConfig cfg_;
    ConvTrunk image_;
    ConvTrunk mask_;
    nn::Linear head_;
};

struct SemanticOutput {
    ad::Tensor logit;    // [B]
    ad::Tensor classes;  // [B, k]
};

/// One residual stack over a masked region image with a real/fake head and a
/// k-way class head.
class SemanticDiscriminator {
public:
    SemanticDiscriminator(std::size_t regions, const DiscriminatorConfig& cfg, Rng& rng);
    SemanticDiscriminator(const SemanticDiscriminator&) = delete;
    SemanticDiscriminator& operator=(const SemanticDiscriminator&) = delete;

    /// region_image [B, 3, H, W].
    SemanticOutput operator()(const ad::Tensor& region_image) const;

    std::size_t regions() const { return regions_; }
    const DiscriminatorConfig& config() const { return cfg_; }
    ad::ParameterList parameters();

private:
    std::size_t regions_;
    DiscriminatorConfig cfg_;
    ConvTrunk trunk_;
    nn::Linear logit_;
    nn::Linear classes_;
};

/// color [B, 3, H, W] times masks[:, region] broadcast over channels.
ad::Tensor extract_region(const ad::Tensor& color, const ad::Tensor& masks, std::size_t region);

/// Rounds ground-truth masks to {0, 1} (threshold 0.5).
ad::Tensor binarize_masks(const ad::Tensor& masks);

}  // namespace cnerf
