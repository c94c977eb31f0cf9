#pragma once

#include <cstddef>
#include <vector>

#include "cnerf/generator.hpp"

namespace cnerf::test_util {

inline ad::Tensor random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    const auto n = ad::numel(shape);
    return ad::Tensor(std::move(shape), rng.uniform_vector(n, lo, hi));
}

/// Small widths so finite-difference checks stay cheap.
inline GeneratorConfig tiny_config(std::size_t regions = 2) {
    GeneratorConfig cfg;
    cfg.regions = regions;
    cfg.hidden = 6;
    cfg.latent = 4;
    cfg.feature = 4;
    cfg.mapping_layers = 2;
    return cfg;
}

inline LatentAssignment random_latents(Rng& rng, std::size_t k, std::size_t width) {
    std::vector<RegionLatent> regions;
    for (std::size_t i = 0; i < k; ++i)
        regions.push_back({ad::Tensor({1, width}, rng.normal_vector(width)), ad::Tensor({1, width}, rng.normal_vector(width))});
    return explicit_latents(std::move(regions));
}

inline void zero(ad::Parameter& p, double value = 0.0) { p.assign(ad::Tensor::full(p.shape(), value)); }

/// Residual heads zeroed, region 0 carries mask 1 and every other region 0,
/// colors constant: the rendered geometry is the bare base sphere.
inline void make_pure_sphere(CNeRFModel& model, double color = 0.5) {
    for (std::size_t i = 0; i < model.regions(); ++i) {
        auto& g = model.region(i);
        zero(g.sdf_head().weight);
        zero(g.sdf_head().bias);
        zero(g.mask_head().weight);
        zero(g.mask_head().bias, i == 0 ? 1.0 : 0.0);
        zero(g.color_head().weight);
        zero(g.color_head().bias, std::atanh(color));
    }
}

}  // namespace cnerf::test_util
