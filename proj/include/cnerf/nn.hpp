#pragma once

#include <cstddef>
#include <string>

#include "cnerf/autodiff/ops.hpp"
#include "cnerf/autodiff/tape.hpp"
#include "cnerf/util/rng.hpp"

namespace cnerf::nn {

/// Uniform values in [-bound, bound].
ad::Tensor uniform(ad::Shape shape, double bound, Rng& rng);

/// Fully connected layer y = x W + b with W stored as [in, out].
struct Linear {
    ad::Parameter weight;
    ad::Parameter bias;

    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out, double bound, Rng& rng, double bias_value = 0.0);

    ad::Tensor operator()(const ad::Tensor& x) const { return ad::linear(x, weight.var(), bias.var()); }
    std::size_t in() const { return weight.shape()[0]; }
    std::size_t out() const { return weight.shape()[1]; }
    void collect(ad::ParameterList& out);
};

/// 2D convolution with weight [O, C, K, K].
struct Conv2d {
    ad::Parameter weight;
    ad::Parameter bias;
    ad::Conv2dOptions options;

    Conv2d() = default;
    Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, ad::Conv2dOptions opts,
           double bound, Rng& rng);

    ad::Tensor operator()(const ad::Tensor& x) const { return ad::conv2d(x, weight.var(), bias.var(), options); }
    void collect(ad::ParameterList& out);
};

}  // namespace cnerf::nn
