#include "cnerf/nn.hpp"

namespace cnerf::nn {

ad::Tensor uniform(ad::Shape shape, double bound, Rng& rng) {
    const std::size_t n = ad::numel(shape);
    return ad::Tensor(std::move(shape), rng.uniform_vector(n, -bound, bound));
}

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, double bound, Rng& rng, double bias_value)
    : weight(name + "/weight", uniform({in, out}, bound, rng)),
      bias(name + "/bias", ad::Tensor::full({out}, bias_value)) {}

void Linear::collect(ad::ParameterList& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

Conv2d::Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, ad::Conv2dOptions opts,
               double bound, Rng& rng)
    : weight(name + "/weight", uniform({out, in, kernel, kernel}, bound, rng)),
      bias(name + "/bias", ad::Tensor::zeros({out})),
      options(opts) {}

void Conv2d::collect(ad::ParameterList& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

}  // namespace cnerf::nn
