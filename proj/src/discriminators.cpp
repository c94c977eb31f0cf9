#include "cnerf/discriminators.hpp"

#include <cmath>
#include <stdexcept>

namespace cnerf {

namespace {

// Kaiming-uniform bound for a leaky-ReLU layer.
double conv_bound(std::size_t fan_in, double slope) {
    return std::sqrt(6.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
}

void check_image(const ad::Tensor& x, std::size_t channels, std::size_t resolution, const char* what) {
    if (x.rank() != 4 || x.dim(1) != channels || x.dim(2) != resolution || x.dim(3) != resolution)
        throw ad::ShapeError(std::string(what) + ": expected [B," + std::to_string(channels) + "," +
                             std::to_string(resolution) + "," + std::to_string(resolution) + "], got " +
                             ad::to_string(x.shape()));
}

}  // namespace

void DiscriminatorConfig::validate() const {
    if (widths.empty()) throw std::invalid_argument("discriminator: need at least one block");
    std::size_t r = resolution;
    for (std::size_t w : widths) {
        if (w == 0) throw std::invalid_argument("discriminator: zero block width");
        if (r % 2 != 0 || r == 0)
            throw std::invalid_argument("discriminator: resolution " + std::to_string(resolution) + " cannot be halved " +
                                        std::to_string(widths.size()) + " times");
        r /= 2;
    }
    if (!(slope >= 0 && slope < 1)) throw std::invalid_argument("discriminator: slope must be in [0,1)");
}

void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
    j = nlohmann::json{{"resolution", c.resolution}, {"widths", c.widths}, {"slope", c.slope}};
}

void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
    c = DiscriminatorConfig{};
    if (j.contains("resolution")) c.resolution = j.at("resolution").get<std::size_t>();
    if (j.contains("widths")) c.widths = j.at("widths").get<std::vector<std::size_t>>();
    if (j.contains("slope")) c.slope = j.at("slope").get<double>();
    c.validate();
}

ResidualBlock::ResidualBlock(const std::string& name, std::size_t in, std::size_t out, double slope, Rng& rng)
    : conv1_(name + "/conv1", in, out, 3, {1, 1}, conv_bound(in * 9, slope), rng),
      conv2_(name + "/conv2", out, out, 3, {2, 1}, conv_bound(out * 9, slope), rng),
      skip_(name + "/skip", in, out, 1, {1, 0}, conv_bound(in, 0.0), rng),
      slope_(slope) {}

ad::Tensor ResidualBlock::operator()(const ad::Tensor& x) const {
    const auto main = conv2_(ad::leaky_relu(conv1_(x), slope_));
    const auto skip = skip_(ad::avgpool2d(x, 2));
    return ad::leaky_relu(ad::scale(ad::add(main, skip), 1.0 / std::sqrt(2.0)), slope_);
}

void ResidualBlock::collect(ad::ParameterList& out) {
    conv1_.collect(out);
    conv2_.collect(out);
    skip_.collect(out);
}

ConvTrunk::ConvTrunk(const std::string& name, std::size_t channels, const DiscriminatorConfig& cfg, Rng& rng)
    : channels_(channels) {
    cfg.validate();
    std::size_t in = channels;
    for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
        blocks_.emplace_back(name + "/block" + std::to_string(b), in, cfg.widths[b], cfg.slope, rng);
        in = cfg.widths[b];
    }
}

ad::Tensor ConvTrunk::operator()(const ad::Tensor& x) const {
    ad::Tensor h = x;
    for (const auto& b : blocks_) h = b(h);
    const std::size_t n = h.dim(0), c = h.dim(1);
    return ad::mean_axis(ad::reshape(h, {n, c, h.dim(2) * h.dim(3)}), 2);
}

void ConvTrunk::collect(ad::ParameterList& out) {
    for (auto& b : blocks_) b.collect(out);
}

GlobalDiscriminator::GlobalDiscriminator(std::size_t regions, const DiscriminatorConfig& cfg, Rng& rng)
    : regions_(regions),
      cfg_(cfg),
      image_("gd/image", 3, cfg, rng),
      mask_("gd/mask", regions, cfg, rng),
      head_("gd/head", cfg.widths.back(), 3, 0.0, rng) {
    if (regions < 1) throw std::invalid_argument("global discriminator: need at least one region");
}

ad::Tensor GlobalDiscriminator::image_features(const ad::Tensor& color) const {
    check_image(color, 3, cfg_.resolution, "global discriminator color");
    return image_(color);
}

ad::Tensor GlobalDiscriminator::mask_features(const ad::Tensor& masks) const {
    check_image(masks, regions_, cfg_.resolution, "global discriminator masks");
    return mask_(masks);
}

GlobalOutput GlobalDiscriminator::head(const ad::Tensor& features) const {
    const auto out = head_(features);
    const std::size_t b = out.dim(0);
    return {ad::reshape(ad::slice(out, 1, 0, 1), {b}), ad::slice(out, 1, 1, 3)};
}

GlobalOutput GlobalDiscriminator::operator()(const ad::Tensor& color, const ad::Tensor& masks) const {
    if (color.rank() == 4 && masks.rank() == 4 && color.dim(0) != masks.dim(0))
        throw ad::ShapeError("global discriminator: batch " + std::to_string(color.dim(0)) + " vs " +
                             std::to_string(masks.dim(0)));
    return head(ad::add(image_features(color), mask_features(masks)));
}

ad::ParameterList GlobalDiscriminator::parameters() {
    ad::ParameterList out;
    image_.collect(out);
    mask_.collect(out);
    head_.collect(out);
    return out;
}

SemanticDiscriminator::SemanticDiscriminator(std::size_t regions, const DiscriminatorConfig& cfg, Rng& rng)
    : regions_(regions),
      cfg_(cfg),
      trunk_("sd/trunk", 3, cfg, rng),
      logit_("sd/logit", cfg.widths.back(), 1, 0.0, rng),
      classes_("sd/classes", cfg.widths.back(), regions, 0.0, rng) {
    if (regions < 1) throw std::invalid_argument("semantic discriminator: need at least one region");
}

SemanticOutput SemanticDiscriminator::operator()(const ad::Tensor& region_image) const {
    check_image(region_image, 3, cfg_.resolution, "semantic discriminator");
    const auto h = trunk_(region_image);
    return {ad::reshape(logit_(h), {h.dim(0)}), classes_(h)};
}

ad::ParameterList SemanticDiscriminator::parameters() {
    ad::ParameterList out;
    trunk_.collect(out);
    logit_.collect(out);
    classes_.collect(out);
    return out;
}

ad::Tensor extract_region(const ad::Tensor& color, const ad::Tensor& masks, std::size_t region) {
    if (color.rank() != 4 || color.dim(1) != 3 || masks.rank() != 4 || masks.dim(0) != color.dim(0) ||
        masks.dim(2) != color.dim(2) || masks.dim(3) != color.dim(3))
        throw ad::ShapeError("extract_region: color " + ad::to_string(color.shape()) + " vs masks " +
                             ad::to_string(masks.shape()));
    if (region >= masks.dim(1))
        throw std::out_of_range("extract_region: region " + std::to_string(region) + " of " +
                                std::to_string(masks.dim(1)));
    return ad::mul(color, ad::slice(masks, 1, region, region + 1));
}

ad::Tensor binarize_masks(const ad::Tensor& masks) {
    std::vector<double> v = masks.to_vector();
    for (auto& x : v) x = x >= 0.5 ? 1.0 : 0.0;
    return ad::Tensor(masks.shape(), std::move(v));
}

}  // namespace cnerf
