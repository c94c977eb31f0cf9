#include "cnerf/generator.hpp"

#include <cmath>
#include <stdexcept>

namespace cnerf {

using ad::Tensor;

void GeneratorConfig::validate() const {
    if (regions < 2) throw std::invalid_argument("generator: need at least 2 regions");
    if (hidden == 0 || latent == 0 || feature == 0 || shape_layers == 0 || texture_layers == 0 || mapping_layers == 0)
        throw std::invalid_argument("generator: widths and depths must be positive");
    if (!(r0 > 0.0) || !(alpha_init > 0.0) || !(omega0 > 0.0) || !(input_extent > 0.0))
        throw std::invalid_argument("generator: r0, alpha_init, omega0 and input_extent must be positive");
    if (!labels.empty() && labels.size() != regions)
        throw std::invalid_argument("generator: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(regions) + " regions");
}

std::string GeneratorConfig::label(std::size_t region) const {
    if (region < labels.size()) return labels[region];
    return "region" + std::to_string(region);
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"regions", c.regions},         {"hidden", c.hidden},
         {"latent", c.latent},           {"feature", c.feature},
         {"shape_layers", c.shape_layers}, {"texture_layers", c.texture_layers},
         {"mapping_layers", c.mapping_layers}, {"r0", c.r0},
         {"alpha_init", c.alpha_init},   {"omega0", c.omega0},
         {"input_extent", c.input_extent}, {"head_gain", c.head_gain},
         {"labels", c.labels}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    GeneratorConfig d;
    c.regions = j.value("regions", d.regions);
    c.hidden = j.value("hidden", d.hidden);
    c.latent = j.value("latent", d.latent);
    c.feature = j.value("feature", d.feature);
    c.shape_layers = j.value("shape_layers", d.shape_layers);
    c.texture_layers = j.value("texture_layers", d.texture_layers);
    c.mapping_layers = j.value("mapping_layers", d.mapping_layers);
    c.r0 = j.value("r0", d.r0);
    c.alpha_init = j.value("alpha_init", d.alpha_init);
    c.omega0 = j.value("omega0", d.omega0);
    c.input_extent = j.value("input_extent", d.input_extent);
    c.head_gain = j.value("head_gain", d.head_gain);
    c.labels = j.value("labels", d.labels);
}

// ---- mapping network --------------------------------------------------------

MappingNetwork::MappingNetwork(std::size_t width, std::size_t layers, Rng& rng) : width_(width) {
    for (std::size_t l = 0; l < layers; ++l) {
        const bool last = l + 1 == layers;
        const double bound = std::sqrt((last ? 3.0 : 6.0) / static_cast<double>(width));
        layers_.emplace_back("mapping/" + std::to_string(l), width, width, bound, rng);
    }
}

Tensor MappingNetwork::forward(const Tensor& z) const {
    Tensor h = z;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        h = layers_[l](h);
        if (l + 1 < layers_.size()) h = ad::leaky_relu(h, 0.2);
    }
    return h;
}

void MappingNetwork::collect(ad::ParameterList& out) {
    for (auto& l : layers_) l.collect(out);
}

// ---- modulated sine layer ---------------------------------------------------

ModulatedSineLayer::ModulatedSineLayer(const std::string& name, std::size_t in, std::size_t out,
                                       std::size_t latent, bool first, double omega0, Rng& rng)
    : omega0_(omega0) {
    const double fan_in = static_cast<double>(in);
    const double bound = first ? 1.0 / fan_in : std::sqrt(6.0 / fan_in) / omega0;
    const double mod_bound = 0.25 / std::sqrt(static_cast<double>(latent));
    fc_ = nn::Linear(name + "/fc", in, out, bound, rng);
    to_gamma_ = nn::Linear(name + "/gamma", latent, out, mod_bound, rng);
    to_beta_ = nn::Linear(name + "/beta", latent, out, mod_bound, rng);
}

Modulation ModulatedSineLayer::modulation(const Tensor& w) const {
    Modulation m;
    m.gamma = ad::scale(ad::shift(to_gamma_(w), 1.0), omega0_);
    m.beta = to_beta_(w);
    m.weight = ad::mul(fc_.weight.var(), m.gamma);
    m.bias = ad::reshape(ad::add(ad::mul(fc_.bias.var(), m.gamma), m.beta), {fc_.out()});
    return m;
}

Tensor ModulatedSineLayer::preactivation(const Tensor& x, const Modulation& mod) const {
    return ad::linear(x, mod.weight, mod.bias);
}

Tensor ModulatedSineLayer::forward(const Tensor& x, const Modulation& mod) const {
    return ad::sin(preactivation(x, mod));
}

void ModulatedSineLayer::collect(ad::ParameterList& out) {
    fc_.collect(out);
    to_gamma_.collect(out);
    to_beta_.collect(out);
}

// ---- local generator --------------------------------------------------------

LocalGenerator::LocalGenerator(const GeneratorConfig& cfg, std::size_t index, Rng& rng)
    : input_scale_(1.0 / cfg.input_extent), hidden_(cfg.hidden) {
    const std::string base = "region" + std::to_string(index);
    for (std::size_t l = 0; l < cfg.shape_layers; ++l)
        shape_.emplace_back(base + "/shape" + std::to_string(l), l == 0 ? 3 : cfg.hidden, cfg.hidden, cfg.latent,
                            l == 0, cfg.omega0, rng);
    for (std::size_t l = 0; l < cfg.texture_layers; ++l)
        texture_.emplace_back(base + "/texture" + std::to_string(l), cfg.hidden, cfg.hidden, cfg.latent, false,
                              cfg.omega0, rng);
    const std::size_t head_in = cfg.hidden + 3;
    const double h = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    const double hv = 1.0 / std::sqrt(static_cast<double>(head_in));
    sdf_head_ = nn::Linear(base + "/sdf_head", cfg.hidden, 1, cfg.head_gain * h, rng);
    feature_head_ = nn::Linear(base + "/feature_head", head_in, cfg.feature, hv, rng);
    color_head_ = nn::Linear(base + "/color_head", head_in, 3, hv, rng);
    mask_head_ = nn::Linear(base + "/mask_head", head_in, 1, cfg.head_gain * hv, rng,
                            1.0 / static_cast<double>(cfg.regions));
}

Tensor LocalGenerator::shape_trunk(const Tensor& points, const Tensor& w_shape) const {
    Tensor h = ad::scale(points, input_scale_);
    for (const auto& layer : shape_) h = layer.forward(h, layer.modulation(w_shape));
    return h;
}

LocalOutputs LocalGenerator::eval(const Tensor& points, const Tensor& views, const Tensor& w_shape,
                                  const Tensor& w_texture, bool want_features) const {
    LocalOutputs out;
    Tensor h = shape_trunk(points, w_shape);
    out.delta_sdf = sdf_head_(h);
    for (const auto& layer : texture_) h = layer.forward(h, layer.modulation(w_texture));
    // head([h, v]) evaluated as h W_h + v W_v + b to avoid materialising the concatenation.
    auto head = [&](const nn::Linear& fc) {
        const Tensor w = fc.weight.var();
        return ad::add(ad::linear(h, ad::slice(w, 0, 0, hidden_), fc.bias.var()),
                       ad::matmul(views, ad::slice(w, 0, hidden_, hidden_ + 3)));
    };
    out.color = ad::tanh(head(color_head_));
    out.mask = head(mask_head_);
    if (want_features) out.feature = head(feature_head_);
    return out;
}

Tensor LocalGenerator::delta_sdf(const Tensor& points, const Tensor& w_shape) const {
    return sdf_head_(shape_trunk(points, w_shape));
}

SdfWithGradient LocalGenerator::delta_sdf_with_gradient(const Tensor& points, const Tensor& w_shape) const {
    const std::size_t n = points.dim(0);
    const Tensor x = ad::scale(points, input_scale_);

    // Tangents for the three input axes are stacked as [3, P, H].
    Tensor h, tangent;
    for (std::size_t l = 0; l < shape_.size(); ++l) {
        const auto& layer = shape_[l];
        const Modulation mod = layer.modulation(w_shape);
        const Tensor z = layer.preactivation(l == 0 ? x : h, mod);
        const Tensor cz = ad::cos(z);
        const std::size_t width = z.dim(1);
        if (l == 0) {
            // dz/dx_a = W'[a, :] * input_scale, the same for every point.
            const Tensor rows = ad::scale(mod.weight, input_scale_);
            tangent = ad::mul(ad::reshape(rows, {3, 1, width}), cz);
        } else {
            const Tensor flat = ad::reshape(tangent, {3 * n, tangent.dim(2)});
            const Tensor dz = ad::matmul(flat, mod.weight);
            tangent = ad::mul(ad::reshape(dz, {3, n, width}), cz);
        }
        h = ad::sin(z);
    }
    const Tensor flat = ad::reshape(tangent, {3 * n, tangent.dim(2)});
    const Tensor grad = ad::matmul(flat, sdf_head_.weight.var());
    return {sdf_head_(h), ad::transpose(ad::reshape(grad, {3, n}))};
}

void LocalGenerator::collect(ad::ParameterList& out) {
    for (auto& l : shape_) l.collect(out);
    for (auto& l : texture_) l.collect(out);
    sdf_head_.collect(out);
    feature_head_.collect(out);
    color_head_.collect(out);
    mask_head_.collect(out);
}

// ---- model ------------------------------------------------------------------

CNeRFModel::CNeRFModel(const GeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    mapping_ = MappingNetwork(cfg_.latent, cfg_.mapping_layers, rng);
    for (std::size_t i = 0; i < cfg_.regions; ++i) regions_.push_back(std::make_unique<LocalGenerator>(cfg_, i, rng));
    alpha_raw_ = ad::Parameter("alpha_raw", Tensor::vector({0.0}));
    set_alpha(cfg_.alpha_init);
}

Tensor CNeRFModel::alpha() const { return ad::softplus(alpha_raw_.var()); }

double CNeRFModel::alpha_value() const {
    const double r = alpha_raw_.value()[0];
    return r > 30.0 ? r : std::log1p(std::exp(r));
}

void CNeRFModel::set_alpha(double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
    alpha_raw_.assign(Tensor::vector({alpha > 30.0 ? alpha : std::log(std::expm1(alpha))}));
}

ad::ParameterList CNeRFModel::parameters() {
    ad::ParameterList out;
    mapping_.collect(out);
    for (auto& r : regions_) r->collect(out);
    out.push_back(&alpha_raw_);
    return out;
}

ad::ParameterList CNeRFModel::field_parameters() {
    ad::ParameterList out;
    for (auto& r : regions_) r->collect(out);
    out.push_back(&alpha_raw_);
    return out;
}

// ---- latents ----------------------------------------------------------------

Tensor sample_w(Rng& rng, const MappingNetwork& net) {
    return net.forward(Tensor({1, net.width()}, rng.normal_vector(net.width())));
}

LatentAssignment assign_latents(Rng& rng, const MappingNetwork& net, std::size_t k) {
    if (k < 2) throw std::invalid_argument("assign_latents: need at least 2 regions");
    const Tensor w[2] = {sample_w(rng, net), sample_w(rng, net)};
    LatentAssignment out;
    for (std::size_t i = 0; i < k; ++i) {
        const int s = rng.coin() ? 1 : 0;
        out.regions.push_back({w[s], w[s]});
        out.source.push_back(s);
    }
    return out;
}

LatentAssignment explicit_latents(std::vector<RegionLatent> regions) {
    LatentAssignment out;
    out.source.assign(regions.size(), -1);
    out.regions = std::move(regions);
    return out;
}

// ---- fields -----------------------------------------------------------------

Tensor sphere_sdf(const Tensor& points, double r0) {
    return ad::shift(ad::sqrt(ad::sum_axis(ad::square(points), 1, true)), -r0);
}

Tensor aggregate_sdf(const Tensor& points, double r0, std::span<const Tensor> deltas) {
    Tensor d = sphere_sdf(points, r0);
    for (const auto& delta : deltas) d = ad::add(d, delta);
    return d;
}

Tensor sdf_to_density(const Tensor& d, const Tensor& alpha) {
    return ad::div(ad::sigmoid(ad::div(ad::neg(d), alpha)), alpha);
}

Tensor sdf_to_density(const Tensor& d, double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("sdf_to_density: alpha must be positive, got " + std::to_string(alpha));
    return sdf_to_density(d, Tensor::scalar(alpha));
}

SdfWithGradient scene_sdf_with_gradient(const CNeRFModel& model, const Tensor& points, const LatentAssignment& latents) {
    if (latents.size() != model.regions()) throw std::invalid_argument("latent count does not match region count");
    const Tensor norm = ad::sqrt(ad::sum_axis(ad::square(points), 1, true));
    Tensor value = ad::shift(norm, -model.config().r0);
    Tensor grad = ad::div(points, norm);
    for (std::size_t i = 0; i < model.regions(); ++i) {
        const auto part = model.region(i).delta_sdf_with_gradient(points, latents.regions[i].shape);
        value = ad::add(value, part.value);
        grad = ad::add(grad, part.gradient);
    }
    return {value, grad};
}

Tensor fuse(std::span<const Tensor> values, std::span<const Tensor> masks, std::span<const std::size_t> active) {
    if (values.size() != masks.size() || values.empty())
        throw std::invalid_argument("fuse: need matching, non-empty value and mask lists");
    std::vector<std::size_t> all;
    if (active.empty()) {
        for (std::size_t i = 0; i < values.size(); ++i) all.push_back(i);
        active = all;
    }
    Tensor out = Tensor::zeros(values[0].shape());
    for (std::size_t i : active) {
        if (i >= values.size()) throw std::out_of_range("fuse: region " + std::to_string(i) + " out of range");
        out = ad::add(out, ad::mul(values[i], masks[i]));
    }
    return out;
}

VolumeResult volume_aggregate(const Tensor& sigma, const Tensor& deltas, const Tensor& t, const Tensor& color,
                              const Tensor& feature, const Tensor& masks, double depth_epsilon) {
    if (sigma.rank() != 2 || sigma.shape() != deltas.shape() || sigma.shape() != t.shape())
        throw ad::ShapeError("volume_aggregate: sigma " + ad::to_string(sigma.shape()) + ", deltas " +
                             ad::to_string(deltas.shape()) + ", t " + ad::to_string(t.shape()));
    const std::size_t r = sigma.dim(0), s = sigma.dim(1);
    const Tensor optical = ad::mul(sigma, deltas);
    const Tensor transmittance = ad::exp(ad::neg(ad::cumsum_exclusive(optical)));
    const Tensor opacity = ad::shift(ad::neg(ad::exp(ad::neg(optical))), 1.0);

    VolumeResult out;
    out.weights = ad::mul(transmittance, opacity);
    const Tensor w3 = ad::reshape(out.weights, {r, s, 1});
    auto accumulate = [&](const Tensor& field) { return ad::sum_axis(ad::mul(w3, field), 1); };
    out.color = accumulate(color);
    if (feature.rank() > 0) out.feature = accumulate(feature);
    out.masks = accumulate(masks);
    out.accumulation = ad::sum_axis(out.weights, 1);
    out.depth = ad::div(ad::sum_axis(ad::mul(out.weights, t), 1), ad::clamp_min(out.accumulation, depth_epsilon));
    return out;
}

// ---- rendering --------------------------------------------------------------

namespace {

RenderOutput render_rays(const CNeRFModel& model, const Camera& camera, const LatentAssignment& latents,
                         const RenderOptions& opts, const std::vector<Ray>& rays,
                         const std::vector<std::size_t>& pixels) {
    const std::size_t r = pixels.size();
    const std::size_t s = opts.sampling.count;
    const std::size_t p = r * s;
    const std::size_t k = model.regions();

    std::vector<double> pts(p * 3), dirs(p * 3), ts(p), ds(p);
    for (std::size_t i = 0; i < r; ++i) {
        const Ray& ray = rays[pixels[i]];
        const RaySamples smp =
            stratified_samples(ray, opts.sampling.near, opts.sampling.far, s, opts.rng, opts.jitter);
        const auto deltas = smp.deltas();
        for (std::size_t j = 0; j < s; ++j) {
            const std::size_t q = i * s + j;
            for (int a = 0; a < 3; ++a) {
                pts[q * 3 + a] = smp.points[j][a];
                dirs[q * 3 + a] = ray.direction[a];
            }
            ts[q] = smp.t[j];
            ds[q] = deltas[j];
        }
    }
    const Tensor points({p, 3}, std::move(pts));
    const Tensor views({p, 3}, std::move(dirs));
    const Tensor t({r, s}, std::move(ts));
    const Tensor deltas({r, s}, std::move(ds));

    std::vector<LocalOutputs> raw;
    std::vector<Tensor> sdf_parts, colors, features, masks;
    for (std::size_t i = 0; i < k; ++i) {
        raw.push_back(model.region(i).eval(points, views, latents.regions[i].shape, latents.regions[i].texture,
                                           opts.want_features));
        sdf_parts.push_back(raw.back().delta_sdf);
        colors.push_back(raw.back().color);
        masks.push_back(raw.back().mask);
        if (opts.want_features) features.push_back(raw.back().feature);
    }

    RenderOutput out;
    out.width = camera.width;
    out.height = camera.height;
    out.pixels = pixels;
    out.sdf = aggregate_sdf(points, model.config().r0, sdf_parts);
    const Tensor sigma = ad::reshape(sdf_to_density(out.sdf, model.alpha()), {r, s});
    const Tensor color = ad::reshape(fuse(colors, masks, opts.active_regions), {r, s, 3});
    Tensor feature;
    if (opts.want_features)
        feature = ad::reshape(fuse(features, masks, opts.active_regions), {r, s, model.config().feature});
    const Tensor mask_stack = ad::reshape(ad::concat(masks, 1), {r, s, k});

    VolumeResult vr = volume_aggregate(sigma, deltas, t, color, feature, mask_stack);
    out.color = vr.color;
    out.feature = vr.feature;
    out.masks = vr.masks;
    out.depth = vr.depth;
    out.accumulation = vr.accumulation;
    out.weights = vr.weights;
    if (opts.keep_raw) out.raw = std::move(raw);
    return out;
}

}  // namespace

RenderOutput render(const CNeRFModel& model, const Camera& camera, const LatentAssignment& latents,
                    const RenderOptions& opts) {
    camera.validate();
    if (latents.size() != model.regions())
        throw std::invalid_argument("render: " + std::to_string(latents.size()) + " latents for " +
                                    std::to_string(model.regions()) + " regions");
    for (std::size_t i : opts.active_regions)
        if (i >= model.regions()) throw std::out_of_range("render: active region " + std::to_string(i) + " out of range");
    if (opts.jitter && opts.rng == nullptr) throw std::invalid_argument("render: jitter requires an rng");

    const auto rays = generate_rays(camera);
    std::vector<std::size_t> pixels = opts.pixels;
    if (pixels.empty()) {
        pixels.resize(rays.size());
        for (std::size_t i = 0; i < rays.size(); ++i) pixels[i] = i;
    }
    for (std::size_t px : pixels)
        if (px >= rays.size()) throw std::out_of_range("render: pixel " + std::to_string(px) + " out of range");

    try {
        return render_rays(model, camera, latents, opts, rays, pixels);
    } catch (const ad::NumericError& e) {
        // Re-render ray by ray to name the first offending pixel.
        ad::NoGradScope no_grad;
        RenderOptions single = opts;
        single.jitter = false;
        single.keep_raw = false;
        for (std::size_t px : pixels) {
            try {
                render_rays(model, camera, latents, single, rays, {px});
            } catch (const ad::NumericError&) {
                throw ad::NumericError(std::string(e.what()) + " (pixel x=" + std::to_string(px % camera.width) +
                                       ", y=" + std::to_string(px / camera.width) + ")");
            }
        }
        throw;
    }
}

Tensor to_image(const Tensor& rows, std::size_t height, std::size_t width) {
    if (rows.rank() != 2 || rows.dim(0) != height * width)
        throw ad::ShapeError("to_image: " + ad::to_string(rows.shape()) + " for " + std::to_string(height) + "x" +
                             std::to_string(width));
    return ad::reshape(ad::transpose(rows), {1, rows.dim(1), height, width});
}

}  // namespace cnerf
