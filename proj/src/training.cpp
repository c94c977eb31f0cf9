#include "cnerf/training.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace cnerf {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* what) {
    if (!j.is_object()) throw std::invalid_argument(std::string(what) + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* k : keys) known = known || key == k;
        if (!known) throw std::invalid_argument(std::string(what) + ": unknown key '" + key + "'");
    }
}

json sampling_json(const SamplingConfig& s) { return {{"near", s.near}, {"far", s.far}, {"count", s.count}}; }

SamplingConfig sampling_from(const json& j) {
    reject_unknown(j, {"near", "far", "count"}, "sampling");
    SamplingConfig s;
    s.near = j.value("near", s.near);
    s.far = j.value("far", s.far);
    s.count = j.value("count", s.count);
    if (!(s.near < s.far) || s.count < 2) throw std::invalid_argument("sampling: need near < far and count >= 2");
    return s;
}

json jitter_json(const JitterSpec& s) {
    return {{"enabled", s.enabled},
            {"color", s.color},
            {"size", s.size},
            {"sigma_azimuth", s.sigma_azimuth},
            {"sigma_elevation", s.sigma_elevation}};
}

JitterSpec jitter_from(const json& j) {
    reject_unknown(j, {"enabled", "color", "size", "sigma_azimuth", "sigma_elevation"}, "jitter");
    JitterSpec s;
    s.enabled = j.value("enabled", s.enabled);
    s.color = j.value("color", s.color);
    s.size = j.value("size", s.size);
    s.sigma_azimuth = j.value("sigma_azimuth", s.sigma_azimuth);
    s.sigma_elevation = j.value("sigma_elevation", s.sigma_elevation);
    return s;
}

/// Row-major [H*W, C] values -> [1, C, H, W].
ad::Tensor rows_to_image(std::span<const double> rows, std::size_t h, std::size_t w, std::size_t c) {
    std::vector<double> out(rows.size());
    const std::size_t hw = h * w;
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) out[ch * hw + p] = rows[p * c + ch];
    return ad::Tensor({1, c, h, w}, std::move(out));
}

ad::Tensor uniform_points(Rng& rng, std::size_t n, double extent) {
    return ad::Tensor({n, 3}, rng.uniform_vector(n * 3, -extent, extent));
}

void require_finite(std::int64_t step, const std::vector<std::pair<const char*, double>>& values) {
    bool ok = true;
    for (const auto& [name, v] : values) ok = ok && std::isfinite(v);
    if (ok) return;
    std::ostringstream msg;
    msg << "training diverged at step " << step << ":";
    for (const auto& [name, v] : values) msg << " " << name << "=" << v;
    throw DivergenceError(msg.str());
}

/// Accumulates per-region intersection and union counts over several views.
struct IouAccumulator {
    std::vector<double> inter, uni;
    explicit IouAccumulator(std::size_t k) : inter(k, 0.0), uni(k, 0.0) {}
    void add(std::span<const std::size_t> pred, std::span<const std::size_t> truth) {
        for (std::size_t i = 0; i < pred.size(); ++i)
            for (std::size_t r = 0; r < inter.size(); ++r) {
                const bool a = pred[i] == r, b = truth[i] == r;
                inter[r] += a && b;
                uni[r] += a || b;
            }
    }
    std::vector<double> result() const {
        std::vector<double> out(inter.size());
        for (std::size_t r = 0; r < out.size(); ++r) out[r] = uni[r] == 0 ? 1.0 : inter[r] / uni[r];
        return out;
    }
};

LatentAssignment uniform_latents(const ad::Tensor& shape, const ad::Tensor& texture, std::size_t k) {
    std::vector<RegionLatent> regions(k, RegionLatent{shape, texture});
    return explicit_latents(std::move(regions));
}

std::uint32_t dataset_fingerprint(const std::vector<OracleSample>& data) {
    uLong c = crc32(0L, Z_NULL, 0);
    for (const auto& s : data) {
        c = crc32(c, reinterpret_cast<const Bytef*>(s.image.data()), static_cast<uInt>(s.image.size() * sizeof(double)));
        c = crc32(c, reinterpret_cast<const Bytef*>(s.masks.data()), static_cast<uInt>(s.masks.size() * sizeof(double)));
    }
    return static_cast<std::uint32_t>(c);
}

ad::ParameterList region_parameters(CNeRFModel& model) {
    auto params = model.field_parameters();
    std::erase(params, &model.alpha_raw());
    return params;
}

}  // namespace

double compute_psnr(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("psnr: image sizes " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    double mse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = 0.5 * (a[i] - b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

double compute_iou(std::span<const bool> mask, std::span<const bool> truth) {
    if (mask.size() != truth.size())
        throw std::invalid_argument("iou: mask sizes " + std::to_string(mask.size()) + " and " + std::to_string(truth.size()));
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        inter += mask[i] && truth[i];
        uni += mask[i] || truth[i];
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::size_t> mask_labels(const ad::Tensor& masks) {
    if (masks.rank() != 2) throw ad::ShapeError("mask_labels: expected [R,k], got " + ad::to_string(masks.shape()));
    const std::size_t r = masks.dim(0), k = masks.dim(1);
    const auto d = masks.data();
    std::vector<std::size_t> out(r);
    for (std::size_t i = 0; i < r; ++i)
        out[i] = static_cast<std::size_t>(std::max_element(d.begin() + i * k, d.begin() + (i + 1) * k) - (d.begin() + i * k));
    return out;
}

std::vector<double> region_ious(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                                std::size_t regions) {
    if (predicted.size() != truth.size()) throw std::invalid_argument("region_ious: label map sizes differ");
    IouAccumulator acc(regions);
    acc.add(predicted, truth);
    return acc.result();
}

void MetricsLog::log(std::int64_t step, const std::string& component, double value) {
    records_.push_back({step, component, value});
    if (sink_ != nullptr) {
        // Non-finite values are not representable in JSON; they are written as null.
        json j{{"step", step}, {"component", component}, {"value", value}};
        if (!std::isfinite(value)) j["value"] = nullptr;
        *sink_ << j.dump() << '\n';
        sink_->flush();
    }
}

std::vector<double> MetricsLog::series(const std::string& component) const {
    std::vector<double> out;
    for (const auto& r : records_)
        if (r.component == component) out.push_back(r.value);
    return out;
}

// ---------------------------------------------------------------------------
// Fitting

void FitConfig::validate() const {
    if (views == 0 || resolution == 0 || iterations == 0 || rays_per_step == 0)
        throw std::invalid_argument("fit: views, resolution, iterations and rays_per_step must be positive");
    if (rays_per_step > resolution * resolution)
        throw std::invalid_argument("fit: rays_per_step exceeds the pixel count");
    if (!(lr > 0) || !(alpha_lr >= 0) || !(lr_final_ratio > 0) || !(photometric_weight >= 0) || !(mask_weight >= 0) || !(eikonal_extent > 0))
        throw std::invalid_argument("fit: lr and extents must be positive, weights non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("fit: betas must be in [0,1)");
    weights.validate();
}

void to_json(json& j, const FitConfig& c) {
    j = {{"views", c.views},
         {"held_out", c.held_out},
         {"resolution", c.resolution},
         {"iterations", c.iterations},
         {"rays_per_step", c.rays_per_step},
         {"eikonal_points", c.eikonal_points},
         {"eikonal_extent", c.eikonal_extent},
         {"photometric_weight", c.photometric_weight},
         {"mask_weight", c.mask_weight},
         {"lr", c.lr},
         {"alpha_lr", c.alpha_lr},
         {"lr_final_ratio", c.lr_final_ratio},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"eval_every", c.eval_every},
         {"weights", c.weights},
         {"sampling", sampling_json(c.sampling)},
         {"seed", c.seed}};
}

void from_json(const json& j, FitConfig& c) {
    reject_unknown(j,
                   {"views", "held_out", "resolution", "iterations", "rays_per_step", "eikonal_points", "eikonal_extent",
                    "photometric_weight", "mask_weight", "lr", "alpha_lr", "lr_final_ratio", "beta1", "beta2", "eval_every", "weights", "sampling",
                    "seed"},
                   "fit config");
    FitConfig d;
    c.views = j.value("views", d.views);
    c.held_out = j.value("held_out", d.held_out);
    c.resolution = j.value("resolution", d.resolution);
    c.iterations = j.value("iterations", d.iterations);
    c.rays_per_step = j.value("rays_per_step", d.rays_per_step);
    c.eikonal_points = j.value("eikonal_points", d.eikonal_points);
    c.eikonal_extent = j.value("eikonal_extent", d.eikonal_extent);
    c.photometric_weight = j.value("photometric_weight", d.photometric_weight);
    c.mask_weight = j.value("mask_weight", d.mask_weight);
    c.lr = j.value("lr", d.lr);
    c.alpha_lr = j.value("alpha_lr", d.alpha_lr);
    c.lr_final_ratio = j.value("lr_final_ratio", d.lr_final_ratio);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eval_every = j.value("eval_every", d.eval_every);
    c.weights = j.contains("weights") ? j.at("weights").get<LossWeights>() : d.weights;
    c.sampling = j.contains("sampling") ? sampling_from(j.at("sampling")) : d.sampling;
    c.seed = j.value("seed", d.seed);
    c.validate();
}

FitTrainer::FitTrainer(CNeRFModel& model, AnalyticScene scene, FitConfig cfg, MetricsLog* log)
    : model_(model),
      scene_(std::move(scene)),
      cfg_(std::move(cfg)),
      log_(log),
      rng_(cfg_.seed),
      opt_(region_parameters(model), {cfg_.lr, cfg_.beta1, cfg_.beta2, 1e-8}),
      alpha_opt_({&model.alpha_raw()}, {cfg_.alpha_lr, cfg_.beta1, cfg_.beta2, 1e-8}) {
    cfg_.validate();
    scene_.validate();
    if (scene_.regions != model.regions())
        throw std::invalid_argument("fit: scene has " + std::to_string(scene_.regions) + " regions, model has " +
                                    std::to_string(model.regions()));
    Camera base;
    base.width = base.height = cfg_.resolution;
    OracleOptions oracle;
    oracle.near = 0.0;
    for (std::size_t i = 0; i < cfg_.views + cfg_.held_out; ++i) {
        auto sample = oracle_render(scene_, sample_pose(rng_, 0.3, 0.15, base), oracle);
        (i < cfg_.views ? train_ : held_out_).push_back(std::move(sample));
    }
    const std::size_t w = model.config().latent;
    std::vector<RegionLatent> regions;
    for (std::size_t r = 0; r < model.regions(); ++r)
        regions.push_back({ad::Tensor({1, w}, rng_.normal_vector(w)), ad::Tensor({1, w}, rng_.normal_vector(w))});
    latents_ = explicit_latents(std::move(regions));
}

FitStep FitTrainer::step() {
    const auto& view = train_[rng_.below(train_.size())];
    const std::size_t pixels = view.pixels(), k = model_.regions();

    // Distinct pixels via a partial Fisher-Yates shuffle.
    std::vector<std::size_t> order(pixels);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < cfg_.rays_per_step; ++i) std::swap(order[i], order[i + rng_.below(pixels - i)]);
    order.resize(cfg_.rays_per_step);

    std::vector<double> target_color, target_masks;
    for (std::size_t p : order) {
        target_color.insert(target_color.end(), view.image.begin() + p * 3, view.image.begin() + p * 3 + 3);
        target_masks.insert(target_masks.end(), view.masks.begin() + p * k, view.masks.begin() + (p + 1) * k);
    }
    const std::size_t r = order.size();

    RenderOptions opts;
    opts.sampling = cfg_.sampling;
    opts.jitter = true;
    opts.rng = &rng_;
    opts.pixels = order;
    const ad::Tensor points = uniform_points(rng_, cfg_.eikonal_points, cfg_.eikonal_extent);

    ad::Tape tape;
    ad::TapeScope scope(tape);
    const auto out = render(model_, view.camera, latents_, opts);
    const auto photometric = ad::mean(ad::square(ad::sub(out.color, ad::Tensor({r, 3}, std::move(target_color)))));
    const auto mask = ad::mean(ad::square(ad::sub(out.masks, ad::Tensor({r, k}, std::move(target_masks)))));
    const auto eik = cfg_.eikonal_points > 0 ? eikonal_loss(model_, points, latents_) : ad::Tensor::scalar(0.0);
    const auto ms = minimal_surface_loss(out.sdf, cfg_.weights.ms_sharpness);
    const auto total = ad::add(ad::add(ad::scale(photometric, cfg_.photometric_weight), ad::scale(mask, cfg_.mask_weight)),
                               ad::add(ad::scale(eik, cfg_.weights.eikonal), ad::scale(ms, cfg_.weights.minimal_surface)));

    FitStep s{total.item(), photometric.item(), mask.item(), eik.item(), ms.item()};
    require_finite(step_, {{"total", s.total},
                           {"photometric", s.photometric},
                           {"mask", s.mask},
                           {"eikonal", s.eikonal},
                           {"minimal_surface", s.minimal_surface}});
    const auto grads = tape.backward(total);
    const double decay = std::pow(cfg_.lr_final_ratio, static_cast<double>(step_) / static_cast<double>(cfg_.iterations));
    opt_.set_lr(cfg_.lr * decay);
    alpha_opt_.set_lr(cfg_.alpha_lr * decay);
    opt_.step(grads);
    alpha_opt_.step(grads);
    ++step_;
    if (log_ != nullptr) {
        log_->log(step_, "total", s.total);
        log_->log(step_, "photometric", s.photometric);
        log_->log(step_, "mask", s.mask);
        log_->log(step_, "eikonal", s.eikonal);
        log_->log(step_, "minimal_surface", s.minimal_surface);
        log_->log(step_, "alpha", model_.alpha_value());
    }
    return s;
}

FitEvaluation FitTrainer::evaluate() const {
    ad::NoGradScope no_grad;
    RenderOptions opts;
    opts.sampling = cfg_.sampling;
    auto score = [&](const std::vector<OracleSample>& views, double& psnr, std::vector<double>& iou) {
        IouAccumulator acc(model_.regions());
        psnr = 0.0;
        for (const auto& v : views) {
            const auto out = render(model_, v.camera, latents_, opts);
            psnr += compute_psnr(out.color.data(), v.image) / static_cast<double>(views.size());
            acc.add(mask_labels(out.masks), v.labels);
        }
        iou = acc.result();
    };
    FitEvaluation e;
    score(train_, e.train_psnr, e.train_iou);
    if (!held_out_.empty()) score(held_out_, e.held_out_psnr, e.held_out_iou);
    return e;
}

FitEvaluation FitTrainer::run(const std::function<void(std::int64_t, const FitStep&)>& on_step) {
    while (step_ < static_cast<std::int64_t>(cfg_.iterations)) {
        const auto s = step();
        if (on_step) on_step(step_, s);
        if (cfg_.eval_every > 0 && step_ % static_cast<std::int64_t>(cfg_.eval_every) == 0 && log_ != nullptr) {
            const auto e = evaluate();
            log_->log(step_, "eval/train_psnr", e.train_psnr);
            log_->log(step_, "eval/held_out_psnr", e.held_out_psnr);
            for (std::size_t r = 0; r < e.train_iou.size(); ++r)
                log_->log(step_, "eval/train_iou/" + model_.config().label(r), e.train_iou[r]);
        }
    }
    return evaluate();
}

Checkpoint FitTrainer::checkpoint() const {
    Checkpoint c;
    add_generator(c, model_);
    c.header["kind"] = "fit";
    c.header["step"] = step_;
    c.header["rng"] = rng_.serialize();
    c.header["fit"] = cfg_;
    c.header["scene"] = scene_;
    add_optimizer(c, "opt", opt_);
    add_optimizer(c, "opt_alpha", alpha_opt_);
    for (std::size_t r = 0; r < latents_.size(); ++r) {
        c.add("fit/latent/" + std::to_string(r) + "/shape", latents_.regions[r].shape.data());
        c.add("fit/latent/" + std::to_string(r) + "/texture", latents_.regions[r].texture.data());
    }
    return c;
}

void FitTrainer::restore(const Checkpoint& c) {
    if (c.header.value("kind", "") != "fit") throw CheckpointError("checkpoint was not written by a fit run");
    if (json(cfg_) != c.header.at("fit") || json(scene_) != c.header.at("scene"))
        throw CheckpointError("checkpoint fit config or scene differs from this trainer");
    const std::size_t w = model_.config().latent;
    std::vector<RegionLatent> regions;
    for (std::size_t r = 0; r < model_.regions(); ++r)
        regions.push_back({ad::Tensor({1, w}, c.get("fit/latent/" + std::to_string(r) + "/shape", w)),
                           ad::Tensor({1, w}, c.get("fit/latent/" + std::to_string(r) + "/texture", w))});
    // Everything is validated before the model is touched.
    auto params = model_.parameters();
    for (const auto* p : params) c.get("generator/" + p->name(), p->size());
    Rng rng = Rng::deserialize(c.header.at("rng").get<std::string>());
    restore_optimizer(c, "opt", opt_);
    restore_optimizer(c, "opt_alpha", alpha_opt_);
    restore_parameters(c, "generator/", params);
    latents_ = explicit_latents(std::move(regions));
    rng_ = rng;
    step_ = c.header.at("step").get<std::int64_t>();
}

// ---------------------------------------------------------------------------
// Adversarial training

void GanConfig::validate() const {
    if (dataset_size == 0 || resolution == 0 || batch == 0 || iterations == 0)
        throw std::invalid_argument("gan: dataset_size, resolution, batch and iterations must be positive");
    if (!(lr_g > 0) || !(lr_d > 0)) throw std::invalid_argument("gan: learning rates must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("gan: betas must be in [0,1)");
    if (discriminator.resolution != resolution)
        throw std::invalid_argument("gan: discriminator resolution " + std::to_string(discriminator.resolution) +
                                    " differs from training resolution " + std::to_string(resolution));
    weights.validate();
    generator.validate();
    discriminator.validate();
}

void to_json(json& j, const GanConfig& c) {
    j = {{"dataset_size", c.dataset_size},
         {"resolution", c.resolution},
         {"batch", c.batch},
         {"iterations", c.iterations},
         {"lr_g", c.lr_g},
         {"lr_d", c.lr_d},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"std_every", c.std_every},
         {"eikonal_points", c.eikonal_points},
         {"eikonal_extent", c.eikonal_extent},
         {"weights", c.weights},
         {"sampling", sampling_json(c.sampling)},
         {"generator", c.generator},
         {"discriminator", c.discriminator},
         {"jitter", jitter_json(c.jitter)},
         {"seed", c.seed}};
}

void from_json(const json& j, GanConfig& c) {
    reject_unknown(j,
                   {"dataset_size", "resolution", "batch", "iterations", "lr_g", "lr_d", "beta1", "beta2", "std_every",
                    "eikonal_points", "eikonal_extent", "weights", "sampling", "generator", "discriminator", "jitter",
                    "seed"},
                   "gan config");
    GanConfig d;
    c.dataset_size = j.value("dataset_size", d.dataset_size);
    c.resolution = j.value("resolution", d.resolution);
    c.batch = j.value("batch", d.batch);
    c.iterations = j.value("iterations", d.iterations);
    c.lr_g = j.value("lr_g", d.lr_g);
    c.lr_d = j.value("lr_d", d.lr_d);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.std_every = j.value("std_every", d.std_every);
    c.eikonal_points = j.value("eikonal_points", d.eikonal_points);
    c.eikonal_extent = j.value("eikonal_extent", d.eikonal_extent);
    c.weights = j.contains("weights") ? j.at("weights").get<LossWeights>() : d.weights;
    c.sampling = j.contains("sampling") ? sampling_from(j.at("sampling")) : d.sampling;
    c.generator = j.contains("generator") ? j.at("generator").get<GeneratorConfig>() : d.generator;
    if (j.contains("discriminator")) {
        c.discriminator = j.at("discriminator").get<DiscriminatorConfig>();
    } else {
        c.discriminator = d.discriminator;
        c.discriminator.resolution = c.resolution;
    }
    c.jitter = j.contains("jitter") ? jitter_from(j.at("jitter")) : d.jitter;
    c.seed = j.value("seed", d.seed);
    c.validate();
}

GanTrainer::GanTrainer(GanConfig cfg, std::vector<OracleSample> dataset, MetricsLog* log)
    : cfg_(std::move(cfg)), data_(std::move(dataset)), log_(log), rng_(cfg_.seed) {
    cfg_.validate();
    if (data_.empty()) throw std::invalid_argument("gan: empty dataset");
    const std::size_t k = cfg_.generator.regions;
    for (const auto& s : data_) {
        if (s.camera.width != cfg_.resolution || s.camera.height != cfg_.resolution)
            throw std::invalid_argument("gan: dataset resolution does not match the config");
        if (s.masks.size() != s.pixels() * k) throw std::invalid_argument("gan: dataset region count does not match k");
    }
    model_ = std::make_unique<CNeRFModel>(cfg_.generator, rng_);
    gd_ = std::make_unique<GlobalDiscriminator>(k, cfg_.discriminator, rng_);
    sd_ = std::make_unique<SemanticDiscriminator>(k, cfg_.discriminator, rng_);
    opt_g_ = std::make_unique<ad::Adam>(model_->parameters(), ad::AdamConfig{cfg_.lr_g, cfg_.beta1, cfg_.beta2, 1e-8});
    auto dparams = gd_->parameters();
    const auto sp = sd_->parameters();
    dparams.insert(dparams.end(), sp.begin(), sp.end());
    opt_d_ = std::make_unique<ad::Adam>(dparams, ad::AdamConfig{cfg_.lr_d, cfg_.beta1, cfg_.beta2, 1e-8});
}

GanBatch GanTrainer::real_batch(std::span<const std::size_t> indices) const {
    const std::size_t h = cfg_.resolution, w = cfg_.resolution, k = cfg_.generator.regions;
    std::vector<ad::Tensor> colors, masks;
    for (std::size_t i : indices) {
        const auto& s = data_.at(i);
        colors.push_back(rows_to_image(s.image, h, w, 3));
        masks.push_back(rows_to_image(s.masks, h, w, k));
    }
    return {ad::concat(colors, 0), ad::concat(masks, 0)};
}

GanTrainer::Fake GanTrainer::generate(bool track) {
    std::unique_ptr<ad::NoGradScope> no_grad;
    if (!track) no_grad = std::make_unique<ad::NoGradScope>();
    const std::size_t k = model_->regions(), res = cfg_.resolution;
    Camera base;
    base.width = base.height = res;
    RenderOptions opts;
    opts.sampling = cfg_.sampling;
    opts.jitter = true;
    opts.rng = &rng_;

    Fake f;
    std::vector<ad::Tensor> colors, masks, sdfs;
    std::vector<double> poses;
    for (std::size_t b = 0; b < cfg_.batch; ++b) {
        f.latents.push_back(assign_latents(rng_, model_->mapping(), k));
        f.cameras.push_back(sample_pose(rng_, cfg_.jitter.sigma_azimuth, cfg_.jitter.sigma_elevation, base));
        const auto out = render(*model_, f.cameras.back(), f.latents.back(), opts);
        colors.push_back(to_image(out.color, res, res));
        masks.push_back(to_image(out.masks, res, res));
        sdfs.push_back(out.sdf);
        poses.push_back(f.cameras.back().azimuth);
        poses.push_back(f.cameras.back().elevation);
    }
    f.color = ad::concat(colors, 0);
    f.masks = ad::concat(masks, 0);
    f.sdf = ad::concat(sdfs, 0);
    f.poses = ad::Tensor({cfg_.batch, 2}, std::move(poses));
    return f;
}

DStep GanTrainer::d_step() {
    const std::size_t b = cfg_.batch, k = model_->regions();
    const auto& w = cfg_.weights;
    std::vector<std::size_t> indices(b);
    for (auto& i : indices) i = rng_.below(data_.size());
    const GanBatch real = real_batch(indices);
    const Fake fake = generate(false);
    const std::size_t region = rng_.below(k);
    const ad::Tensor real_region = extract_region(real.color, real.masks, region);
    const ad::Tensor fake_region = extract_region(fake.color, fake.masks, region);
    const std::vector<int> labels(b, static_cast<int>(region));

    DStep s;
    ad::Gradients grads;
    {
        ad::Tape tape;
        ad::TapeScope scope(tape);
        const auto gr = (*gd_)(real.color, real.masks);
        const auto gf = (*gd_)(fake.color, fake.masks);
        const auto sr = (*sd_)(real_region);
        const auto sf = (*sd_)(fake_region);
        const auto gd_adv = discriminator_adv_loss(gr.logit, gf.logit);
        const auto sd_adv = discriminator_adv_loss(sr.logit, sf.logit);
        const auto cls = class_loss(sr.classes, labels);
        const auto total = ad::add(ad::add(ad::scale(gd_adv, w.adv_global), ad::scale(sd_adv, w.adv_semantic)),
                                   ad::scale(cls, w.classify));
        s.gd_adv = gd_adv.item();
        s.sd_adv = sd_adv.item();
        s.sd_class_real = cls.item();
        double correct = 0.0;
        for (std::size_t i = 0; i < b; ++i) correct += (gr.logit[i] > 0) + (gf.logit[i] < 0);
        s.gd_accuracy = correct / static_cast<double>(2 * b);
        const auto predicted = mask_labels(sr.classes);
        s.sd_accuracy = static_cast<double>(std::count(predicted.begin(), predicted.end(), region)) / static_cast<double>(b);
        grads = tape.backward(total);
    }

    const Critic gd_critic = [&](std::span<const ad::Tensor> in) { return (*gd_)(in[0], in[1]).logit; };
    const Critic sd_critic = [&](std::span<const ad::Tensor> in) { return (*sd_)(in[0]).logit; };
    const ad::Tensor gd_inputs[] = {real.color, real.masks};
    const double gd_weights[] = {w.r1_image, w.r1_mask}, sd_weights[] = {w.r1_image};
    const auto r1_gd = r1_penalty(gd_critic, gd_inputs, gd_weights);
    const auto r1_sd = r1_penalty(sd_critic, std::span(&real_region, 1), sd_weights);
    s.r1_gd = r1_gd.penalty;
    s.r1_sd = r1_sd.penalty;
    require_finite(step_, {{"d/gd_adv", s.gd_adv},
                           {"d/sd_adv", s.sd_adv},
                           {"d/sd_class_real", s.sd_class_real},
                           {"d/r1_gd", s.r1_gd},
                           {"d/r1_sd", s.r1_sd}});
    grads.merge(r1_gd.grads);
    grads.merge(r1_sd.grads);
    opt_d_->step(grads);

    if (log_ != nullptr) {
        log_->log(step_, "d/gd_adv", s.gd_adv);
        log_->log(step_, "d/sd_adv", s.sd_adv);
        log_->log(step_, "d/sd_class_real", s.sd_class_real);
        log_->log(step_, "d/r1_gd", s.r1_gd);
        log_->log(step_, "d/r1_sd", s.r1_sd);
        log_->log(step_, "d/gd_accuracy", s.gd_accuracy);
        log_->log(step_, "d/sd_accuracy_real", s.sd_accuracy);
    }
    return s;
}

GStep GanTrainer::g_step() {
    const std::size_t b = cfg_.batch, k = model_->regions();
    const auto& w = cfg_.weights;
    GStep s;
    ad::Tape tape;
    ad::TapeScope scope(tape);
    const Fake fake = generate(true);
    const std::size_t region = rng_.below(k);
    const std::vector<int> labels(b, static_cast<int>(region));

    LossComponents c;
    const auto gf = (*gd_)(fake.color, fake.masks);
    c.adv_global = generator_adv_loss(gf.logit);
    c.view = view_loss(gf.view, fake.poses);
    const auto sf = (*sd_)(extract_region(fake.color, fake.masks, region));
    c.adv_semantic = generator_adv_loss(sf.logit);
    c.classify = class_loss(sf.classes, labels);
    if (cfg_.std_every > 0 && step_ % static_cast<std::int64_t>(cfg_.std_every) == 0) {
        const auto ws1 = sample_w(rng_, model_->mapping()), ws2 = sample_w(rng_, model_->mapping());
        const auto wt1 = sample_w(rng_, model_->mapping()), wt2 = sample_w(rng_, model_->mapping());
        RenderOptions opts;
        opts.sampling = cfg_.sampling;
        c.std_ = std_loss(*model_, fake.cameras[0], uniform_latents(ws1, ws1, k), uniform_latents(ws2, ws2, k),
                          uniform_latents(wt1, wt1, k), uniform_latents(wt2, wt2, k), phi_, w.std_margin, opts)
                     .total;
    } else {
        c.std_ = ad::Tensor::scalar(0.0);
    }
    const ad::Tensor points = uniform_points(rng_, cfg_.eikonal_points, cfg_.eikonal_extent);
    c.eikonal = cfg_.eikonal_points > 0 ? eikonal_loss(*model_, points, fake.latents[0]) : ad::Tensor::scalar(0.0);
    c.minimal_surface = minimal_surface_loss(fake.sdf, w.ms_sharpness);
    const auto total = overall_loss(c, w);

    s.total = total.item();
    s.adv_global = c.adv_global->item();
    s.view = c.view->item();
    s.adv_semantic = c.adv_semantic->item();
    s.classify = c.classify->item();
    s.std_ = c.std_->item();
    s.eikonal = c.eikonal->item();
    s.minimal_surface = c.minimal_surface->item();
    const auto predicted = mask_labels(sf.classes);
    s.sd_fake_class_accuracy =
        static_cast<double>(std::count(predicted.begin(), predicted.end(), region)) / static_cast<double>(b);

    require_finite(step_, {{"g/total", s.total},
                           {"g/adv_global", s.adv_global},
                           {"g/view", s.view},
                           {"g/adv_semantic", s.adv_semantic},
                           {"g/classify", s.classify},
                           {"g/std", s.std_},
                           {"g/eikonal", s.eikonal},
                           {"g/minimal_surface", s.minimal_surface}});
    // The assembled objective must equal the weighted sum of the logged parts.
    const double assembled = w.adv_global * s.adv_global + w.view * s.view + w.adv_semantic * s.adv_semantic +
                             w.classify * s.classify + w.std_ * s.std_ + w.eikonal * s.eikonal +
                             w.minimal_surface * s.minimal_surface;
    if (std::abs(assembled - s.total) > 1e-9 * std::max(1.0, std::abs(s.total)))
        throw std::logic_error("generator objective " + std::to_string(s.total) + " differs from its components " +
                               std::to_string(assembled));

    opt_g_->step(tape.backward(total));

    if (log_ != nullptr) {
        log_->log(step_, "g/total", s.total);
        log_->log(step_, "g/adv_global", s.adv_global);
        log_->log(step_, "g/view", s.view);
        log_->log(step_, "g/adv_semantic", s.adv_semantic);
        log_->log(step_, "g/classify", s.classify);
        log_->log(step_, "g/std", s.std_);
        log_->log(step_, "g/eikonal", s.eikonal);
        log_->log(step_, "g/minimal_surface", s.minimal_surface);
        log_->log(step_, "g/sd_fake_class_accuracy", s.sd_fake_class_accuracy);
        log_->log(step_, "g/alpha", model_->alpha_value());
    }
    return s;
}

std::pair<DStep, GStep> GanTrainer::step() {
    auto d = d_step();
    auto g = g_step();
    ++step_;
    return {d, g};
}

Checkpoint GanTrainer::checkpoint() const {
    Checkpoint c;
    add_generator(c, *model_);
    c.header["kind"] = "gan";
    c.header["step"] = step_;
    c.header["rng"] = rng_.serialize();
    c.header["gan"] = cfg_;
    c.header["dataset"] = {{"size", data_.size()}, {"crc32", dataset_fingerprint(data_)}};
    add_parameters(c, "", gd_->parameters());
    add_parameters(c, "", sd_->parameters());
    add_optimizer(c, "opt_g", *opt_g_);
    add_optimizer(c, "opt_d", *opt_d_);
    return c;
}

void GanTrainer::restore(const Checkpoint& c) {
    if (c.header.value("kind", "") != "gan") throw CheckpointError("checkpoint was not written by an adversarial run");
    if (json(cfg_) != c.header.at("gan")) throw CheckpointError("checkpoint config differs from this trainer");
    const json fp = {{"size", data_.size()}, {"crc32", dataset_fingerprint(data_)}};
    if (fp != c.header.at("dataset")) throw CheckpointError("checkpoint was trained on a different dataset");
    auto gparams = model_->parameters();
    auto dparams = gd_->parameters();
    const auto sp = sd_->parameters();
    dparams.insert(dparams.end(), sp.begin(), sp.end());
    for (const auto* p : gparams) c.get("generator/" + p->name(), p->size());
    for (const auto* p : dparams) c.get(p->name(), p->size());
    Rng rng = Rng::deserialize(c.header.at("rng").get<std::string>());
    restore_optimizer(c, "opt_g", *opt_g_);
    restore_optimizer(c, "opt_d", *opt_d_);
    restore_parameters(c, "generator/", gparams);
    restore_parameters(c, "", dparams);
    rng_ = rng;
    step_ = c.header.at("step").get<std::int64_t>();
}

void add_generator(Checkpoint& c, CNeRFModel& model) {
    const auto& cfg = model.config();
    std::vector<std::string> labels;
    for (std::size_t r = 0; r < cfg.regions; ++r) labels.push_back(cfg.label(r));
    c.header["format_version"] = Checkpoint::kVersion;
    c.header["k"] = cfg.regions;
    c.header["widths"] = {{"hidden", cfg.hidden},
                          {"latent", cfg.latent},
                          {"feature", cfg.feature},
                          {"shape_layers", cfg.shape_layers},
                          {"texture_layers", cfg.texture_layers},
                          {"mapping_layers", cfg.mapping_layers}};
    c.header["r0"] = cfg.r0;
    c.header["alpha"] = model.alpha_value();
    c.header["labels"] = labels;
    c.header["generator"] = cfg;
    add_parameters(c, "generator/", model.parameters());
}

std::unique_ptr<CNeRFModel> load_generator(const Checkpoint& c) {
    if (!c.header.contains("generator")) throw CheckpointError("checkpoint has no generator");
    GeneratorConfig cfg;
    try {
        cfg = c.header.at("generator").get<GeneratorConfig>();
        cfg.validate();
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint generator config invalid: ") + e.what());
    }
    Rng rng(0);
    auto model = std::make_unique<CNeRFModel>(cfg, rng);
    restore_parameters(c, "generator/", model->parameters());
    return model;
}

}  // namespace cnerf
