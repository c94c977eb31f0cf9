#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cnerf/autodiff/adam.hpp"
#include "cnerf/checkpoint.hpp"
#include "cnerf/discriminators.hpp"
#include "cnerf/generator.hpp"
#include "cnerf/losses.hpp"
#include "cnerf/scene.hpp"
#include "json.hpp"

namespace cnerf {

/// Raised when a loss component becomes non-finite; the message names the
/// step and every component value.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// PSNR in dB of two images with values in [-1, 1] (rescaled to [0, 1]);
/// identical images give 99.
double compute_psnr(std::span<const double> a, std::span<const double> b);
/// |m & gt| / |m | gt|; 1 when both are empty.
double compute_iou(std::span<const bool> mask, std::span<const bool> truth);
/// Per-pixel argmax over mask rows [R, k].
std::vector<std::size_t> mask_labels(const ad::Tensor& masks);
/// IoU of every region id between two label maps.
std::vector<double> region_ious(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                                std::size_t regions);

struct MetricRecord {
    std::int64_t step = 0;
    std::string component;
    double value = 0.0;
};

/// Append-only metric stream; each record is also written as one JSON line
/// {"step", "component", "value"} when a sink is attached.
class MetricsLog {
public:
    explicit MetricsLog(std::ostream* sink = nullptr) : sink_(sink) {}
    void log(std::int64_t step, const std::string& component, double value);
    const std::vector<MetricRecord>& records() const { return records_; }
    /// Values of one component in step order.
    std::vector<double> series(const std::string& component) const;

private:
    std::ostream* sink_;
    std::vector<MetricRecord> records_;
};

struct FitConfig {
    std::size_t views = 20;
    std::size_t held_out = 5;
    std::size_t resolution = 32;
    std::size_t iterations = 20000;
    std::size_t rays_per_step = 128;
    std::size_t eikonal_points = 64;
    /// Half-width of the cube eikonal points are drawn from.
    double eikonal_extent = 0.15;
    double photometric_weight = 1.0;
    double mask_weight = 1.0;
    double lr = 1e-4;
    /// Separate rate for alpha, which must travel much further than the
    /// network weights.
    double alpha_lr = 1e-2;
    /// Both rates decay exponentially to this fraction by the last iteration.
    double lr_final_ratio = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::size_t eval_every = 0;  // 0 disables intermediate evaluation
    LossWeights weights;
    SamplingConfig sampling;
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const FitConfig& c);
void from_json(const nlohmann::json& j, FitConfig& c);

struct FitEvaluation {
    double train_psnr = 0.0;
    double held_out_psnr = 0.0;
    std::vector<double> train_iou;     // per region
    std::vector<double> held_out_iou;  // per region
};

struct FitStep {
    double total = 0.0;
    double photometric = 0.0;
    double mask = 0.0;
    double eikonal = 0.0;
    double minimal_surface = 0.0;
};

/// Supervised multi-view reconstruction of an analytic scene. Each region
/// gets a fixed random (w_shape, w_texture); only region generators and
/// alpha are optimized.
class FitTrainer {
public:
    FitTrainer(CNeRFModel& model, AnalyticScene scene, FitConfig cfg, MetricsLog* log = nullptr);

    FitStep step();
    FitEvaluation evaluate() const;
    /// Runs until cfg.iterations steps have been taken.
    FitEvaluation run(const std::function<void(std::int64_t, const FitStep&)>& on_step = {});

    std::int64_t steps() const { return step_; }
    const LatentAssignment& latents() const { return latents_; }
    const std::vector<OracleSample>& train_views() const { return train_; }
    const std::vector<OracleSample>& held_out_views() const { return held_out_; }
    const FitConfig& config() const { return cfg_; }

    Checkpoint checkpoint() const;
    void restore(const Checkpoint& c);

private:
    CNeRFModel& model_;
    AnalyticScene scene_;
    FitConfig cfg_;
    MetricsLog* log_;
    Rng rng_;
    std::vector<OracleSample> train_;
    std::vector<OracleSample> held_out_;
    LatentAssignment latents_;
    ad::Adam opt_;
    ad::Adam alpha_opt_;
    std::int64_t step_ = 0;
};

struct GanConfig {
    std::size_t dataset_size = 2000;
    std::size_t resolution = 32;
    std::size_t batch = 8;
    std::size_t iterations = 5000;
    double lr_g = 2e-5;
    double lr_d = 2e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    /// Evaluate the decoupling loss every this many generator steps.
    std::size_t std_every = 1;
    std::size_t eikonal_points = 64;
    double eikonal_extent = 0.15;
    LossWeights weights;
    SamplingConfig sampling;
    GeneratorConfig generator;
    DiscriminatorConfig discriminator;
    JitterSpec jitter;
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const GanConfig& c);
void from_json(const nlohmann::json& j, GanConfig& c);

struct DStep {
    double gd_adv = 0.0;
    double sd_adv = 0.0;
    double sd_class_real = 0.0;
    double r1_gd = 0.0;
    double r1_sd = 0.0;
    double gd_accuracy = 0.0;  // fraction of real and fake samples classified correctly
    double sd_accuracy = 0.0;
};

struct GStep {
    double total = 0.0;
    double adv_global = 0.0;
    double view = 0.0;
    double adv_semantic = 0.0;
    double classify = 0.0;
    double std_ = 0.0;
    double eikonal = 0.0;
    double minimal_surface = 0.0;
    /// SD class accuracy on the generated region images of this step.
    double sd_fake_class_accuracy = 0.0;
};

/// Real training data in network layout.
struct GanBatch {
    ad::Tensor color;  // [B, 3, H, W]
    ad::Tensor masks;  // [B, k, H, W], one-hot
};

/// Alternating discriminator/generator training on a procedural dataset.
/// The trainer owns the model, both discriminators and their optimizers.
class GanTrainer {
public:
    GanTrainer(GanConfig cfg, std::vector<OracleSample> dataset, MetricsLog* log = nullptr);

    DStep d_step();
    GStep g_step();
    /// One iteration: a discriminator step followed by a generator step.
    std::pair<DStep, GStep> step();

    std::int64_t steps() const { return step_; }
    CNeRFModel& model() { return *model_; }
    GlobalDiscriminator& global_discriminator() { return *gd_; }
    SemanticDiscriminator& semantic_discriminator() { return *sd_; }
    const GanConfig& config() const { return cfg_; }
    const ad::Adam& generator_optimizer() const { return *opt_g_; }
    const ad::Adam& discriminator_optimizer() const { return *opt_d_; }

    GanBatch real_batch(std::span<const std::size_t> indices) const;

    Checkpoint checkpoint() const;
    /// Restores parameters, optimizer moments, RNG state and the step counter.
    void restore(const Checkpoint& c);

private:
    struct Fake {
        ad::Tensor color;
        ad::Tensor masks;
        ad::Tensor poses;  // [B, 2]
        ad::Tensor sdf;
        std::vector<LatentAssignment> latents;
        std::vector<Camera> cameras;
    };
    Fake generate(bool track);

    GanConfig cfg_;
    std::vector<OracleSample> data_;
    MetricsLog* log_;
    Rng rng_;
    std::unique_ptr<CNeRFModel> model_;
    std::unique_ptr<GlobalDiscriminator> gd_;
    std::unique_ptr<SemanticDiscriminator> sd_;
    std::unique_ptr<ad::Adam> opt_g_;
    std::unique_ptr<ad::Adam> opt_d_;
    FeatureExtractor phi_;
    std::int64_t step_ = 0;
};

/// Generator-only checkpoint header and blobs (as consumed by the renderer
/// and the HTTP service).
void add_generator(Checkpoint& c, CNeRFModel& model);
/// Builds a model from a checkpoint written by any trainer.
std::unique_ptr<CNeRFModel> load_generator(const Checkpoint& c);

}  // namespace cnerf
