#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "cnerf/training.hpp"
#include "test_util.hpp"

using namespace cnerf;
using namespace cnerf::test_util;
using nlohmann::json;

namespace {

std::vector<std::vector<double>> snapshot(const ad::ParameterList& params) {
    std::vector<std::vector<double>> out;
    for (const auto* p : params) out.push_back(p->value().to_vector());
    return out;
}

SamplingConfig few_samples() {
    SamplingConfig s;
    s.count = 6;
    return s;
}

FitConfig tiny_fit() {
    FitConfig cfg;
    cfg.views = 3;
    cfg.held_out = 1;
    cfg.resolution = 6;
    cfg.iterations = 4;
    cfg.rays_per_step = 8;
    cfg.eikonal_points = 4;
    cfg.sampling = few_samples();
    return cfg;
}

GanConfig tiny_gan() {
    GanConfig cfg;
    cfg.dataset_size = 6;
    cfg.resolution = 8;
    cfg.batch = 2;
    cfg.std_every = 2;
    cfg.eikonal_points = 4;
    cfg.sampling = few_samples();
    cfg.generator = tiny_config(3);
    cfg.discriminator.resolution = 8;
    cfg.discriminator.widths = {4, 6};
    return cfg;
}

std::vector<OracleSample> tiny_dataset(const GanConfig& cfg) {
    Rng rng(99);
    Camera base;
    base.width = base.height = cfg.resolution;
    std::vector<OracleSample> out;
    for (auto& s : make_dataset(rng, cfg.dataset_size, SceneTemplate{}, cfg.jitter, base)) out.push_back(s.view);
    return out;
}

}  // namespace

TEST(Metrics, Psnr) {
    const std::vector<double> a(12, 0.3);
    EXPECT_EQ(compute_psnr(a, a), 99.0);
    // 0.2 on the [-1, 1] scale is 0.1 on [0, 1].
    std::vector<double> b = a;
    for (auto& v : b) v += 0.2;
    EXPECT_NEAR(compute_psnr(a, b), 20.0, 1e-9);
    std::vector<double> c = a;
    c[0] += 2.0;  // one pixel fully off: mse = 1/12
    EXPECT_NEAR(compute_psnr(a, c), 10.0 * std::log10(12.0), 1e-9);
    EXPECT_EQ(compute_psnr(a, std::vector<double>(12, 0.3 + 1e-12)), 99.0);
    EXPECT_THROW(compute_psnr(a, std::vector<double>(3)), std::invalid_argument);
}

TEST(Metrics, Iou) {
    const bool m[] = {true, true, false, false}, t[] = {true, false, true, false}, none[] = {false, false, false, false};
    EXPECT_NEAR(compute_iou(m, t), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(compute_iou(m, m), 1.0);
    EXPECT_EQ(compute_iou(none, none), 1.0);
    EXPECT_EQ(compute_iou(m, none), 0.0);

    const ad::Tensor masks({3, 2}, {0.9, 0.1, 0.2, 0.8, 0.5, 0.6});
    EXPECT_EQ(mask_labels(masks), (std::vector<std::size_t>{0, 1, 1}));
    const std::size_t pred[] = {0, 1, 1}, truth[] = {0, 0, 1};
    EXPECT_EQ(region_ious(pred, truth, 3), (std::vector<double>{0.5, 0.5, 1.0}));
}

TEST(Metrics, JsonLines) {
    std::ostringstream out;
    MetricsLog log(&out);
    log.log(1, "a", 0.5);
    log.log(2, "b", std::numeric_limits<double>::quiet_NaN());
    log.log(3, "a", 1.5);
    std::istringstream in(out.str());
    std::string line;
    std::vector<json> rows;
    while (std::getline(in, line)) rows.push_back(json::parse(line));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0], (json{{"step", 1}, {"component", "a"}, {"value", 0.5}}));
    EXPECT_TRUE(rows[1]["value"].is_null());
    EXPECT_EQ(log.series("a"), (std::vector<double>{0.5, 1.5}));
}

TEST(FitConfig, JsonAndValidation) {
    const auto cfg = tiny_fit();
    const auto back = json(cfg).get<FitConfig>();
    EXPECT_EQ(json(back), json(cfg));
    EXPECT_THROW((json{{"bogus", 1}}.get<FitConfig>()), std::invalid_argument);
    EXPECT_THROW((json{{"rays_per_step", 100}, {"resolution", 4}}.get<FitConfig>()), std::invalid_argument);
    EXPECT_THROW((json{{"lr", -1.0}}.get<FitConfig>()), std::invalid_argument);
}

TEST(FitTrainer, DeterministicAndResumable) {
    const auto cfg = tiny_fit();
    Rng ra(5), rb(5);
    CNeRFModel a(tiny_config(3), ra), b(tiny_config(3), rb);
    const auto scene = SceneTemplate{}.scene();
    FitTrainer ta(a, scene, cfg), tb(b, scene, cfg);
    EXPECT_EQ(ta.train_views().size(), 3u);
    EXPECT_EQ(ta.held_out_views().size(), 1u);
    for (int i = 0; i < 3; ++i) {
        const auto sa = ta.step(), sb = tb.step();
        EXPECT_EQ(sa.total, sb.total);
        EXPECT_TRUE(std::isfinite(sa.total));
    }
    EXPECT_EQ(snapshot(a.parameters()), snapshot(b.parameters()));

    // Resume from a checkpoint in a fresh trainer and compare 10 further steps.
    const auto bytes = encode_checkpoint(ta.checkpoint());
    Rng rc(77);
    CNeRFModel c(tiny_config(3), rc);
    FitTrainer tc(c, scene, cfg);
    tc.restore(decode_checkpoint(bytes));
    EXPECT_EQ(tc.steps(), 3);
    EXPECT_EQ(encode_checkpoint(tc.checkpoint()), bytes);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(ta.step().total, tc.step().total);
    EXPECT_EQ(snapshot(a.parameters()), snapshot(c.parameters()));
    EXPECT_EQ(encode_checkpoint(ta.checkpoint()), encode_checkpoint(tc.checkpoint()));

    auto other = cfg;
    other.seed = 2;
    FitTrainer td(c, scene, other);
    EXPECT_THROW(td.restore(decode_checkpoint(bytes)), CheckpointError);
}

TEST(FitTrainer, OnlyFieldParametersMoveAndLossesAreLogged) {
    Rng rng(6);
    CNeRFModel model(tiny_config(3), rng);
    ad::ParameterList mapping;
    model.mapping().collect(mapping);
    const auto mapping_before = snapshot(mapping);
    MetricsLog log;
    FitTrainer t(model, SceneTemplate{}.scene(), tiny_fit(), &log);
    const auto eval = t.run();
    EXPECT_EQ(t.steps(), 4);
    EXPECT_EQ(snapshot(mapping), mapping_before);
    EXPECT_EQ(log.series("total").size(), 4u);
    EXPECT_EQ(eval.train_iou.size(), 3u);
    EXPECT_TRUE(std::isfinite(eval.train_psnr));
    const auto& r = log.records();
    for (std::size_t i = 0; i + 5 < r.size(); i += 6) {
        const double sum = r[i + 1].value + r[i + 2].value + 0.1 * r[i + 3].value + 0.001 * r[i + 4].value;
        EXPECT_NEAR(r[i].value, sum, 1e-12 * std::abs(sum));
    }
}

TEST(FitTrainer, DivergenceNamesStepAndComponents) {
    Rng rng(7);
    CNeRFModel model(tiny_config(3), rng);
    FitTrainer t(model, SceneTemplate{}.scene(), tiny_fit());
    t.step();
    model.region(1).sdf_head().bias.assign(ad::Tensor::full(model.region(1).sdf_head().bias.shape(),
                                                            std::numeric_limits<double>::quiet_NaN()));
    try {
        t.step();
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("photometric="), std::string::npos) << msg;
    }
}

TEST(GanConfig, JsonAndValidation) {
    const auto cfg = tiny_gan();
    EXPECT_EQ(json(json(cfg).get<GanConfig>()), json(cfg));
    auto bad = json(cfg);
    bad["resolution"] = 16;
    EXPECT_THROW(bad.get<GanConfig>(), std::invalid_argument);
    EXPECT_THROW((json{{"jitter", {{"nope", 1}}}}.get<GanConfig>()), std::invalid_argument);
}

TEST(GanTrainer, OptimizerIsolation) {
    const auto cfg = tiny_gan();
    GanTrainer t(cfg, tiny_dataset(cfg));
    auto dparams = t.global_discriminator().parameters();
    const auto sp = t.semantic_discriminator().parameters();
    dparams.insert(dparams.end(), sp.begin(), sp.end());
    const auto gparams = t.model().parameters();

    const auto d_before = snapshot(dparams);
    const auto g_before = snapshot(gparams);
    const auto ds = t.d_step();
    EXPECT_EQ(snapshot(gparams), g_before);
    EXPECT_NE(snapshot(dparams), d_before);
    EXPECT_GE(ds.gd_accuracy, 0.0);
    EXPECT_LE(ds.gd_accuracy, 1.0);
    EXPECT_GE(ds.r1_gd, 0.0);  // zero-initialized heads give no input gradient yet

    const auto d_mid = snapshot(dparams);
    const auto gs = t.g_step();
    EXPECT_EQ(snapshot(dparams), d_mid);
    EXPECT_NE(snapshot(gparams), g_before);
    EXPECT_TRUE(std::isfinite(gs.total));
    EXPECT_GT(gs.view, 0.0);
    EXPECT_GT(gs.std_, 0.0);  // step 0 is an STD step
}

TEST(GanTrainer, ResumeIsBitIdentical) {
    const auto cfg = tiny_gan();
    const auto data = tiny_dataset(cfg);
    std::ostringstream log_a, log_b;
    MetricsLog la(&log_a), lb(&log_b);
    GanTrainer a(cfg, data, &la);
    a.step();
    a.step();
    const auto bytes = encode_checkpoint(a.checkpoint());

    GanTrainer b(cfg, data, &lb);
    b.restore(decode_checkpoint(bytes));
    EXPECT_EQ(b.steps(), 2);
    EXPECT_EQ(encode_checkpoint(b.checkpoint()), bytes);
    const auto mark = la.records().size();
    for (int i = 0; i < 10; ++i) {
        a.step();
        b.step();
    }
    EXPECT_EQ(encode_checkpoint(a.checkpoint()), encode_checkpoint(b.checkpoint()));
    ASSERT_EQ(la.records().size() - mark, lb.records().size());
    for (std::size_t i = 0; i < lb.records().size(); ++i) {
        EXPECT_EQ(la.records()[mark + i].component, lb.records()[i].component);
        EXPECT_EQ(la.records()[mark + i].value, lb.records()[i].value) << i << " " << lb.records()[i].component;
    }

    auto other = data;
    other.pop_back();
    GanTrainer c(cfg, other);
    EXPECT_THROW(c.restore(decode_checkpoint(bytes)), CheckpointError);
}

TEST(GanTrainer, GeneratorObjectiveMatchesComponents) {
    const auto cfg = tiny_gan();
    MetricsLog log;
    GanTrainer t(cfg, tiny_dataset(cfg), &log);
    for (int i = 0; i < 3; ++i) {
        const auto [d, g] = t.step();
        const auto& w = cfg.weights;
        const double sum = w.adv_global * g.adv_global + w.view * g.view + w.adv_semantic * g.adv_semantic +
                           w.classify * g.classify + w.std_ * g.std_ + w.eikonal * g.eikonal +
                           w.minimal_surface * g.minimal_surface;
        EXPECT_NEAR(g.total, sum, 1e-12 * std::max(1.0, std::abs(sum)));
        EXPECT_EQ(g.std_ == 0.0, i % 2 == 1);
    }
    EXPECT_EQ(log.series("g/total").size(), 3u);
    EXPECT_EQ(log.series("d/r1_gd").size(), 3u);
}

TEST(GanTrainer, RejectsMismatchedData) {
    auto cfg = tiny_gan();
    auto data = tiny_dataset(cfg);
    cfg.generator.regions = 2;
    EXPECT_THROW(GanTrainer(cfg, data), std::invalid_argument);
    EXPECT_THROW(GanTrainer(tiny_gan(), {}), std::invalid_argument);
}
