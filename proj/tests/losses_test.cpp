#include <gtest/gtest.h>

#include <cmath>

#include "cnerf/autodiff/gradcheck.hpp"
#include "cnerf/losses.hpp"
#include "test_util.hpp"

using namespace cnerf;
using namespace cnerf::test_util;
using ad::Tensor;

namespace {

Tensor sphere_gradient(const Tensor& pts, double slope) {
    std::vector<double> g;
    for (std::size_t p = 0; p < pts.dim(0); ++p) {
        const Vec3 x(pts[p * 3], pts[p * 3 + 1], pts[p * 3 + 2]);
        const Vec3 n = slope * x.normalized();
        g.insert(g.end(), {n.x(), n.y(), n.z()});
    }
    return Tensor({pts.dim(0), 3}, g);
}

// Tiny two-branch conv critic used by the R1 checks.
struct TinyCritic {
    nn::Conv2d image;
    nn::Conv2d mask;
    nn::Linear head;

    explicit TinyCritic(Rng& rng)
        : image("img", 3, 4, 3, {1, 1}, 0.5, rng), mask("mask", 2, 4, 3, {1, 1}, 0.5, rng), head("head", 64, 1, 0.3, rng) {}

    Tensor operator()(std::span<const Tensor> in) const {
        auto h = ad::leaky_relu(ad::add(image(in[0]), mask(in[1])), 0.2);
        h = ad::tanh(h);
        const std::size_t b = h.dim(0);
        return head(ad::reshape(h, {b, h.size() / b}));
    }

    ad::ParameterList params() {
        ad::ParameterList out;
        image.collect(out);
        mask.collect(out);
        head.collect(out);
        return out;
    }
};

}  // namespace

TEST(LossWeights, DefaultsAndJson) {
    LossWeights w;
    EXPECT_EQ(w.view, 15.0);
    EXPECT_EQ(w.eikonal, 0.1);
    EXPECT_EQ(w.minimal_surface, 0.001);
    EXPECT_EQ(w.r1_image, 10.0);
    EXPECT_EQ(w.r1_mask, 1000.0);
    EXPECT_EQ(w.std_margin, 0.5);
    EXPECT_EQ(w.ms_sharpness, 100.0);
    w.view = 3.0;
    const auto back = nlohmann::json(w).get<LossWeights>();
    EXPECT_EQ(back.view, 3.0);
    EXPECT_EQ(nlohmann::json::object().get<LossWeights>().eikonal, 0.1);
    EXPECT_THROW((nlohmann::json{{"view", -1.0}}.get<LossWeights>()), std::invalid_argument);
    EXPECT_THROW((nlohmann::json{{"vew", 1.0}}.get<LossWeights>()), std::invalid_argument);
}

TEST(Eikonal, UnitAndDoubledSlope) {
    Rng rng(1);
    const Tensor pts = random_tensor({50, 3}, rng, -0.2, 0.2);
    EXPECT_LT(eikonal_loss(sphere_gradient(pts, 1.0)).item(), 1e-20);
    EXPECT_NEAR(eikonal_loss(sphere_gradient(pts, 2.0)).item(), 1.0, 1e-12);
}

TEST(Eikonal, PureSphereModelIsExact) {
    Rng rng(2);
    CNeRFModel model(GeneratorConfig{}, rng);
    make_pure_sphere(model);
    const auto lat = random_latents(rng, 3, 256);
    const Tensor pts = random_tensor({64, 3}, rng, -0.15, 0.15);
    EXPECT_LT(eikonal_loss(model, pts, lat).item(), 1e-10);
}

TEST(Eikonal, UntrainedModelMatchesFiniteDifferenceGradient) {
    Rng rng(3);
    CNeRFModel model(GeneratorConfig{}, rng);
    const auto lat = assign_latents(rng, model.mapping(), 3);
    const Tensor pts = random_tensor({64, 3}, rng, -0.15, 0.15);
    const double loss = eikonal_loss(model, pts, lat).item();
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_GT(loss, 0.0);

    // Oracle: central differences of the scene SDF value.
    const double h = 1e-6;
    std::vector<double> fd(pts.size());
    for (int a = 0; a < 3; ++a) {
        auto shifted = [&](double sign) {
            auto v = pts.to_vector();
            for (std::size_t p = 0; p < 64; ++p) v[p * 3 + a] += sign * h;
            return scene_sdf_with_gradient(model, Tensor(pts.shape(), v), lat).value;
        };
        const Tensor plus = shifted(1.0), minus = shifted(-1.0);
        for (std::size_t p = 0; p < 64; ++p) fd[p * 3 + a] = (plus[p] - minus[p]) / (2 * h);
    }
    double oracle = 0.0;
    for (std::size_t p = 0; p < 64; ++p) {
        const double n = std::sqrt(fd[p * 3] * fd[p * 3] + fd[p * 3 + 1] * fd[p * 3 + 1] + fd[p * 3 + 2] * fd[p * 3 + 2]);
        oracle += (n - 1) * (n - 1) / 64.0;
    }
    EXPECT_NEAR(loss, oracle, 1e-3 * oracle);
}

TEST(Eikonal, ParameterGradientMatchesFiniteDifferences) {
    Rng rng(4);
    CNeRFModel model(tiny_config(2), rng);
    const auto lat = random_latents(rng, 2, 4);
    const Tensor pts = random_tensor({5, 3}, rng, -0.15, 0.15);
    Rng pick(5);
    const auto report =
        ad::grad_check_params([&] { return eikonal_loss(model, pts, lat); }, model.field_parameters(), {}, 4, &pick);
    EXPECT_TRUE(report.passed) << report.summary();
}

TEST(Eikonal, NonFiniteGradientNamesPoint) {
    Rng rng(6);
    CNeRFModel model(tiny_config(2), rng);
    const auto lat = random_latents(rng, 2, 4);
    const Tensor pts({2, 3}, {0.05, 0.0, 0.0, 0.0, 0.0, 0.0});
    try {
        eikonal_loss(model, pts, lat);
        FAIL() << "expected NumericError";
    } catch (const ad::NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("(0, 0, 0)"), std::string::npos) << e.what();
    }
}

TEST(MinimalSurface, Values) {
    EXPECT_DOUBLE_EQ(minimal_surface_loss(Tensor::zeros({4, 1})).item(), 1.0);
    EXPECT_NEAR(minimal_surface_loss(Tensor::full({4, 1}, 0.1)).item(), std::exp(-10.0), 1e-18);
    EXPECT_NEAR(minimal_surface_loss(Tensor::full({3, 1}, -0.1)).item(), std::exp(-10.0), 1e-18);
    double prev = 2.0;
    for (double a : {0.0, 0.001, 0.01, 0.02, 0.1}) {
        const double v = minimal_surface_loss(Tensor::full({1, 1}, a)).item();
        EXPECT_LT(v, prev);
        EXPECT_GT(v, 0.0);
        prev = v;
    }
    Rng rng(7);
    const auto report = ad::grad_check([](const Tensor& d) { return minimal_surface_loss(d); },
                                       random_tensor({6, 1}, rng, -0.05, 0.05));
    EXPECT_TRUE(report.passed) << report.summary();
}

TEST(FeatureExtractor, DeterministicPerSeed) {
    Rng rng(8);
    const Tensor img = random_tensor({2, 3, 8, 8}, rng);
    const FeatureExtractor a, b, c(1234);
    const Tensor fa = a(img);
    EXPECT_EQ(fa.shape(), (ad::Shape{2, 32}));
    EXPECT_EQ(fa.to_vector(), b(img).to_vector());
    EXPECT_NE(fa.to_vector(), c(img).to_vector());
    EXPECT_EQ(a(random_tensor({1, 3, 4, 4}, rng)).shape(), (ad::Shape{1, 32}));
}

class StdLossTest : public ::testing::Test {
protected:
    StdLossTest() : rng(9), model(tiny_config(2), rng) {
        cam.width = cam.height = 4;
        opts.sampling.count = 6;
        for (int i = 0; i < 4; ++i) lat.push_back(random_latents(rng, 2, 4));
    }
    Rng rng;
    CNeRFModel model;
    Camera cam;
    RenderOptions opts;
    std::vector<LatentAssignment> lat;
    FeatureExtractor phi;
};

TEST_F(StdLossTest, IdentityGivesMargin) {
    const auto out = std_loss(model, cam, lat[0], lat[0], lat[1], lat[1], phi, 0.5, opts);
    EXPECT_EQ(out.total.item(), 0.5);
    EXPECT_EQ(out.mask_term.item(), 0.0);
}

TEST_F(StdLossTest, NonNegativeAndSymmetricMaskTerm) {
    for (int trial = 0; trial < 3; ++trial) {
        const auto s1 = random_latents(rng, 2, 4), s2 = random_latents(rng, 2, 4);
        const auto t1 = random_latents(rng, 2, 4), t2 = random_latents(rng, 2, 4);
        const auto a = std_loss(model, cam, s1, s2, t1, t2, phi, 0.5, opts);
        const auto b = std_loss(model, cam, s1, s2, t2, t1, phi, 0.5, opts);
        EXPECT_GE(a.total.item(), 0.0);
        EXPECT_TRUE(std::isfinite(a.total.item()));
        EXPECT_NEAR(a.mask_term.item(), b.mask_term.item(), 1e-15);
    }
}

TEST_F(StdLossTest, GradientMatchesFiniteDifferences) {
    Rng pick(10);
    auto loss = [&] { return std_loss(model, cam, lat[0], lat[1], lat[2], lat[3], phi, 2.0, opts).total; };
    ASSERT_GT(std_loss(model, cam, lat[0], lat[1], lat[2], lat[3], phi, 2.0, opts).contrast_term.item(), 0.0);
    const auto report = ad::grad_check_params(loss, model.field_parameters(), {}, 3, &pick);
    EXPECT_TRUE(report.passed) << report.summary();
}

TEST_F(StdLossTest, RejectsPixelSubsets) {
    opts.pixels = {0, 1};
    EXPECT_THROW(std_loss(model, cam, lat[0], lat[1], lat[2], lat[3], phi, 0.5, opts), std::invalid_argument);
}

TEST(Adversarial, Values) {
    const auto zero = Tensor::zeros({3});
    const auto l = adv_losses(zero, zero);
    EXPECT_NEAR(l.generator.item(), std::log(2.0), 1e-15);
    EXPECT_NEAR(l.discriminator.item(), 2 * std::log(2.0), 1e-15);
    const auto far = adv_losses(Tensor::full({2}, 50.0), Tensor::full({2}, -50.0));
    EXPECT_LT(far.discriminator.item(), 1e-20);
    EXPECT_GT(far.generator.item(), 49.0);
    Rng rng(11);
    const auto real = random_tensor({4}, rng, -3, 3);
    const auto report = ad::grad_check([&](const Tensor& f) { return adv_losses(real, f).discriminator; },
                                       random_tensor({4}, rng, -3, 3));
    EXPECT_TRUE(report.passed) << report.summary();
}

TEST(R1, ConstantCriticHasZeroPenalty) {
    const Critic constant = [](std::span<const Tensor> in) { return Tensor::full({in[0].dim(0)}, 0.7); };
    const Tensor x = Tensor::full({2, 3}, 0.1);
    const double w[] = {10.0};
    const auto r = r1_penalty(constant, std::span(&x, 1), w);
    EXPECT_EQ(r.penalty, 0.0);
}

TEST(R1, LinearCriticIsAnalytic) {
    Rng rng(12);
    ad::Parameter a("a", random_tensor({3, 1}, rng));
    const Critic linear = [&](std::span<const Tensor> in) { return ad::matmul(in[0], a.var()); };
    const Tensor x = random_tensor({4, 3}, rng);
    const double w[] = {10.0};
    const auto r = r1_penalty(linear, std::span(&x, 1), w);
    double a2 = 0.0;
    for (double v : a.value().data()) a2 += v * v;
    EXPECT_NEAR(r.penalty, 5.0 * a2, 1e-12);
    const auto g = r.grads.of(a);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], 10.0 * a.value()[i], 1e-7);
}

TEST(R1, HvpGradientIsConsistent) {
    Rng rng(13);
    TinyCritic critic(rng);
    const Critic fn = [&](std::span<const Tensor> in) { return critic(in); };
    const Tensor inputs[] = {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 2, 4, 4}, rng, 0, 1)};
    const double w[] = {10.0, 1000.0};
    const auto coarse = r1_penalty(fn, inputs, w, 1e-4);
    const auto fine = r1_penalty(fn, inputs, w, 1e-5);
    EXPECT_GT(coarse.penalty, 0.0);
    EXPECT_NEAR(coarse.penalty, coarse.per_branch[0] + coarse.per_branch[1], 1e-12);

    // Second oracle: central differences of the penalty value itself.
    const double h = 1e-6;
    std::size_t compared = 0;
    for (auto* p : critic.params()) {
        const auto gc = coarse.grads.of(*p), gf = fine.grads.of(*p);
        for (std::size_t i = 0; i < p->size(); i += 7) {
            const double scale = std::max({std::abs(gc[i]), std::abs(gf[i]), 1e-3});
            EXPECT_LT(std::abs(gc[i] - gf[i]) / scale, 0.01) << p->name() << "[" << i << "]";
            const Tensor orig = p->value();
            auto v = orig.to_vector();
            v[i] += h;
            p->assign(v);
            const double up = r1_penalty(fn, inputs, w).penalty;
            v[i] -= 2 * h;
            p->assign(v);
            const double down = r1_penalty(fn, inputs, w).penalty;
            p->assign(orig);
            const double numeric = (up - down) / (2 * h);
            EXPECT_LT(std::abs(gc[i] - numeric) / std::max({std::abs(numeric), std::abs(gc[i]), 1e-3}), 0.01)
                << p->name() << "[" << i << "]";
            ++compared;
        }
    }
    EXPECT_GT(compared, 20u);
}

TEST(R1, NonFiniteInputGradientThrows) {
    const Critic bad = [](std::span<const Tensor> in) { return ad::sum_axis(ad::sqrt(in[0]), 1); };
    const Tensor x = Tensor::zeros({1, 2});
    const double w[] = {1.0};
    EXPECT_THROW(r1_penalty(bad, std::span(&x, 1), w), ad::NumericError);
}

TEST(ViewLoss, Branches) {
    const Tensor truth({2, 2}, {0.1, -0.2, 0.3, 0.0});
    EXPECT_EQ(view_loss(truth, truth).item(), 0.0);
    EXPECT_NEAR(view_loss(Tensor({1, 2}, {0.6, -0.2}), Tensor({1, 2}, {0.1, -0.2})).item(), 0.125, 1e-15);
    EXPECT_NEAR(view_loss(Tensor({1, 2}, {0.0, 2.0}), Tensor({1, 2}, {0.0, 0.0})).item(), 1.5, 1e-15);
    // Batch mean of the per-sample sums.
    EXPECT_NEAR(view_loss(Tensor({2, 2}, {0.5, 2.0, 0, 0}), Tensor::zeros({2, 2})).item(), (0.125 + 1.5) / 2, 1e-15);
    EXPECT_THROW(view_loss(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ad::ShapeError);
}

TEST(ClassLoss, Values) {
    const int label[] = {2};
    EXPECT_NEAR(class_loss(Tensor::zeros({1, 4}), label).item(), std::log(4.0), 1e-15);
    EXPECT_LT(class_loss(Tensor({1, 4}, {0, 0, 60, 0}), label).item(), 1e-20);
    Rng rng(14);
    for (int i = 0; i < 20; ++i) EXPECT_GE(class_loss(random_tensor({1, 4}, rng, -5, 5), label).item(), 0.0);
    const int bad[] = {4};
    EXPECT_THROW(class_loss(Tensor::zeros({1, 4}), bad), std::out_of_range);
}

TEST(OverallLoss, WeightsAndMissingTerms) {
    LossComponents c;
    c.adv_global = c.view = c.adv_semantic = c.classify = c.std_ = c.eikonal = c.minimal_surface = Tensor::scalar(0.0);
    const LossWeights w;
    EXPECT_EQ(overall_loss(c, w).item(), 0.0);
    c.eikonal = Tensor::scalar(1.0);
    EXPECT_NEAR(overall_loss(c, w).item(), 0.1, 1e-15);
    c.eikonal = Tensor::scalar(0.0);
    c.view = Tensor::scalar(1.0);
    EXPECT_NEAR(overall_loss(c, w).item(), 15.0, 1e-15);
    c.view = Tensor::scalar(0.0);
    c.minimal_surface = Tensor::scalar(1.0);
    EXPECT_NEAR(overall_loss(c, w).item(), 0.001, 1e-18);
    c.classify.reset();
    try {
        overall_loss(c, w);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("classify"), std::string::npos);
    }
}
