#include <gtest/gtest.h>

#include <cmath>

#include "cnerf/autodiff/gradcheck.hpp"
#include "cnerf/discriminators.hpp"
#include "cnerf/losses.hpp"
#include "test_util.hpp"

using namespace cnerf;
using namespace cnerf::test_util;
using ad::Tensor;

namespace {

DiscriminatorConfig small_config(std::size_t resolution = 8) {
    DiscriminatorConfig cfg;
    cfg.resolution = resolution;
    return cfg;
}

void randomize(const ad::ParameterList& params, Rng& rng, double bound = 0.3) {
    for (auto* p : params)
        if (p->name().find("head") != std::string::npos || p->name().find("logit") != std::string::npos ||
            p->name().find("classes") != std::string::npos)
            p->assign(random_tensor(p->shape(), rng, -bound, bound));
}

}  // namespace

TEST(ExtractRegion, Masks) {
    Rng rng(1);
    const Tensor color = random_tensor({1, 3, 4, 4}, rng);
    Tensor ones = Tensor::full({1, 2, 4, 4}, 1.0);
    EXPECT_EQ(extract_region(color, ones, 1).to_vector(), color.to_vector());
    for (double v : extract_region(color, Tensor::zeros({1, 2, 4, 4}), 0).to_vector()) EXPECT_EQ(v, 0.0);

    std::vector<double> half(2 * 16, 0.0);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 2; ++x) half[16 + y * 4 + x] = 1.0;
    const Tensor out = extract_region(color, Tensor({1, 2, 4, 4}, half), 1);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) {
                const std::size_t i = (c * 4 + y) * 4 + x;
                EXPECT_EQ(out[i], x < 2 ? color[i] : 0.0);
            }
    EXPECT_THROW(extract_region(color, ones, 2), std::out_of_range);
    EXPECT_THROW(extract_region(color, Tensor::zeros({1, 2, 2, 4}), 0), ad::ShapeError);
}

TEST(BinarizeMasks, Threshold) {
    EXPECT_EQ(binarize_masks(Tensor({4}, {0.2, 0.5, 0.9, -1.0})).to_vector(), (std::vector<double>{0, 1, 1, 0}));
}

TEST(DiscriminatorConfig, Validation) {
    DiscriminatorConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.resolution = 12;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg.resolution = 32;
    cfg.widths = {};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    const auto back = nlohmann::json(small_config()).get<DiscriminatorConfig>();
    EXPECT_EQ(back.resolution, 8u);
    EXPECT_EQ(back.widths, (std::vector<std::size_t>{32, 64, 128}));
}

TEST(GlobalDiscriminator, ZeroInitAndDeterminism) {
    Rng rng(2);
    GlobalDiscriminator gd(3, DiscriminatorConfig{}, rng);
    const Tensor color = random_tensor({2, 3, 32, 32}, rng), masks = random_tensor({2, 3, 32, 32}, rng, 0, 1);
    const auto a = gd(color, masks);
    EXPECT_EQ(a.logit.shape(), (ad::Shape{2}));
    EXPECT_EQ(a.view.shape(), (ad::Shape{2, 2}));
    for (double v : a.logit.data()) EXPECT_EQ(v, 0.0);
    for (double v : a.view.data()) EXPECT_EQ(v, 0.0);
    randomize(gd.parameters(), rng);
    const auto b = gd(color, masks), c = gd(color, masks);
    EXPECT_EQ(b.logit.to_vector(), c.logit.to_vector());
    EXPECT_EQ(b.view.to_vector(), c.view.to_vector());
    EXPECT_NE(b.logit[0], 0.0);
}

TEST(GlobalDiscriminator, BranchAdditionContract) {
    Rng rng(3);
    GlobalDiscriminator gd(3, small_config(), rng);
    randomize(gd.parameters(), rng);
    const Tensor color = random_tensor({2, 3, 8, 8}, rng), masks = random_tensor({2, 3, 8, 8}, rng, 0, 1);
    const auto full = gd(color, masks);
    const auto split = gd.head(ad::add(gd.image_features(color), gd.mask_features(masks)));
    EXPECT_EQ(full.logit.to_vector(), split.logit.to_vector());
    EXPECT_EQ(full.view.to_vector(), split.view.to_vector());
    // Changing the masks moves the output only through the mask branch.
    const Tensor masks2 = random_tensor({2, 3, 8, 8}, rng, 0, 1);
    const auto other = gd.head(ad::add(gd.image_features(color), gd.mask_features(masks2)));
    EXPECT_EQ(gd(color, masks2).logit.to_vector(), other.logit.to_vector());
    EXPECT_NE(other.logit.to_vector(), full.logit.to_vector());
}

TEST(GlobalDiscriminator, ShapeErrors) {
    Rng rng(4);
    GlobalDiscriminator gd(3, small_config(), rng);
    EXPECT_THROW(gd(Tensor::zeros({1, 3, 16, 16}), Tensor::zeros({1, 3, 16, 16})), ad::ShapeError);
    EXPECT_THROW(gd(Tensor::zeros({1, 3, 8, 8}), Tensor::zeros({1, 2, 8, 8})), ad::ShapeError);
    EXPECT_THROW(gd(Tensor::zeros({2, 3, 8, 8}), Tensor::zeros({1, 3, 8, 8})), ad::ShapeError);
}

TEST(GlobalDiscriminator, GradientsMatchFiniteDifferences) {
    Rng rng(5);
    GlobalDiscriminator gd(2, small_config(), rng);
    randomize(gd.parameters(), rng);
    const Tensor color = random_tensor({1, 3, 8, 8}, rng), masks = random_tensor({1, 2, 8, 8}, rng, 0, 1);
    const Tensor wv = random_tensor({1, 2}, rng);
    auto scalar = [&](const Tensor& c, const Tensor& m) {
        const auto out = gd(c, m);
        return ad::add(ad::sum(out.logit), ad::sum(ad::mul(out.view, wv)));
    };
    Rng pick(6);
    const auto params = ad::grad_check_params([&] { return scalar(color, masks); }, gd.parameters(), {}, 3, &pick);
    EXPECT_TRUE(params.passed) << params.summary();
    const auto wrt_color = ad::grad_check([&](const Tensor& c) { return scalar(c, masks); }, color);
    EXPECT_TRUE(wrt_color.passed) << wrt_color.summary();
    const auto wrt_masks = ad::grad_check([&](const Tensor& m) { return scalar(color, m); }, masks);
    EXPECT_TRUE(wrt_masks.passed) << wrt_masks.summary();
}

TEST(GlobalDiscriminator, FiniteOnBoundedInputs) {
    Rng rng(7);
    GlobalDiscriminator gd(3, DiscriminatorConfig{}, rng);
    randomize(gd.parameters(), rng, 1.0);
    for (double v : {-1.0, 1.0}) {
        const auto out = gd(Tensor::full({1, 3, 32, 32}, v), Tensor::full({1, 3, 32, 32}, v));
        EXPECT_TRUE(std::isfinite(out.logit[0]));
    }
}

TEST(SemanticDiscriminator, ShapesZeroInitDeterminism) {
    Rng rng(8);
    SemanticDiscriminator sd(3, DiscriminatorConfig{}, rng);
    const Tensor img = random_tensor({2, 3, 32, 32}, rng);
    const auto a = sd(img);
    EXPECT_EQ(a.logit.shape(), (ad::Shape{2}));
    EXPECT_EQ(a.classes.shape(), (ad::Shape{2, 3}));
    for (double v : a.classes.data()) EXPECT_EQ(v, 0.0);
    randomize(sd.parameters(), rng);
    EXPECT_EQ(sd(img).classes.to_vector(), sd(img).classes.to_vector());
    EXPECT_THROW(sd(Tensor::zeros({1, 2, 32, 32})), ad::ShapeError);
}

TEST(SemanticDiscriminator, GradientsMatchFiniteDifferences) {
    Rng rng(9);
    SemanticDiscriminator sd(3, small_config(), rng);
    randomize(sd.parameters(), rng);
    const Tensor img = random_tensor({1, 3, 8, 8}, rng);
    const int label[] = {1};
    auto scalar = [&](const Tensor& x) {
        const auto out = sd(x);
        return ad::add(ad::sum(out.logit), class_loss(out.classes, label));
    };
    Rng pick(10);
    const auto params = ad::grad_check_params([&] { return scalar(img); }, sd.parameters(), {}, 3, &pick);
    EXPECT_TRUE(params.passed) << params.summary();
    const auto wrt_input = ad::grad_check(scalar, img);
    EXPECT_TRUE(wrt_input.passed) << wrt_input.summary();
}

TEST(R1, GlobalDiscriminatorBranchesUseTheirWeights) {
    Rng rng(11);
    GlobalDiscriminator gd(2, small_config(), rng);
    randomize(gd.parameters(), rng);
    const Critic critic = [&](std::span<const Tensor> in) { return gd(in[0], in[1]).logit; };
    const Tensor inputs[] = {random_tensor({2, 3, 8, 8}, rng), binarize_masks(random_tensor({2, 2, 8, 8}, rng, 0, 1))};
    const double unit[] = {1.0, 1.0}, weighted[] = {10.0, 1000.0};
    const auto a = r1_penalty(critic, inputs, unit), b = r1_penalty(critic, inputs, weighted);
    EXPECT_GT(a.per_branch[0], 0.0);
    EXPECT_GT(a.per_branch[1], 0.0);
    EXPECT_NEAR(b.per_branch[0], 10.0 * a.per_branch[0], 1e-12 * b.per_branch[0]);
    EXPECT_NEAR(b.per_branch[1], 1000.0 * a.per_branch[1], 1e-12 * b.per_branch[1]);
}
