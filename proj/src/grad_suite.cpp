#include "cnerf/grad_suite.hpp"

#include <functional>

#include "cnerf/discriminators.hpp"
#include "cnerf/generator.hpp"
#include "cnerf/losses.hpp"

namespace cnerf {

namespace {

using ad::Tensor;

Tensor random(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    const auto n = ad::numel(shape);
    return Tensor(std::move(shape), rng.uniform_vector(n, lo, hi));
}

/// Values in [lo, hi] with random sign, kept away from zero.
Tensor away_from_zero(ad::Shape shape, Rng& rng, double lo = 0.2, double hi = 1.0) {
    Tensor t = random(std::move(shape), rng, lo, hi);
    std::vector<double> v = t.to_vector();
    for (auto& x : v)
        if (rng.coin()) x = -x;
    return Tensor(t.shape(), std::move(v));
}

GeneratorConfig tiny_generator() {
    GeneratorConfig cfg;
    cfg.regions = 2;
    cfg.hidden = 6;
    cfg.latent = 4;
    cfg.feature = 4;
    cfg.mapping_layers = 2;
    return cfg;
}

LatentAssignment random_latents(Rng& rng, std::size_t k, std::size_t width) {
    std::vector<RegionLatent> regions;
    for (std::size_t i = 0; i < k; ++i)
        regions.push_back({Tensor({1, width}, rng.normal_vector(width)), Tensor({1, width}, rng.normal_vector(width))});
    return explicit_latents(std::move(regions));
}

class Suite {
public:
    Suite(std::uint64_t seed, const ad::GradCheckOptions& opts) : rng_(seed), opts_(opts) {}

    /// Checks sum(op(x) * w) for a fixed random weighting w of the output.
    void unary(const std::string& name, const std::function<Tensor(const Tensor&)>& op, const Tensor& x) {
        const Tensor probe = op(x);
        const Tensor w = random(probe.shape(), rng_);
        input(name, [op, w](const Tensor& v) { return ad::sum(ad::mul(op(v), w)); }, x);
    }

    void input(const std::string& name, const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
        entries_.push_back({name, ad::grad_check(f, x, opts_)});
    }

    void params(const std::string& name, const std::function<Tensor()>& loss, const ad::ParameterList& p,
                std::size_t coords) {
        entries_.push_back({name, ad::grad_check_params(loss, p, opts_, coords, &rng_)});
    }

    Rng& rng() { return rng_; }
    std::vector<GradSuiteEntry> take() { return std::move(entries_); }

private:
    Rng rng_;
    ad::GradCheckOptions opts_;
    std::vector<GradSuiteEntry> entries_;
};

void elementwise(Suite& s) {
    Rng& rng = s.rng();
    const Tensor a = random({3, 4}, rng), b = random({4}, rng), pos = random({3, 4}, rng, 0.3, 2.0);
    s.unary("add", [&](const Tensor& x) { return ad::add(x, b); }, a);
    s.unary("add/broadcast", [&](const Tensor& y) { return ad::add(a, y); }, b);
    s.unary("sub", [&](const Tensor& x) { return ad::sub(x, b); }, a);
    s.unary("sub/broadcast", [&](const Tensor& y) { return ad::sub(a, y); }, b);
    s.unary("mul", [&](const Tensor& x) { return ad::mul(x, b); }, a);
    s.unary("mul/broadcast", [&](const Tensor& y) { return ad::mul(a, y); }, b);
    s.unary("div/numerator", [&](const Tensor& x) { return ad::div(x, pos); }, a);
    s.unary("div/denominator", [&](const Tensor& y) { return ad::div(a, y); }, pos);
    s.unary("scale", [](const Tensor& x) { return ad::scale(x, -2.5); }, a);
    s.unary("shift", [](const Tensor& x) { return ad::shift(x, 0.7); }, a);
    s.unary("neg", [](const Tensor& x) { return ad::neg(x); }, a);
    s.unary("sin", [](const Tensor& x) { return ad::sin(x); }, random({4, 4}, rng, -3, 3));
    s.unary("cos", [](const Tensor& x) { return ad::cos(x); }, random({4, 4}, rng, -3, 3));
    s.unary("sigmoid", [](const Tensor& x) { return ad::sigmoid(x); }, random({4, 4}, rng, -4, 4));
    s.unary("tanh", [](const Tensor& x) { return ad::tanh(x); }, random({4, 4}, rng, -2, 2));
    s.unary("exp", [](const Tensor& x) { return ad::exp(x); }, a);
    s.unary("log", [](const Tensor& x) { return ad::log(x); }, pos);
    s.unary("abs", [](const Tensor& x) { return ad::abs(x); }, away_from_zero({4, 4}, rng));
    s.unary("sqrt", [](const Tensor& x) { return ad::sqrt(x); }, pos);
    s.unary("square", [](const Tensor& x) { return ad::square(x); }, a);
    s.unary("softplus", [](const Tensor& x) { return ad::softplus(x); }, random({4, 4}, rng, -5, 5));
    s.unary("relu", [](const Tensor& x) { return ad::relu(x); }, away_from_zero({4, 4}, rng));
    s.unary("leaky_relu", [](const Tensor& x) { return ad::leaky_relu(x, 0.2); }, away_from_zero({4, 4}, rng));
    s.unary("clamp_min", [](const Tensor& x) { return ad::clamp_min(x, 0.1); },
            ad::shift(away_from_zero({4, 4}, rng, 0.05, 1.0), 0.1));
    s.unary("smooth_l1/quadratic", [](const Tensor& x) { return ad::smooth_l1(x, 1.0); },
            away_from_zero({4, 4}, rng, 0.05, 0.9));
    s.unary("smooth_l1/linear", [](const Tensor& x) { return ad::smooth_l1(x, 1.0); }, away_from_zero({4, 4}, rng, 1.1, 3.0));
}

void structural(Suite& s) {
    Rng& rng = s.rng();
    const Tensor x = random({3, 4}, rng), cube = random({2, 3, 4}, rng);
    s.input("sum", [](const Tensor& v) { return ad::sum(ad::square(v)); }, x);
    s.input("mean", [](const Tensor& v) { return ad::mean(ad::square(v)); }, x);
    s.unary("sum_axis/0", [](const Tensor& v) { return ad::sum_axis(v, 0); }, cube);
    s.unary("sum_axis/2/keepdim", [](const Tensor& v) { return ad::sum_axis(v, 2, true); }, cube);
    s.unary("mean_axis/1", [](const Tensor& v) { return ad::mean_axis(v, 1); }, cube);
    s.unary("cumsum_exclusive", [](const Tensor& v) { return ad::cumsum_exclusive(v); }, x);
    const Tensor m = random({4, 5}, rng), bias = random({5}, rng);
    s.unary("matmul/left", [&](const Tensor& v) { return ad::matmul(v, m); }, x);
    s.unary("matmul/right", [&](const Tensor& v) { return ad::matmul(x, v); }, m);
    s.unary("linear/input", [&](const Tensor& v) { return ad::linear(v, m, bias); }, x);
    s.unary("linear/weight", [&](const Tensor& v) { return ad::linear(x, v, bias); }, m);
    s.unary("linear/bias", [&](const Tensor& v) { return ad::linear(x, m, v); }, bias);
    s.unary("transpose", [](const Tensor& v) { return ad::transpose(v); }, x);
    s.unary("reshape", [](const Tensor& v) { return ad::reshape(v, {2, 6}); }, x);
    const Tensor other = random({3, 2}, rng);
    s.unary("concat", [&](const Tensor& v) { return ad::concat({v, other}, 1); }, x);
    s.unary("slice", [](const Tensor& v) { return ad::slice(v, 1, 1, 3); }, x);
    const std::size_t rows[] = {2, 0, 2};
    s.unary("gather_rows", [&](const Tensor& v) { return ad::gather_rows(v, rows); }, x);
}

void convolution(Suite& s) {
    Rng& rng = s.rng();
    const Tensor img = random({2, 2, 6, 6}, rng), w = random({3, 2, 3, 3}, rng, -0.5, 0.5), b = random({3}, rng);
    for (std::size_t stride : {1u, 2u}) {
        const ad::Conv2dOptions o{stride, 1};
        const std::string tag = "conv2d/stride" + std::to_string(stride);
        s.unary(tag + "/input", [&, o](const Tensor& v) { return ad::conv2d(v, w, b, o); }, img);
        s.unary(tag + "/weight", [&, o](const Tensor& v) { return ad::conv2d(img, v, b, o); }, w);
        s.unary(tag + "/bias", [&, o](const Tensor& v) { return ad::conv2d(img, w, v, o); }, b);
    }
    s.unary("avgpool2d", [](const Tensor& v) { return ad::avgpool2d(v, 2); }, img);
    const int labels[] = {2, 0, 1};
    s.input("softmax_cross_entropy", [&](const Tensor& v) { return ad::softmax_cross_entropy(v, labels); },
            random({3, 4}, rng, -2, 2));
}

void rendering(Suite& s) {
    Rng& rng = s.rng();
    s.unary("sdf_to_density", [](const Tensor& d) { return sdf_to_density(d, 0.1); }, random({4, 4}, rng, -0.3, 0.3));
    const std::size_t r = 3, n = 5, k = 2;
    const Tensor sigma = random({r, n}, rng, 0.1, 4.0), deltas = random({r, n}, rng, 0.02, 0.1);
    std::vector<double> tv(r * n);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) tv[i * n + j] = 0.9 + 0.05 * static_cast<double>(j);
    const Tensor t({r, n}, tv), color = random({r, n, 3}, rng), masks = random({r, n, k}, rng, 0, 1);
    const Tensor wc = random({r, 3}, rng), wm = random({r, k}, rng), wd = random({r}, rng);
    auto aggregate = [&](const Tensor& sg, const Tensor& c, const Tensor& m) {
        const auto v = volume_aggregate(sg, deltas, t, c, Tensor(), m);
        return ad::add(ad::add(ad::sum(ad::mul(v.color, wc)), ad::sum(ad::mul(v.masks, wm))),
                       ad::sum(ad::mul(v.depth, wd)));
    };
    s.input("volume_aggregate/sigma", [&](const Tensor& v) { return aggregate(v, color, masks); }, sigma);
    s.input("volume_aggregate/color", [&](const Tensor& v) { return aggregate(sigma, v, masks); }, color);
    s.input("volume_aggregate/masks", [&](const Tensor& v) { return aggregate(sigma, color, v); }, masks);
    const Tensor fm = random({4, 1}, rng, 0, 1), fm2 = random({4, 1}, rng, 0, 1), fv2 = random({4, 3}, rng);
    s.unary("fuse", [&](const Tensor& v) {
        const Tensor values[] = {v, fv2}, ms[] = {fm, fm2};
        return fuse(values, ms);
    }, random({4, 3}, rng));

    // The full renderer with respect to every field parameter.
    CNeRFModel model(tiny_generator(), rng);
    const auto lat = random_latents(rng, 2, 4);
    Camera cam;
    cam.width = cam.height = 4;
    RenderOptions opts;
    opts.sampling.count = 6;
    const Tensor w = random({16, 3}, rng), wmask = random({16, 2}, rng);
    s.params("render/field_parameters", [&] {
        const auto out = render(model, cam, lat, opts);
        return ad::add(ad::sum(ad::mul(out.color, w)), ad::sum(ad::mul(out.masks, wmask)));
    }, model.field_parameters(), 3);
    s.params("mapping_network", [&] {
        const Tensor z({1, 4}, {0.3, -1.2, 0.8, 0.1});
        return ad::sum(ad::square(model.mapping().forward(z)));
    }, model.parameters(), 2);
}

void losses(Suite& s) {
    Rng& rng = s.rng();
    s.input("loss/eikonal/gradient", [](const Tensor& g) { return eikonal_loss(g); }, random({6, 3}, rng));
    CNeRFModel model(tiny_generator(), rng);
    const auto lat = random_latents(rng, 2, 4);
    const Tensor pts = random({5, 3}, rng, -0.15, 0.15);
    s.params("loss/eikonal/model", [&] { return eikonal_loss(model, pts, lat); }, model.field_parameters(), 4);
    s.input("loss/minimal_surface", [](const Tensor& d) { return minimal_surface_loss(d); },
            random({6, 1}, rng, -0.05, 0.05));

    Camera cam;
    cam.width = cam.height = 4;
    RenderOptions opts;
    opts.sampling.count = 6;
    std::vector<LatentAssignment> l;
    for (int i = 0; i < 4; ++i) l.push_back(random_latents(rng, 2, 4));
    FeatureExtractor phi;
    // A large margin keeps the hinge active so the contrast term is smooth.
    s.params("loss/std", [&] { return std_loss(model, cam, l[0], l[1], l[2], l[3], phi, 2.0, opts).total; },
             model.field_parameters(), 3);

    const Tensor real = random({4}, rng, -3, 3), fake = random({4}, rng, -3, 3);
    s.input("loss/adversarial/generator", [](const Tensor& f) { return generator_adv_loss(f); }, fake);
    s.input("loss/adversarial/discriminator_real", [&](const Tensor& r) { return discriminator_adv_loss(r, fake); },
            real);
    s.input("loss/adversarial/discriminator_fake", [&](const Tensor& f) { return discriminator_adv_loss(real, f); },
            fake);
    const Tensor truth = random({4, 2}, rng, -0.5, 0.5);
    // Offsets of at least 0.2 from the truth keep smooth_l1 away from its |x| = beta seam.
    s.input("loss/view", [&](const Tensor& p) { return view_loss(p, truth); },
            ad::add(truth, away_from_zero({4, 2}, rng, 0.2, 0.8)));
    const int labels[] = {0, 2, 1, 2};
    s.input("loss/class", [&](const Tensor& logits) { return class_loss(logits, labels); }, random({4, 3}, rng, -2, 2));

    DiscriminatorConfig dc;
    dc.resolution = 8;
    dc.widths = {4, 6};
    GlobalDiscriminator gd(2, dc, rng);
    SemanticDiscriminator sd(2, dc, rng);
    for (auto* p : gd.parameters()) p->assign(random(p->shape(), rng, -0.3, 0.3));
    for (auto* p : sd.parameters()) p->assign(random(p->shape(), rng, -0.3, 0.3));
    const Tensor color = random({1, 3, 8, 8}, rng), masks = random({1, 2, 8, 8}, rng, 0, 1);
    s.params("discriminator/global", [&] {
        const auto o = gd(color, masks);
        return ad::add(generator_adv_loss(o.logit), view_loss(o.view, Tensor({1, 2}, {0.1, -0.2})));
    }, gd.parameters(), 2);
    const int region[] = {1};
    s.params("discriminator/semantic", [&] {
        const auto o = sd(extract_region(color, masks, 1));
        return ad::add(generator_adv_loss(o.logit), class_loss(o.classes, region));
    }, sd.parameters(), 2);
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, const ad::GradCheckOptions& opts) {
    Suite s(seed, opts);
    elementwise(s);
    structural(s);
    convolution(s);
    rendering(s);
    losses(s);
    return s.take();
}

}  // namespace cnerf
