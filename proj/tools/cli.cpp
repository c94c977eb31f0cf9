#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "cnerf/grad_suite.hpp"
#include "cnerf/service.hpp"
#include "cnerf/training.hpp"

namespace cnerf {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    try {
        return json::parse(f);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

/// PPM when the path says so, PNG otherwise.
void write_image(const std::string& path, const Image8& img) {
    if (fs::path(path).extension() == ".ppm" || fs::path(path).extension() == ".pgm")
        write_ppm(path, img);
    else
        write_png(path, img);
}

void ensure_parent(const std::string& path) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

std::unique_ptr<std::ofstream> open_metrics(const std::string& path) {
    if (path.empty()) return nullptr;
    ensure_parent(path);
    auto f = std::make_unique<std::ofstream>(path, std::ios::app);
    if (!*f) throw std::runtime_error("cannot write " + path);
    return f;
}

json evaluation_json(const FitEvaluation& e, const CNeRFModel& model) {
    json train = json::object(), held = json::object();
    for (std::size_t r = 0; r < e.train_iou.size(); ++r) train[model.config().label(r)] = e.train_iou[r];
    for (std::size_t r = 0; r < e.held_out_iou.size(); ++r) held[model.config().label(r)] = e.held_out_iou[r];
    return {{"train_psnr", e.train_psnr},
            {"held_out_psnr", e.held_out_psnr},
            {"train_iou", train},
            {"held_out_iou", held}};
}

json render_request_from(const std::string& path) { return path.empty() ? json::object() : read_json(path); }

RenderRequest parse_or_throw(const RenderService& service, const json& body) {
    try {
        return service.parse_request(body);
    } catch (const RequestError& e) {
        throw std::runtime_error(std::string("invalid render request: ") + e.what());
    }
}

RenderResult render_or_throw(const RenderService& service, const RenderRequest& req) {
    try {
        return service.render(req);
    } catch (const RequestError& e) {
        throw std::runtime_error(e.what());
    }
}

std::atomic<HttpService*> g_server{nullptr};

extern "C" void stop_on_signal(int) {
    if (HttpService* s = g_server.load()) s->stop();
}

// ---- subcommands ------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    std::size_t count = 2000;
    std::size_t resolution = 32;
    std::uint64_t seed = 1;
    bool no_jitter = false;
};

int gen_data(const GenDataArgs& a, std::ostream& out) {
    Rng rng(a.seed);
    Camera base;
    base.width = base.height = a.resolution;
    JitterSpec jitter;
    jitter.enabled = !a.no_jitter;
    const SceneTemplate tmpl;
    const auto samples = make_dataset(rng, a.count, tmpl, jitter, base);
    save_dataset(a.out, samples, tmpl.labels);
    out << "wrote " << samples.size() << " samples to " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, out, metrics, resume, data;
    std::size_t iterations = 0;
    std::size_t checkpoint_every = 0;
    std::int64_t seed = -1;
};

int fit(const TrainArgs& a, std::ostream& out) {
    const json cfg = a.config.empty() ? json::object() : read_json(a.config);
    for (const auto& [key, value] : cfg.items())
        if (key != "fit" && key != "generator" && key != "scene")
            throw std::runtime_error("fit config: unknown section '" + key + "'");
    FitConfig fc = cfg.contains("fit") ? cfg["fit"].get<FitConfig>() : FitConfig{};
    GeneratorConfig gc = cfg.contains("generator") ? cfg["generator"].get<GeneratorConfig>() : GeneratorConfig{};
    SceneTemplate tmpl;
    const AnalyticScene scene = cfg.contains("scene") ? cfg["scene"].get<AnalyticScene>() : tmpl.scene();
    gc.regions = scene.regions;
    if (gc.labels.empty() && gc.regions == tmpl.labels.size()) gc.labels = tmpl.labels;
    if (a.iterations > 0) fc.iterations = a.iterations;
    if (a.seed >= 0) fc.seed = static_cast<std::uint64_t>(a.seed);
    fc.validate();

    auto sink = open_metrics(a.metrics);
    MetricsLog log(sink.get());
    Rng rng(fc.seed);
    CNeRFModel model(gc, rng);
    FitTrainer trainer(model, scene, fc, &log);
    if (!a.resume.empty()) trainer.restore(load_checkpoint(a.resume));
    ensure_parent(a.out);
    const auto eval = trainer.run([&](std::int64_t step, const FitStep& s) {
        if (step % 500 == 0)
            out << "step " << step << " loss " << s.total << " photometric " << s.photometric << " alpha "
                << model.alpha_value() << "\n";
        if (a.checkpoint_every > 0 && step % static_cast<std::int64_t>(a.checkpoint_every) == 0)
            save_checkpoint(a.out, trainer.checkpoint());
    });
    save_checkpoint(a.out, trainer.checkpoint());
    out << evaluation_json(eval, model).dump(2) << "\n";
    return 0;
}

int train(const TrainArgs& a, std::ostream& out) {
    const json cfg = a.config.empty() ? json::object() : read_json(a.config);
    for (const auto& [key, value] : cfg.items())
        if (key != "gan") throw std::runtime_error("train config: unknown section '" + key + "'");
    GanConfig gc = cfg.contains("gan") ? cfg["gan"].get<GanConfig>() : GanConfig{};
    if (a.iterations > 0) gc.iterations = a.iterations;
    if (a.seed >= 0) gc.seed = static_cast<std::uint64_t>(a.seed);
    if (gc.generator.labels.empty()) gc.generator.labels = SceneTemplate{}.labels;
    gc.validate();

    std::vector<OracleSample> data;
    if (!a.data.empty()) {
        auto loaded = load_dataset(a.data);
        if (loaded.regions != gc.generator.regions)
            throw std::runtime_error("dataset has " + std::to_string(loaded.regions) + " regions, config expects " +
                                     std::to_string(gc.generator.regions));
        data = std::move(loaded.samples);
    } else {
        Rng rng(gc.seed ^ 0x5eedda7aULL);
        Camera base;
        base.width = base.height = gc.resolution;
        for (auto& s : make_dataset(rng, gc.dataset_size, SceneTemplate{}, gc.jitter, base))
            data.push_back(std::move(s.view));
    }

    auto sink = open_metrics(a.metrics);
    MetricsLog log(sink.get());
    GanTrainer trainer(gc, std::move(data), &log);
    if (!a.resume.empty()) trainer.restore(load_checkpoint(a.resume));
    ensure_parent(a.out);
    while (trainer.steps() < static_cast<std::int64_t>(gc.iterations)) {
        const auto [d, g] = trainer.step();
        const auto step = trainer.steps();
        if (step % 100 == 0)
            out << "step " << step << " gd_accuracy " << d.gd_accuracy << " g_total " << g.total << " d_adv "
                << d.gd_adv << "\n";
        if (a.checkpoint_every > 0 && step % static_cast<std::int64_t>(a.checkpoint_every) == 0)
            save_checkpoint(a.out, trainer.checkpoint());
    }
    save_checkpoint(a.out, trainer.checkpoint());
    out << "wrote " << a.out << "\n";
    return 0;
}

struct RenderArgs {
    std::string checkpoint, request, out, masks_out, depth_out;
    std::size_t max_resolution = 1024;
};

int render_cmd(const RenderArgs& a, std::ostream& out) {
    ServiceConfig sc;
    sc.max_resolution = a.max_resolution;
    const auto service = RenderService::from_checkpoint(a.checkpoint, sc);
    auto req = parse_or_throw(*service, render_request_from(a.request));
    req.want_color = true;
    req.want_masks = req.want_masks || !a.masks_out.empty();
    req.want_depth = req.want_depth || !a.depth_out.empty();
    const auto res = render_or_throw(*service, req);
    ensure_parent(a.out);
    write_image(a.out, *res.color);
    if (!a.masks_out.empty()) {
        const fs::path base(a.masks_out);
        for (std::size_t r = 0; r < res.masks.size(); ++r) {
            const std::string path =
                (base.parent_path() / (base.stem().string() + "_" + service->info().labels[r] + ".png")).string();
            ensure_parent(path);
            write_image(path, res.masks[r]);
        }
    }
    if (!a.depth_out.empty()) {
        ensure_parent(a.depth_out);
        write_image(a.depth_out, *res.depth);
    }
    out << "render " << res.render_id << " " << res.width << "x" << res.height << " -> " << a.out << "\n";
    return 0;
}

struct SweepArgs {
    std::string checkpoint, request, region, axis = "texture", out = "sweep";
    std::size_t seeds = 4;
    std::uint64_t first_seed = 1;
};

int sweep(const SweepArgs& a, std::ostream& out) {
    const auto service = RenderService::from_checkpoint(a.checkpoint);
    if (a.axis != "shape" && a.axis != "texture") throw std::runtime_error("axis must be shape or texture");
    std::size_t region;
    try {
        region = service->region_index(json(a.region));
    } catch (const RequestError& e) {
        throw std::runtime_error(e.what());
    }
    const json base_body = render_request_from(a.request);
    auto base_req = parse_or_throw(*service, base_body);
    base_req.want_color = base_req.want_masks = true;
    const auto base = render_or_throw(*service, base_req);
    fs::create_directories(a.out);
    write_image((fs::path(a.out) / "base.png").string(), *base.color);

    const std::size_t n = base.width * base.height, k = service->info().k;
    std::vector<bool> inside(n);
    for (std::size_t p = 0; p < n; ++p) {
        const auto* row = &base.mask_values[p * k];
        inside[p] = static_cast<std::size_t>(std::max_element(row, row + k) - row) == region;
    }
    json summary = {{"region", service->info().labels[region]}, {"axis", a.axis}, {"seeds", json::array()},
                    {"outside_mean_abs_diff", json::array()}, {"inside_mean_abs_diff", json::array()},
                    {"support_pixels", std::count(inside.begin(), inside.end(), true)}};
    for (std::size_t i = 0; i < a.seeds; ++i) {
        const std::uint64_t seed = a.first_seed + i;
        auto req = base_req;
        auto& spec = req.latents[region];
        if (a.axis == "shape") {
            spec.shape_seed = seed;
            spec.w_shape.clear();
        } else {
            spec.texture_seed = seed;
            spec.w_texture.clear();
        }
        const auto res = render_or_throw(*service, req);
        write_image((fs::path(a.out) / ("seed_" + std::to_string(seed) + ".png")).string(), *res.color);
        double in_sum = 0, out_sum = 0;
        std::size_t in_n = 0, out_n = 0;
        for (std::size_t p = 0; p < n; ++p)
            for (int c = 0; c < 3; ++c) {
                // Colors are in [-1, 1]; differences are reported on a [0, 1] scale.
                const double d = 0.5 * std::abs(res.color_values[p * 3 + c] - base.color_values[p * 3 + c]);
                (inside[p] ? in_sum : out_sum) += d;
                ++(inside[p] ? in_n : out_n);
            }
        const double outside = out_n ? out_sum / static_cast<double>(out_n) : 0.0;
        const double in = in_n ? in_sum / static_cast<double>(in_n) : 0.0;
        summary["seeds"].push_back(seed);
        summary["outside_mean_abs_diff"].push_back(outside);
        summary["inside_mean_abs_diff"].push_back(in);
        out << "seed " << seed << " outside " << outside << " inside " << in << "\n";
    }
    write_text((fs::path(a.out) / "sweep.json").string(), summary.dump(2) + "\n");
    return 0;
}

struct DepthArgs {
    std::string checkpoint, request, out, raw;
};

int export_depth(const DepthArgs& a, std::ostream& out) {
    const auto service = RenderService::from_checkpoint(a.checkpoint, ServiceConfig{1024});
    auto req = parse_or_throw(*service, render_request_from(a.request));
    req.want_color = false;
    req.want_masks = false;
    req.want_depth = true;
    const auto res = render_or_throw(*service, req);
    ensure_parent(a.out);
    write_image(a.out, *res.depth);
    if (!a.raw.empty()) {
        ensure_parent(a.raw);
        write_text(a.raw, json{{"width", res.width}, {"height", res.height}, {"depth", res.depth_values}}.dump() + "\n");
    }
    out << "depth range [" << res.depth_near << ", " << res.depth_far << "] -> " << a.out << "\n";
    return 0;
}

struct ServeArgs {
    std::string checkpoint, host = "127.0.0.1";
    int port = 8080;
    std::size_t max_resolution = 256;
};

int serve(const ServeArgs& a, std::ostream& out) {
    ServiceConfig sc;
    sc.max_resolution = a.max_resolution;
    const auto service = RenderService::from_checkpoint(a.checkpoint, sc);
    HttpService http(*service);
    const int port = http.bind(a.host, a.port);
    out << "serving " << service->info().checkpoint_id << " on http://" << a.host << ":" << port << "\n" << std::flush;
    g_server = &http;
    std::signal(SIGINT, stop_on_signal);
    std::signal(SIGTERM, stop_on_signal);
    http.listen();
    g_server = nullptr;
    return 0;
}

struct GradArgs {
    std::uint64_t seed = 1;
    bool verbose = false;
};

int grad_check(const GradArgs& a, std::ostream& out) {
    const auto entries = run_gradient_suite(a.seed);
    std::size_t failed = 0;
    double worst = 0.0;
    for (const auto& e : entries) {
        worst = std::max(worst, e.report.max_rel_error);
        if (!e.report.passed) ++failed;
        if (a.verbose || !e.report.passed)
            out << (e.report.passed ? "ok   " : "FAIL ") << e.name << ": " << e.report.summary() << "\n";
    }
    out << entries.size() - failed << "/" << entries.size() << " checks passed, worst relative error " << worst << "\n";
    if (failed > 0) throw std::runtime_error(std::to_string(failed) + " gradient checks failed");
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Compositional radiance-field generator: data, training, rendering and serving", "cnerf"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* c_gen = app.add_subcommand("gen-data", "Write a procedural dataset directory");
    c_gen->add_option("--out", gd.out, "Output directory")->required();
    c_gen->add_option("--count", gd.count, "Number of samples");
    c_gen->add_option("--resolution", gd.resolution, "Image width and height");
    c_gen->add_option("--seed", gd.seed, "Random seed");
    c_gen->add_flag("--no-jitter", gd.no_jitter, "Disable per-sample scene jitter");

    TrainArgs fa;
    auto* c_fit = app.add_subcommand("fit", "Fit the generator to multi-view renders of one analytic scene");
    c_fit->add_option("--config", fa.config, "JSON with optional fit, generator and scene sections");
    c_fit->add_option("--out", fa.out, "Checkpoint path")->required();
    c_fit->add_option("--metrics", fa.metrics, "Append JSON-lines metrics here");
    c_fit->add_option("--iterations", fa.iterations, "Override the configured iteration count");
    c_fit->add_option("--seed", fa.seed, "Override the configured seed");
    c_fit->add_option("--resume", fa.resume, "Continue from this checkpoint");
    c_fit->add_option("--checkpoint-every", fa.checkpoint_every, "Also save every N steps");

    TrainArgs ta;
    auto* c_train = app.add_subcommand("train", "Adversarial training on a procedural dataset");
    c_train->add_option("--config", ta.config, "JSON with an optional gan section");
    c_train->add_option("--data", ta.data, "Dataset directory (generated in memory when omitted)");
    c_train->add_option("--out", ta.out, "Checkpoint path")->required();
    c_train->add_option("--metrics", ta.metrics, "Append JSON-lines metrics here");
    c_train->add_option("--iterations", ta.iterations, "Override the configured iteration count");
    c_train->add_option("--seed", ta.seed, "Override the configured seed");
    c_train->add_option("--resume", ta.resume, "Continue from this checkpoint");
    c_train->add_option("--checkpoint-every", ta.checkpoint_every, "Also save every N steps");

    RenderArgs ra;
    auto* c_render = app.add_subcommand("render", "Render a request file to an image");
    c_render->add_option("--checkpoint", ra.checkpoint, "Checkpoint path")->required();
    c_render->add_option("--request", ra.request, "Render request JSON (defaults when omitted)");
    c_render->add_option("--out", ra.out, "Output image (.png, or .ppm)")->required();
    c_render->add_option("--masks-out", ra.masks_out, "Write one mask image per region with this prefix");
    c_render->add_option("--depth-out", ra.depth_out, "Write a normalized depth image");
    c_render->add_option("--max-resolution", ra.max_resolution, "Largest accepted width or height");

    SweepArgs sa;
    auto* c_sweep = app.add_subcommand("sweep", "Vary one region's shape or texture latent across seeds");
    c_sweep->add_option("--checkpoint", sa.checkpoint, "Checkpoint path")->required();
    c_sweep->add_option("--region", sa.region, "Region label or id")->required();
    c_sweep->add_option("--axis", sa.axis, "shape or texture")->check(CLI::IsMember({"shape", "texture"}));
    c_sweep->add_option("--seeds", sa.seeds, "Number of seeds");
    c_sweep->add_option("--first-seed", sa.first_seed, "First seed of the sweep");
    c_sweep->add_option("--request", sa.request, "Base render request JSON");
    c_sweep->add_option("--out", sa.out, "Output directory");

    DepthArgs da;
    auto* c_depth = app.add_subcommand("export-depth", "Write the expected-depth map of a render");
    c_depth->add_option("--checkpoint", da.checkpoint, "Checkpoint path")->required();
    c_depth->add_option("--request", da.request, "Render request JSON");
    c_depth->add_option("--out", da.out, "Depth image")->required();
    c_depth->add_option("--raw", da.raw, "Also write raw depth values as JSON");

    ServeArgs sv;
    auto* c_serve = app.add_subcommand("serve", "Start the HTTP render service");
    c_serve->add_option("--checkpoint", sv.checkpoint, "Checkpoint path")->required();
    c_serve->add_option("--host", sv.host, "Interface to bind");
    c_serve->add_option("--port", sv.port, "Port (0 picks a free one)");
    c_serve->add_option("--max-resolution", sv.max_resolution, "Largest accepted width or height");

    GradArgs ga;
    auto* c_grad = app.add_subcommand("grad-check", "Run the finite-difference gradient suite");
    c_grad->add_option("--seed", ga.seed, "Random seed");
    c_grad->add_flag("--verbose", ga.verbose, "Print every check");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return 1;
    }

    try {
        if (*c_gen) return gen_data(gd, out);
        if (*c_fit) return fit(fa, out);
        if (*c_train) return train(ta, out);
        if (*c_render) return render_cmd(ra, out);
        if (*c_sweep) return sweep(sa, out);
        if (*c_depth) return export_depth(da, out);
        if (*c_serve) return serve(sv, out);
        if (*c_grad) return grad_check(ga, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace cnerf
