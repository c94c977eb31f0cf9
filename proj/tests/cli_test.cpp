#include "cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cnerf/grad_suite.hpp"
#include "cnerf/image_io.hpp"
#include "cnerf/training.hpp"
#include "test_util.hpp"

namespace cnerf {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cnerf");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("cnerf_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    /// Region 0 owns every point; the color heads keep their random weights.
    std::string pure_sphere_checkpoint() {
        auto gc = test_util::tiny_config(3);
        gc.labels = {"background", "body", "eyes"};
        Rng rng(9);
        CNeRFModel model(gc, rng);
        for (std::size_t i = 0; i < 3; ++i) {
            auto& g = model.region(i);
            test_util::zero(g.sdf_head().weight);
            test_util::zero(g.sdf_head().bias);
            test_util::zero(g.mask_head().weight);
            test_util::zero(g.mask_head().bias, i == 0 ? 1.0 : 0.0);
        }
        Checkpoint c;
        add_generator(c, model);
        const auto path = (dir_ / "model.bin").string();
        save_checkpoint(path, c);
        return path;
    }

    std::string write(const std::string& name, const std::string& text) {
        const auto path = (dir_ / name).string();
        std::ofstream(path) << text;
        return path;
    }

    fs::path dir_;
};

TEST_F(CliTest, UsageErrorsExitOne) {
    auto r = cli({});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
    r = cli({"render", "--checkpoint", "x", "--out", "y", "--bogus"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
    EXPECT_EQ(cli({"frobnicate"}).code, 1);
    EXPECT_EQ(cli({"sweep", "--checkpoint", "x", "--region", "1", "--axis", "colour"}).code, 1);
    EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST_F(CliTest, RuntimeErrorsExitTwo) {
    auto r = cli({"render", "--checkpoint", (dir_ / "missing.bin").string(), "--out", (dir_ / "o.png").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("missing.bin"), std::string::npos);

    const auto ckpt = pure_sphere_checkpoint();
    const auto req = write("bad.json", R"({"resolution": 100000})");
    r = cli({"render", "--checkpoint", ckpt, "--request", req, "--out", (dir_ / "o.png").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("resolution"), std::string::npos);
}

TEST_F(CliTest, RenderMatchesRequestedDimensions) {
    const auto ckpt = pure_sphere_checkpoint();
    const auto req = write("r.json", R"({"resolution": {"width": 13, "height": 7}})");
    const auto png = (dir_ / "img.png").string();
    auto r = cli({"render", "--checkpoint", ckpt, "--request", req, "--out", png, "--masks-out",
                  (dir_ / "m.png").string(), "--depth-out", (dir_ / "d.png").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto img = read_png(png);
    EXPECT_EQ(img.width, 13u);
    EXPECT_EQ(img.height, 7u);
    EXPECT_EQ(img.channels, 3u);
    EXPECT_TRUE(fs::exists(dir_ / "m_eyes.png"));
    EXPECT_EQ(read_png((dir_ / "d.png").string()).width, 13u);

    const auto ppm = (dir_ / "img.ppm").string();
    ASSERT_EQ(cli({"render", "--checkpoint", ckpt, "--request", req, "--out", ppm}).code, 0);
    std::ifstream f(ppm, std::ios::binary);
    std::string magic;
    std::size_t w = 0, h = 0;
    f >> magic >> w >> h;
    EXPECT_EQ(magic, "P6");
    EXPECT_EQ(w, 13u);
    EXPECT_EQ(h, 7u);
}

TEST_F(CliTest, SweepLeavesOtherRegionsUntouched) {
    const auto ckpt = pure_sphere_checkpoint();
    const auto out = (dir_ / "sweep").string();
    auto r = cli({"sweep", "--checkpoint", ckpt, "--region", "body", "--axis", "texture", "--seeds", "3", "--out", out});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream f(out + "/sweep.json");
    const auto j = json::parse(f);
    ASSERT_EQ(j["outside_mean_abs_diff"].size(), 3u);
    for (double d : j["outside_mean_abs_diff"]) EXPECT_LT(d, 0.02);
    EXPECT_TRUE(fs::exists(out + "/seed_2.png"));

    // The owning region does change the picture.
    r = cli({"sweep", "--checkpoint", ckpt, "--region", "background", "--seeds", "1", "--out", out});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream g(out + "/sweep.json");
    const auto k = json::parse(g);
    EXPECT_GT(k["inside_mean_abs_diff"][0].get<double>(), 1e-3);
}

TEST_F(CliTest, ExportDepthWritesRawValues) {
    const auto ckpt = pure_sphere_checkpoint();
    const auto raw = (dir_ / "depth.json").string();
    auto r = cli({"export-depth", "--checkpoint", ckpt, "--out", (dir_ / "d.png").string(), "--raw", raw});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream f(raw);
    const auto j = json::parse(f);
    EXPECT_EQ(j["depth"].size(), j["width"].get<std::size_t>() * j["height"].get<std::size_t>());
}

TEST_F(CliTest, GenDataFitAndTrainRoundTrip) {
    const auto data = (dir_ / "data").string();
    auto r = cli({"gen-data", "--out", data, "--count", "3", "--resolution", "8", "--seed", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(data + "/manifest.json"));
    EXPECT_EQ(read_png(data + "/image_00002.png").width, 8u);

    const auto fit_cfg = write("fit.json", R"({"fit": {"iterations": 3, "resolution": 6, "views": 3, "held_out": 1,
        "rays_per_step": 8, "eikonal_points": 4, "sampling": {"near": 0.88, "far": 1.12, "count": 6}},
        "generator": {"hidden": 6, "latent": 4, "feature": 4, "mapping_layers": 2}})");
    const auto fit_out = (dir_ / "fit.bin").string();
    const auto metrics = (dir_ / "fit.jsonl").string();
    r = cli({"fit", "--config", fit_cfg, "--out", fit_out, "--metrics", metrics});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto eval = json::parse(r.out.substr(r.out.find('{')));
    EXPECT_TRUE(eval.contains("held_out_psnr"));
    EXPECT_TRUE(eval["train_iou"].contains("eyes"));
    EXPECT_TRUE(fs::exists(metrics));
    r = cli({"fit", "--config", fit_cfg, "--out", fit_out, "--resume", fit_out});
    EXPECT_EQ(r.code, 0) << r.err;
    // The iteration count sets the learning-rate schedule, so it is part of the run.
    r = cli({"fit", "--config", fit_cfg, "--out", fit_out, "--resume", fit_out, "--iterations", "4"});
    EXPECT_EQ(r.code, 2);

    const auto gan_cfg = write("gan.json", R"({"gan": {"resolution": 8, "batch": 2, "iterations": 2, "std_every": 2,
        "eikonal_points": 4, "sampling": {"near": 0.88, "far": 1.12, "count": 6},
        "generator": {"regions": 3, "hidden": 6, "latent": 4, "feature": 4, "mapping_layers": 2},
        "discriminator": {"resolution": 8, "widths": [4, 6]}}})");
    r = cli({"train", "--config", gan_cfg, "--data", data, "--out", (dir_ / "gan.bin").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli({"render", "--checkpoint", (dir_ / "gan.bin").string(), "--out", (dir_ / "g.png").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_png((dir_ / "g.png").string()).width, 8u);

    EXPECT_EQ(cli({"fit", "--config", write("x.json", R"({"fitt": {}})"), "--out", fit_out}).code, 2);
}

TEST(GradientSuite, EveryEntryPasses) {
    const auto entries = run_gradient_suite();
    EXPECT_GT(entries.size(), 50u);
    for (const auto& e : entries) EXPECT_TRUE(e.report.passed) << e.name << ": " << e.report.summary();
}

}  // namespace
}  // namespace cnerf
