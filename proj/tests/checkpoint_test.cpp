#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cnerf/checkpoint.hpp"
#include "cnerf/training.hpp"
#include "test_util.hpp"

using namespace cnerf;
using namespace cnerf::test_util;

namespace {

Checkpoint sample_checkpoint() {
    Checkpoint c;
    c.header = {{"kind", "test"}, {"k", 3}, {"labels", {"a", "b", "c"}}};
    c.add("x", std::vector<double>{1.0, -2.5, 1e-300});
    c.add("empty", std::vector<double>{});
    c.add("y/z", std::vector<double>{3.25});
    return c;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("cnerf_" + name)).string();
}

}  // namespace

TEST(Checkpoint, EncodeDecodeIsByteStable) {
    const auto bytes = encode_checkpoint(sample_checkpoint());
    const auto back = decode_checkpoint(bytes);
    EXPECT_EQ(back.header, sample_checkpoint().header);
    ASSERT_EQ(back.blobs.size(), 3u);
    EXPECT_EQ(back.get("x", 3), (std::vector<double>{1.0, -2.5, 1e-300}));
    EXPECT_TRUE(back.get("empty", 0).empty());
    EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, FileSaveLoadSave) {
    const std::string a = temp_path("a.bin"), b = temp_path("b.bin");
    save_checkpoint(a, sample_checkpoint());
    save_checkpoint(b, load_checkpoint(a));
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    EXPECT_EQ(slurp(a), slurp(b));
    EXPECT_FALSE(std::filesystem::exists(a + ".tmp"));
    std::remove(a.c_str());
    std::remove(b.c_str());
    EXPECT_THROW(load_checkpoint(a), CheckpointError);
}

TEST(Checkpoint, CorruptedBlobFailsChecksum) {
    auto bytes = encode_checkpoint(sample_checkpoint());
    bytes[bytes.size() - 12] ^= 0x01;  // inside the last blob's data
    try {
        decode_checkpoint(bytes);
        FAIL() << "expected a checksum error";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, StructuralErrors) {
    const auto bytes = encode_checkpoint(sample_checkpoint());
    for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
        const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
        EXPECT_THROW(decode_checkpoint(part), CheckpointError) << cut;
    }
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic), CheckpointError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    try {
        decode_checkpoint(bad_version);
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos) << e.what();
    }
    auto extra = bytes;
    extra.insert(extra.end() - 4, 0);
    EXPECT_THROW(decode_checkpoint(extra), CheckpointError);
}

TEST(Checkpoint, BlobAccess) {
    auto c = sample_checkpoint();
    EXPECT_THROW(c.add("x", std::vector<double>{}), CheckpointError);
    EXPECT_EQ(c.find("missing"), nullptr);
    EXPECT_THROW(c.get("missing", 1), CheckpointError);
    EXPECT_THROW(c.get("x", 2), CheckpointError);
}

TEST(Checkpoint, ParameterRestoreIsAllOrNothing) {
    Rng rng(1);
    CNeRFModel a(tiny_config(), rng), b(tiny_config(), rng);
    Checkpoint c;
    add_parameters(c, "g/", a.parameters());
    const auto params_b = b.parameters();
    std::vector<std::vector<double>> before;
    for (const auto* p : params_b) before.push_back(p->value().to_vector());

    Checkpoint partial = c;
    partial.blobs.pop_back();
    EXPECT_THROW(restore_parameters(partial, "g/", params_b), CheckpointError);
    for (std::size_t i = 0; i < params_b.size(); ++i) EXPECT_EQ(params_b[i]->value().to_vector(), before[i]);

    restore_parameters(c, "g/", params_b);
    const auto params_a = a.parameters();
    for (std::size_t i = 0; i < params_b.size(); ++i)
        EXPECT_EQ(params_b[i]->value().to_vector(), params_a[i]->value().to_vector());
}

TEST(Checkpoint, GeneratorHeaderAndReload) {
    Rng rng(2);
    auto cfg = tiny_config(3);
    CNeRFModel model(cfg, rng);
    model.set_alpha(0.05);
    Checkpoint c;
    add_generator(c, model);
    EXPECT_EQ(c.header.at("format_version"), Checkpoint::kVersion);
    EXPECT_EQ(c.header.at("k"), 3);
    EXPECT_EQ(c.header.at("widths").at("hidden"), cfg.hidden);
    EXPECT_EQ(c.header.at("r0"), cfg.r0);
    EXPECT_NEAR(c.header.at("alpha").get<double>(), 0.05, 1e-15);
    EXPECT_EQ(c.header.at("labels").size(), 3u);

    const auto loaded = load_generator(decode_checkpoint(encode_checkpoint(c)));
    Camera cam;
    cam.width = cam.height = 6;
    const auto latents = random_latents(rng, 3, cfg.latent);
    EXPECT_EQ(render(model, cam, latents).color.to_vector(), render(*loaded, cam, latents).color.to_vector());

    Checkpoint empty;
    EXPECT_THROW(load_generator(empty), CheckpointError);
}

TEST(Checkpoint, OptimizerState) {
    ad::Parameter p("p", ad::Tensor({2}, {1.0, 2.0}));
    ad::Adam opt({&p}, {0.1, 0.9, 0.99, 1e-8});
    ad::Gradients g;
    g.accumulate(p, std::vector<double>{0.5, -1.0});
    opt.step(g);
    Checkpoint c;
    add_optimizer(c, "opt", opt);
    ad::Parameter q("p", ad::Tensor({2}, {1.0, 2.0}));
    ad::Adam other({&q}, {0.3, 0.9, 0.99, 1e-8});
    restore_optimizer(c, "opt", other);
    EXPECT_EQ(other.steps(), 1);
    EXPECT_EQ(other.config().lr, 0.1);
    EXPECT_EQ(other.first_moments()[0], opt.first_moments()[0]);
    EXPECT_EQ(other.second_moments()[0], opt.second_moments()[0]);
    EXPECT_THROW(restore_optimizer(c, "nope", other), CheckpointError);
}
