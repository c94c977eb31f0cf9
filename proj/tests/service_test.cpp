#include "cnerf/service.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <thread>

#include "cnerf/training.hpp"
#include "httplib.h"
#include "test_util.hpp"

namespace cnerf {
namespace {

using nlohmann::json;

std::unique_ptr<RenderService> make_service(bool poison = false, ServiceConfig cfg = {}) {
    auto gc = test_util::tiny_config(3);
    gc.labels = {"background", "body", "eyes"};
    Rng rng(11);
    auto model = std::make_unique<CNeRFModel>(gc, rng);
    if (poison) test_util::zero(model->region(1).color_head().bias, std::numeric_limits<double>::quiet_NaN());
    Camera cam;
    cam.width = cam.height = 8;
    Rng lat_rng(3);
    auto defaults = assign_latents(lat_rng, model->mapping(), 3);
    return std::make_unique<RenderService>(std::move(model), "abc123", cam, std::move(defaults), cfg);
}

json body_of(const HttpReply& r) { return json::parse(r.body); }

TEST(Base64, RoundTripsAllLengths) {
    for (std::size_t n = 0; n < 10; ++n) {
        std::vector<std::uint8_t> bytes(n);
        for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<std::uint8_t>(37 * i + 250);
        EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
    }
    EXPECT_EQ(base64_encode({'M', 'a', 'n'}), "TWFu");
    EXPECT_EQ(base64_encode({'M'}), "TQ==");
}

TEST(RenderService, ModelInfo) {
    const auto s = make_service();
    const auto r = s->get_model();
    ASSERT_EQ(r.status, 200);
    const auto j = body_of(r);
    EXPECT_EQ(j["k"], 3);
    EXPECT_EQ(j["labels"], json({"background", "body", "eyes"}));
    EXPECT_EQ(j["latent_length"], 4);
    EXPECT_EQ(j["checkpoint_id"], "abc123");
    EXPECT_EQ(j["default_camera"]["width"], 8);
}

TEST(RenderService, RenderReturnsDecodableImagesAndIsDeterministic) {
    const auto s = make_service();
    const std::string req = R"({"resolution": {"width": 10, "height": 6}, "outputs": ["color", "masks", "depth"]})";
    const auto a = s->post_render(req);
    ASSERT_EQ(a.status, 200) << a.body;
    const auto j = body_of(a);
    EXPECT_EQ(j["width"], 10);
    EXPECT_EQ(j["height"], 6);
    const auto color = decode_png(base64_decode(j["color"].get<std::string>()));
    EXPECT_EQ(color.width, 10u);
    EXPECT_EQ(color.height, 6u);
    EXPECT_EQ(color.channels, 3u);
    ASSERT_EQ(j["masks"].size(), 3u);
    EXPECT_TRUE(j["masks"].contains("eyes"));
    EXPECT_EQ(decode_png(base64_decode(j["depth"].get<std::string>())).channels, 1u);

    const auto b = s->post_render(req);
    EXPECT_EQ(a.body, b.body);
    const auto other = body_of(s->post_render(R"({"resolution": 10, "outputs": ["color"]})"));
    EXPECT_NE(other["render_id"], j["render_id"]);
}

TEST(RenderService, RawPngCarriesRenderId) {
    const auto s = make_service();
    const auto r = s->post_render(R"({"outputs": ["depth"]})", true);
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.content_type, "image/png");
    EXPECT_EQ(r.headers.at("X-Render-Id").size(), 8u);
    const auto img = decode_png(std::vector<std::uint8_t>(r.body.begin(), r.body.end()));
    EXPECT_EQ(img.width, 8u);
}

TEST(RenderService, ActiveRegionSubsetChangesTheImage) {
    const auto s = make_service();
    const auto full = body_of(s->post_render(R"({})"));
    const auto body = body_of(s->post_render(R"({"active_regions": ["body"]})"));
    EXPECT_NE(full["color"], body["color"]);
    EXPECT_NE(full["render_id"], body["render_id"]);
}

TEST(RenderService, ExplicitLatentsOverrideDefaults) {
    const auto s = make_service();
    const auto base = s->render(s->parse_request(json::object()));
    const auto seeded = s->render(s->parse_request(json::parse(R"({"latents": {"body": {"seed": 42}}})")));
    EXPECT_NE(base.color_values, seeded.color_values);

    // A latent given as a vector equals the same latent given by seed.
    const auto w = s->latent_from_seed(42);
    json by_vector = {{"latents", json::array({{{"region", 1}, {"w_shape", w}, {"w_texture", w}}})}};
    EXPECT_EQ(s->render(s->parse_request(by_vector)).color_values, seeded.color_values);
}

TEST(RenderService, Randomize) {
    const auto s = make_service();
    const auto r = s->post_randomize(R"({"region": "eyes", "axis": "texture", "seed": 7})");
    ASSERT_EQ(r.status, 200) << r.body;
    const auto j = body_of(r);
    EXPECT_EQ(j["region_id"], 2);
    EXPECT_EQ(j["latent"].size(), 4u);
    EXPECT_EQ(j["latent"].get<std::vector<double>>(), s->latent_from_seed(7));
    EXPECT_EQ(j["spec"]["texture_seed"], 7);
    EXPECT_EQ(s->post_randomize(R"({"region": "eyes", "axis": "texture", "seed": 7})").body, r.body);
    EXPECT_NE(s->post_randomize(R"({"region": "eyes", "axis": "texture", "seed": 8})").body, r.body);
}

TEST(RenderService, ErrorStatuses) {
    const auto s = make_service(false, ServiceConfig{64});
    auto status = [&](const std::string& body) { return s->post_render(body).status; };
    EXPECT_EQ(status("{not json"), 400);
    EXPECT_EQ(status(R"({"bogus": 1})"), 400);
    EXPECT_EQ(status(R"({"camera": {"fov": "wide"}})"), 400);
    EXPECT_EQ(status(R"({"outputs": ["normals"]})"), 400);
    EXPECT_EQ(status(R"({"active_regions": []})"), 400);
    EXPECT_EQ(status(R"({"latents": {"body": {"w_shape": [1, 2]}}})"), 400);
    EXPECT_EQ(status(R"({"latents": {"body": {"seed": -1}}})"), 400);
    EXPECT_EQ(status(R"({"active_regions": ["tail"]})"), 404);
    EXPECT_EQ(status(R"({"latents": {"7": {"seed": 1}}})"), 404);
    EXPECT_EQ(status(R"({"resolution": 65})"), 413);
    EXPECT_EQ(status(R"({"resolution": {"width": 8, "height": 100}})"), 413);
    EXPECT_EQ(status(R"({"resolution": 64})"), 200);

    const auto r = s->post_randomize(R"({"region": "tail", "axis": "shape", "seed": 1})");
    EXPECT_EQ(r.status, 404);
    EXPECT_TRUE(body_of(r).contains("error"));
    EXPECT_EQ(s->post_randomize(R"({"region": "body", "axis": "colour", "seed": 1})").status, 400);
    EXPECT_EQ(s->post_randomize(R"({"region": "body", "axis": "shape"})").status, 400);
}

TEST(RenderService, NonFiniteRenderIs500) {
    const auto s = make_service(true);
    const auto r = s->post_render("{}");
    EXPECT_EQ(r.status, 500);
    EXPECT_NE(body_of(r)["error"].get<std::string>().find("numeric"), std::string::npos);
}

TEST(RenderService, ConcurrentRendersMatchSerial) {
    const auto s = make_service();
    std::vector<std::string> bodies;
    for (int i = 0; i < 6; ++i)
        bodies.push_back(json{{"camera", {{"azimuth", 0.1 * i}}}, {"latents", {{"body", {{"seed", i}}}}}}.dump());
    std::vector<std::string> serial;
    for (const auto& b : bodies) serial.push_back(s->post_render(b).body);
    std::vector<std::string> parallel(bodies.size());
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < bodies.size(); ++i)
        threads.emplace_back([&, i] { parallel[i] = s->post_render(bodies[i]).body; });
    for (auto& t : threads) t.join();
    EXPECT_EQ(parallel, serial);
}

TEST(RenderService, FromCheckpointUsesStoredIdAndResolution) {
    auto gc = test_util::tiny_config(3);
    Rng rng(5);
    CNeRFModel model(gc, rng);
    Checkpoint c;
    add_generator(c, model);
    c.header["gan"] = {{"resolution", 12}};
    const auto s = RenderService::from_checkpoint(c, "feedbeef");
    EXPECT_EQ(s->info().checkpoint_id, "feedbeef");
    EXPECT_EQ(s->info().default_camera.width, 12u);
    EXPECT_EQ(s->region_index(json("2")), 2u);
    EXPECT_THROW(s->region_index(json(3)), RequestError);
}

TEST(HttpService, ServesOverTheNetwork) {
    const auto s = make_service();
    HttpService http(*s);
    const int port = http.bind("127.0.0.1", 0);
    ASSERT_GT(port, 0);
    std::thread server([&] { http.listen(); });

    httplib::Client client("127.0.0.1", port);
    client.set_connection_timeout(5);
    auto model = client.Get("/model");
    ASSERT_TRUE(model);
    EXPECT_EQ(model->status, 200);
    EXPECT_EQ(json::parse(model->body)["k"], 3);

    auto render = client.Post("/render", R"({"resolution": 6})", "application/json");
    ASSERT_TRUE(render);
    EXPECT_EQ(render->status, 200);
    EXPECT_EQ(render->body, s->post_render(R"({"resolution": 6})").body);

    auto png = client.Post("/render?format=png", "{}", "application/json");
    ASSERT_TRUE(png);
    EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
    EXPECT_FALSE(png->get_header_value("X-Render-Id").empty());

    auto bad = client.Post("/render", R"({"resolution": 100000})", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 413);

    auto rnd = client.Post("/latents/randomize", R"({"region": 1, "axis": "shape", "seed": 3})", "application/json");
    ASSERT_TRUE(rnd);
    EXPECT_EQ(rnd->status, 200);

    http.stop();
    server.join();
}

}  // namespace
}  // namespace cnerf
