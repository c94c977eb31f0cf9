#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cnerf/camera.hpp"
#include "cnerf/checkpoint.hpp"
#include "cnerf/generator.hpp"
#include "cnerf/image_io.hpp"
#include "json.hpp"

namespace cnerf {

/// A request the service refuses; `status` is the HTTP code to answer with.
class RequestError : public std::runtime_error {
public:
    RequestError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

struct ServiceConfig {
    /// Largest accepted width or height.
    std::size_t max_resolution = 256;
};

/// Latent for one region: a seed per axis, or explicit w vectors.
struct LatentSpec {
    std::optional<std::uint64_t> shape_seed;
    std::optional<std::uint64_t> texture_seed;
    std::vector<double> w_shape;
    std::vector<double> w_texture;
};

struct RenderRequest {
    Camera camera;
    /// By region id; regions absent here use the model's default latents.
    std::map<std::size_t, LatentSpec> latents;
    std::vector<std::size_t> active_regions;
    bool want_color = true;
    bool want_masks = false;
    bool want_depth = false;
};

struct ModelInfo {
    std::size_t k = 0;
    std::vector<std::string> labels;
    std::size_t latent = 0;
    Camera default_camera;
    std::string checkpoint_id;
};

void to_json(nlohmann::json& j, const ModelInfo& m);

struct RenderResult {
    std::string render_id;
    std::size_t width = 0;
    std::size_t height = 0;
    std::optional<Image8> color;
    std::vector<Image8> masks;  // one gray image per region when requested
    std::optional<Image8> depth;
    double depth_near = 0.0;
    double depth_far = 0.0;
    /// Linear values: color [H*W, 3] in [-1, 1], masks [H*W, k], depth [H*W].
    std::vector<double> color_values;
    std::vector<double> mask_values;
    std::vector<double> depth_values;
};

struct HttpReply {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
    std::map<std::string, std::string> headers;
};

/// Read-only renderer over one loaded generator. Every method is safe to
/// call from several threads at once.
class RenderService {
public:
    RenderService(std::unique_ptr<CNeRFModel> model, std::string checkpoint_id, Camera default_camera,
                  LatentAssignment default_latents, ServiceConfig cfg = {});

    /// Default latents come from a fit run's stored latents when present and
    /// from seed 0 otherwise; the default camera from the training resolution.
    static std::unique_ptr<RenderService> from_checkpoint(const std::string& path, ServiceConfig cfg = {});
    static std::unique_ptr<RenderService> from_checkpoint(const Checkpoint& c, std::string checkpoint_id,
                                                          ServiceConfig cfg = {});

    const ModelInfo& info() const { return info_; }
    const CNeRFModel& model() const { return *model_; }
    const ServiceConfig& config() const { return cfg_; }

    /// Region by label or integer id (also accepted as a numeric string).
    std::size_t region_index(const nlohmann::json& ref) const;
    RenderRequest parse_request(const nlohmann::json& body) const;
    LatentAssignment latents_for(const RenderRequest& req) const;
    /// w for a seed: a standard normal z through the mapping network.
    std::vector<double> latent_from_seed(std::uint64_t seed) const;
    RenderResult render(const RenderRequest& req) const;

    HttpReply get_model() const;
    /// `raw_png` answers with the color image alone and the id in X-Render-Id.
    HttpReply post_render(const std::string& body, bool raw_png = false) const;
    HttpReply post_randomize(const std::string& body) const;

private:
    std::unique_ptr<CNeRFModel> model_;
    ModelInfo info_;
    LatentAssignment defaults_;
    ServiceConfig cfg_;
};

nlohmann::json render_result_json(const RenderResult& r, const std::vector<std::string>& labels);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// HTTP front end: GET /model, POST /render, POST /latents/randomize.
class HttpService {
public:
    explicit HttpService(const RenderService& service);
    ~HttpService();
    HttpService(const HttpService&) = delete;
    HttpService& operator=(const HttpService&) = delete;

    /// Port 0 picks a free port. Returns the bound port; throws on failure.
    int bind(const std::string& host, int port);
    /// Blocks until stop() is called from another thread.
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace cnerf
