#include "cnerf/service.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "cnerf/training.hpp"
#include "httplib.h"

namespace cnerf {

namespace {

using nlohmann::json;

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

[[noreturn]] void bad_request(const std::string& message) { throw RequestError(400, message); }

void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
    if (!j.is_object()) bad_request(what + " must be an object");
    for (const auto& [key, value] : j.items())
        if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
            bad_request(what + ": unknown field '" + key + "'");
}

std::uint64_t seed_value(const json& j, const std::string& what) {
    if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0))
        bad_request(what + " must be a non-negative integer");
    return j.get<std::uint64_t>();
}

std::vector<double> latent_vector(const json& j, std::size_t length, const std::string& what) {
    if (!j.is_array() || j.size() != length)
        bad_request(what + " must be an array of " + std::to_string(length) + " numbers");
    std::vector<double> out;
    out.reserve(length);
    for (const auto& v : j) {
        if (!v.is_number()) bad_request(what + " must contain only numbers");
        const double x = v.get<double>();
        if (!std::isfinite(x)) bad_request(what + " contains a non-finite value");
        out.push_back(x);
    }
    return out;
}

std::string hex32(std::uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

json error_body(const std::string& message) { return {{"error", message}}; }

HttpReply json_reply(int status, const json& body) {
    HttpReply r;
    r.status = status;
    r.body = body.dump();
    return r;
}

/// Canonical form of a parsed request, used for the render id.
json canonical(const RenderRequest& req) {
    json lat = json::object();
    for (const auto& [r, spec] : req.latents) {
        json s = json::object();
        if (spec.shape_seed) s["shape_seed"] = *spec.shape_seed;
        if (spec.texture_seed) s["texture_seed"] = *spec.texture_seed;
        if (!spec.w_shape.empty()) s["w_shape"] = spec.w_shape;
        if (!spec.w_texture.empty()) s["w_texture"] = spec.w_texture;
        lat[std::to_string(r)] = s;
    }
    return {{"camera", req.camera},
            {"latents", lat},
            {"active", req.active_regions},
            {"outputs", {req.want_color, req.want_masks, req.want_depth}}};
}

}  // namespace

void to_json(json& j, const ModelInfo& m) {
    j = {{"k", m.k},
         {"labels", m.labels},
         {"latent_length", m.latent},
         {"default_camera", m.default_camera},
         {"checkpoint_id", m.checkpoint_id}};
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < bytes.size(); i += 3) {
        const std::uint32_t n = (static_cast<std::uint32_t>(bytes[i]) << 16) |
                                (i + 1 < bytes.size() ? static_cast<std::uint32_t>(bytes[i + 1]) << 8 : 0u) |
                                (i + 2 < bytes.size() ? bytes[i + 2] : 0u);
        out += kB64[(n >> 18) & 63];
        out += kB64[(n >> 12) & 63];
        out += i + 1 < bytes.size() ? kB64[(n >> 6) & 63] : '=';
        out += i + 2 < bytes.size() ? kB64[n & 63] : '=';
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) throw std::invalid_argument("base64: length is not a multiple of 4");
    auto value = [](char c) -> int {
        const char* p = std::char_traits<char>::find(kB64, 64, c);
        return p == nullptr ? -1 : static_cast<int>(p - kB64);
    };
    std::vector<std::uint8_t> out;
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=' && i + 4 == text.size() && k >= 2) {
                v[k] = 0;
                ++pad;
            } else if ((v[k] = value(c)) < 0 || pad > 0) {
                throw std::invalid_argument("base64: invalid character");
            }
        }
        const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
        out.push_back(static_cast<std::uint8_t>(n >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>(n >> 8));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(n));
    }
    return out;
}

RenderService::RenderService(std::unique_ptr<CNeRFModel> model, std::string checkpoint_id, Camera default_camera,
                             LatentAssignment default_latents, ServiceConfig cfg)
    : model_(std::move(model)), defaults_(std::move(default_latents)), cfg_(cfg) {
    if (!model_) throw std::invalid_argument("service: no model");
    if (defaults_.size() != model_->regions()) throw std::invalid_argument("service: default latent count mismatch");
    default_camera.validate();
    const auto& g = model_->config();
    info_.k = g.regions;
    for (std::size_t r = 0; r < g.regions; ++r) info_.labels.push_back(g.label(r));
    info_.latent = g.latent;
    info_.default_camera = default_camera;
    info_.checkpoint_id = std::move(checkpoint_id);
}

std::unique_ptr<RenderService> RenderService::from_checkpoint(const std::string& path, ServiceConfig cfg) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path);
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const Checkpoint c = decode_checkpoint(bytes);
    std::uint32_t crc = 0;
    for (int i = 0; i < 4; ++i) crc |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
    return from_checkpoint(c, hex32(crc), cfg);
}

std::unique_ptr<RenderService> RenderService::from_checkpoint(const Checkpoint& c, std::string checkpoint_id,
                                                              ServiceConfig cfg) {
    auto model = load_generator(c);
    Camera cam;
    for (const char* kind : {"fit", "gan"})
        if (c.header.contains(kind) && c.header[kind].contains("resolution"))
            cam.width = cam.height = c.header[kind]["resolution"].get<std::size_t>();

    const std::size_t k = model->regions(), w = model->config().latent;
    std::vector<RegionLatent> regions;
    if (c.find("fit/latent/0/shape") != nullptr) {
        for (std::size_t r = 0; r < k; ++r)
            regions.push_back({ad::Tensor({1, w}, c.get("fit/latent/" + std::to_string(r) + "/shape", w)),
                               ad::Tensor({1, w}, c.get("fit/latent/" + std::to_string(r) + "/texture", w))});
    } else {
        Rng rng(0);
        const ad::Tensor w0 = sample_w(rng, model->mapping());
        regions.assign(k, RegionLatent{w0, w0});
    }
    return std::make_unique<RenderService>(std::move(model), std::move(checkpoint_id), cam,
                                           explicit_latents(std::move(regions)), cfg);
}

std::size_t RenderService::region_index(const json& ref) const {
    if (ref.is_number_integer()) {
        const auto v = ref.get<std::int64_t>();
        if (v < 0 || static_cast<std::size_t>(v) >= info_.k) throw RequestError(404, "unknown region " + ref.dump());
        return static_cast<std::size_t>(v);
    }
    if (!ref.is_string()) bad_request("region must be a label or an integer id");
    const auto name = ref.get<std::string>();
    for (std::size_t r = 0; r < info_.k; ++r)
        if (info_.labels[r] == name) return r;
    if (!name.empty() && std::all_of(name.begin(), name.end(), [](char c) { return c >= '0' && c <= '9'; }) &&
        name.size() < 10)
        return region_index(json(std::stoll(name)));
    throw RequestError(404, "unknown region '" + name + "'");
}

std::vector<double> RenderService::latent_from_seed(std::uint64_t seed) const {
    ad::NoGradScope no_grad;
    Rng rng(seed);
    return sample_w(rng, model_->mapping()).to_vector();
}

RenderRequest RenderService::parse_request(const json& body) const {
    try {
        only_keys(body, {"camera", "resolution", "latents", "active_regions", "outputs"}, "request");
        RenderRequest req;
        req.camera = info_.default_camera;
        if (body.contains("camera")) {
            const auto& c = body["camera"];
            only_keys(c, {"fov", "azimuth", "elevation", "radius", "width", "height"}, "camera");
            req.camera.fov_deg = c.value("fov", req.camera.fov_deg);
            req.camera.azimuth = c.value("azimuth", req.camera.azimuth);
            req.camera.elevation = c.value("elevation", req.camera.elevation);
            req.camera.radius = c.value("radius", req.camera.radius);
            req.camera.width = c.value("width", req.camera.width);
            req.camera.height = c.value("height", req.camera.height);
        }
        if (body.contains("resolution")) {
            const auto& r = body["resolution"];
            if (r.is_number_integer()) {
                req.camera.width = req.camera.height = r.get<std::size_t>();
            } else {
                only_keys(r, {"width", "height"}, "resolution");
                req.camera.width = r.at("width").get<std::size_t>();
                req.camera.height = r.at("height").get<std::size_t>();
            }
        }
        if (req.camera.width > cfg_.max_resolution || req.camera.height > cfg_.max_resolution)
            throw RequestError(413, "resolution " + std::to_string(req.camera.width) + "x" +
                                        std::to_string(req.camera.height) + " exceeds the cap of " +
                                        std::to_string(cfg_.max_resolution));
        try {
            req.camera.validate();
        } catch (const std::invalid_argument& e) {
            bad_request(std::string("camera: ") + e.what());
        }

        if (body.contains("latents")) {
            const auto& lat = body["latents"];
            std::vector<std::pair<json, json>> entries;
            if (lat.is_object()) {
                for (const auto& [key, spec] : lat.items()) entries.emplace_back(json(key), spec);
            } else if (lat.is_array()) {
                for (const auto& spec : lat) {
                    if (!spec.is_object() || !spec.contains("region")) bad_request("latent entries need a region");
                    json rest = spec;
                    rest.erase("region");
                    entries.emplace_back(spec["region"], rest);
                }
            } else {
                bad_request("latents must be an object or an array");
            }
            for (const auto& [ref, spec] : entries) {
                const std::size_t r = region_index(ref);
                only_keys(spec, {"seed", "shape_seed", "texture_seed", "w_shape", "w_texture"}, "latent");
                if (req.latents.count(r) != 0) bad_request("region " + info_.labels[r] + " given twice");
                LatentSpec s;
                if (spec.contains("seed")) s.shape_seed = s.texture_seed = seed_value(spec["seed"], "seed");
                if (spec.contains("shape_seed")) s.shape_seed = seed_value(spec["shape_seed"], "shape_seed");
                if (spec.contains("texture_seed")) s.texture_seed = seed_value(spec["texture_seed"], "texture_seed");
                if (spec.contains("w_shape")) {
                    if (spec.contains("seed") || spec.contains("shape_seed")) bad_request("shape given as seed and vector");
                    s.w_shape = latent_vector(spec["w_shape"], info_.latent, "w_shape");
                }
                if (spec.contains("w_texture")) {
                    if (spec.contains("seed") || spec.contains("texture_seed"))
                        bad_request("texture given as seed and vector");
                    s.w_texture = latent_vector(spec["w_texture"], info_.latent, "w_texture");
                }
                req.latents[r] = std::move(s);
            }
        }
        if (body.contains("active_regions")) {
            const auto& act = body["active_regions"];
            if (!act.is_array()) bad_request("active_regions must be an array");
            for (const auto& ref : act) {
                const std::size_t r = region_index(ref);
                if (std::find(req.active_regions.begin(), req.active_regions.end(), r) == req.active_regions.end())
                    req.active_regions.push_back(r);
            }
            std::sort(req.active_regions.begin(), req.active_regions.end());
            if (req.active_regions.empty()) bad_request("active_regions must not be empty");
        }
        if (body.contains("outputs")) {
            const auto& out = body["outputs"];
            if (!out.is_array() || out.empty()) bad_request("outputs must be a non-empty array");
            req.want_color = req.want_masks = req.want_depth = false;
            for (const auto& o : out) {
                const auto name = o.get<std::string>();
                if (name == "color") req.want_color = true;
                else if (name == "masks") req.want_masks = true;
                else if (name == "depth") req.want_depth = true;
                else bad_request("unknown output '" + name + "'");
            }
        }
        return req;
    } catch (const json::exception& e) {
        bad_request(std::string("malformed request: ") + e.what());
    }
}

LatentAssignment RenderService::latents_for(const RenderRequest& req) const {
    const std::size_t w = info_.latent;
    std::vector<RegionLatent> regions = defaults_.regions;
    for (const auto& [r, spec] : req.latents) {
        if (spec.shape_seed) regions[r].shape = ad::Tensor({1, w}, latent_from_seed(*spec.shape_seed));
        if (!spec.w_shape.empty()) regions[r].shape = ad::Tensor({1, w}, spec.w_shape);
        if (spec.texture_seed) regions[r].texture = ad::Tensor({1, w}, latent_from_seed(*spec.texture_seed));
        if (!spec.w_texture.empty()) regions[r].texture = ad::Tensor({1, w}, spec.w_texture);
    }
    return explicit_latents(std::move(regions));
}

RenderResult RenderService::render(const RenderRequest& req) const {
    ad::NoGradScope no_grad;
    RenderOptions opts;
    opts.active_regions = req.active_regions;
    RenderOutput out;
    try {
        out = cnerf::render(*model_, req.camera, latents_for(req), opts);
    } catch (const ad::NumericError& e) {
        throw RequestError(500, std::string("numeric failure: ") + e.what());
    }
    RenderResult res;
    res.width = req.camera.width;
    res.height = req.camera.height;
    res.color_values = out.color.to_vector();
    res.mask_values = out.masks.to_vector();
    res.depth_values = out.depth.to_vector();
    for (const auto* values : {&res.color_values, &res.mask_values, &res.depth_values})
        if (!std::all_of(values->begin(), values->end(), [](double v) { return std::isfinite(v); }))
            throw RequestError(500, "numeric failure: the render produced non-finite values");

    const std::size_t n = res.width * res.height, k = info_.k;
    if (req.want_color) res.color = quantize_signed(res.color_values, res.width, res.height, 3);
    if (req.want_masks) {
        for (std::size_t r = 0; r < k; ++r) {
            std::vector<double> m(n);
            for (std::size_t p = 0; p < n; ++p) m[p] = std::clamp(res.mask_values[p * k + r], 0.0, 1.0);
            res.masks.push_back(quantize_unit(m, res.width, res.height, 1));
        }
    }
    if (req.want_depth) {
        res.depth_near = opts.sampling.near;
        res.depth_far = opts.sampling.far;
        std::vector<double> d(n);
        for (std::size_t p = 0; p < n; ++p)
            d[p] = std::clamp((res.depth_values[p] - res.depth_near) / (res.depth_far - res.depth_near), 0.0, 1.0);
        res.depth = quantize_unit(d, res.width, res.height, 1);
    }
    const std::string key = info_.checkpoint_id + canonical(req).dump();
    res.render_id = hex32(static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(key.data()), static_cast<uInt>(key.size()))));
    return res;
}

json render_result_json(const RenderResult& r, const std::vector<std::string>& labels) {
    json j = {{"render_id", r.render_id}, {"width", r.width}, {"height", r.height}};
    if (r.color) j["color"] = base64_encode(encode_png(*r.color));
    if (!r.masks.empty()) {
        j["masks"] = json::object();
        for (std::size_t i = 0; i < r.masks.size(); ++i) j["masks"][labels.at(i)] = base64_encode(encode_png(r.masks[i]));
    }
    if (r.depth) {
        j["depth"] = base64_encode(encode_png(*r.depth));
        j["depth_range"] = {r.depth_near, r.depth_far};
    }
    return j;
}

HttpReply RenderService::get_model() const { return json_reply(200, info_); }

HttpReply RenderService::post_render(const std::string& body, bool raw_png) const {
    try {
        json j;
        try {
            j = json::parse(body);
        } catch (const json::parse_error& e) {
            bad_request(std::string("request body is not valid JSON: ") + e.what());
        }
        auto req = parse_request(j);
        if (raw_png) req.want_color = true;
        const auto res = render(req);
        if (raw_png) {
            const auto png = encode_png(*res.color);
            HttpReply r;
            r.content_type = "image/png";
            r.body.assign(png.begin(), png.end());
            r.headers["X-Render-Id"] = res.render_id;
            return r;
        }
        return json_reply(200, render_result_json(res, info_.labels));
    } catch (const RequestError& e) {
        return json_reply(e.status(), error_body(e.what()));
    } catch (const std::exception& e) {
        return json_reply(500, error_body(e.what()));
    }
}

HttpReply RenderService::post_randomize(const std::string& body) const {
    try {
        json j;
        try {
            j = json::parse(body);
        } catch (const json::parse_error& e) {
            bad_request(std::string("request body is not valid JSON: ") + e.what());
        }
        only_keys(j, {"region", "axis", "seed"}, "randomize request");
        if (!j.contains("region") || !j.contains("axis") || !j.contains("seed"))
            bad_request("randomize needs region, axis and seed");
        const std::size_t r = region_index(j["region"]);
        if (!j["axis"].is_string()) bad_request("axis must be \"shape\" or \"texture\"");
        const auto axis = j["axis"].get<std::string>();
        if (axis != "shape" && axis != "texture") bad_request("axis must be \"shape\" or \"texture\"");
        const std::uint64_t seed = seed_value(j["seed"], "seed");
        return json_reply(200, {{"region", info_.labels[r]},
                                {"region_id", r},
                                {"axis", axis},
                                {"seed", seed},
                                {"latent", latent_from_seed(seed)},
                                {"spec", {{axis + "_seed", seed}}}});
    } catch (const RequestError& e) {
        return json_reply(e.status(), error_body(e.what()));
    } catch (const std::exception& e) {
        return json_reply(500, error_body(e.what()));
    }
}

struct HttpService::Impl {
    explicit Impl(const RenderService& s) : service(s) {}
    const RenderService& service;
    httplib::Server server;
};

namespace {

void send(httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    for (const auto& [k, v] : reply.headers) res.set_header(k, v);
    res.set_content(reply.body, reply.content_type);
}

}  // namespace

HttpService::HttpService(const RenderService& service) : impl_(std::make_unique<Impl>(service)) {
    auto& s = impl_->server;
    s.set_payload_max_length(16 << 20);
    s.Get("/model", [this](const httplib::Request&, httplib::Response& res) { send(res, impl_->service.get_model()); });
    s.Post("/render", [this](const httplib::Request& req, httplib::Response& res) {
        const bool raw = req.has_param("format") && req.get_param_value("format") == "png";
        send(res, impl_->service.post_render(req.body, raw));
    });
    s.Post("/latents/randomize", [this](const httplib::Request& req, httplib::Response& res) {
        send(res, impl_->service.post_randomize(req.body));
    });
}

HttpService::~HttpService() = default;

int HttpService::bind(const std::string& host, int port) {
    auto& s = impl_->server;
    const int bound = port == 0 ? s.bind_to_any_port(host) : (s.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

void HttpService::listen() { impl_->server.listen_after_bind(); }

void HttpService::stop() { impl_->server.stop(); }

}  // namespace cnerf
