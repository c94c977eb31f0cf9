#include "cnerf/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "cnerf/image_io.hpp"

namespace cnerf {

namespace {

// Closest-point distance to an ellipse or ellipsoid by bisection on the
// Lagrange multiplier (Eberly). Semi-axes sorted descending, query point in
// the first octant.
double root2(double r0, double z0, double z1, double g) {
    const double n0 = r0 * z0;
    double s0 = z1 - 1.0;
    double s1 = g < 0 ? 0.0 : std::hypot(n0, z1) - 1.0;
    double s = 0.0;
    for (int i = 0; i < 2000; ++i) {
        s = 0.5 * (s0 + s1);
        if (s == s0 || s == s1) break;
        const double a = n0 / (s + r0), b = z1 / (s + 1.0);
        const double gs = a * a + b * b - 1.0;
        if (gs > 0) s0 = s;
        else if (gs < 0) s1 = s;
        else break;
    }
    return s;
}

double root3(double r0, double r1, double z0, double z1, double z2, double g) {
    const double n0 = r0 * z0, n1 = r1 * z1;
    double s0 = z2 - 1.0;
    double s1 = g < 0 ? 0.0 : std::sqrt(n0 * n0 + n1 * n1 + z2 * z2) - 1.0;
    double s = 0.0;
    for (int i = 0; i < 2000; ++i) {
        s = 0.5 * (s0 + s1);
        if (s == s0 || s == s1) break;
        const double a = n0 / (s + r0), b = n1 / (s + r1), c = z2 / (s + 1.0);
        const double gs = a * a + b * b + c * c - 1.0;
        if (gs > 0) s0 = s;
        else if (gs < 0) s1 = s;
        else break;
    }
    return s;
}

double ellipse_distance(double e0, double e1, double y0, double y1) {
    if (y1 > 0) {
        if (y0 > 0) {
            const double z0 = y0 / e0, z1 = y1 / e1, g = z0 * z0 + z1 * z1 - 1.0;
            if (g == 0) return 0.0;
            const double r0 = (e0 / e1) * (e0 / e1);
            const double s = root2(r0, z0, z1, g);
            const double x0 = r0 * y0 / (s + r0), x1 = y1 / (s + 1.0);
            return std::hypot(x0 - y0, x1 - y1);
        }
        return std::abs(y1 - e1);
    }
    const double numer0 = e0 * y0, denom0 = e0 * e0 - e1 * e1;
    if (numer0 < denom0) {
        const double xde0 = numer0 / denom0;
        const double x0 = e0 * xde0, x1 = e1 * std::sqrt(1.0 - xde0 * xde0);
        return std::hypot(x0 - y0, x1);
    }
    return std::abs(y0 - e0);
}

double ellipsoid_distance(double e0, double e1, double e2, double y0, double y1, double y2) {
    if (y2 > 0) {
        if (y1 > 0) {
            if (y0 > 0) {
                const double z0 = y0 / e0, z1 = y1 / e1, z2 = y2 / e2;
                const double g = z0 * z0 + z1 * z1 + z2 * z2 - 1.0;
                if (g == 0) return 0.0;
                const double r0 = (e0 / e2) * (e0 / e2), r1 = (e1 / e2) * (e1 / e2);
                const double s = root3(r0, r1, z0, z1, z2, g);
                const double x0 = r0 * y0 / (s + r0), x1 = r1 * y1 / (s + r1), x2 = y2 / (s + 1.0);
                return std::sqrt((x0 - y0) * (x0 - y0) + (x1 - y1) * (x1 - y1) + (x2 - y2) * (x2 - y2));
            }
            return ellipse_distance(e1, e2, y1, y2);
        }
        if (y0 > 0) return ellipse_distance(e0, e2, y0, y2);
        return std::abs(y2 - e2);
    }
    const double denom0 = e0 * e0 - e2 * e2, denom1 = e1 * e1 - e2 * e2;
    const double numer0 = e0 * y0, numer1 = e1 * y1;
    if (numer0 < denom0 && numer1 < denom1) {
        const double xde0 = numer0 / denom0, xde1 = numer1 / denom1;
        const double discr = 1.0 - xde0 * xde0 - xde1 * xde1;
        if (discr > 0) {
            const double x0 = e0 * xde0, x1 = e1 * xde1, x2 = e2 * std::sqrt(discr);
            return std::sqrt((x0 - y0) * (x0 - y0) + (x1 - y1) * (x1 - y1) + x2 * x2);
        }
    }
    return ellipse_distance(e0, e1, y0, y1);
}

double ellipsoid_sdf(const Vec3& radii, const Vec3& p) {
    std::array<int, 3> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) { return radii[a] > radii[b]; });
    const Vec3 q = p.cwiseAbs();
    const double e0 = radii[order[0]], e1 = radii[order[1]], e2 = radii[order[2]];
    const double y0 = q[order[0]], y1 = q[order[1]], y2 = q[order[2]];
    const double dist = ellipsoid_distance(e0, e1, e2, y0, y1, y2);
    const double g = (y0 / e0) * (y0 / e0) + (y1 / e1) * (y1 / e1) + (y2 / e2) * (y2 / e2) - 1.0;
    return g < 0 ? -dist : dist;
}

const char* kind_name(Primitive k) {
    switch (k) {
        case Primitive::Sphere: return "sphere";
        case Primitive::Ellipsoid: return "ellipsoid";
        case Primitive::Capsule: return "capsule";
    }
    return "sphere";
}

Primitive kind_from(const std::string& s) {
    if (s == "sphere") return Primitive::Sphere;
    if (s == "ellipsoid") return Primitive::Ellipsoid;
    if (s == "capsule") return Primitive::Capsule;
    throw std::invalid_argument("scene: unknown primitive '" + s + "'");
}

nlohmann::json vec(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 vec(const nlohmann::json& j) { return Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()); }

Vec3 scene_normal(const AnalyticScene& scene, const Vec3& p) {
    const double h = 1e-6;
    Vec3 n;
    for (int a = 0; a < 3; ++a) {
        Vec3 e = Vec3::Zero();
        e[a] = h;
        n[a] = scene_sdf(scene, p + e).distance - scene_sdf(scene, p - e).distance;
    }
    return n.normalized();
}

// Sphere tracing stops up to tolerance / cos(incidence) short of the surface.
// A few Newton steps on d(t) along the ray remove that bias.
double refine_hit(const AnalyticScene& scene, const Ray& ray, double t, double d) {
    const double h = 1e-7;
    for (int it = 0; it < 4 && std::abs(d) > 1e-14; ++it) {
        const double slope = (scene_sdf(scene, ray.origin + (t + h) * ray.direction).distance -
                              scene_sdf(scene, ray.origin + (t - h) * ray.direction).distance) /
                             (2 * h);
        if (slope > -1e-3) break;  // grazing; keep the traced hit
        const double next = t - d / slope;
        const double dn = scene_sdf(scene, ray.origin + next * ray.direction).distance;
        if (std::abs(dn) >= std::abs(d)) break;
        t = next;
        d = dn;
    }
    return t;
}

}  // namespace

void AnalyticScene::validate() const {
    if (regions < 1) throw std::invalid_argument("scene: need at least the background region");
    std::vector<bool> used(regions, false);
    for (const auto& p : parts) {
        if (p.region == 0 || p.region >= regions)
            throw std::invalid_argument("scene: part region " + std::to_string(p.region) + " outside 1.." +
                                        std::to_string(regions - 1));
        if ((p.radii.array() <= 0).any()) throw std::invalid_argument("scene: non-positive radius");
        used[p.region] = true;
    }
    bool gap = false;
    for (std::size_t r = 1; r < regions; ++r) {
        if (!used[r]) gap = true;
        else if (gap) throw std::invalid_argument("scene: region ids are not contiguous");
    }
}

void to_json(nlohmann::json& j, const AnalyticScene& s) {
    j = nlohmann::json{{"regions", s.regions}, {"background", vec(s.background)}, {"parts", nlohmann::json::array()}};
    for (const auto& p : s.parts)
        j["parts"].push_back({{"kind", kind_name(p.kind)},
                              {"center", vec(p.center)},
                              {"radii", vec(p.radii)},
                              {"end", vec(p.end)},
                              {"albedo", vec(p.albedo)},
                              {"region", p.region}});
}

void from_json(const nlohmann::json& j, AnalyticScene& s) {
    s = AnalyticScene{};
    s.regions = j.at("regions").get<std::size_t>();
    if (j.contains("background")) s.background = vec(j.at("background"));
    for (const auto& pj : j.at("parts")) {
        ScenePart p;
        p.kind = kind_from(pj.at("kind").get<std::string>());
        p.center = vec(pj.at("center"));
        p.radii = vec(pj.at("radii"));
        if (pj.contains("end")) p.end = vec(pj.at("end"));
        if (pj.contains("albedo")) p.albedo = vec(pj.at("albedo"));
        p.region = pj.at("region").get<std::size_t>();
        s.parts.push_back(p);
    }
}

double part_sdf(const ScenePart& part, const Vec3& x) {
    switch (part.kind) {
        case Primitive::Sphere:
            return (x - part.center).norm() - part.radii.x();
        case Primitive::Ellipsoid:
            return ellipsoid_sdf(part.radii, x - part.center);
        case Primitive::Capsule: {
            const Vec3 ab = part.end - part.center;
            const double len2 = ab.squaredNorm();
            const double h = len2 > 0 ? std::clamp((x - part.center).dot(ab) / len2, 0.0, 1.0) : 0.0;
            return (x - part.center - h * ab).norm() - part.radii.x();
        }
    }
    return 0.0;
}

SceneDistance scene_sdf(const AnalyticScene& scene, const Vec3& x) {
    SceneDistance best{std::numeric_limits<double>::infinity(), -1, 0};
    for (std::size_t i = 0; i < scene.parts.size(); ++i) {
        const double d = part_sdf(scene.parts[i], x);
        const std::size_t r = scene.parts[i].region;
        if (d < best.distance || (d == best.distance && r < best.region)) best = {d, static_cast<int>(i), r};
    }
    return best;
}

OracleSample oracle_render(const AnalyticScene& scene, const Camera& camera, const OracleOptions& opts) {
    scene.validate();
    const auto rays = generate_rays(camera);
    const std::size_t k = scene.regions;
    OracleSample out;
    out.camera = camera;
    out.image.resize(rays.size() * 3);
    out.masks.assign(rays.size() * k, 0.0);
    out.depth.assign(rays.size(), opts.far);
    out.labels.assign(rays.size(), 0);
    const Vec3 light = opts.light.normalized();

    for (std::size_t i = 0; i < rays.size(); ++i) {
        const Ray& ray = rays[i];
        Vec3 color = scene.background;
        std::size_t label = 0;
        double t = opts.near;
        for (std::size_t step = 0; step < opts.max_steps && t <= opts.far && !scene.parts.empty(); ++step) {
            const Vec3 p = ray.origin + t * ray.direction;
            const SceneDistance sd = scene_sdf(scene, p);
            if (std::abs(sd.distance) < opts.hit_tolerance) {
                t = refine_hit(scene, ray, t, sd.distance);
                const ScenePart& part = scene.parts[static_cast<std::size_t>(sd.part)];
                const double shade = opts.ambient + opts.diffuse * std::max(0.0, scene_normal(scene, p).dot(light));
                color = (part.albedo * shade).cwiseMin(1.0);
                label = sd.region;
                out.depth[i] = t;
                break;
            }
            t += sd.distance;
        }
        for (int c = 0; c < 3; ++c) out.image[i * 3 + c] = 2.0 * color[c] - 1.0;
        out.masks[i * k + label] = 1.0;
        out.labels[i] = label;
    }
    return out;
}

AnalyticScene SceneTemplate::scene() const {
    AnalyticScene s;
    s.regions = 3;
    s.background = background;
    s.parts.push_back({Primitive::Sphere, Vec3::Zero(), Vec3::Constant(body_radius), Vec3::Zero(), body_color, 1});
    for (double side : {-1.0, 1.0}) {
        const Vec3 c(side * eye_offset.x(), eye_offset.y(), eye_offset.z());
        s.parts.push_back({Primitive::Ellipsoid, c, eye_radii, Vec3::Zero(), eye_color, 2});
    }
    return s;
}

std::vector<DatasetSample> make_dataset(Rng& rng, std::size_t n, const SceneTemplate& tmpl, const JitterSpec& jitter,
                                        const Camera& base, const OracleOptions& opts) {
    if (n == 0) throw std::invalid_argument("make_dataset: n must be at least 1");
    std::vector<DatasetSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        SceneTemplate t = tmpl;
        if (jitter.enabled) {
            auto jitter_color = [&](Vec3& c) {
                for (int a = 0; a < 3; ++a) c[a] = std::clamp(c[a] + rng.uniform(-jitter.color, jitter.color), 0.0, 1.0);
            };
            jitter_color(t.body_color);
            jitter_color(t.eye_color);
            jitter_color(t.background);
            t.body_radius *= 1.0 + rng.uniform(-jitter.size, jitter.size);
            t.eye_radii *= 1.0 + rng.uniform(-jitter.size, jitter.size);
        }
        const Camera cam = sample_pose(rng, jitter.sigma_azimuth, jitter.sigma_elevation, base);
        DatasetSample s{t.scene(), {}};
        s.view = oracle_render(s.scene, cam, opts);
        out.push_back(std::move(s));
    }
    return out;
}

void save_dataset(const std::string& dir, const std::vector<DatasetSample>& samples,
                  const std::vector<std::string>& labels) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "cnerf-dataset";
    manifest["version"] = 1;
    manifest["labels"] = labels;
    manifest["regions"] = samples.empty() ? labels.size() : samples[0].scene.regions;
    manifest["samples"] = nlohmann::json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& v = samples[i].view;
        char name[64];
        std::snprintf(name, sizeof name, "%05zu", i);
        const std::string image = std::string("image_") + name + ".png";
        const std::string label = std::string("labels_") + name + ".png";
        write_png((fs::path(dir) / image).string(), quantize_signed(v.image, v.camera.width, v.camera.height, 3));
        Image8 lab{v.camera.width, v.camera.height, 1, {}};
        for (std::size_t l : v.labels) lab.pixels.push_back(static_cast<std::uint8_t>(l));
        write_png((fs::path(dir) / label).string(), lab);
        manifest["samples"].push_back(
            {{"image", image}, {"labels", label}, {"camera", v.camera}, {"scene", samples[i].scene}});
    }
    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw std::runtime_error("cannot write manifest in " + dir);
    f << manifest.dump(2) << '\n';
}

LoadedDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw std::runtime_error("no manifest.json in " + dir);
    const auto manifest = nlohmann::json::parse(f);
    if (manifest.value("format", "") != "cnerf-dataset") throw std::runtime_error("not a dataset manifest: " + dir);
    LoadedDataset out;
    out.labels = manifest.value("labels", std::vector<std::string>{});
    out.regions = manifest.at("regions").get<std::size_t>();
    for (const auto& s : manifest.at("samples")) {
        OracleSample v;
        v.camera = s.at("camera").get<Camera>();
        const Image8 img = read_png((fs::path(dir) / s.at("image").get<std::string>()).string());
        const Image8 lab = read_png((fs::path(dir) / s.at("labels").get<std::string>()).string());
        if (img.width != v.camera.width || img.height != v.camera.height || img.channels != 3 ||
            lab.width != img.width || lab.height != img.height || lab.channels != 1)
            throw std::runtime_error("dataset image size does not match its camera in " + dir);
        v.image = dequantize_signed(img);
        v.masks.assign(v.pixels() * out.regions, 0.0);
        for (std::size_t p = 0; p < v.pixels(); ++p) {
            const std::size_t l = lab.pixels[p];
            if (l >= out.regions) throw std::runtime_error("dataset label out of range in " + dir);
            v.labels.push_back(l);
            v.masks[p * out.regions + l] = 1.0;
        }
        out.samples.push_back(std::move(v));
    }
    return out;
}

}  // namespace cnerf
