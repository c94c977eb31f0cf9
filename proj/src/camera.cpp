#include "cnerf/camera.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cnerf {

void Camera::validate() const {
    if (!(fov_deg > 0.0 && fov_deg < 180.0)) throw std::invalid_argument("camera: fov must lie in (0, 180) degrees");
    if (!(radius > 0.0)) throw std::invalid_argument("camera: radius must be positive (camera at origin)");
    if (width == 0 || height == 0) throw std::invalid_argument("camera: image size must be positive");
    if (!std::isfinite(azimuth) || !std::isfinite(elevation)) throw std::invalid_argument("camera: non-finite angle");
    if (std::abs(std::cos(elevation)) < 1e-9) throw std::invalid_argument("camera: look direction parallel to up vector");
}

Vec3 Camera::position() const {
    return radius * Vec3(std::cos(elevation) * std::sin(azimuth), std::sin(elevation), std::cos(elevation) * std::cos(azimuth));
}

void to_json(nlohmann::json& j, const Camera& c) {
    j = nlohmann::json{{"fov", c.fov_deg},     {"azimuth", c.azimuth}, {"elevation", c.elevation},
                       {"radius", c.radius},   {"width", c.width},     {"height", c.height}};
}

void from_json(const nlohmann::json& j, Camera& c) {
    Camera d;
    c.fov_deg = j.value("fov", d.fov_deg);
    c.azimuth = j.value("azimuth", d.azimuth);
    c.elevation = j.value("elevation", d.elevation);
    c.radius = j.value("radius", d.radius);
    c.width = j.value("width", d.width);
    c.height = j.value("height", d.height);
}

Camera sample_pose(Rng& rng, double sigma_azimuth, double sigma_elevation, const Camera& base) {
    if (sigma_azimuth < 0 || sigma_elevation < 0) throw std::invalid_argument("sample_pose: negative standard deviation");
    Camera c = base;
    c.azimuth = rng.normal(0.0, sigma_azimuth);
    c.elevation = rng.normal(0.0, sigma_elevation);
    return c;
}

Ray pixel_ray(const Camera& camera, double px, double py) {
    const Vec3 origin = camera.position();
    const Vec3 forward = (-origin).normalized();
    const Vec3 right = forward.cross(Vec3::UnitY()).normalized();
    const Vec3 up = right.cross(forward);
    const double half = std::tan(0.5 * camera.fov_deg * std::numbers::pi / 180.0);
    const double aspect = static_cast<double>(camera.width) / static_cast<double>(camera.height);
    const double sx = (2.0 * px / static_cast<double>(camera.width) - 1.0) * half * aspect;
    const double sy = (1.0 - 2.0 * py / static_cast<double>(camera.height)) * half;
    return {origin, (forward + sx * right + sy * up).normalized()};
}

std::vector<Ray> generate_rays(const Camera& camera) {
    camera.validate();
    std::vector<Ray> rays;
    rays.reserve(camera.width * camera.height);
    for (std::size_t y = 0; y < camera.height; ++y)
        for (std::size_t x = 0; x < camera.width; ++x)
            rays.push_back(pixel_ray(camera, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5));
    return rays;
}

std::vector<double> RaySamples::deltas() const {
    std::vector<double> d(t.size());
    if (t.empty()) return d;
    for (std::size_t j = 0; j + 1 < t.size(); ++j) d[j] = t[j + 1] - t[j];
    d.back() = (far - near) / static_cast<double>(t.size());
    return d;
}

RaySamples stratified_samples(const Ray& ray, double near, double far, std::size_t n, Rng* rng, bool jitter) {
    if (!(near < far)) throw std::invalid_argument("stratified_samples: near must be below far");
    if (n < 2) throw std::invalid_argument("stratified_samples: need at least two samples");
    if (jitter && rng == nullptr) throw std::invalid_argument("stratified_samples: jitter requires a random source");
    RaySamples s;
    s.near = near;
    s.far = far;
    s.t.resize(n);
    s.points.resize(n);
    const double width = (far - near) / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double u = jitter ? rng->uniform() : 0.5;
        s.t[j] = near + (static_cast<double>(j) + u) * width;
        s.points[j] = ray.origin + s.t[j] * ray.direction;
    }
    return s;
}

}  // namespace cnerf
