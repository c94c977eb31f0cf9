#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <vector>

#include "json.hpp"
#include "cnerf/util/rng.hpp"

namespace cnerf {

using Vec3 = Eigen::Vector3d;

/// Pinhole camera orbiting the origin. Angles in radians, fov in degrees
/// (vertical). Azimuth rotates about +y; positive elevation lifts toward +y.
struct Camera {
    double fov_deg = 12.0;
    double azimuth = 0.0;
    double elevation = 0.0;
    double radius = 1.0;
    std::size_t width = 32;
    std::size_t height = 32;

    /// Throws std::invalid_argument on out-of-range fields.
    void validate() const;
    Vec3 position() const;

    bool operator==(const Camera&) const = default;
};

void to_json(nlohmann::json& j, const Camera& c);
void from_json(const nlohmann::json& j, Camera& c);

struct Ray {
    Vec3 origin;
    Vec3 direction;
};

/// Gaussian pose prior around the frontal view.
Camera sample_pose(Rng& rng, double sigma_azimuth = 0.3, double sigma_elevation = 0.15, const Camera& base = {});

/// Rays through pixel centres, row-major (y down), camera looking at the origin with world +y up.
std::vector<Ray> generate_rays(const Camera& camera);
Ray pixel_ray(const Camera& camera, double px, double py);

struct SamplingConfig {
    double near = 0.88;
    double far = 1.12;
    std::size_t count = 24;
};

struct RaySamples {
    std::vector<double> t;
    std::vector<Vec3> points;
    double near = 0.0;
    double far = 0.0;

    /// Gap to the next sample; the last interval uses the bin width.
    std::vector<double> deltas() const;
};

/// Stratified depths: one sample per equal-width bin, uniformly jittered when
/// `jitter` is set (requires `rng`) and at bin midpoints otherwise.
RaySamples stratified_samples(const Ray& ray, double near, double far, std::size_t n, Rng* rng, bool jitter);

}  // namespace cnerf
