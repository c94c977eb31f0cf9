#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cnerf/camera.hpp"
#include "cnerf/util/rng.hpp"
#include "json.hpp"

namespace cnerf {

enum class Primitive { Sphere, Ellipsoid, Capsule };

/// One analytic solid. Sphere uses radii.x(); ellipsoids are axis aligned
/// with semi-axes `radii`; a capsule joins `center` and `end` with radius
/// radii.x(). Colors are albedo in [0, 1]. Region 0 is reserved for the
/// background.
struct ScenePart {
    Primitive kind = Primitive::Sphere;
    Vec3 center = Vec3::Zero();
    Vec3 radii = Vec3::Constant(0.1);
    Vec3 end = Vec3::Zero();
    Vec3 albedo = Vec3::Constant(0.5);
    std::size_t region = 1;
};

struct AnalyticScene {
    std::vector<ScenePart> parts;
    Vec3 background = Vec3(0.9, 0.9, 0.95);
    std::size_t regions = 3;

    /// Throws std::invalid_argument when region ids are out of range or the
    /// used ids (with the background) are not contiguous.
    void validate() const;
};

void to_json(nlohmann::json& j, const AnalyticScene& s);
void from_json(const nlohmann::json& j, AnalyticScene& s);

/// Exact signed distance to one part.
double part_sdf(const ScenePart& part, const Vec3& x);

struct SceneDistance {
    double distance = 0.0;
    int part = -1;  // index into parts, -1 for an empty scene
    std::size_t region = 0;
};

/// Minimum over parts; ties go to the lower region id, then the lower part index.
SceneDistance scene_sdf(const AnalyticScene& scene, const Vec3& x);

/// Ground truth for one view. Images are row-major RGB in [-1, 1]; masks are
/// one-hot [H*W, k]; depth is the hit distance or `far` on a miss.
struct OracleSample {
    Camera camera;
    std::vector<double> image;
    std::vector<double> masks;
    std::vector<double> depth;
    std::vector<std::size_t> labels;

    std::size_t pixels() const { return camera.width * camera.height; }
};

struct OracleOptions {
    double near = 0.0;
    double far = 1.12;
    double hit_tolerance = 1e-6;
    std::size_t max_steps = 512;
    double ambient = 0.3;
    double diffuse = 0.7;
    /// Fixed world-space light direction (toward the light).
    Vec3 light = Vec3::UnitZ();
};

OracleSample oracle_render(const AnalyticScene& scene, const Camera& camera, const OracleOptions& opts = {});

/// Three-region portrait analogue: background, a body sphere and two eye
/// ellipsoids sharing one region.
struct SceneTemplate {
    double body_radius = 0.075;
    Vec3 body_color = Vec3(0.85, 0.6, 0.45);
    Vec3 eye_offset = Vec3(0.028, 0.015, 0.062);
    Vec3 eye_radii = Vec3(0.016, 0.02, 0.012);
    Vec3 eye_color = Vec3(0.15, 0.2, 0.6);
    Vec3 background = Vec3(0.9, 0.9, 0.95);
    std::vector<std::string> labels = {"background", "body", "eyes"};

    AnalyticScene scene() const;
};

struct JitterSpec {
    bool enabled = true;
    double color = 0.1;
    /// Relative size perturbation.
    double size = 0.1;
    double sigma_azimuth = 0.3;
    double sigma_elevation = 0.15;
};

struct DatasetSample {
    AnalyticScene scene;
    OracleSample view;
};

/// n samples: per-sample jittered scene (when enabled) seen from a sampled pose.
std::vector<DatasetSample> make_dataset(Rng& rng, std::size_t n, const SceneTemplate& tmpl, const JitterSpec& jitter,
                                        const Camera& base = {}, const OracleOptions& opts = {});

/// Directory layout: manifest.json plus image_NNNNN.png (RGB) and
/// labels_NNNNN.png (8-bit region ids) per sample.
void save_dataset(const std::string& dir, const std::vector<DatasetSample>& samples,
                  const std::vector<std::string>& labels);

struct LoadedDataset {
    std::vector<OracleSample> samples;
    std::vector<std::string> labels;
    std::size_t regions = 0;
};

/// Images come back 8-bit quantized; depth is not persisted and stays empty.
LoadedDataset load_dataset(const std::string& dir);

}  // namespace cnerf
