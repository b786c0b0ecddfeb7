#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "skyforge/vecmath.hpp"

namespace skyforge {

// One scene primitive: anisotropic 3D Gaussian with view-independent color.
struct Gaussian3D {
    Vec3 mu;
    Vec3 scales{1.0, 1.0, 1.0};  // strictly positive, one per local axis
    Quat rot;                    // unit quaternion
    Vec3 rgb{0.5, 0.5, 0.5};
    double opacity = 1.0;        // in [0, 1]

    // Index of the smallest scale; ties break toward the lowest axis index.
    int min_scale_axis() const {
        int k = 0;
        if (scales.y < scales[k]) k = 1;
        if (scales.z < scales[k]) k = 2;
        return k;
    }
    double min_scale() const { return scales[min_scale_axis()]; }
};

// Covariance = R diag(s)^2 R^T; symmetric positive definite for s > 0.
inline Mat3 covariance(const Gaussian3D& g) {
    const Mat3 r = g.rot.to_matrix();
    const Mat3 s2 = Mat3::diag(g.scales.x * g.scales.x, g.scales.y * g.scales.y,
                               g.scales.z * g.scales.z);
    return r * s2 * r.transpose();
}

// Density at x: exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)), evaluated through the
// factored form |S^-1 R^T (x-mu)|^2 so no matrix inverse is formed.
inline double evaluate_density(const Gaussian3D& g, const Vec3& x) {
    const Mat3 rt = g.rot.to_matrix().transpose();
    const Vec3 local = rt * (x - g.mu);
    const double q = (local.x / g.scales.x) * (local.x / g.scales.x) +
                     (local.y / g.scales.y) * (local.y / g.scales.y) +
                     (local.z / g.scales.z) * (local.z / g.scales.z);
    return std::exp(-0.5 * q);
}

// Unit normal of the Gaussian's flattest direction: the rotation-frame axis
// of the smallest scale.
inline Vec3 gaussian_normal(const Gaussian3D& g) {
    return g.rot.to_matrix().column(g.min_scale_axis());
}

struct SceneModel {
    std::vector<Gaussian3D> gaussians;
    Aabb bounds;
    Vec3 background{0.0, 0.0, 0.0};

    std::size_t size() const { return gaussians.size(); }
};

// Counts centers outside the bounds; a diagnostic, not an error.
inline std::size_t count_out_of_bounds(const SceneModel& scene) {
    std::size_t n = 0;
    for (const auto& g : scene.gaussians)
        if (!scene.bounds.contains(g.mu)) ++n;
    return n;
}

namespace detail {

inline void put_f32(std::ofstream& f, double v) {
    const float x = static_cast<float>(v);
    static_assert(sizeof(float) == 4);
    f.write(reinterpret_cast<const char*>(&x), 4);
}

inline double get_f32(std::ifstream& f) {
    float x = 0.f;
    f.read(reinterpret_cast<char*>(&x), 4);
    return static_cast<double>(x);
}

}  // namespace detail

// Binary record file: u32 count header, then 14 little-endian f32 per
// Gaussian (mu:3, scales:3, quat wxyz:4, rgb:3, opacity:1). Bounds and
// background travel in a json sidecar written by save_scene.
inline void write_gaussians(const std::filesystem::path& path,
                            const std::vector<Gaussian3D>& gaussians) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_gaussians: cannot open " + path.string());
    const std::uint32_t count = static_cast<std::uint32_t>(gaussians.size());
    f.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& g : gaussians) {
        detail::put_f32(f, g.mu.x);
        detail::put_f32(f, g.mu.y);
        detail::put_f32(f, g.mu.z);
        detail::put_f32(f, g.scales.x);
        detail::put_f32(f, g.scales.y);
        detail::put_f32(f, g.scales.z);
        detail::put_f32(f, g.rot.w);
        detail::put_f32(f, g.rot.x);
        detail::put_f32(f, g.rot.y);
        detail::put_f32(f, g.rot.z);
        detail::put_f32(f, g.rgb.x);
        detail::put_f32(f, g.rgb.y);
        detail::put_f32(f, g.rgb.z);
        detail::put_f32(f, g.opacity);
    }
}

inline std::vector<Gaussian3D> read_gaussians(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_gaussians: cannot open " + path.string());
    std::uint32_t count = 0;
    f.read(reinterpret_cast<char*>(&count), 4);
    std::vector<Gaussian3D> out(count);
    for (auto& g : out) {
        g.mu.x = detail::get_f32(f);
        g.mu.y = detail::get_f32(f);
        g.mu.z = detail::get_f32(f);
        g.scales.x = detail::get_f32(f);
        g.scales.y = detail::get_f32(f);
        g.scales.z = detail::get_f32(f);
        g.rot.w = detail::get_f32(f);
        g.rot.x = detail::get_f32(f);
        g.rot.y = detail::get_f32(f);
        g.rot.z = detail::get_f32(f);
        g.rgb.x = detail::get_f32(f);
        g.rgb.y = detail::get_f32(f);
        g.rgb.z = detail::get_f32(f);
        g.opacity = detail::get_f32(f);
    }
    if (!f) throw std::runtime_error("read_gaussians: truncated file " + path.string());
    return out;
}

// Scene checkpoint = gaussian record file + json sidecar for bounds and
// background.
inline void save_scene(const std::filesystem::path& path, const SceneModel& scene) {
    write_gaussians(path, scene.gaussians);
    nlohmann::json meta{
        {"bounds",
         {{"lo", {scene.bounds.lo.x, scene.bounds.lo.y, scene.bounds.lo.z}},
          {"hi", {scene.bounds.hi.x, scene.bounds.hi.y, scene.bounds.hi.z}}}},
        {"background", {scene.background.x, scene.background.y, scene.background.z}}};
    std::ofstream m(path.string() + ".json");
    if (!m) throw std::runtime_error("save_scene: cannot write sidecar for " + path.string());
    m << meta.dump(2) << "\n";
}

inline SceneModel load_scene(const std::filesystem::path& path) {
    SceneModel scene;
    scene.gaussians = read_gaussians(path);
    std::ifstream m(path.string() + ".json");
    if (!m) throw std::runtime_error("load_scene: missing sidecar for " + path.string());
    nlohmann::json meta = nlohmann::json::parse(m);
    const auto& lo = meta.at("bounds").at("lo");
    const auto& hi = meta.at("bounds").at("hi");
    scene.bounds = {{lo[0], lo[1], lo[2]}, {hi[0], hi[1], hi[2]}};
    const auto& bg = meta.at("background");
    scene.background = {bg[0], bg[1], bg[2]};
    return scene;
}

}  // namespace skyforge
