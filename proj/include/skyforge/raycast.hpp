#pragma once

#include <limits>
#include <utility>

#include "skyforge/boxscene.hpp"
#include "skyforge/camera.hpp"
#include "skyforge/image.hpp"

namespace skyforge {

// Reference renderer constants. Sky pixels get the reserved color below and a
// zero depth sentinel (real hits always have depth > 0).
inline constexpr float kSkyColor[3] = {0.53f, 0.77f, 0.92f};
inline constexpr double kDepthSkySentinel = 0.0;

namespace detail {

inline Vec3 sun_light_dir() {  // unit vector pointing toward the sun
    return Vec3{-0.35, 0.25, 0.9}.normalized();
}

// Slab test; returns (t, face index) of the nearest forward hit.
inline bool ray_box(const Vec3& o, const Vec3& d, const Aabb& b, double& t_hit, int& face) {
    double t0 = 1e-9, t1 = std::numeric_limits<double>::infinity();
    int entry_axis = -1;
    int entry_sign = 0;
    for (int a = 0; a < 3; ++a) {
        const double dir = d[a];
        const double lo = b.lo[a], hi = b.hi[a];
        if (std::abs(dir) < 1e-15) {
            if (o[a] < lo || o[a] > hi) return false;
            continue;
        }
        double ta = (lo - o[a]) / dir;
        double tb = (hi - o[a]) / dir;
        int sign = -1;  // entering through the lo face
        if (ta > tb) {
            std::swap(ta, tb);
            sign = +1;
        }
        if (ta > t0) {
            t0 = ta;
            entry_axis = a;
            entry_sign = sign;
        }
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    if (entry_axis < 0) return false;  // origin inside the box
    t_hit = t0;
    face = entry_axis * 2 + (entry_sign > 0 ? 1 : 0);
    return true;
}

inline Rgb ground_color(const GroundPlane& g, double x, double y) {
    if (!g.checker) return g.color_a;
    const long ix = static_cast<long>(std::floor(x / g.checker_m));
    const long iy = static_cast<long>(std::floor(y / g.checker_m));
    return ((ix + iy) & 1) == 0 ? g.color_a : g.color_b;
}

inline float lambert(const Vec3& normal) {
    const double ambient = 0.35;
    const double diffuse = std::max(0.0, normal.dot(sun_light_dir()));
    return static_cast<float>(ambient + (1.0 - ambient) * diffuse);
}

}  // namespace detail

struct ReferenceRender {
    Image rgb;    // 3 channels in [0,1]
    Image depth;  // 1 channel, distance to hit in meters; 0 for sky
};

// Ground-truth oracle: per-pixel nearest ray/box or ray/ground intersection
// with fixed-sun Lambert shading.
inline ReferenceRender render_reference(const BoxScene& scene, const CameraPose& pose) {
    const int w = pose.intrinsics.width_px;
    const int h = pose.intrinsics.height_px;
    ReferenceRender out{Image(w, h, 3), Image(w, h, 1)};

    // Face normals indexed as in Box::face_rgb.
    const Vec3 normals[6] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const Vec3 dir = pose.ray_direction(x, y);
            double best_t = std::numeric_limits<double>::infinity();
            Rgb color{};
            Vec3 normal{};
            bool hit = false;

            for (const Box& b : scene.boxes) {
                double t;
                int face;
                if (detail::ray_box(pose.position, dir, b.aabb(), t, face) && t < best_t) {
                    best_t = t;
                    color = b.face_rgb[static_cast<std::size_t>(face)];
                    normal = normals[face];
                    hit = true;
                }
            }
            // Ground plane z = 0 clipped to its extent.
            if (dir.z < -1e-12) {
                const double t = -pose.position.z / dir.z;
                if (t > 0.0 && t < best_t) {
                    const Vec3 p = pose.position + dir * t;
                    if (std::abs(p.x - scene.bounds.center().x) <= 0.5 * scene.ground.extent_x &&
                        std::abs(p.y - scene.bounds.center().y) <= 0.5 * scene.ground.extent_y) {
                        best_t = t;
                        color = detail::ground_color(scene.ground, p.x, p.y);
                        normal = {0, 0, 1};
                        hit = true;
                    }
                }
            }

            if (hit) {
                const float l = detail::lambert(normal);
                out.rgb.at(x, y, 0) = color.r * l;
                out.rgb.at(x, y, 1) = color.g * l;
                out.rgb.at(x, y, 2) = color.b * l;
                out.depth.at(x, y, 0) = static_cast<float>(best_t);
            } else {
                out.rgb.at(x, y, 0) = kSkyColor[0];
                out.rgb.at(x, y, 1) = kSkyColor[1];
                out.rgb.at(x, y, 2) = kSkyColor[2];
                out.depth.at(x, y, 0) = static_cast<float>(kDepthSkySentinel);
            }
        }
    }
    return out;
}

}  // namespace skyforge
