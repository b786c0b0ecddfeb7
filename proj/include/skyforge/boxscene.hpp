#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "skyforge/common.hpp"
#include "skyforge/vecmath.hpp"

namespace skyforge {

struct Rgb {
    float r = 0.f, g = 0.f, b = 0.f;
};

// Axis-aligned building block sitting on the ground plane. Face order:
// -x, +x, -y, +y, -z (bottom), +z (roof).
struct Box {
    Vec3 center;
    Vec3 size;
    std::array<Rgb, 6> face_rgb;

    Aabb aabb() const { return {center - size * 0.5, center + size * 0.5}; }
};

struct GroundPlane {
    double extent_x = 100.0;
    double extent_y = 100.0;
    bool checker = true;  // solid color_a when false
    Rgb color_a{0.42f, 0.42f, 0.40f};
    Rgb color_b{0.34f, 0.34f, 0.33f};
    double checker_m = 4.0;  // checker cell size
};

// Procedural toy city: colored boxes on a checkered plane, with a clear
// corridor along the x axis at the bounds' center y so a lane always fits.
struct BoxScene {
    std::vector<Box> boxes;
    GroundPlane ground;
    Aabb bounds;
    std::uint64_t seed = 0;

    static constexpr double kCorridorHalfWidth = 3.0;  // >= 6 m total

    double corridor_y() const { return bounds.center().y; }
};

namespace detail {

inline bool footprints_overlap(const Box& a, const Box& b, double margin) {
    return std::abs(a.center.x - b.center.x) * 2.0 < a.size.x + b.size.x + margin &&
           std::abs(a.center.y - b.center.y) * 2.0 < a.size.y + b.size.y + margin;
}

inline Rgb random_color(Rng& rng, float lo, float hi) {
    return {static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi)),
            static_cast<float>(rng.uniform(lo, hi))};
}

}  // namespace detail

// Rejection-samples non-overlapping building footprints outside the corridor.
// Roof colors are drawn from a different palette than facades so aerial and
// ground views see different appearance.
inline BoxScene generate_scene(std::uint64_t seed, int n_buildings, const Aabb& bounds) {
    if (n_buildings < 0) throw std::invalid_argument("generate_scene: n_buildings < 0");
    const Vec3 ext = bounds.size();
    if (ext.x <= 0.0 || ext.y <= 0.0) throw std::invalid_argument("generate_scene: degenerate bounds");

    BoxScene scene;
    scene.seed = seed;
    scene.bounds = bounds;
    scene.ground.extent_x = ext.x;
    scene.ground.extent_y = ext.y;

    Rng rng(derive_seed(seed, "scene"));
    scene.ground.color_a = detail::random_color(rng, 0.30f, 0.50f);
    scene.ground.color_b = {scene.ground.color_a.r * 0.8f, scene.ground.color_a.g * 0.8f,
                            scene.ground.color_a.b * 0.8f};

    const double corridor_y = scene.corridor_y();
    const int max_attempts = 200 * std::max(1, n_buildings);
    int attempts = 0;
    while (static_cast<int>(scene.boxes.size()) < n_buildings) {
        if (++attempts > max_attempts)
            throw std::runtime_error("generate_scene: could not place buildings around the corridor");
        Box b;
        b.size = {rng.uniform(4.0, 10.0), rng.uniform(4.0, 10.0), rng.uniform(5.0, 18.0)};
        const double margin = 1.0;
        const double x_lo = bounds.lo.x + 0.5 * b.size.x + margin;
        const double x_hi = bounds.hi.x - 0.5 * b.size.x - margin;
        const double y_lo = bounds.lo.y + 0.5 * b.size.y + margin;
        const double y_hi = bounds.hi.y - 0.5 * b.size.y - margin;
        if (x_lo >= x_hi || y_lo >= y_hi) continue;
        b.center = {rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi), 0.0};
        b.center.z = 0.5 * b.size.z;  // resting on the ground plane

        // Keep the lane corridor clear.
        if (std::abs(b.center.y - corridor_y) - 0.5 * b.size.y <
            BoxScene::kCorridorHalfWidth + 0.5)
            continue;
        bool collides = false;
        for (const Box& other : scene.boxes)
            if (detail::footprints_overlap(b, other, 1.0)) {
                collides = true;
                break;
            }
        if (collides) continue;

        const Rgb facade = detail::random_color(rng, 0.25f, 0.95f);
        const Rgb roof = {static_cast<float>(rng.uniform(0.45, 0.85)),
                          static_cast<float>(rng.uniform(0.15, 0.40)),
                          static_cast<float>(rng.uniform(0.10, 0.30))};
        // Facades get per-face brightness variation around a shared hue.
        for (int f = 0; f < 4; ++f) {
            const float k = static_cast<float>(rng.uniform(0.75, 1.0));
            b.face_rgb[f] = {facade.r * k, facade.g * k, facade.b * k};
        }
        b.face_rgb[4] = {0.1f, 0.1f, 0.1f};  // bottom, never visible
        b.face_rgb[5] = roof;
        scene.boxes.push_back(b);
    }
    return scene;
}

inline void to_json(nlohmann::json& j, const Rgb& c) { j = {c.r, c.g, c.b}; }
inline void from_json(const nlohmann::json& j, Rgb& c) {
    c.r = j.at(0).get<float>();
    c.g = j.at(1).get<float>();
    c.b = j.at(2).get<float>();
}

inline nlohmann::json scene_to_json(const BoxScene& s) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const Box& b : s.boxes) {
        nlohmann::json faces = nlohmann::json::array();
        for (const Rgb& c : b.face_rgb) faces.push_back(nlohmann::json(c));
        boxes.push_back({{"center", {b.center.x, b.center.y, b.center.z}},
                         {"size", {b.size.x, b.size.y, b.size.z}},
                         {"face_rgb", faces}});
    }
    return {{"seed", s.seed},
            {"bounds",
             {{"lo", {s.bounds.lo.x, s.bounds.lo.y, s.bounds.lo.z}},
              {"hi", {s.bounds.hi.x, s.bounds.hi.y, s.bounds.hi.z}}}},
            {"ground",
             {{"extent", {s.ground.extent_x, s.ground.extent_y}},
              {"checker", s.ground.checker},
              {"color_a", nlohmann::json(s.ground.color_a)},
              {"color_b", nlohmann::json(s.ground.color_b)},
              {"checker_m", s.ground.checker_m}}},
            {"boxes", boxes}};
}

inline BoxScene scene_from_json(const nlohmann::json& j) {
    BoxScene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto& lo = j.at("bounds").at("lo");
    const auto& hi = j.at("bounds").at("hi");
    s.bounds = {{lo[0], lo[1], lo[2]}, {hi[0], hi[1], hi[2]}};
    const auto& g = j.at("ground");
    s.ground.extent_x = g.at("extent")[0];
    s.ground.extent_y = g.at("extent")[1];
    s.ground.checker = g.at("checker").get<bool>();
    s.ground.color_a = g.at("color_a").get<Rgb>();
    s.ground.color_b = g.at("color_b").get<Rgb>();
    s.ground.checker_m = g.at("checker_m");
    for (const auto& jb : j.at("boxes")) {
        Box b;
        b.center = {jb.at("center")[0], jb.at("center")[1], jb.at("center")[2]};
        b.size = {jb.at("size")[0], jb.at("size")[1], jb.at("size")[2]};
        for (int f = 0; f < 6; ++f) b.face_rgb[f] = jb.at("face_rgb")[f].get<Rgb>();
        s.boxes.push_back(b);
    }
    return s;
}

}  // namespace skyforge
