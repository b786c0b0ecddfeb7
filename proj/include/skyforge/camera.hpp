#pragma once

#include <cmath>
#include <optional>

#include "skyforge/common.hpp"
#include "skyforge/vecmath.hpp"

namespace skyforge {

// Pinhole intrinsics. fov_deg is the horizontal field of view; pixels are
// square, principal point at the image center, pixel centers at +0.5.
struct Intrinsics {
    double fov_deg = 60.0;
    int width_px = 64;
    int height_px = 64;

    double fx() const { return 0.5 * width_px / std::tan(0.5 * fov_deg * kPi / 180.0); }
    double fy() const { return fx(); }
    double cx() const { return 0.5 * width_px; }
    double cy() const { return 0.5 * height_px; }
};

// World frame: x/y ground plane, z up. Camera frame: x right, y down,
// z forward. yaw 0 looks along +x, positive pitch tilts up, roll about the
// view axis (held at 0 throughout the dataset protocol).
struct CameraPose {
    Vec3 position;
    double yaw = 0.0;
    double pitch = 0.0;
    double roll = 0.0;
    Intrinsics intrinsics;

    // Camera-to-world rotation; columns are the right/down/forward axes.
    Mat3 rotation_cam_to_world() const {
        const Mat3 base = Mat3::from_columns({0, -1, 0}, {0, 0, -1}, {1, 0, 0});
        return Mat3::rot_z(yaw) * Mat3::rot_y(-pitch) * Mat3::rot_x(roll) * base;
    }
    Mat3 rotation_world_to_cam() const { return rotation_cam_to_world().transpose(); }

    Vec3 to_camera(const Vec3& p_world) const {
        return rotation_world_to_cam() * (p_world - position);
    }

    // Projects a world point; returns (u, v) in pixels plus camera-frame depth
    // (z), or nullopt when the point is not in front of the camera.
    std::optional<Vec3> project(const Vec3& p_world, double near_plane = 1e-4) const {
        const Vec3 pc = to_camera(p_world);
        if (pc.z <= near_plane) return std::nullopt;
        const Intrinsics& k = intrinsics;
        return Vec3{k.fx() * pc.x / pc.z + k.cx(), k.fy() * pc.y / pc.z + k.cy(), pc.z};
    }

    // World-space unit direction through the center of pixel (px, py).
    Vec3 ray_direction(int px, int py) const {
        const Intrinsics& k = intrinsics;
        const Vec3 d_cam{(px + 0.5 - k.cx()) / k.fx(), (py + 0.5 - k.cy()) / k.fy(), 1.0};
        return (rotation_cam_to_world() * d_cam).normalized();
    }
};

}  // namespace skyforge
