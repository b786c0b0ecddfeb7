#pragma once

#include <utility>
#include <vector>

#include "skyforge/camera.hpp"
#include "skyforge/vecmath.hpp"

namespace skyforge {

// Camera protocol along a lane: one aerial/ground pair every spacing_m meters
// of arc length, ground yaw snapped to the nearest yaw_quantum multiple,
// fixed altitudes and pitches per view kind, roll always 0.
struct TrajectorySpec {
    double spacing_m = 2.0;
    double aerial_altitude_m = 52.0;
    double ground_altitude_m = 2.0;
    double aerial_pitch_rad = -45.0 * kPi / 180.0;
    double ground_pitch_rad = 0.0;
    double yaw_quantum_rad = kPi / 4.0;
    Intrinsics intrinsics;
};

struct LanePoses {
    std::vector<CameraPose> aerial;
    std::vector<CameraPose> ground;
};

inline double snap_yaw(double yaw, double quantum) {
    return std::round(yaw / quantum) * quantum;
}

// Samples index-paired aerial/ground poses along a polyline lane. Both views
// of a pair share the exact sample (x, y).
inline LanePoses sample_lane_poses(const std::vector<Vec2>& lane, const TrajectorySpec& spec) {
    LanePoses out;
    if (lane.size() < 2 || spec.spacing_m <= 0.0) return out;

    double total = 0.0;
    for (std::size_t i = 0; i + 1 < lane.size(); ++i) total += (lane[i + 1] - lane[i]).norm();
    if (total < spec.spacing_m) return out;

    const int n = static_cast<int>(std::floor(total / spec.spacing_m)) + 1;
    std::size_t seg = 0;
    double seg_start = 0.0;
    for (int i = 0; i < n; ++i) {
        const double s = i * spec.spacing_m;
        while (seg + 2 < lane.size() && seg_start + (lane[seg + 1] - lane[seg]).norm() < s - 1e-12) {
            seg_start += (lane[seg + 1] - lane[seg]).norm();
            ++seg;
        }
        const Vec2 a = lane[seg], b = lane[seg + 1];
        const double seg_len = (b - a).norm();
        const double u = seg_len > 0.0 ? std::clamp((s - seg_start) / seg_len, 0.0, 1.0) : 0.0;
        const Vec2 p = a + (b - a) * u;
        const double heading = std::atan2(b.y - a.y, b.x - a.x);
        const double yaw = snap_yaw(heading, spec.yaw_quantum_rad);

        CameraPose ground;
        ground.position = {p.x, p.y, spec.ground_altitude_m};
        ground.yaw = yaw;
        ground.pitch = spec.ground_pitch_rad;
        ground.intrinsics = spec.intrinsics;

        CameraPose aerial = ground;
        aerial.position.z = spec.aerial_altitude_m;
        aerial.pitch = spec.aerial_pitch_rad;

        out.aerial.push_back(aerial);
        out.ground.push_back(ground);
    }
    return out;
}

}  // namespace skyforge
