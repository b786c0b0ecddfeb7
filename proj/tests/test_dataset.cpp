#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "skyforge/boxscene.hpp"
#include "skyforge/camera.hpp"
#include "skyforge/image.hpp"
#include "skyforge/manifest.hpp"
#include "skyforge/raycast.hpp"
#include "skyforge/trajectory.hpp"

using namespace skyforge;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("skyforge_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Aabb default_bounds() { return {{-50, -50, 0}, {50, 50, 30}}; }

}  // namespace

TEST_CASE("camera rotation is orthonormal") {
    Rng rng(42);
    for (int i = 0; i < 50; ++i) {
        CameraPose pose;
        pose.yaw = rng.uniform(-kPi, kPi);
        pose.pitch = rng.uniform(-kPi / 2 + 0.01, kPi / 2 - 0.01);
        pose.roll = rng.uniform(-kPi, kPi);
        const Mat3 r = pose.rotation_cam_to_world();
        const Mat3 rtr = r.transpose() * r;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                REQUIRE(rtr(a, b) == Catch::Approx(a == b ? 1.0 : 0.0).margin(1e-9));
    }
}

TEST_CASE("png round trip") {
    Image img(17, 9, 3);
    Rng rng(1);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    const fs::path dir = temp_dir("png");
    write_png(dir / "t.png", img);
    const Image back = read_png(dir / "t.png");
    REQUIRE(back.width == 17);
    REQUIRE(back.height == 9);
    for (std::size_t i = 0; i < img.data.size(); ++i)
        REQUIRE(std::abs(back.data[i] - img.data[i]) <= 0.5f / 255.f + 1e-6f);
}

TEST_CASE("f32 raster round trip") {
    Image img(5, 4, 1);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) * 0.5f;
    const fs::path dir = temp_dir("raster");
    write_f32_raster(dir / "d.f32", img);
    const Image back = read_f32_raster(dir / "d.f32");
    REQUIRE(back.width == 5);
    REQUIRE(back.data == img.data);
}

TEST_CASE("generate_scene: empty case keeps ground only") {
    const BoxScene s = generate_scene(7, 0, default_bounds());
    REQUIRE(s.boxes.empty());
    REQUIRE(s.ground.extent_x == Catch::Approx(100.0));
}

TEST_CASE("generate_scene: deterministic per seed, different across seeds") {
    const BoxScene a = generate_scene(7, 12, default_bounds());
    const BoxScene b = generate_scene(7, 12, default_bounds());
    const BoxScene c = generate_scene(8, 12, default_bounds());
    REQUIRE(scene_to_json(a).dump() == scene_to_json(b).dump());
    REQUIRE(scene_to_json(a).dump() != scene_to_json(c).dump());
    REQUIRE(a.boxes.size() == 12);
    bool any_center_differs = false;
    for (std::size_t i = 0; i < a.boxes.size(); ++i)
        if (std::abs(a.boxes[i].center.x - c.boxes[i].center.x) > 1e-12)
            any_center_differs = true;
    REQUIRE(any_center_differs);
}

TEST_CASE("generate_scene: boxes stay inside bounds and clear of the corridor") {
    const BoxScene s = generate_scene(3, 20, default_bounds());
    for (const Box& b : s.boxes) {
        const Aabb bb = b.aabb();
        REQUIRE(bb.lo.x >= s.bounds.lo.x);
        REQUIRE(bb.hi.x <= s.bounds.hi.x);
        REQUIRE(bb.lo.y >= s.bounds.lo.y);
        REQUIRE(bb.hi.y <= s.bounds.hi.y);
        const double clearance = std::abs(b.center.y - s.corridor_y()) - 0.5 * b.size.y;
        REQUIRE(clearance >= BoxScene::kCorridorHalfWidth);
    }
}

TEST_CASE("sample_lane_poses: paper protocol on a 10 m straight lane") {
    TrajectorySpec spec;
    const LanePoses poses = sample_lane_poses({{0, 0}, {10, 0}}, spec);
    REQUIRE(poses.aerial.size() == 6);
    REQUIRE(poses.ground.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        REQUIRE(poses.aerial[i].position.z == Catch::Approx(52.0));
        REQUIRE(poses.ground[i].position.z == Catch::Approx(2.0));
        REQUIRE(poses.aerial[i].pitch == Catch::Approx(-45.0 * kPi / 180.0));
        REQUIRE(poses.ground[i].pitch == 0.0);
        // Geo-alignment must be exact.
        REQUIRE(poses.aerial[i].position.x == poses.ground[i].position.x);
        REQUIRE(poses.aerial[i].position.y == poses.ground[i].position.y);
    }
}

TEST_CASE("sample_lane_poses: yaw snapping and spacing invariants") {
    TrajectorySpec spec;
    // Slightly off-axis travel still snaps onto the axis yaw.
    const LanePoses poses = sample_lane_poses({{0, 0}, {20, 0.6}}, spec);
    REQUIRE(poses.ground.size() >= 2);
    for (const auto& p : poses.ground) {
        REQUIRE(p.yaw == Catch::Approx(0.0).margin(1e-12));
        const double rem = std::remainder(p.yaw, kPi / 4.0);
        REQUIRE(std::abs(rem) < 1e-12);
    }
    for (std::size_t i = 0; i + 1 < poses.ground.size(); ++i) {
        const Vec3 d = poses.ground[i + 1].position - poses.ground[i].position;
        REQUIRE(std::sqrt(d.x * d.x + d.y * d.y) == Catch::Approx(2.0).margin(1e-9));
    }
}

TEST_CASE("sample_lane_poses: right-angle corner changes yaw by two quanta") {
    TrajectorySpec spec;
    const LanePoses poses = sample_lane_poses({{0, 0}, {10, 0}, {10, 10}}, spec);
    REQUIRE(poses.ground.size() == 11);
    // Hand-recomputed snapped headings: leg one heading 0, leg two heading pi/2.
    double first = poses.ground.front().yaw;
    double last = poses.ground.back().yaw;
    REQUIRE(first == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(last == Catch::Approx(kPi / 2).margin(1e-12));
    REQUIRE(std::abs(last - first) == Catch::Approx(2.0 * spec.yaw_quantum_rad).margin(1e-12));
}

TEST_CASE("render_reference: straight-down view of a solid ground plane") {
    BoxScene scene;
    scene.bounds = default_bounds();
    scene.ground.checker = false;
    scene.ground.color_a = {0.5f, 0.4f, 0.3f};
    scene.ground.extent_x = scene.ground.extent_y = 100.0;

    CameraPose cam;
    cam.position = {0, 0, 52};
    cam.pitch = -kPi / 2;  // straight down
    cam.intrinsics = {60.0, 32, 32};

    const ReferenceRender out = render_reference(scene, cam);
    const float shade = detail::lambert({0, 0, 1});
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            REQUIRE(out.rgb.at(x, y, 0) == Catch::Approx(0.5f * shade).margin(1e-6));
            // Analytic ray-plane depth: altitude / cos(angle to nadir).
            const Vec3 dir = cam.ray_direction(x, y);
            const double cos_angle = -dir.z;
            REQUIRE(out.depth.at(x, y, 0) ==
                    Catch::Approx(52.0 / cos_angle).margin(1e-4));
        }
}

TEST_CASE("render_reference: rays that miss everything get sky color and sentinel") {
    BoxScene scene;
    scene.bounds = default_bounds();
    CameraPose cam;
    cam.position = {0, 0, 2};
    cam.pitch = kPi / 4;  // looking up
    cam.intrinsics = {60.0, 16, 16};
    const ReferenceRender out = render_reference(scene, cam);
    REQUIRE(out.rgb.at(8, 0, 0) == Catch::Approx(kSkyColor[0]));
    REQUIRE(out.depth.at(8, 0, 0) == 0.0f);
}

TEST_CASE("render_reference: box silhouette matches projected corners within a pixel") {
    BoxScene scene;
    scene.bounds = default_bounds();
    scene.ground.extent_x = scene.ground.extent_y = 0.0;  // box only
    Box b;
    b.center = {10, 0, 3};
    b.size = {1, 1, 1};
    for (auto& f : b.face_rgb) f = {0.8f, 0.2f, 0.2f};
    scene.boxes.push_back(b);

    CameraPose cam;
    cam.position = {0, 0, 3};
    cam.intrinsics = {40.0, 128, 128};

    const ReferenceRender out = render_reference(scene, cam);
    double px_lo = 1e9, px_hi = -1e9, py_lo = 1e9, py_hi = -1e9;
    for (int y = 0; y < 128; ++y)
        for (int x = 0; x < 128; ++x)
            if (out.depth.at(x, y, 0) > 0.f) {
                px_lo = std::min(px_lo, x + 0.5);
                px_hi = std::max(px_hi, x + 0.5);
                py_lo = std::min(py_lo, y + 0.5);
                py_hi = std::max(py_hi, y + 0.5);
            }

    double cx_lo = 1e9, cx_hi = -1e9, cy_lo = 1e9, cy_hi = -1e9;
    for (int sx : {-1, 1})
        for (int sy : {-1, 1})
            for (int sz : {-1, 1}) {
                const Vec3 corner = b.center + Vec3{0.5 * sx, 0.5 * sy, 0.5 * sz};
                const auto proj = cam.project(corner);
                REQUIRE(proj.has_value());
                cx_lo = std::min(cx_lo, proj->x);
                cx_hi = std::max(cx_hi, proj->x);
                cy_lo = std::min(cy_lo, proj->y);
                cy_hi = std::max(cy_hi, proj->y);
            }
    REQUIRE(std::abs(px_lo - cx_lo) <= 1.0);
    REQUIRE(std::abs(px_hi - cx_hi) <= 1.0);
    REQUIRE(std::abs(py_lo - cy_lo) <= 1.0);
    REQUIRE(std::abs(py_hi - cy_hi) <= 1.0);
}

TEST_CASE("render_reference: depth re-projects onto the same pixel") {
    const BoxScene scene = generate_scene(11, 8, default_bounds());
    CameraPose cam;
    cam.position = {0, scene.corridor_y(), 52};
    cam.pitch = -45.0 * kPi / 180.0;
    cam.intrinsics = {60.0, 48, 48};
    const ReferenceRender out = render_reference(scene, cam);
    int checked = 0;
    for (int y = 0; y < 48; y += 5)
        for (int x = 0; x < 48; x += 5) {
            const float d = out.depth.at(x, y, 0);
            if (d <= 0.f) continue;
            const Vec3 hit = cam.position + cam.ray_direction(x, y) * static_cast<double>(d);
            const auto proj = cam.project(hit);
            REQUIRE(proj.has_value());
            REQUIRE(std::abs(proj->x - (x + 0.5)) <= 0.5);
            REQUIRE(std::abs(proj->y - (y + 0.5)) <= 0.5);
            ++checked;
        }
    REQUIRE(checked > 10);
}

TEST_CASE("export_dataset: split, counts, determinism, overwrite guard") {
    TrajectorySpec spec;
    spec.intrinsics = {60.0, 16, 16};
    std::vector<SceneInput> scenes;
    for (int i = 0; i < 5; ++i) {
        SceneInput si;
        si.scene = generate_scene(100 + static_cast<std::uint64_t>(i), 3, default_bounds());
        si.lanes = {{{-5, si.scene.corridor_y()}, {5, si.scene.corridor_y()}}};  // 10 m lane
        scenes.push_back(si);
    }

    const fs::path dir_a = temp_dir("ds_a");
    const DatasetManifest m = export_dataset(scenes, spec, dir_a, 9, true);
    REQUIRE(m.scenes.size() == 5);
    REQUIRE(m.split_scenes("train").size() == 4);
    REQUIRE(m.split_scenes("test").size() == 1);
    REQUIRE(m.scenes.back().split == "test");
    validate_manifest_files(m);

    // A 10 m lane at 2 m spacing yields 6 pairs and 6 files per stream.
    const auto& lane = m.scenes[0].lanes[0];
    REQUIRE(lane.frames.size() == 6);
    int aerial_files = 0, ground_files = 0, depth_files = 0;
    for (const auto& e : fs::directory_iterator(dir_a / "scene000/lane000/aerial")) {
        (void)e;
        ++aerial_files;
    }
    for (const auto& e : fs::directory_iterator(dir_a / "scene000/lane000/ground")) {
        (void)e;
        ++ground_files;
    }
    for (const auto& e : fs::directory_iterator(dir_a / "scene000/lane000/depth")) {
        (void)e;
        ++depth_files;
    }
    REQUIRE(aerial_files == 6);
    REQUIRE(ground_files == 6);
    REQUIRE(depth_files == 12);  // raster + sidecar header per frame

    // Byte-identical manifest on re-export with the same seed.
    const fs::path dir_b = temp_dir("ds_b");
    export_dataset(scenes, spec, dir_b, 9, true);
    std::ifstream fa(dir_a / "manifest.json"), fb(dir_b / "manifest.json");
    const std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    REQUIRE(sa == sb);

    REQUIRE_THROWS(export_dataset(scenes, spec, dir_a, 9, false));
    REQUIRE_THROWS(export_dataset({scenes[0]}, spec, temp_dir("ds_c"), 9, true));

    // Round trip through disk.
    const DatasetManifest loaded = load_manifest(dir_a);
    REQUIRE(manifest_to_json(loaded).dump() == manifest_to_json(m).dump());
}
