#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "skyforge/boxscene.hpp"
#include "skyforge/raycast.hpp"
#include "skyforge/trajectory.hpp"

namespace skyforge {

inline nlohmann::json pose_to_json(const CameraPose& p) {
    return {{"position", {p.position.x, p.position.y, p.position.z}},
            {"yaw", p.yaw},
            {"pitch", p.pitch},
            {"roll", p.roll},
            {"fov_deg", p.intrinsics.fov_deg},
            {"width_px", p.intrinsics.width_px},
            {"height_px", p.intrinsics.height_px}};
}

inline CameraPose pose_from_json(const nlohmann::json& j) {
    CameraPose p;
    p.position = {j.at("position")[0], j.at("position")[1], j.at("position")[2]};
    p.yaw = j.at("yaw");
    p.pitch = j.at("pitch");
    p.roll = j.at("roll");
    p.intrinsics.fov_deg = j.at("fov_deg");
    p.intrinsics.width_px = j.at("width_px");
    p.intrinsics.height_px = j.at("height_px");
    return p;
}

// One geo-aligned aerial/ground pair. Paths are relative to the dataset root.
struct FrameRecord {
    std::string aerial_image;
    CameraPose aerial_pose;
    std::string ground_image;
    CameraPose ground_pose;
    std::string depth;  // aerial depth raster
};

struct LaneRecord {
    std::string name;
    std::vector<FrameRecord> frames;
};

struct SceneRecord {
    std::string name;
    std::string split;  // "train" or "test"
    std::string scene_json;
    std::vector<LaneRecord> lanes;
};

struct DatasetManifest {
    int schema_version = 1;
    std::uint64_t seed = 0;
    std::filesystem::path root;  // not serialized; where manifest.json lives
    std::vector<SceneRecord> scenes;

    std::vector<const SceneRecord*> split_scenes(const std::string& split) const {
        std::vector<const SceneRecord*> out;
        for (const auto& s : scenes)
            if (s.split == split) out.push_back(&s);
        return out;
    }
    const SceneRecord& scene(const std::string& name) const {
        for (const auto& s : scenes)
            if (s.name == name) return s;
        throw std::runtime_error("manifest: unknown scene " + name);
    }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json scenes = nlohmann::json::array();
    for (const auto& s : m.scenes) {
        nlohmann::json lanes = nlohmann::json::array();
        for (const auto& l : s.lanes) {
            nlohmann::json frames = nlohmann::json::array();
            for (const auto& f : l.frames)
                frames.push_back({{"aerial_image", f.aerial_image},
                                  {"aerial_pose", pose_to_json(f.aerial_pose)},
                                  {"ground_image", f.ground_image},
                                  {"ground_pose", pose_to_json(f.ground_pose)},
                                  {"depth", f.depth}});
            lanes.push_back({{"name", l.name}, {"frames", frames}});
        }
        scenes.push_back({{"name", s.name},
                          {"split", s.split},
                          {"scene_json", s.scene_json},
                          {"lanes", lanes}});
    }
    return {{"schema_version", m.schema_version}, {"seed", m.seed}, {"scenes", scenes}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.schema_version = j.at("schema_version");
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& js : j.at("scenes")) {
        SceneRecord s;
        s.name = js.at("name");
        s.split = js.at("split");
        s.scene_json = js.at("scene_json");
        for (const auto& jl : js.at("lanes")) {
            LaneRecord l;
            l.name = jl.at("name");
            for (const auto& jf : jl.at("frames")) {
                FrameRecord f;
                f.aerial_image = jf.at("aerial_image");
                f.aerial_pose = pose_from_json(jf.at("aerial_pose"));
                f.ground_image = jf.at("ground_image");
                f.ground_pose = pose_from_json(jf.at("ground_pose"));
                f.depth = jf.at("depth");
                l.frames.push_back(f);
            }
            s.lanes.push_back(l);
        }
        m.scenes.push_back(s);
    }
    return m;
}

inline void save_manifest(const DatasetManifest& m) {
    std::ofstream f(m.root / "manifest.json");
    if (!f) throw std::runtime_error("save_manifest: cannot write manifest.json");
    f << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& root) {
    std::ifstream f(root / "manifest.json");
    if (!f) throw std::runtime_error("load_manifest: no manifest.json under " + root.string());
    DatasetManifest m = manifest_from_json(nlohmann::json::parse(f));
    m.root = root;
    return m;
}

struct SceneInput {
    BoxScene scene;
    std::vector<std::vector<Vec2>> lanes;  // polylines in scene coordinates
};

namespace detail {

inline std::string index_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", i);
    return buf;
}

}  // namespace detail

// Renders and writes the full dataset. The last scene is tagged as the
// held-out test scene; all others are train.
inline DatasetManifest export_dataset(const std::vector<SceneInput>& scenes,
                                      const TrajectorySpec& spec,
                                      const std::filesystem::path& out_dir,
                                      std::uint64_t seed, bool force = false) {
    namespace fs = std::filesystem;
    if (scenes.size() < 2)
        throw std::invalid_argument("export_dataset: need at least 2 scenes to hold one out");
    if (fs::exists(out_dir / "manifest.json") && !force)
        throw std::runtime_error("export_dataset: manifest already exists at " +
                                 out_dir.string() + " (use force to overwrite)");
    fs::create_directories(out_dir);

    DatasetManifest manifest;
    manifest.seed = seed;
    manifest.root = out_dir;

    for (std::size_t si = 0; si < scenes.size(); ++si) {
        SceneRecord rec;
        rec.name = "scene" + detail::index_name(static_cast<int>(si)).substr(3);
        rec.split = si + 1 == scenes.size() ? "test" : "train";
        const fs::path scene_dir = out_dir / rec.name;
        fs::create_directories(scene_dir);
        rec.scene_json = rec.name + "/scene.json";
        {
            std::ofstream f(out_dir / rec.scene_json);
            f << scene_to_json(scenes[si].scene).dump(2) << "\n";
        }

        for (std::size_t li = 0; li < scenes[si].lanes.size(); ++li) {
            LaneRecord lane;
            lane.name = "lane" + detail::index_name(static_cast<int>(li)).substr(3);
            const fs::path lane_dir = scene_dir / lane.name;
            fs::create_directories(lane_dir / "aerial");
            fs::create_directories(lane_dir / "ground");
            fs::create_directories(lane_dir / "depth");

            const LanePoses poses = sample_lane_poses(scenes[si].lanes[li], spec);
            for (std::size_t fi = 0; fi < poses.aerial.size(); ++fi) {
                const std::string idx = detail::index_name(static_cast<int>(fi));
                FrameRecord frame;
                frame.aerial_pose = poses.aerial[fi];
                frame.ground_pose = poses.ground[fi];
                frame.aerial_image = rec.name + "/" + lane.name + "/aerial/" + idx + ".png";
                frame.ground_image = rec.name + "/" + lane.name + "/ground/" + idx + ".png";
                frame.depth = rec.name + "/" + lane.name + "/depth/" + idx + ".f32";

                const ReferenceRender aerial = render_reference(scenes[si].scene, frame.aerial_pose);
                const ReferenceRender ground = render_reference(scenes[si].scene, frame.ground_pose);
                write_png(out_dir / frame.aerial_image, aerial.rgb);
                write_png(out_dir / frame.ground_image, ground.rgb);
                write_f32_raster(out_dir / frame.depth, aerial.depth);
                lane.frames.push_back(frame);
            }
            rec.lanes.push_back(lane);
        }
        manifest.scenes.push_back(rec);
    }
    save_manifest(manifest);
    return manifest;
}

// Checks that every referenced file exists under the manifest root.
inline void validate_manifest_files(const DatasetManifest& m) {
    namespace fs = std::filesystem;
    auto need = [&](const std::string& rel) {
        if (!fs::exists(m.root / rel))
            throw std::runtime_error("manifest: missing file " + rel);
    };
    for (const auto& s : m.scenes) {
        need(s.scene_json);
        for (const auto& l : s.lanes)
            for (const auto& f : l.frames) {
                need(f.aerial_image);
                need(f.ground_image);
                need(f.depth);
            }
    }
}

}  // namespace skyforge
