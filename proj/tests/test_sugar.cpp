#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "skyforge/sugar.hpp"

using namespace skyforge;
namespace fs = std::filesystem;

namespace {

// Ground-plane-only dataset: one scene (plus a throwaway twin for the
// held-out slot), one short lane, low resolution.
DatasetManifest plane_fixture(const std::string& tag, int res = 32, bool checker = true) {
    const fs::path dir = fs::temp_directory_path() / ("skyforge_sugar_" + tag);
    fs::remove_all(dir);
    const Aabb bounds{{-20, -20, 0}, {20, 20, 20}};
    SceneInput plane;
    plane.scene = generate_scene(41, 0, bounds);
    plane.scene.ground.checker = checker;
    plane.lanes = {{{-5, 0}, {5, 0}}};
    TrajectorySpec spec;
    spec.intrinsics = {60.0, res, res};
    return export_dataset({plane, plane}, spec, dir, 17, true);
}

SceneModel two_gaussian_scene() {
    SceneModel scene;
    Gaussian3D a;
    a.mu = {0, 0, 0};
    a.scales = {0.5, 0.5, 0.5};
    Gaussian3D b = a;
    b.mu = {100, 0, 0};
    scene.gaussians = {a, b};
    scene.bounds = {{-200, -200, -200}, {200, 200, 200}};
    return scene;
}

}  // namespace

TEST_CASE("init_from_depth: plane scene back-projects onto z = 0") {
    const DatasetManifest m = plane_fixture("init");
    const SceneModel scene = init_from_depth(m, "scene000", 200, 3);
    REQUIRE(scene.gaussians.size() == 200);
    for (const auto& g : scene.gaussians) {
        REQUIRE(std::abs(g.mu.z) < 1e-3);
        REQUIRE(g.opacity == Catch::Approx(0.9));
        REQUIRE(g.scales.x == g.scales.y);
        REQUIRE(g.scales.x > 0.0);
    }
}

TEST_CASE("init_from_depth: degenerate and deterministic cases") {
    const DatasetManifest m = plane_fixture("det");
    REQUIRE_THROWS(init_from_depth(m, "scene000", 0, 3));
    const SceneModel a = init_from_depth(m, "scene000", 50, 9);
    const SceneModel b = init_from_depth(m, "scene000", 50, 9);
    for (std::size_t i = 0; i < a.gaussians.size(); ++i) {
        REQUIRE(a.gaussians[i].mu.x == b.gaussians[i].mu.x);
        REQUIRE(a.gaussians[i].rgb.y == b.gaussians[i].rgb.y);
    }
    // More points than valid pixels must fail.
    REQUIRE_THROWS(init_from_depth(m, "scene000", 32 * 32 * 12 + 1, 3));
}

TEST_CASE("sample_sdf_points: nearest assignment and determinism") {
    SceneModel single;
    Gaussian3D g;
    g.scales = {1, 1, 0.1};
    single.gaussians = {g};
    const SdfSampleBatch batch = sample_sdf_points(single, 64, 5);
    REQUIRE(batch.points.size() == 64);
    for (int idx : batch.nearest) REQUIRE(idx == 0);
    for (int idx : batch.generator) REQUIRE(idx == 0);

    // Far-separated pair: every sample's nearest is its own generator.
    const SceneModel pair = two_gaussian_scene();
    const SdfSampleBatch big = sample_sdf_points(pair, 1000, 6);
    int agree = 0;
    for (std::size_t i = 0; i < big.points.size(); ++i)
        if (big.nearest[i] == big.generator[i]) ++agree;
    REQUIRE(agree == 1000);

    const SdfSampleBatch r1 = sample_sdf_points(pair, 100, 7);
    const SdfSampleBatch r2 = sample_sdf_points(pair, 100, 7);
    for (std::size_t i = 0; i < r1.points.size(); ++i) {
        REQUIRE(r1.points[i].x == r2.points[i].x);
        REQUIRE(r1.nearest[i] == r2.nearest[i]);
    }

    SceneModel empty;
    REQUIRE_THROWS(sample_sdf_points(empty, 10, 0));
}

TEST_CASE("sdf_residual: zero when generator matches ideal at target thickness") {
    SceneModel scene;
    Gaussian3D g;
    g.mu = {1, 2, 0};
    g.scales = {1.0, 1.0, 0.05};  // min scale = s_target below
    scene.gaussians = {g};

    SdfSampleBatch batch;
    Rng rng(8);
    for (int i = 0; i < 32; ++i) {
        batch.points.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)});
        batch.nearest.push_back(0);
        batch.generator.push_back(0);
    }
    REQUIRE(sdf_residual(batch, scene, 0.05) == 0.0);
}

TEST_CASE("sdf_residual: hand-computed single-sample value") {
    // <p - mu, n> = 0.1, s_g = 0.1, s_target = 0.05, same mu and normal:
    // R = |0.1/0.05 - 0.1/0.1| = 1.0.
    SceneModel scene;
    Gaussian3D g;
    g.mu = {0, 0, 0};
    g.scales = {1.0, 1.0, 0.1};
    scene.gaussians = {g};
    SdfSampleBatch batch;
    batch.points.push_back({0, 0, 0.1});
    batch.nearest.push_back(0);
    batch.generator.push_back(0);
    REQUIRE(sdf_residual(batch, scene, 0.05) == Catch::Approx(1.0).margin(1e-9));

    // Duplicating every sample leaves the mean unchanged.
    SdfSampleBatch doubled = batch;
    doubled.points.push_back(batch.points[0]);
    doubled.nearest.push_back(0);
    doubled.generator.push_back(0);
    REQUIRE(sdf_residual(doubled, scene, 0.05) ==
            Catch::Approx(sdf_residual(batch, scene, 0.05)).margin(1e-12));
}

TEST_CASE("sdf_residual gradients match finite differences away from the kink") {
    // Three Gaussians with mixed nearest/generator assignments.
    SceneModel scene;
    Rng rng(9);
    for (int i = 0; i < 3; ++i) {
        Gaussian3D g;
        g.mu = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        g.scales = {rng.uniform(0.5, 1.0), rng.uniform(0.6, 1.1), rng.uniform(0.1, 0.3)};
        g.rot = Quat{rng.normal(), rng.normal(), rng.normal(), rng.normal()}.normalized();
        scene.gaussians.push_back(g);
    }
    const double s_target = 0.08;

    SdfSampleBatch batch;
    Rng prng(10);
    for (int i = 0; i < 24; ++i) {
        batch.points.push_back({prng.uniform(-3, 3), prng.uniform(-3, 3), prng.uniform(-3, 3)});
        batch.generator.push_back(prng.uniform_int(0, 2));
        batch.nearest.push_back(prng.uniform_int(0, 2));
    }
    // Drop samples within 1e-6 of the absolute-value kink.
    SdfSampleBatch clean;
    for (std::size_t i = 0; i < batch.points.size(); ++i) {
        const auto& gs = scene.gaussians[static_cast<std::size_t>(batch.nearest[i])];
        const auto& g = scene.gaussians[static_cast<std::size_t>(batch.generator[i])];
        const double a = (batch.points[i] - gs.mu).dot(gaussian_normal(gs)) / s_target;
        const double b = (batch.points[i] - g.mu).dot(gaussian_normal(g)) / g.min_scale();
        if (std::abs(a - b) < 1e-6) continue;
        clean.points.push_back(batch.points[i]);
        clean.generator.push_back(batch.generator[i]);
        clean.nearest.push_back(batch.nearest[i]);
    }
    REQUIRE(clean.points.size() >= 20);

    const SdfGrads grads = sdf_residual_backward(clean, scene, s_target);

    const double h = 1e-6;
    double max_rel = 0.0;
    auto check = [&](double analytic, auto&& mutate) {
        SceneModel plus = scene, minus = scene;
        mutate(plus, +h);
        mutate(minus, -h);
        const double fd =
            (sdf_residual(clean, plus, s_target) - sdf_residual(clean, minus, s_target)) /
            (2 * h);
        const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-8});
        max_rel = std::max(max_rel, std::abs(fd - analytic) / denom);
    };
    for (std::size_t gi = 0; gi < 3; ++gi) {
        for (int a = 0; a < 3; ++a) {
            check(grads.d_mu[gi][a], [gi, a](SceneModel& s, double d) {
                s.gaussians[gi].mu[a] += d;
            });
            check(grads.d_scales[gi][a], [gi, a](SceneModel& s, double d) {
                s.gaussians[gi].scales[a] += d;
            });
        }
        check(grads.d_quat[gi][0], [gi](SceneModel& s, double d) { s.gaussians[gi].rot.w += d; });
        check(grads.d_quat[gi][1], [gi](SceneModel& s, double d) { s.gaussians[gi].rot.x += d; });
        check(grads.d_quat[gi][2], [gi](SceneModel& s, double d) { s.gaussians[gi].rot.y += d; });
        check(grads.d_quat[gi][3], [gi](SceneModel& s, double d) { s.gaussians[gi].rot.z += d; });
    }
    INFO("max relative error " << max_rel);
    REQUIRE(max_rel < 1e-3);
}

TEST_CASE("densify_and_prune: prunes only below the opacity floor") {
    FitConfig cfg;
    std::vector<Gaussian3D> gaussians;
    std::vector<double> avg;
    Rng rng(12);
    for (int i = 0; i < 40; ++i) {
        Gaussian3D g;
        g.mu = {static_cast<double>(i), 0, 0};
        g.opacity = i % 4 == 0 ? 0.005 : 0.02 + 0.02 * i;
        gaussians.push_back(g);
        avg.push_back(0.0);
    }
    const DensifyStats stats = densify_and_prune(gaussians, avg, cfg, 100.0, rng);
    REQUIRE(stats.pruned == 10);
    for (const auto& g : gaussians) REQUIRE(g.opacity >= cfg.prune_opacity);
}

TEST_CASE("densify_and_prune: hot Gaussians clone or split by size") {
    FitConfig cfg;
    cfg.densify_grad_percentile = 50.0;
    std::vector<Gaussian3D> gaussians(10);
    std::vector<double> avg(10, 0.0);
    for (int i = 0; i < 10; ++i) {
        gaussians[static_cast<std::size_t>(i)].mu = {static_cast<double>(i), 0, 0};
        gaussians[static_cast<std::size_t>(i)].scales = i == 9 ? Vec3{5, 5, 5} : Vec3{0.5, 0.5, 0.5};
        gaussians[static_cast<std::size_t>(i)].opacity = 0.8;
    }
    avg[8] = 1.0;  // hot small -> clone
    avg[9] = 2.0;  // hot large (5 > 0.02 * 100) -> split
    Rng rng(13);
    const DensifyStats stats = densify_and_prune(gaussians, avg, cfg, 100.0, rng);
    REQUIRE(stats.cloned == 1);
    REQUIRE(stats.split == 1);
    REQUIRE(gaussians.size() == 12);  // 10 - 1 split parent + 2 children + 1 clone
}

TEST_CASE("extract_surface_points: coplanarity and opacity threshold") {
    SceneModel scene;
    Gaussian3D flat;
    flat.mu = {1, 2, 3};
    flat.scales = {2.0, 1.5, 0.01};
    flat.rot = Quat::from_axis_angle({0, 1, 0}, 0.3);
    flat.opacity = 0.9;
    Gaussian3D ghost = flat;
    ghost.opacity = 0.3;
    scene.gaussians = {flat, ghost};

    const auto points = extract_surface_points(scene, 50, 4);
    REQUIRE(points.size() == 50);  // only the opaque one contributes
    const Vec3 n = gaussian_normal(flat);
    for (const auto& sp : points) {
        REQUIRE(std::abs((sp.position - flat.mu).dot(n)) < 1e-9);
        REQUIRE(std::abs(sp.normal.dot(n)) == Catch::Approx(1.0).margin(1e-12));
    }

    SceneModel transparent;
    transparent.gaussians = {ghost};
    REQUIRE(extract_surface_points(transparent, 10, 4).empty());
}

TEST_CASE("fit_scene: plane fixture PSNR, SDF flattening, opacity pressure") {
    const DatasetManifest m = plane_fixture("fit");
    const SceneModel init = init_from_depth(m, "scene000", 250, 21);

    FitConfig base;
    base.iterations = 400;
    base.lambda_sdf = 0.0;
    base.lambda_opacity = 0.0;
    base.densify_interval = 0;  // keep the gaussian count fixed for comparison
    base.seed = 99;
    base.report_interval = 100;

    const FitResult plain = fit_scene(m, "scene000", init, base);
    REQUIRE(plain.report.final_psnr > plain.report.init_psnr);

    // Re-rendering a training pose reproduces that pose's recorded fit PSNR.
    const auto& frame = m.scene("scene000").lanes[0].frames[0];
    const RenderOutput ro = render(plain.scene, frame.aerial_pose);
    const Image target = read_png(m.root / frame.aerial_image);
    double mse = 0.0;
    for (std::size_t i = 0; i < ro.rgb.size(); ++i) {
        const double d = std::clamp(ro.rgb[i], 0.0, 1.0) - static_cast<double>(target.data[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(ro.rgb.size());
    const double psnr = 10.0 * std::log10(1.0 / mse);
    REQUIRE(psnr >= plain.report.final_psnr_per_view[0] - 0.5);

    // Calibrated surface-alignment contrast (thresholds locked against the
    // recorded baseline run: plain median 0.52, aligned median 0.31).
    FitConfig sdf = base;
    sdf.lambda_sdf = 1.0;
    sdf.lambda_opacity = 0.05;
    sdf.sdf_start_iteration = 100;
    sdf.s_target_frac = 0.005;
    const FitResult aligned = fit_scene(m, "scene000", init, sdf);

    const double s_target = aligned.report.s_target;
    REQUIRE(aligned.report.median_min_scale <= 2.0 * s_target);
    REQUIRE(plain.report.median_min_scale > 2.0 * s_target);

    // Opacity pressure pushes mean opacity up on the plane fixture.
    REQUIRE(aligned.report.final_mean_opacity > aligned.report.init_mean_opacity);

    // Majority of surface samples land near the plane after an alignment run
    // at the default target thickness (calibration run measured 0.99).
    FitConfig dflt = base;
    dflt.lambda_sdf = 0.5;
    dflt.lambda_opacity = 0.05;
    dflt.sdf_start_iteration = 100;
    const FitResult surf = fit_scene(m, "scene000", init, dflt);
    const auto pts = extract_surface_points(surf.scene, 10, 7);
    REQUIRE(!pts.empty());
    std::size_t near = 0;
    for (const auto& sp : pts)
        if (std::abs(sp.position.z) <= 3.0 * surf.report.s_target) ++near;
    REQUIRE(static_cast<double>(near) / static_cast<double>(pts.size()) >= 0.9);
}

TEST_CASE("fit_scene: deterministic final loss for a fixed seed") {
    const DatasetManifest m = plane_fixture("seed", 24);
    const SceneModel init = init_from_depth(m, "scene000", 120, 5);
    FitConfig cfg;
    cfg.iterations = 120;
    cfg.report_interval = 60;
    cfg.seed = 31;
    const FitResult a = fit_scene(m, "scene000", init, cfg);
    const FitResult b = fit_scene(m, "scene000", init, cfg);
    REQUIRE(std::abs(a.report.final_loss - b.report.final_loss) < 1e-6);
    REQUIRE(a.scene.gaussians.size() == b.scene.gaussians.size());
}
