#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "skyforge/manifest.hpp"
#include "skyforge/splat.hpp"

namespace skyforge {

// Optimization settings for the surface-aligned scene fit. Learning rates are
// per parameter group; the position rate is a fraction of the scene extent.
struct FitConfig {
    int iterations = 2000;
    double lr_mu_frac = 4e-4;        // x scene extent, exponentially decayed 10x
    double lr_scales = 8e-3;
    double lr_quat = 2e-3;
    double lr_rgb = 8e-3;
    double lr_opacity = 0.05;
    bool optimize_background = false;

    double lambda_sdf = 0.5;
    double lambda_opacity = 0.05;
    int sdf_sample_count = 512;
    int sdf_start_iteration = -1;    // -1: 25% of iterations
    int sdf_every = 1;
    double s_target_frac = 0.01;     // target thickness as a fraction of extent

    int densify_interval = 200;
    double densify_grad_percentile = 97.5;
    double densify_split_frac = 0.02;  // split when max scale exceeds this x extent
    int densify_until = -1;            // -1: 80% of iterations
    double prune_opacity = 0.01;
    std::size_t max_gaussians = 20000;

    int report_interval = 100;
    std::uint64_t seed = 0;
    bool deterministic = true;  // single-threaded, fixed reduction order
};

struct FitReportEntry {
    int iteration = 0;
    double loss = 0.0;
    double psnr = 0.0;
    double sdf_residual = 0.0;
    std::size_t n_gaussians = 0;
};

struct FitReport {
    std::vector<FitReportEntry> intervals;
    double init_psnr = 0.0;
    double final_psnr = 0.0;
    std::vector<double> final_psnr_per_view;
    double init_mean_opacity = 0.0;
    double final_mean_opacity = 0.0;
    double final_sdf_residual = 0.0;
    double median_min_scale = 0.0;
    double s_target = 0.0;
    double final_loss = 0.0;
    std::size_t n_gaussians = 0;
};

inline nlohmann::json fit_report_to_json(const FitReport& r) {
    nlohmann::json intervals = nlohmann::json::array();
    for (const auto& e : r.intervals)
        intervals.push_back({{"iteration", e.iteration},
                             {"loss", e.loss},
                             {"psnr", e.psnr},
                             {"sdf_residual", e.sdf_residual},
                             {"n_gaussians", e.n_gaussians}});
    return {{"intervals", intervals},
            {"init_psnr", r.init_psnr},
            {"final_psnr", r.final_psnr},
            {"final_psnr_per_view", r.final_psnr_per_view},
            {"init_mean_opacity", r.init_mean_opacity},
            {"final_mean_opacity", r.final_mean_opacity},
            {"final_sdf_residual", r.final_sdf_residual},
            {"median_min_scale", r.median_min_scale},
            {"s_target", r.s_target},
            {"final_loss", r.final_loss},
            {"n_gaussians", r.n_gaussians}};
}

// Seeds one isotropic Gaussian per sampled valid-depth aerial pixel,
// colored by the pixel and sized by a 3-nearest-neighbor distance estimate.
inline SceneModel init_from_depth(const DatasetManifest& manifest, const std::string& scene_name,
                                  int n_points, std::uint64_t seed) {
    if (n_points <= 0) throw std::invalid_argument("init_from_depth: n_points must be > 0");
    const SceneRecord& rec = manifest.scene(scene_name);

    struct FrameData {
        Image rgb;
        Image depth;
        CameraPose pose;
    };
    std::vector<FrameData> frames;
    for (const auto& lane : rec.lanes)
        for (const auto& f : lane.frames)
            frames.push_back({read_png(manifest.root / f.aerial_image),
                              read_f32_raster(manifest.root / f.depth), f.aerial_pose});

    // Global index of every valid-depth pixel.
    std::vector<std::pair<int, int>> valid;  // (frame, pixel)
    for (std::size_t fi = 0; fi < frames.size(); ++fi) {
        const Image& d = frames[fi].depth;
        for (int i = 0; i < d.width * d.height; ++i)
            if (d.data[static_cast<std::size_t>(i)] > 0.f)
                valid.emplace_back(static_cast<int>(fi), i);
    }
    if (static_cast<int>(valid.size()) < n_points)
        throw std::runtime_error("init_from_depth: only " + std::to_string(valid.size()) +
                                 " valid depth pixels for " + std::to_string(n_points) + " points");

    // Partial Fisher-Yates draw without replacement.
    Rng rng(derive_seed(seed, "init_from_depth"));
    for (int i = 0; i < n_points; ++i) {
        const std::size_t j = i + rng.uniform_index(valid.size() - static_cast<std::size_t>(i));
        std::swap(valid[static_cast<std::size_t>(i)], valid[j]);
    }

    SceneModel scene;
    scene.background = {kSkyColor[0], kSkyColor[1], kSkyColor[2]};
    for (int i = 0; i < n_points; ++i) {
        const auto [fi, pix] = valid[static_cast<std::size_t>(i)];
        const FrameData& fd = frames[static_cast<std::size_t>(fi)];
        const int px = pix % fd.depth.width;
        const int py = pix / fd.depth.width;
        const double depth = fd.depth.data[static_cast<std::size_t>(pix)];
        Gaussian3D g;
        g.mu = fd.pose.position + fd.pose.ray_direction(px, py) * depth;
        g.rgb = {fd.rgb.at(px, py, 0), fd.rgb.at(px, py, 1), fd.rgb.at(px, py, 2)};
        g.opacity = 0.9;
        scene.gaussians.push_back(g);
    }

    // Isotropic scale from the mean distance to the 3 nearest seed points.
    const std::size_t n = scene.gaussians.size();
    for (std::size_t i = 0; i < n; ++i) {
        double best[3] = {1e30, 1e30, 1e30};
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double d2 = (scene.gaussians[i].mu - scene.gaussians[j].mu).dot(
                scene.gaussians[i].mu - scene.gaussians[j].mu);
            if (d2 < best[2]) {
                best[2] = d2;
                if (best[2] < best[1]) std::swap(best[1], best[2]);
                if (best[1] < best[0]) std::swap(best[0], best[1]);
            }
        }
        double mean = 0.0;
        int cnt = 0;
        for (double b : best)
            if (b < 1e29) {
                mean += std::sqrt(b);
                ++cnt;
            }
        const double s = cnt > 0 ? std::max(mean / cnt, 1e-4) : 0.1;
        scene.gaussians[i].scales = {s, s, s};
    }

    // Bounds from the scene descriptor when available, else from the points.
    try {
        std::ifstream f(manifest.root / rec.scene_json);
        const BoxScene bs = scene_from_json(nlohmann::json::parse(f));
        scene.bounds = bs.bounds;
    } catch (...) {
        Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
        for (const auto& g : scene.gaussians)
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::min(lo[a], g.mu[a]);
                hi[a] = std::max(hi[a], g.mu[a]);
            }
        scene.bounds = {lo, hi};
    }
    return scene;
}

// Sample batch for the surface-alignment residual: each point is drawn from
// one Gaussian's own distribution; g* is the Mahalanobis-nearest Gaussian.
struct SdfSampleBatch {
    std::vector<Vec3> points;
    std::vector<int> nearest;    // g* per point
    std::vector<int> generator;  // the Gaussian each point was drawn from
};

namespace detail {

struct GaussianFrame {
    Mat3 rot_t;  // R^T
    Vec3 inv_scales;
};

inline std::vector<GaussianFrame> gaussian_frames(const SceneModel& scene) {
    std::vector<GaussianFrame> frames(scene.gaussians.size());
    for (std::size_t i = 0; i < scene.gaussians.size(); ++i) {
        const auto& g = scene.gaussians[i];
        frames[i].rot_t = g.rot.to_matrix().transpose();
        frames[i].inv_scales = {1.0 / g.scales.x, 1.0 / g.scales.y, 1.0 / g.scales.z};
    }
    return frames;
}

inline double mahalanobis_sq(const GaussianFrame& f, const Vec3& mu, const Vec3& p) {
    const Vec3 local = f.rot_t * (p - mu);
    const double a = local.x * f.inv_scales.x;
    const double b = local.y * f.inv_scales.y;
    const double c = local.z * f.inv_scales.z;
    return a * a + b * b + c * c;
}

// Euclidean prefilter (k candidates) before the Mahalanobis comparison keeps
// the nearest-Gaussian search near-linear.
class NearestGaussianFinder {
public:
    NearestGaussianFinder(const SceneModel& scene, const std::vector<GaussianFrame>& frames)
        : scene_(scene), frames_(frames) {
        centers_.reserve(scene.gaussians.size());
        for (const auto& g : scene.gaussians) centers_.push_back(g.mu);
    }

    int nearest(const Vec3& p) const {
        constexpr std::size_t kCandidates = 32;
        const std::size_t n = centers_.size();
        int best = -1;
        if (n <= kCandidates * 2) {
            double best_d = 1e300;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = mahalanobis_sq(frames_[i], centers_[i], p);
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(i);
                }
            }
            return best;
        }
        // Partial selection of the k Euclidean-nearest centers.
        std::vector<std::pair<double, int>> cand;
        cand.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3 d = centers_[i] - p;
            cand.emplace_back(d.dot(d), static_cast<int>(i));
        }
        std::nth_element(cand.begin(), cand.begin() + kCandidates, cand.end());
        double best_d = 1e300;
        for (std::size_t c = 0; c < kCandidates; ++c) {
            const int i = cand[c].second;
            const double d = mahalanobis_sq(frames_[static_cast<std::size_t>(i)],
                                            centers_[static_cast<std::size_t>(i)], p);
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    }

private:
    const SceneModel& scene_;
    const std::vector<GaussianFrame>& frames_;
    std::vector<Vec3> centers_;
};

}  // namespace detail

inline SdfSampleBatch sample_sdf_points(const SceneModel& scene, int count, std::uint64_t seed) {
    if (scene.gaussians.empty())
        throw std::invalid_argument("sample_sdf_points: empty scene");
    SdfSampleBatch batch;
    batch.points.reserve(static_cast<std::size_t>(count));
    Rng rng(derive_seed(seed, "sdf_points"));
    const auto frames = detail::gaussian_frames(scene);
    const detail::NearestGaussianFinder finder(scene, frames);
    for (int i = 0; i < count; ++i) {
        const int gi = static_cast<int>(rng.uniform_index(scene.gaussians.size()));
        const Gaussian3D& g = scene.gaussians[static_cast<std::size_t>(gi)];
        const Vec3 local{rng.normal() * g.scales.x, rng.normal() * g.scales.y,
                         rng.normal() * g.scales.z};
        const Vec3 p = g.mu + g.rot.to_matrix() * local;
        batch.points.push_back(p);
        batch.generator.push_back(gi);
        batch.nearest.push_back(finder.nearest(p));
    }
    return batch;
}

// Surface-alignment residual: mean over samples of
// | <p - mu*, n*>/s_target - <p - mu_g, n_g>/s_g |
// where g* is the recorded nearest Gaussian (its center and normal stand in
// for the ideal surface) and g is the sample's generator with its current
// smallest scale s_g.
inline double sdf_residual(const SdfSampleBatch& batch, const SceneModel& scene,
                           double s_target) {
    if (batch.points.empty()) throw std::invalid_argument("sdf_residual: empty batch");
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.points.size(); ++i) {
        const Gaussian3D& gs = scene.gaussians[static_cast<std::size_t>(batch.nearest[i])];
        const Gaussian3D& g = scene.gaussians[static_cast<std::size_t>(batch.generator[i])];
        const double ideal = (batch.points[i] - gs.mu).dot(gaussian_normal(gs)) / s_target;
        const double actual = (batch.points[i] - g.mu).dot(gaussian_normal(g)) / g.min_scale();
        sum += std::abs(ideal - actual);
    }
    return sum / static_cast<double>(batch.points.size());
}

struct SdfGrads {
    std::vector<Vec3> d_mu;
    std::vector<Vec3> d_scales;
    std::vector<std::array<double, 4>> d_quat;

    explicit SdfGrads(std::size_t n) : d_mu(n), d_scales(n), d_quat(n, {0, 0, 0, 0}) {}
};

namespace detail {

// Gradient of <v, R(q) e_axis> with respect to the raw quaternion.
inline void axis_dot_quat_grad(const Quat& q_raw, int axis, const Vec3& v, double weight,
                               std::array<double, 4>& g_out) {
    const Quat qn = q_raw.normalized();
    Mat3 g_r{};  // dL/dR = weight * v e_axis^T
    for (int r = 0; r < 3; ++r) g_r(r, axis) = weight * v[r];
    std::array<double, 4> g_qn{0, 0, 0, 0};
    quat_rotation_grad(qn, g_r, g_qn);
    const double qnorm = q_raw.norm();
    const double qdot = g_qn[0] * qn.w + g_qn[1] * qn.x + g_qn[2] * qn.y + g_qn[3] * qn.z;
    g_out[0] += (g_qn[0] - qdot * qn.w) / qnorm;
    g_out[1] += (g_qn[1] - qdot * qn.x) / qnorm;
    g_out[2] += (g_qn[2] - qdot * qn.y) / qnorm;
    g_out[3] += (g_qn[3] - qdot * qn.z) / qnorm;
}

}  // namespace detail

// Analytic gradients of sdf_residual w.r.t. mu, scales and rotation of both
// the generator and the nearest Gaussian. The sample points are constants.
inline SdfGrads sdf_residual_backward(const SdfSampleBatch& batch, const SceneModel& scene,
                                      double s_target) {
    SdfGrads grads(scene.gaussians.size());
    const double inv_n = 1.0 / static_cast<double>(batch.points.size());
    for (std::size_t i = 0; i < batch.points.size(); ++i) {
        const int si = batch.nearest[i];
        const int gi = batch.generator[i];
        const Gaussian3D& gs = scene.gaussians[static_cast<std::size_t>(si)];
        const Gaussian3D& g = scene.gaussians[static_cast<std::size_t>(gi)];
        const Vec3 ns = gaussian_normal(gs);
        const Vec3 ng = gaussian_normal(g);
        const double sg = g.min_scale();
        const int kg = g.min_scale_axis();
        const double ideal = (batch.points[i] - gs.mu).dot(ns) / s_target;
        const double actual = (batch.points[i] - g.mu).dot(ng) / sg;
        const double diff = ideal - actual;
        if (diff == 0.0) continue;
        const double sgn = diff > 0.0 ? inv_n : -inv_n;

        // Ideal term: + <p - mu*, n*> / s_target.
        grads.d_mu[static_cast<std::size_t>(si)] += ns * (-sgn / s_target);
        detail::axis_dot_quat_grad(gs.rot, gs.min_scale_axis(), batch.points[i] - gs.mu,
                                   sgn / s_target, grads.d_quat[static_cast<std::size_t>(si)]);

        // Actual term: - <p - mu_g, n_g> / s_g.
        grads.d_mu[static_cast<std::size_t>(gi)] += ng * (sgn / sg);
        detail::axis_dot_quat_grad(g.rot, kg, batch.points[i] - g.mu, -sgn / sg,
                                   grads.d_quat[static_cast<std::size_t>(gi)]);
        grads.d_scales[static_cast<std::size_t>(gi)][kg] +=
            sgn * (batch.points[i] - g.mu).dot(ng) / (sg * sg);
    }
    return grads;
}

struct SurfacePoint {
    Vec3 position;
    Vec3 normal;
};

// Oriented surface samples: per opaque Gaussian, points on the mu-centered
// plane orthogonal to its normal, within one sigma of the two large axes.
inline std::vector<SurfacePoint> extract_surface_points(const SceneModel& scene,
                                                        int per_gaussian,
                                                        std::uint64_t seed = 0) {
    std::vector<SurfacePoint> out;
    Rng rng(derive_seed(seed, "surface_points"));
    for (const auto& g : scene.gaussians) {
        if (g.opacity <= 0.5) continue;
        const int k = g.min_scale_axis();
        const int a1 = (k + 1) % 3, a2 = (k + 2) % 3;
        const Mat3 r = g.rot.to_matrix();
        const Vec3 n = r.column(k);
        for (int i = 0; i < per_gaussian; ++i) {
            const double u = rng.uniform(-1.0, 1.0) * g.scales[a1];
            const double v = rng.uniform(-1.0, 1.0) * g.scales[a2];
            out.push_back({g.mu + r.column(a1) * u + r.column(a2) * v, n});
        }
    }
    return out;
}

namespace detail {

struct AdamState {
    std::vector<double> m, v;
    void resize(std::size_t n) {
        m.resize(n, 0.0);
        v.resize(n, 0.0);
    }
};

inline void adam_step(std::vector<double>& params, const std::vector<double>& grads,
                      AdamState& state, double lr, int t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        params[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + eps);
    }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) {
    const double c = std::clamp(p, 1e-6, 1.0 - 1e-6);
    return std::log(c / (1.0 - c));
}

}  // namespace detail

struct DensifyStats {
    std::size_t pruned = 0;
    std::size_t cloned = 0;
    std::size_t split = 0;
};

// One densify/prune pass: drops Gaussians below the opacity floor, clones or
// splits those whose average positional gradient exceeds the configured
// percentile. avg_grad is index-aligned with the gaussians.
inline DensifyStats densify_and_prune(std::vector<Gaussian3D>& gaussians,
                                      const std::vector<double>& avg_grad,
                                      const FitConfig& cfg, double extent, Rng& rng) {
    DensifyStats stats;
    const std::size_t n = gaussians.size();
    std::vector<double> sorted_avg = avg_grad;
    std::sort(sorted_avg.begin(), sorted_avg.end());
    const std::size_t pidx = static_cast<std::size_t>(
        std::min<double>(static_cast<double>(n) - 1,
                         cfg.densify_grad_percentile / 100.0 * static_cast<double>(n)));
    const double threshold = n > 0 ? sorted_avg[pidx] : 0.0;

    std::vector<Gaussian3D> next;
    next.reserve(n + n / 8);
    for (std::size_t i = 0; i < n; ++i) {
        const Gaussian3D& g = gaussians[i];
        if (g.opacity < cfg.prune_opacity) {
            ++stats.pruned;
            continue;
        }
        const bool hot = avg_grad[i] > threshold && avg_grad[i] > 0.0 &&
                         next.size() + 2 + (n - i) < cfg.max_gaussians;
        if (!hot) {
            next.push_back(g);
            continue;
        }
        const double max_scale = std::max(g.scales.x, std::max(g.scales.y, g.scales.z));
        if (max_scale > cfg.densify_split_frac * extent) {
            // Split: two shrunken copies sampled from the parent.
            for (int c = 0; c < 2; ++c) {
                Gaussian3D child = g;
                const Vec3 local{rng.normal() * g.scales.x, rng.normal() * g.scales.y,
                                 rng.normal() * g.scales.z};
                child.mu = g.mu + g.rot.to_matrix() * local;
                child.scales = g.scales * (1.0 / 1.6);
                next.push_back(child);
            }
            ++stats.split;
        } else {
            // Clone: duplicate with a small positional jitter.
            next.push_back(g);
            Gaussian3D clone = g;
            const Vec3 local{rng.normal() * 0.3 * g.scales.x, rng.normal() * 0.3 * g.scales.y,
                             rng.normal() * 0.3 * g.scales.z};
            clone.mu = g.mu + g.rot.to_matrix() * local;
            next.push_back(clone);
            ++stats.cloned;
        }
    }
    gaussians = std::move(next);
    return stats;
}

struct FitResult {
    SceneModel scene;
    FitReport report;
};

// Optimizes the Gaussian scene against the aerial views of one manifest
// scene: L1 photometric term, surface-alignment residual after the warmup,
// and a soft opacity-toward-one penalty, with clone/split densification and
// opacity pruning on a fixed schedule.
inline FitResult fit_scene(const DatasetManifest& manifest, const std::string& scene_name,
                           const SceneModel& init, const FitConfig& cfg) {
    if (cfg.iterations <= 0) throw std::invalid_argument("fit_scene: iterations must be > 0");

    const SceneRecord& rec = manifest.scene(scene_name);
    std::vector<Image> images;
    std::vector<CameraPose> views;
    for (const auto& lane : rec.lanes)
        for (const auto& f : lane.frames) {
            images.push_back(read_png(manifest.root / f.aerial_image));
            views.push_back(f.aerial_pose);
        }
    if (views.empty()) throw std::runtime_error("fit_scene: no aerial views for " + scene_name);

    SceneModel scene = init;
    const double extent = scene.bounds.max_extent();
    const double s_target = cfg.s_target_frac * extent;
    const int sdf_start =
        cfg.sdf_start_iteration >= 0 ? cfg.sdf_start_iteration : cfg.iterations / 4;
    const int densify_until =
        cfg.densify_until >= 0 ? cfg.densify_until : cfg.iterations * 4 / 5;
    const double log_scale_min = std::log(1e-4 * extent);
    const double log_scale_max = std::log(0.5 * extent);

    // Parameter vectors: positions, log-scales, raw quaternions, rgb,
    // opacity logits.
    std::size_t n = scene.gaussians.size();
    auto pull_params = [&](std::vector<double>& mu, std::vector<double>& ls,
                           std::vector<double>& qt, std::vector<double>& cl,
                           std::vector<double>& op) {
        mu.resize(n * 3);
        ls.resize(n * 3);
        qt.resize(n * 4);
        cl.resize(n * 3);
        op.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& g = scene.gaussians[i];
            for (int a = 0; a < 3; ++a) {
                mu[i * 3 + a] = g.mu[a];
                ls[i * 3 + a] = std::log(g.scales[a]);
                cl[i * 3 + a] = g.rgb[a];
            }
            qt[i * 4 + 0] = g.rot.w;
            qt[i * 4 + 1] = g.rot.x;
            qt[i * 4 + 2] = g.rot.y;
            qt[i * 4 + 3] = g.rot.z;
            op[i] = detail::logit(g.opacity);
        }
    };
    auto push_params = [&](const std::vector<double>& mu, const std::vector<double>& ls,
                           const std::vector<double>& qt, const std::vector<double>& cl,
                           const std::vector<double>& op) {
        for (std::size_t i = 0; i < n; ++i) {
            auto& g = scene.gaussians[i];
            for (int a = 0; a < 3; ++a) {
                g.mu[a] = mu[i * 3 + a];
                g.scales[a] = std::exp(std::clamp(ls[i * 3 + a], log_scale_min, log_scale_max));
                g.rgb[a] = std::clamp(cl[i * 3 + a], 0.0, 1.0);
            }
            Quat q{qt[i * 4 + 0], qt[i * 4 + 1], qt[i * 4 + 2], qt[i * 4 + 3]};
            g.rot = q.norm() > 1e-12 ? q.normalized() : Quat::identity();
            g.opacity = detail::sigmoid(op[i]);
        }
    };

    std::vector<double> p_mu, p_ls, p_qt, p_cl, p_op;
    pull_params(p_mu, p_ls, p_qt, p_cl, p_op);
    detail::AdamState a_mu, a_ls, a_qt, a_cl, a_op, a_bg;
    a_mu.resize(n * 3);
    a_ls.resize(n * 3);
    a_qt.resize(n * 4);
    a_cl.resize(n * 3);
    a_op.resize(n);
    a_bg.resize(3);

    Rng rng(derive_seed(cfg.seed, "fit_scene"));

    auto per_view_psnr = [&]() {
        std::vector<double> out;
        for (std::size_t v = 0; v < views.size(); ++v) {
            const RenderOutput ro = render(scene, views[v]);
            double mse = 0.0;
            for (std::size_t i = 0; i < ro.rgb.size(); ++i) {
                const double d = std::clamp(ro.rgb[i], 0.0, 1.0) -
                                 static_cast<double>(images[v].data[i]);
                mse += d * d;
            }
            mse /= static_cast<double>(ro.rgb.size());
            out.push_back(mse <= 1e-10 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse)));
        }
        return out;
    };
    auto mean_psnr = [&]() {
        const std::vector<double> v = per_view_psnr();
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };

    FitReport report;
    report.s_target = s_target;
    report.init_psnr = mean_psnr();
    report.init_mean_opacity =
        std::accumulate(scene.gaussians.begin(), scene.gaussians.end(), 0.0,
                        [](double a, const Gaussian3D& g) { return a + g.opacity; }) /
        static_cast<double>(std::max<std::size_t>(1, n));
    double best_psnr = report.init_psnr;

    // Positional gradient accumulation for the densify heuristic.
    std::vector<double> grad_norm_acc(n, 0.0);
    std::vector<int> grad_norm_cnt(n, 0);
    double last_sdf = 0.0;
    double loss = 0.0;

    for (int iter = 1; iter <= cfg.iterations; ++iter) {
        const std::size_t view_idx = rng.uniform_index(views.size());
        const CameraPose& cam = views[view_idx];
        const Image& target = images[view_idx];

        const RenderOutput ro = render(scene, cam);
        const double inv_count = 1.0 / static_cast<double>(ro.rgb.size());
        std::vector<double> d_rgb(ro.rgb.size());
        double l1 = 0.0;
        for (std::size_t i = 0; i < ro.rgb.size(); ++i) {
            const double d = ro.rgb[i] - static_cast<double>(target.data[i]);
            l1 += std::abs(d);
            d_rgb[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * inv_count;
        }
        l1 *= inv_count;
        loss = l1;

        RenderGrads rg = render_backward(scene, cam, d_rgb);

        // Surface-alignment residual on a fresh sample batch.
        const bool sdf_active = cfg.lambda_sdf > 0.0 && iter > sdf_start &&
                                (iter - sdf_start) % std::max(1, cfg.sdf_every) == 0;
        SdfGrads sdf_grads(0);
        SdfSampleBatch batch;
        if (sdf_active) {
            batch = sample_sdf_points(scene, cfg.sdf_sample_count, rng.next_u64());
            last_sdf = sdf_residual(batch, scene, s_target);
            loss += cfg.lambda_sdf * last_sdf;
            sdf_grads = sdf_residual_backward(batch, scene, s_target);
        }

        if (!std::isfinite(loss)) throw std::runtime_error("fit_scene: non-finite loss");

        // Assemble parameter-space gradients.
        std::vector<double> g_mu(n * 3, 0.0), g_ls(n * 3, 0.0), g_qt(n * 4, 0.0),
            g_cl(n * 3, 0.0), g_op(n, 0.0);
        const double inv_n_g = 1.0 / static_cast<double>(std::max<std::size_t>(1, n));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& g = scene.gaussians[i];
            Vec3 dmu = rg.d_mu[i];
            Vec3 dsc = rg.d_scales[i];
            std::array<double, 4> dqt = rg.d_quat[i];
            if (sdf_active && !sdf_grads.d_mu.empty()) {
                dmu += sdf_grads.d_mu[i] * cfg.lambda_sdf;
                dsc += sdf_grads.d_scales[i] * cfg.lambda_sdf;
                for (int a = 0; a < 4; ++a) dqt[a] += sdf_grads.d_quat[i][a] * cfg.lambda_sdf;
            }
            for (int a = 0; a < 3; ++a) {
                g_mu[i * 3 + a] = dmu[a];
                g_ls[i * 3 + a] = dsc[a] * g.scales[a];  // chain to log-scale
                g_cl[i * 3 + a] = rg.d_rgb[i][a];
            }
            for (int a = 0; a < 4; ++a) g_qt[i * 4 + a] = dqt[a];
            // Opacity-to-one penalty: lambda * mean (1 - alpha)^2.
            const double d_alpha =
                rg.d_opacity[i] + cfg.lambda_opacity * (-2.0 * (1.0 - g.opacity)) * inv_n_g;
            g_op[i] = d_alpha * g.opacity * (1.0 - g.opacity);  // chain to logit

            const double gn = std::sqrt(dmu.dot(dmu));
            grad_norm_acc[i] += gn;
            grad_norm_cnt[i] += 1;
        }
        if (cfg.lambda_opacity > 0.0) {
            double pen = 0.0;
            for (const auto& g : scene.gaussians) pen += (1.0 - g.opacity) * (1.0 - g.opacity);
            loss += cfg.lambda_opacity * pen * inv_n_g;
        }

        const double decay = std::pow(0.1, static_cast<double>(iter) / cfg.iterations);
        detail::adam_step(p_mu, g_mu, a_mu, cfg.lr_mu_frac * extent * decay, iter);
        detail::adam_step(p_ls, g_ls, a_ls, cfg.lr_scales, iter);
        detail::adam_step(p_qt, g_qt, a_qt, cfg.lr_quat, iter);
        detail::adam_step(p_cl, g_cl, a_cl, cfg.lr_rgb, iter);
        detail::adam_step(p_op, g_op, a_op, cfg.lr_opacity, iter);
        if (cfg.optimize_background) {
            std::vector<double> g_bg{rg.d_background.x, rg.d_background.y, rg.d_background.z};
            std::vector<double> p_bg{scene.background.x, scene.background.y, scene.background.z};
            detail::adam_step(p_bg, g_bg, a_bg, cfg.lr_rgb, iter);
            scene.background = {std::clamp(p_bg[0], 0.0, 1.0), std::clamp(p_bg[1], 0.0, 1.0),
                                std::clamp(p_bg[2], 0.0, 1.0)};
        }
        // Keep quaternion parameters on the unit sphere.
        for (std::size_t i = 0; i < n; ++i) {
            Quat q{p_qt[i * 4 + 0], p_qt[i * 4 + 1], p_qt[i * 4 + 2], p_qt[i * 4 + 3]};
            if (q.norm() < 1e-12) q = Quat::identity();
            q = q.normalized();
            p_qt[i * 4 + 0] = q.w;
            p_qt[i * 4 + 1] = q.x;
            p_qt[i * 4 + 2] = q.y;
            p_qt[i * 4 + 3] = q.z;
        }
        push_params(p_mu, p_ls, p_qt, p_cl, p_op);

        // Densify and prune.
        if (cfg.densify_interval > 0 && iter % cfg.densify_interval == 0 &&
            iter <= densify_until) {
            std::vector<double> avg(n, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                avg[i] = grad_norm_cnt[i] > 0 ? grad_norm_acc[i] / grad_norm_cnt[i] : 0.0;
            densify_and_prune(scene.gaussians, avg, cfg, extent, rng);
            n = scene.gaussians.size();
            pull_params(p_mu, p_ls, p_qt, p_cl, p_op);
            a_mu = {};
            a_ls = {};
            a_qt = {};
            a_cl = {};
            a_op = {};
            a_mu.resize(n * 3);
            a_ls.resize(n * 3);
            a_qt.resize(n * 4);
            a_cl.resize(n * 3);
            a_op.resize(n);
            grad_norm_acc.assign(n, 0.0);
            grad_norm_cnt.assign(n, 0);
        }

        if (iter % cfg.report_interval == 0 || iter == cfg.iterations) {
            const double psnr = mean_psnr();
            best_psnr = std::max(best_psnr, psnr);
            report.intervals.push_back({iter, loss, psnr, last_sdf, n});
        }
    }

    report.final_psnr_per_view = per_view_psnr();
    report.final_psnr = std::accumulate(report.final_psnr_per_view.begin(),
                                        report.final_psnr_per_view.end(), 0.0) /
                        static_cast<double>(report.final_psnr_per_view.size());
    report.final_loss = loss;
    report.final_sdf_residual = last_sdf;
    report.final_mean_opacity =
        std::accumulate(scene.gaussians.begin(), scene.gaussians.end(), 0.0,
                        [](double a, const Gaussian3D& g) { return a + g.opacity; }) /
        static_cast<double>(std::max<std::size_t>(1, scene.gaussians.size()));
    std::vector<double> min_scales;
    for (const auto& g : scene.gaussians) min_scales.push_back(g.min_scale());
    std::sort(min_scales.begin(), min_scales.end());
    report.median_min_scale = min_scales.empty() ? 0.0 : min_scales[min_scales.size() / 2];
    report.n_gaussians = scene.gaussians.size();

    return {std::move(scene), std::move(report)};
}

}  // namespace skyforge
