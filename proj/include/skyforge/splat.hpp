#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "skyforge/camera.hpp"
#include "skyforge/gaussian.hpp"
#include "skyforge/image.hpp"

namespace skyforge {

// Rasterization guards: alpha clamp and low-pass dilation keep the math away
// from division blow-ups; the skip/termination thresholds bound work.
inline constexpr double kAlphaClamp = 0.999;
inline constexpr double kAlphaSkip = 1.0 / 255.0;
inline constexpr double kTransmittanceEps = 1e-4;
inline constexpr double kCovDilation = 0.3;  // px^2, added isotropically
inline constexpr double kNearPlane = 0.01;   // meters
inline constexpr double kCullMargin = 1.3;   // frame diagonals outside the frame

// A 3D Gaussian after projection to the image plane.
struct Gaussian2D {
    Vec2 mean_px;
    double cov_a = 1.0, cov_b = 0.0, cov_c = 1.0;  // [[a, b], [b, c]], px^2
    double depth = 0.0;                            // camera-frame z of mu
    Vec3 rgb;
    double opacity = 0.0;

    double det() const { return cov_a * cov_c - cov_b * cov_b; }
};

// Projects one Gaussian: pinhole mean, EWA covariance J W Sigma W^T J^T plus
// the dilation floor. Returns nullopt when culled (behind the near plane or
// far outside the frame).
inline std::optional<Gaussian2D> project_gaussian(const Gaussian3D& g, const CameraPose& cam) {
    const Mat3 w = cam.rotation_world_to_cam();
    const Vec3 t = w * (g.mu - cam.position);
    if (t.z <= kNearPlane) return std::nullopt;

    const Intrinsics& k = cam.intrinsics;
    const double fx = k.fx(), fy = k.fy();
    const double u = fx * t.x / t.z + k.cx();
    const double v = fy * t.y / t.z + k.cy();

    const double diag = std::sqrt(double(k.width_px) * k.width_px +
                                  double(k.height_px) * k.height_px);
    const double margin = kCullMargin * diag;
    if (u < -margin || u > k.width_px + margin || v < -margin || v > k.height_px + margin)
        return std::nullopt;

    // U = J W maps world offsets to pixel offsets at mu.
    const double jz = 1.0 / t.z;
    const double j00 = fx * jz, j02 = -fx * t.x * jz * jz;
    const double j11 = fy * jz, j12 = -fy * t.y * jz * jz;
    double U[2][3];
    for (int c = 0; c < 3; ++c) {
        U[0][c] = j00 * w(0, c) + j02 * w(2, c);
        U[1][c] = j11 * w(1, c) + j12 * w(2, c);
    }

    const Mat3 sigma = covariance(g);
    double su[3][2];  // Sigma U^T
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 2; ++c)
            su[r][c] = sigma(r, 0) * U[c][0] + sigma(r, 1) * U[c][1] + sigma(r, 2) * U[c][2];

    Gaussian2D out;
    out.mean_px = {u, v};
    out.cov_a = U[0][0] * su[0][0] + U[0][1] * su[1][0] + U[0][2] * su[2][0] + kCovDilation;
    out.cov_b = U[0][0] * su[0][1] + U[0][1] * su[1][1] + U[0][2] * su[2][1];
    out.cov_c = U[1][0] * su[0][1] + U[1][1] * su[1][1] + U[1][2] * su[2][1] + kCovDilation;
    out.depth = t.z;
    out.rgb = g.rgb;
    out.opacity = g.opacity;
    return out;
}

namespace detail {

// Effective alpha of one 2D Gaussian at a pixel, before the skip test.
inline double effective_alpha(const Gaussian2D& g, const Vec2& pixel) {
    const double det = g.det();
    if (det <= 0.0) return 0.0;
    const double inv_det = 1.0 / det;
    const double dx = pixel.x - g.mean_px.x;
    const double dy = pixel.y - g.mean_px.y;
    const double q = inv_det * (g.cov_c * dx * dx - 2.0 * g.cov_b * dx * dy + g.cov_a * dy * dy);
    return std::min(g.opacity * std::exp(-0.5 * q), kAlphaClamp);
}

}  // namespace detail

struct CompositeDetail {
    Vec3 rgb;
    std::vector<double> weights;  // per input Gaussian; 0 when skipped
    double background_weight = 1.0;
};

// Front-to-back alpha blending over a depth-sorted list. The background
// weight is computed as 1 minus the accumulated weight so the per-pixel
// weights (including background) sum to 1 exactly.
inline CompositeDetail composite_detail(std::span<const Gaussian2D> sorted, const Vec2& pixel,
                                        const Vec3& background) {
    CompositeDetail out;
    out.weights.assign(sorted.size(), 0.0);
    Vec3 color{};
    double transmittance = 1.0;
    double weight_sum = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const double alpha = detail::effective_alpha(sorted[i], pixel);
        if (alpha < kAlphaSkip) continue;
        const double w = alpha * transmittance;
        color += sorted[i].rgb * w;
        out.weights[i] = w;
        weight_sum += w;
        transmittance *= 1.0 - alpha;
        if (transmittance < kTransmittanceEps) break;
    }
    out.background_weight = 1.0 - weight_sum;
    out.rgb = color + background * out.background_weight;
    return out;
}

inline Vec3 composite(std::span<const Gaussian2D> sorted, const Vec2& pixel,
                      const Vec3& background) {
    return composite_detail(sorted, pixel, background).rgb;
}

// Full-precision render buffers; images for I/O are derived views.
struct RenderOutput {
    int width = 0, height = 0;
    std::vector<double> rgb;    // w*h*3 interleaved
    std::vector<double> alpha;  // w*h, accumulated gaussian weight
    std::vector<double> depth;  // w*h, alpha-weighted expected depth (diagnostic)

    Image rgb_image() const {
        Image img(width, height, 3);
        for (std::size_t i = 0; i < rgb.size(); ++i)
            img.data[i] = static_cast<float>(std::clamp(rgb[i], 0.0, 1.0));
        return img;
    }
};

namespace detail {

struct ProjectedScene {
    std::vector<Gaussian2D> splats;     // depth-sorted, stable
    std::vector<int> source;            // scene index per splat
    std::vector<double> radius;         // conservative per-splat pixel radius
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<int>> tile_lists;  // splat indices in sorted order
};

inline constexpr int kTileSize = 16;

// Radius beyond which effective alpha falls under the skip threshold along
// any direction, so tile binning reproduces the per-pixel skip exactly.
inline double splat_radius(const Gaussian2D& g) {
    const double o = std::min(g.opacity, kAlphaClamp);
    if (o * 255.0 <= 1.0) return -1.0;  // never reaches the skip threshold
    const double q_max = 2.0 * std::log(255.0 * o);
    const double mid = 0.5 * (g.cov_a + g.cov_c);
    const double d = std::sqrt(std::max(0.0, mid * mid - g.det()));
    const double lambda_max = mid + d;
    return std::sqrt(q_max * lambda_max) + 1.0;  // +1 px covers pixel-center offsets
}

inline ProjectedScene project_scene(const SceneModel& scene, const CameraPose& cam) {
    ProjectedScene p;
    std::vector<std::pair<Gaussian2D, int>> projected;
    projected.reserve(scene.gaussians.size());
    for (std::size_t i = 0; i < scene.gaussians.size(); ++i)
        if (auto g2 = project_gaussian(scene.gaussians[i], cam))
            projected.emplace_back(*g2, static_cast<int>(i));

    std::stable_sort(projected.begin(), projected.end(),
                     [](const auto& a, const auto& b) { return a.first.depth < b.first.depth; });

    const int w = cam.intrinsics.width_px, h = cam.intrinsics.height_px;
    p.tiles_x = (w + kTileSize - 1) / kTileSize;
    p.tiles_y = (h + kTileSize - 1) / kTileSize;
    p.tile_lists.resize(static_cast<std::size_t>(p.tiles_x) * p.tiles_y);
    p.splats.reserve(projected.size());
    p.source.reserve(projected.size());
    for (std::size_t s = 0; s < projected.size(); ++s) {
        const Gaussian2D& g = projected[s].first;
        p.splats.push_back(g);
        p.source.push_back(projected[s].second);
        const double r = splat_radius(g);
        p.radius.push_back(r);
        if (r < 0.0) continue;
        const int tx0 = std::clamp(static_cast<int>((g.mean_px.x - r) / kTileSize), 0, p.tiles_x - 1);
        const int tx1 = std::clamp(static_cast<int>((g.mean_px.x + r) / kTileSize), 0, p.tiles_x - 1);
        const int ty0 = std::clamp(static_cast<int>((g.mean_px.y - r) / kTileSize), 0, p.tiles_y - 1);
        const int ty1 = std::clamp(static_cast<int>((g.mean_px.y + r) / kTileSize), 0, p.tiles_y - 1);
        if (g.mean_px.x + r < 0 || g.mean_px.x - r > w || g.mean_px.y + r < 0 ||
            g.mean_px.y - r > h)
            continue;
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                p.tile_lists[static_cast<std::size_t>(ty) * p.tiles_x + tx].push_back(
                    static_cast<int>(s));
    }
    return p;
}

}  // namespace detail

// Renders the scene from a camera. Deterministic: global stable depth sort,
// fixed per-pixel accumulation order.
inline RenderOutput render(const SceneModel& scene, const CameraPose& cam) {
    const int w = cam.intrinsics.width_px, h = cam.intrinsics.height_px;
    RenderOutput out;
    out.width = w;
    out.height = h;
    out.rgb.assign(static_cast<std::size_t>(w) * h * 3, 0.0);
    out.alpha.assign(static_cast<std::size_t>(w) * h, 0.0);
    out.depth.assign(static_cast<std::size_t>(w) * h, 0.0);

    const detail::ProjectedScene p = detail::project_scene(scene, cam);

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto& list =
                p.tile_lists[static_cast<std::size_t>(y / detail::kTileSize) * p.tiles_x +
                             x / detail::kTileSize];
            const Vec2 pixel{x + 0.5, y + 0.5};
            Vec3 color{};
            double transmittance = 1.0;
            double weight_sum = 0.0;
            double depth_acc = 0.0;
            for (const int si : list) {
                const Gaussian2D& g = p.splats[static_cast<std::size_t>(si)];
                const double alpha = detail::effective_alpha(g, pixel);
                if (alpha < kAlphaSkip) continue;
                const double wgt = alpha * transmittance;
                color += g.rgb * wgt;
                depth_acc += g.depth * wgt;
                weight_sum += wgt;
                transmittance *= 1.0 - alpha;
                if (transmittance < kTransmittanceEps) break;
            }
            const double bg_w = 1.0 - weight_sum;
            color += scene.background * bg_w;
            const std::size_t px = static_cast<std::size_t>(y) * w + x;
            out.rgb[px * 3 + 0] = color.x;
            out.rgb[px * 3 + 1] = color.y;
            out.rgb[px * 3 + 2] = color.z;
            out.alpha[px] = weight_sum;
            out.depth[px] = depth_acc;
        }
    }
    return out;
}

// Ground-view prior: identical mechanics to render, returned as an image in
// [0,1] with the scene background composited in.
inline Image render_prior(const SceneModel& scene, const CameraPose& ground_pose) {
    return render(scene, ground_pose).rgb_image();
}

// Gradients of a scalar loss with respect to every Gaussian field and the
// background color.
struct RenderGrads {
    std::vector<Vec3> d_mu;
    std::vector<Vec3> d_scales;
    std::vector<std::array<double, 4>> d_quat;  // w, x, y, z (raw, pre-normalization)
    std::vector<Vec3> d_rgb;
    std::vector<double> d_opacity;
    Vec3 d_background;

    explicit RenderGrads(std::size_t n = 0)
        : d_mu(n), d_scales(n), d_quat(n, {0, 0, 0, 0}), d_rgb(n), d_opacity(n) {}
};

namespace detail {

// Per-splat screen-space gradient accumulators.
struct SplatGrad {
    Vec2 d_mean{};
    double d_cov_a = 0.0, d_cov_b = 0.0, d_cov_c = 0.0;
    Vec3 d_rgb{};
    double d_opacity = 0.0;
};

// dR/dq for a unit quaternion, column-major loops kept explicit.
inline void quat_rotation_grad(const Quat& q, const Mat3& g_r, std::array<double, 4>& g_q) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    const Mat3 dw = [&] {
        Mat3 m;
        m.m = {0, -z, y, z, 0, -x, -y, x, 0};
        return m;
    }();
    const Mat3 dx = [&] {
        Mat3 m;
        m.m = {0, y, z, y, -2 * x, -w, z, w, -2 * x};
        return m;
    }();
    const Mat3 dy = [&] {
        Mat3 m;
        m.m = {-2 * y, x, w, x, 0, z, -w, z, -2 * y};
        return m;
    }();
    const Mat3 dz = [&] {
        Mat3 m;
        m.m = {-2 * z, -w, x, w, -2 * z, y, x, y, 0};
        return m;
    }();
    for (int i = 0; i < 9; ++i) {
        g_q[0] += 2.0 * dw.m[i] * g_r.m[i];
        g_q[1] += 2.0 * dx.m[i] * g_r.m[i];
        g_q[2] += 2.0 * dy.m[i] * g_r.m[i];
        g_q[3] += 2.0 * dz.m[i] * g_r.m[i];
    }
}

}  // namespace detail

// Backward pass of render(): dL_drgb is the per-pixel loss gradient (w*h*3,
// same layout as RenderOutput::rgb). Replays the forward decisions exactly.
inline RenderGrads render_backward(const SceneModel& scene, const CameraPose& cam,
                                   const std::vector<double>& dL_drgb) {
    const int w = cam.intrinsics.width_px, h = cam.intrinsics.height_px;
    if (dL_drgb.size() != static_cast<std::size_t>(w) * h * 3)
        throw std::invalid_argument("render_backward: gradient shape mismatch");

    const detail::ProjectedScene p = detail::project_scene(scene, cam);
    RenderGrads grads(scene.gaussians.size());
    std::vector<detail::SplatGrad> sg(p.splats.size());

    struct Entry {
        int splat;
        double alpha;
        double transmittance;  // before this splat
        double q;              // Mahalanobis form at the pixel
        double gexp;           // exp(-q/2)
        bool clamped;
        Vec2 delta;
    };
    std::vector<Entry> entries;

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto& list =
                p.tile_lists[static_cast<std::size_t>(y / detail::kTileSize) * p.tiles_x +
                             x / detail::kTileSize];
            const Vec2 pixel{x + 0.5, y + 0.5};
            const std::size_t px = static_cast<std::size_t>(y) * w + x;
            const Vec3 g_c{dL_drgb[px * 3 + 0], dL_drgb[px * 3 + 1], dL_drgb[px * 3 + 2]};
            if (g_c.x == 0.0 && g_c.y == 0.0 && g_c.z == 0.0) continue;

            entries.clear();
            double transmittance = 1.0;
            for (const int si : list) {
                const Gaussian2D& g = p.splats[static_cast<std::size_t>(si)];
                const double det = g.det();
                if (det <= 0.0) continue;
                const double inv_det = 1.0 / det;
                const double dx = pixel.x - g.mean_px.x;
                const double dy = pixel.y - g.mean_px.y;
                const double q =
                    inv_det * (g.cov_c * dx * dx - 2.0 * g.cov_b * dx * dy + g.cov_a * dy * dy);
                const double gexp = std::exp(-0.5 * q);
                const double raw = g.opacity * gexp;
                const double alpha = std::min(raw, kAlphaClamp);
                if (alpha < kAlphaSkip) continue;
                entries.push_back({si, alpha, transmittance, q, gexp, raw > kAlphaClamp,
                                   Vec2{dx, dy}});
                transmittance *= 1.0 - alpha;
                if (transmittance < kTransmittanceEps) break;
            }

            // C = sum w_i c_i + (1 - sum w_i) b, so dC/dw_i = c_i - b.
            grads.d_background += g_c * (1.0 - std::accumulate(
                entries.begin(), entries.end(), 0.0,
                [](double acc, const Entry& e) { return acc + e.alpha * e.transmittance; }));

            Vec3 suffix{};  // sum over later splats of w_i * (c_i - b)
            for (std::size_t k = entries.size(); k-- > 0;) {
                const Entry& e = entries[k];
                const Gaussian2D& g = p.splats[static_cast<std::size_t>(e.splat)];
                auto& acc = sg[static_cast<std::size_t>(e.splat)];
                const double w_k = e.alpha * e.transmittance;
                const Vec3 cmb = g.rgb - scene.background;

                acc.d_rgb += g_c * w_k;
                const double g_alpha =
                    g_c.dot(cmb * e.transmittance - suffix * (1.0 / (1.0 - e.alpha)));
                suffix += cmb * w_k;

                if (e.clamped) continue;  // flat region of the alpha clamp
                acc.d_opacity += g_alpha * e.gexp;
                const double g_gexp = g_alpha * g.opacity;
                // gexp depends on the quadratic form q = d^T A d with A = cov^-1.
                const double g_q = -0.5 * g_gexp * e.gexp;
                const double inv_det = 1.0 / g.det();
                const double adx = inv_det * (g.cov_c * e.delta.x - g.cov_b * e.delta.y);
                const double ady = inv_det * (g.cov_a * e.delta.y - g.cov_b * e.delta.x);
                // dq/dmean = -2 A d
                acc.d_mean.x += g_q * (-2.0 * adx);
                acc.d_mean.y += g_q * (-2.0 * ady);
                // dq/dcov = -(A d)(A d)^T
                acc.d_cov_a += g_q * (-adx * adx);
                acc.d_cov_b += g_q * (-2.0 * adx * ady);  // both off-diagonal slots
                acc.d_cov_c += g_q * (-ady * ady);
            }
        }
    }

    // Chain screen-space gradients back through the projection per splat.
    const Mat3 wm = cam.rotation_world_to_cam();
    const Intrinsics& k = cam.intrinsics;
    const double fx = k.fx(), fy = k.fy();
    for (std::size_t s = 0; s < p.splats.size(); ++s) {
        const detail::SplatGrad& a = sg[s];
        const int src = p.source[s];
        const Gaussian3D& g = scene.gaussians[static_cast<std::size_t>(src)];
        grads.d_rgb[static_cast<std::size_t>(src)] += a.d_rgb;
        grads.d_opacity[static_cast<std::size_t>(src)] += a.d_opacity;

        const bool has_geom = a.d_mean.x != 0.0 || a.d_mean.y != 0.0 || a.d_cov_a != 0.0 ||
                              a.d_cov_b != 0.0 || a.d_cov_c != 0.0;
        if (!has_geom) continue;

        const Vec3 t = wm * (g.mu - cam.position);
        const double jz = 1.0 / t.z;
        const double j00 = fx * jz, j02 = -fx * t.x * jz * jz;
        const double j11 = fy * jz, j12 = -fy * t.y * jz * jz;
        double U[2][3];
        for (int c = 0; c < 3; ++c) {
            U[0][c] = j00 * wm(0, c) + j02 * wm(2, c);
            U[1][c] = j11 * wm(1, c) + j12 * wm(2, c);
        }
        const Quat qn = g.rot.normalized();
        const Mat3 r3 = qn.to_matrix();
        const Mat3 sigma = covariance(g);

        // Screen covariance gradient as a symmetric 2x2.
        const double G2[2][2] = {{a.d_cov_a, 0.5 * a.d_cov_b}, {0.5 * a.d_cov_b, a.d_cov_c}};

        // dL/dSigma = U^T G2 U (3x3 symmetric).
        Mat3 g_sigma;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double v = 0.0;
                for (int r = 0; r < 2; ++r)
                    for (int c = 0; c < 2; ++c) v += U[r][i] * G2[r][c] * U[c][j];
                g_sigma(i, j) = v;
            }

        // dL/dU = 2 G2 U Sigma.
        double g_u[2][3];
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 3; ++c) {
                double v = 0.0;
                for (int m = 0; m < 2; ++m)
                    for (int n = 0; n < 3; ++n) v += 2.0 * G2[r][m] * U[m][n] * sigma(n, c);
                g_u[r][c] = v;
            }

        // U = J W: pick up J's entries.
        double g_j00 = 0.0, g_j02 = 0.0, g_j11 = 0.0, g_j12 = 0.0;
        for (int c = 0; c < 3; ++c) {
            g_j00 += g_u[0][c] * wm(0, c);
            g_j02 += g_u[0][c] * wm(2, c);
            g_j11 += g_u[1][c] * wm(1, c);
            g_j12 += g_u[1][c] * wm(2, c);
        }

        // Mean projection shares J: dmean/dt = J.
        Vec3 g_t{j00 * a.d_mean.x, j11 * a.d_mean.y, j02 * a.d_mean.x + j12 * a.d_mean.y};
        // J's own dependence on t.
        const double jz2 = jz * jz, jz3 = jz2 * jz;
        g_t.x += g_j02 * (-fx * jz2);
        g_t.y += g_j12 * (-fy * jz2);
        g_t.z += g_j00 * (-fx * jz2) + g_j02 * (2.0 * fx * t.x * jz3) + g_j11 * (-fy * jz2) +
                 g_j12 * (2.0 * fy * t.y * jz3);

        grads.d_mu[static_cast<std::size_t>(src)] += wm.transpose() * g_t;

        // Sigma = R diag(s^2) R^T.
        const Vec3 s2{g.scales.x * g.scales.x, g.scales.y * g.scales.y, g.scales.z * g.scales.z};
        for (int axis = 0; axis < 3; ++axis) {
            const Vec3 col = r3.column(axis);
            const double rta = col.dot(g_sigma * col);
            grads.d_scales[static_cast<std::size_t>(src)][axis] += 2.0 * g.scales[axis] * rta;
        }
        // dL/dR = 2 gSigma R diag(s^2).
        Mat3 g_r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double v = 0.0;
                for (int m = 0; m < 3; ++m) v += 2.0 * g_sigma(i, m) * r3(m, j) * s2[j];
                g_r(i, j) = v;
            }
        std::array<double, 4> g_qn{0, 0, 0, 0};
        detail::quat_rotation_grad(qn, g_r, g_qn);
        // Through the normalization q_hat = q / |q|.
        const double qnorm = g.rot.norm();
        const double qdot = g_qn[0] * qn.w + g_qn[1] * qn.x + g_qn[2] * qn.y + g_qn[3] * qn.z;
        auto& gq = grads.d_quat[static_cast<std::size_t>(src)];
        gq[0] += (g_qn[0] - qdot * qn.w) / qnorm;
        gq[1] += (g_qn[1] - qdot * qn.x) / qnorm;
        gq[2] += (g_qn[2] - qdot * qn.y) / qnorm;
        gq[3] += (g_qn[3] - qdot * qn.z) / qnorm;
    }
    return grads;
}

}  // namespace skyforge
