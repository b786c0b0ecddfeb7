#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "skyforge/common.hpp"
#include "skyforge/gaussian.hpp"

using namespace skyforge;

namespace {

Gaussian3D random_gaussian(Rng& rng) {
    Gaussian3D g;
    g.mu = {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    g.scales = {rng.uniform(0.2, 3.0), rng.uniform(0.2, 3.0), rng.uniform(0.2, 3.0)};
    g.rot = Quat{rng.normal(), rng.normal(), rng.normal(), rng.normal()}.normalized();
    g.rgb = {rng.uniform(), rng.uniform(), rng.uniform()};
    g.opacity = rng.uniform(0.1, 1.0);
    return g;
}

// Independent oracle: dense 3x3 products from scratch.
Mat3 brute_force_covariance(const Gaussian3D& g) {
    const Mat3 r = g.rot.to_matrix();
    Mat3 s{};
    s(0, 0) = g.scales.x;
    s(1, 1) = g.scales.y;
    s(2, 2) = g.scales.z;
    return r * s * s * r.transpose();
}

// Dense-solve oracle for the quadratic form via explicit inverse.
double density_oracle(const Gaussian3D& g, const Vec3& x) {
    const Mat3 cov = covariance(g);
    // Adjugate inverse of a 3x3.
    const double det = cov(0, 0) * (cov(1, 1) * cov(2, 2) - cov(1, 2) * cov(2, 1)) -
                       cov(0, 1) * (cov(1, 0) * cov(2, 2) - cov(1, 2) * cov(2, 0)) +
                       cov(0, 2) * (cov(1, 0) * cov(2, 1) - cov(1, 1) * cov(2, 0));
    Mat3 inv;
    inv(0, 0) = (cov(1, 1) * cov(2, 2) - cov(1, 2) * cov(2, 1)) / det;
    inv(0, 1) = (cov(0, 2) * cov(2, 1) - cov(0, 1) * cov(2, 2)) / det;
    inv(0, 2) = (cov(0, 1) * cov(1, 2) - cov(0, 2) * cov(1, 1)) / det;
    inv(1, 0) = (cov(1, 2) * cov(2, 0) - cov(1, 0) * cov(2, 2)) / det;
    inv(1, 1) = (cov(0, 0) * cov(2, 2) - cov(0, 2) * cov(2, 0)) / det;
    inv(1, 2) = (cov(0, 2) * cov(1, 0) - cov(0, 0) * cov(1, 2)) / det;
    inv(2, 0) = (cov(1, 0) * cov(2, 1) - cov(1, 1) * cov(2, 0)) / det;
    inv(2, 1) = (cov(0, 1) * cov(2, 0) - cov(0, 0) * cov(2, 1)) / det;
    inv(2, 2) = (cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0)) / det;
    const Vec3 d = x - g.mu;
    return std::exp(-0.5 * d.dot(inv * d));
}

}  // namespace

TEST_CASE("covariance: isotropic and axis-aligned cases") {
    Gaussian3D g;
    g.scales = {1, 1, 1};
    const Mat3 iso = covariance(g);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            REQUIRE(iso(i, j) == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-12));

    g.scales = {2, 1, 1};
    const Mat3 ax = covariance(g);
    REQUIRE(ax(0, 0) == Catch::Approx(4.0));
    REQUIRE(ax(1, 1) == Catch::Approx(1.0));
    REQUIRE(ax(2, 2) == Catch::Approx(1.0));
}

TEST_CASE("covariance: matches brute-force product and eigenvalues match squared scales") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const Gaussian3D g = random_gaussian(rng);
        const Mat3 a = covariance(g);
        const Mat3 b = brute_force_covariance(g);
        for (int i = 0; i < 9; ++i) REQUIRE(a.m[i] == Catch::Approx(b.m[i]).margin(1e-12));

        // Eigenvalue multiset equals squared scales: check via the
        // characteristic invariants (trace, Frobenius, determinant).
        const double s2[3] = {g.scales.x * g.scales.x, g.scales.y * g.scales.y,
                              g.scales.z * g.scales.z};
        REQUIRE(a(0, 0) + a(1, 1) + a(2, 2) ==
                Catch::Approx(s2[0] + s2[1] + s2[2]).margin(1e-9));
        double frob = 0.0;
        for (int i = 0; i < 9; ++i) frob += a.m[i] * a.m[i];
        REQUIRE(frob == Catch::Approx(s2[0] * s2[0] + s2[1] * s2[1] + s2[2] * s2[2]).margin(1e-9));
    }
}

TEST_CASE("evaluate_density: closed-form points") {
    Gaussian3D g;
    g.mu = {1, 2, 3};
    REQUIRE(evaluate_density(g, g.mu) == 1.0);

    // Unit-scale isotropic Gaussian at distance one along any axis.
    for (int a = 0; a < 3; ++a) {
        Vec3 x = g.mu;
        x[a] += 1.0;
        REQUIRE(evaluate_density(g, x) == Catch::Approx(std::exp(-0.5)).margin(1e-12));
    }
}

TEST_CASE("evaluate_density: matches dense-solve oracle on random Gaussians") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const Gaussian3D g = random_gaussian(rng);
        const Vec3 x{rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-6, 6)};
        REQUIRE(evaluate_density(g, x) == Catch::Approx(density_oracle(g, x)).margin(1e-9));
    }
}

TEST_CASE("evaluate_density: central symmetry and frame invariance") {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const Gaussian3D g = random_gaussian(rng);
        const Vec3 d{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        REQUIRE(std::abs(evaluate_density(g, g.mu + d) - evaluate_density(g, g.mu - d)) < 1e-12);

        // Rotating both the offset and the Gaussian by the same quaternion
        // leaves the density unchanged.
        const Quat q = Quat{rng.normal(), rng.normal(), rng.normal(), rng.normal()}.normalized();
        Gaussian3D g2 = g;
        g2.mu = {0, 0, 0};
        Gaussian3D g3 = g2;
        // Compose rotations: R(q) * R(g.rot) corresponds to quaternion product.
        const Quat qr{q.w * g.rot.w - q.x * g.rot.x - q.y * g.rot.y - q.z * g.rot.z,
                      q.w * g.rot.x + q.x * g.rot.w + q.y * g.rot.z - q.z * g.rot.y,
                      q.w * g.rot.y - q.x * g.rot.z + q.y * g.rot.w + q.z * g.rot.x,
                      q.w * g.rot.z + q.x * g.rot.y - q.y * g.rot.x + q.z * g.rot.w};
        g3.rot = qr;
        REQUIRE(evaluate_density(g2, d) ==
                Catch::Approx(evaluate_density(g3, q.rotate(d))).margin(1e-9));
    }
}

TEST_CASE("gaussian_normal: axis-aligned, rotated, and tie-break cases") {
    Gaussian3D g;
    g.scales = {1, 1, 0.01};
    const Vec3 n = gaussian_normal(g);
    REQUIRE(std::abs(std::abs(n.z) - 1.0) < 1e-12);

    // 90 degrees about x sends the z axis onto the y axis (up to sign).
    g.rot = Quat::from_axis_angle({1, 0, 0}, kPi / 2);
    const Vec3 nr = gaussian_normal(g);
    const Vec3 expect = Quat::from_axis_angle({1, 0, 0}, kPi / 2).rotate({0, 0, 1});
    REQUIRE(std::abs(std::abs(nr.dot(expect)) - 1.0) < 1e-9);

    // Degenerate all-equal scales: lowest axis index wins.
    Gaussian3D tie;
    tie.scales = {1, 1, 1};
    REQUIRE(tie.min_scale_axis() == 0);
    const Vec3 nt = gaussian_normal(tie);
    REQUIRE(nt.x == Catch::Approx(1.0));
    REQUIRE(std::abs(nt.norm() - 1.0) < 1e-12);
}

TEST_CASE("scene serialization round trip preserves all 14 fields") {
    Rng rng(8);
    SceneModel scene;
    scene.bounds = {{-10, -10, 0}, {10, 10, 10}};
    scene.background = {0.1, 0.2, 0.3};
    for (int i = 0; i < 25; ++i) scene.gaussians.push_back(random_gaussian(rng));

    const auto dir = std::filesystem::temp_directory_path() / "skyforge_test_scene";
    std::filesystem::create_directories(dir);
    save_scene(dir / "scene.sgs", scene);
    const SceneModel back = load_scene(dir / "scene.sgs");

    REQUIRE(back.gaussians.size() == scene.gaussians.size());
    for (std::size_t i = 0; i < scene.gaussians.size(); ++i) {
        const auto& a = scene.gaussians[i];
        const auto& b = back.gaussians[i];
        // Values survive the f32 round trip to float precision.
        for (int c = 0; c < 3; ++c) {
            REQUIRE(b.mu[c] == Catch::Approx(a.mu[c]).margin(1e-6));
            REQUIRE(b.scales[c] == Catch::Approx(a.scales[c]).margin(1e-6));
            REQUIRE(b.rgb[c] == Catch::Approx(a.rgb[c]).margin(1e-6));
        }
        REQUIRE(b.opacity == Catch::Approx(a.opacity).margin(1e-6));
        REQUIRE(b.rot.w == Catch::Approx(a.rot.w).margin(1e-6));
    }
    REQUIRE(back.background.y == Catch::Approx(0.2));
    REQUIRE(back.bounds.hi.z == Catch::Approx(10.0));

    // File size follows the record layout: 4-byte count + 14 f32 per record.
    REQUIRE(std::filesystem::file_size(dir / "scene.sgs") == 4 + 25 * 14 * 4);
}
