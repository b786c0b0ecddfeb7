#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "skyforge/common.hpp"
#include "skyforge/unet.hpp"
#include "skyforge/weights_io.hpp"

namespace skyforge {

// Variance schedule. alpha_bar is indexed by timestep with the t = 0
// convention alpha_bar[0] = 1 (no noise).
struct NoiseSchedule {
    int T = 1000;
    std::vector<double> beta;       // beta[t] for t in 1..T; beta[0] unused
    std::vector<double> alpha_bar;  // cumulative product, alpha_bar[0] = 1

    static NoiseSchedule linear(int T = 1000, double beta_1 = 1e-4, double beta_T = 0.02) {
        if (T < 1) throw std::invalid_argument("NoiseSchedule: T < 1");
        NoiseSchedule s;
        s.T = T;
        s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
        s.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 1.0);
        for (int t = 1; t <= T; ++t) {
            s.beta[static_cast<std::size_t>(t)] =
                T == 1 ? beta_1 : beta_1 + (beta_T - beta_1) * (t - 1) / (T - 1);
            s.alpha_bar[static_cast<std::size_t>(t)] =
                s.alpha_bar[static_cast<std::size_t>(t) - 1] *
                (1.0 - s.beta[static_cast<std::size_t>(t)]);
        }
        return s;
    }

    nlohmann::json to_json() const {
        return {{"kind", "linear"}, {"T", T}, {"beta_1", beta[1]}, {"beta_T", beta.back()}};
    }
    static NoiseSchedule from_json(const nlohmann::json& j) {
        return linear(j.at("T"), j.at("beta_1"), j.at("beta_T"));
    }
};

// Closed-form forward marginal: z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.
inline std::vector<float> add_noise(const std::vector<float>& z0, int t,
                                    const std::vector<float>& eps, const NoiseSchedule& s) {
    if (t < 0 || t > s.T) throw std::invalid_argument("add_noise: t out of range");
    if (eps.size() != z0.size()) throw std::invalid_argument("add_noise: eps shape mismatch");
    const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
    const float a = static_cast<float>(std::sqrt(ab));
    const float b = static_cast<float>(std::sqrt(1.0 - ab));
    std::vector<float> out(z0.size());
    for (std::size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

// Uniform strictly-increasing timestep subsequence ending at T.
inline std::vector<int> ddim_timesteps(const NoiseSchedule& s, int steps) {
    if (steps < 1 || steps > s.T) throw std::invalid_argument("ddim_timesteps: bad step count");
    std::vector<int> taus;
    for (int k = 1; k <= steps; ++k)
        taus.push_back(static_cast<int>(static_cast<long long>(k) * s.T / steps));
    return taus;  // ascending; sampler walks it backwards
}

// Deterministic DDIM (eta = 0) driven by an epsilon-prediction callback.
// z_T is drawn from the seeded generator, so a fixed (seed, model) pair is
// bit-reproducible.
inline std::vector<float> ddim_sample(
    const std::function<std::vector<float>(const std::vector<float>&, int)>& eps_fn,
    std::size_t numel, const NoiseSchedule& s, int steps, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "ddim"));
    std::vector<float> z(numel);
    for (auto& x : z) x = rng.normal_f();

    const std::vector<int> taus = ddim_timesteps(s, steps);
    for (int k = static_cast<int>(taus.size()) - 1; k >= 0; --k) {
        const int t = taus[static_cast<std::size_t>(k)];
        const int t_prev = k > 0 ? taus[static_cast<std::size_t>(k) - 1] : 0;
        const double ab_t = s.alpha_bar[static_cast<std::size_t>(t)];
        const double ab_p = s.alpha_bar[static_cast<std::size_t>(t_prev)];
        const std::vector<float> eps = eps_fn(z, t);
        if (eps.size() != z.size()) throw std::runtime_error("ddim_sample: eps shape mismatch");
        const double sa = std::sqrt(ab_t), sb = std::sqrt(1.0 - ab_t);
        const double pa = std::sqrt(ab_p), pb = std::sqrt(1.0 - ab_p);
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double z0 = (z[i] - sb * eps[i]) / sa;
            z[i] = static_cast<float>(pa * z0 + pb * eps[i]);
        }
    }
    return z;
}

// One latent training item: flattened z0 grid.
using Latent = std::vector<float>;

struct LdmTrainOptions {
    int iterations = 2000;
    int batch = 8;
    float lr = 1e-3f;
    std::uint64_t seed = 0;
};

struct LdmTrainReport {
    double first_loss = 0.0;
    double final_loss = 0.0;
};

// Base latent diffusion model: denoiser plus the single learned prompt
// embedding that stands in for a text encoder.
struct LdmModel {
    DenoiserNet net;
    nn::Var prompt;  // [cond_embed_dim]

    nn::Var cond_rows(int n) const { return nn::broadcast_rows(prompt, n); }

    void save(const std::filesystem::path& path, const NoiseSchedule& schedule) const {
        std::vector<nn::Parameter> all = net.params();
        all.push_back({"prompt", prompt});
        nlohmann::json hdr{{"kind", "ldm"},
                           {"config", net.config().to_json()},
                           {"schedule", schedule.to_json()}};
        save_weights(path, hdr, all);
    }
    static std::pair<LdmModel, NoiseSchedule> load(const std::filesystem::path& path) {
        WeightsFile wf = load_weights(path);
        LdmModel m;
        m.net.build(DenoiserConfig::from_json(wf.header.at("config")), 0);
        m.prompt = nn::make_var({m.net.config().cond_embed_dim}, true);
        std::vector<nn::Parameter> all = m.net.params();
        all.push_back({"prompt", m.prompt});
        assign_weights(wf, all);
        return {std::move(m), NoiseSchedule::from_json(wf.header.at("schedule"))};
    }
};

// Minimizes || eps - eps_theta(z_t, c_text, t) ||^2 over (z0, t, eps); the
// prompt embedding trains jointly with the denoiser.
inline std::pair<LdmModel, LdmTrainReport> train_ldm(const std::vector<Latent>& latents,
                                                     const nn::Shape& latent_shape,
                                                     const NoiseSchedule& schedule,
                                                     const DenoiserConfig& net_cfg,
                                                     const LdmTrainOptions& opt) {
    if (latents.empty()) throw std::invalid_argument("train_ldm: no latents");
    LdmModel model;
    model.net.build(net_cfg, opt.seed);
    Rng rng(derive_seed(opt.seed, "train_ldm"));
    model.prompt = nn::make_var({net_cfg.cond_embed_dim}, true);
    nn::fill_normal(model.prompt, rng, 0.1f);

    nn::Adam adam(opt.lr);
    std::vector<nn::Var> vars;
    for (auto& p : model.net.params()) vars.push_back(p.var);
    vars.push_back(model.prompt);
    adam.add_params(vars);

    const int per_item = nn::numel(latent_shape) / latent_shape[0];
    LdmTrainReport report;
    for (int iter = 0; iter < opt.iterations; ++iter) {
        const int n = opt.batch;
        nn::Var zt = nn::make_var({n, latent_shape[1], latent_shape[2], latent_shape[3]});
        std::vector<float> eps_all(static_cast<std::size_t>(n) * per_item);
        std::vector<int> ts(static_cast<std::size_t>(n));
        for (int b = 0; b < n; ++b) {
            const Latent& z0 = latents[rng.uniform_index(latents.size())];
            if (static_cast<int>(z0.size()) != per_item)
                throw std::invalid_argument("train_ldm: latent size mismatch");
            const int t = rng.uniform_int(1, schedule.T);
            ts[static_cast<std::size_t>(b)] = t;
            std::vector<float> eps(static_cast<std::size_t>(per_item));
            for (auto& e : eps) e = rng.normal_f();
            const std::vector<float> noisy = add_noise(z0, t, eps, schedule);
            std::copy(noisy.begin(), noisy.end(),
                      zt->v.begin() + static_cast<std::size_t>(b) * per_item);
            std::copy(eps.begin(), eps.end(),
                      eps_all.begin() + static_cast<std::size_t>(b) * per_item);
        }
        nn::Var pred = model.net.forward(zt, ts, model.cond_rows(n));
        nn::Var loss = nn::mse_loss(pred, eps_all);
        if (!std::isfinite(loss->v[0])) throw std::runtime_error("train_ldm: non-finite loss");
        if (iter == 0) report.first_loss = loss->v[0];
        report.final_loss = loss->v[0];
        adam.zero_grad();
        nn::backward(loss);
        adam.step();
    }
    return {std::move(model), report};
}

// Unconditional (prompt-only) DDIM sampling from the base model.
inline Latent sample_ldm(const LdmModel& model, const NoiseSchedule& schedule,
                         const nn::Shape& latent_shape, int steps, std::uint64_t seed) {
    auto eps_fn = [&](const std::vector<float>& z, int t) {
        nn::Var zv = nn::constant(latent_shape, z);
        nn::Var out = model.net.forward(zv, {t}, model.cond_rows(1));
        return out->v;
    };
    return ddim_sample(eps_fn, static_cast<std::size_t>(nn::numel(latent_shape)), schedule,
                       steps, seed);
}

}  // namespace skyforge
