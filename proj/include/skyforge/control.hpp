#pragma once

#include <vector>

#include "skyforge/codec.hpp"
#include "skyforge/diffusion.hpp"
#include "skyforge/image.hpp"
#include "skyforge/unet.hpp"

namespace skyforge {

// Adds every branch feature to its index-aligned base feature after the
// corresponding zero-layer 1x1 projection. The lists cover the encoder skips
// plus the middle feature as the last element.
inline std::vector<nn::Var> inject_control(const std::vector<nn::Var>& base_features,
                                           const std::vector<nn::Var>& branch_features,
                                           const std::vector<nnmod::Conv>& zero_layers) {
    if (base_features.size() != branch_features.size() ||
        base_features.size() != zero_layers.size())
        throw std::invalid_argument("inject_control: list lengths misaligned");
    std::vector<nn::Var> out;
    out.reserve(base_features.size());
    for (std::size_t i = 0; i < base_features.size(); ++i) {
        if (base_features[i]->shape != branch_features[i]->shape)
            throw std::invalid_argument("inject_control: feature shape mismatch at level " +
                                        std::to_string(i));
        out.push_back(nn::add(base_features[i], zero_layers[i](branch_features[i])));
    }
    return out;
}

// Trainable copy of the base denoiser's encoder and middle blocks, fed by the
// ground-view prior through a small hint encoder, injected into the frozen
// base through zero-initialized 1x1 projections.
class ControlBranch {
public:
    ControlBranch() = default;

    // Copies the encoder weights of `base`; image_size is the prior image
    // resolution (latent_size times the codec downsample factor).
    void build(const DenoiserNet& base, int image_size, std::uint64_t seed) {
        cfg_ = base.config();
        image_size_ = image_size;
        params_.clear();
        nnmod::Registry reg{&params_};
        Rng rng(derive_seed(seed, "control"));
        enc_.init(reg, "", cfg_, rng);

        // Hint pathway: stride-2 convs down to the latent resolution, then a
        // projection onto the stem channel count.
        int hw = image_size, ch = 3;
        int idx = 0;
        while (hw > cfg_.latent_size) {
            const int out = std::min(cfg_.base_channels, ch * 4);
            nnmod::Conv conv;
            conv.init(reg, "hint.down" + std::to_string(idx++), ch, out, 3, 2, rng);
            hint_convs_.push_back(conv);
            ch = out;
            hw /= 2;
        }
        hint_out_.init(reg, "hint.out", ch, cfg_.base_channels * cfg_.channel_mult[0], 3, 1,
                       rng);

        // Zero projections, one per encoder skip plus the middle block.
        std::vector<int> site_channels;
        site_channels.push_back(cfg_.base_channels * cfg_.channel_mult[0]);  // stem
        for (int m : cfg_.channel_mult) site_channels.push_back(cfg_.base_channels * m);
        site_channels.push_back(cfg_.base_channels * cfg_.channel_mult.back());  // middle
        for (std::size_t i = 0; i < site_channels.size(); ++i) {
            nnmod::Conv zc;
            zc.init(reg, "zero" + std::to_string(i), site_channels[i], site_channels[i], 1, 1,
                    rng, /*zero=*/true);
            zero_convs_.push_back(zc);
        }

        copy_encoder_weights(base);
    }

    // Branch encoder weights start as an exact copy of the base encoder.
    void copy_encoder_weights(const DenoiserNet& base) {
        std::map<std::string, const nn::Var*> base_by_name;
        for (const auto& p : base.params()) base_by_name[p.name] = &p.var;
        for (auto& p : params_) {
            auto it = base_by_name.find(p.name);
            if (it != base_by_name.end() && (*it->second)->shape == p.var->shape)
                p.var->v = (*it->second)->v;
        }
    }

    nn::Var encode_hint(const nn::Var& prior_images) const {
        nn::Var h = prior_images;
        for (const auto& c : hint_convs_) h = nn::silu(c(h));
        return hint_out_(h);
    }

    // Raw branch features, index-aligned with the base encoder's skip list
    // plus middle.
    std::vector<nn::Var> run(const nn::Var& z, const std::vector<int>& t, const nn::Var& cond,
                             const nn::Var& prior_images, bool st_mode = false) const {
        const nn::Var hint = encode_hint(prior_images);
        EncoderStack::Features f = enc_.run(z, t, cond, st_mode, &hint);
        std::vector<nn::Var> feats = f.skips;
        feats.push_back(f.middle);
        return feats;
    }

    const std::vector<nnmod::Conv>& zero_layers() const { return zero_convs_; }
    std::vector<nn::Parameter>& params() { return params_; }
    const std::vector<nn::Parameter>& params() const { return params_; }
    int image_size() const { return image_size_; }
    void set_trainable(bool t) {
        for (auto& p : params_) {
            p.var->requires_grad = t;
            if (t) p.var->ensure_grad();
        }
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::json hdr{{"kind", "acm"},
                           {"config", cfg_.to_json()},
                           {"image_size", image_size_}};
        save_weights(path, hdr, params_);
    }
    static ControlBranch load(const std::filesystem::path& path, const DenoiserNet& base) {
        WeightsFile wf = load_weights(path);
        ControlBranch b;
        b.build(base, wf.header.at("image_size"), 0);
        assign_weights(wf, b.params_);
        return b;
    }

private:
    DenoiserConfig cfg_;
    int image_size_ = 64;
    std::vector<nn::Parameter> params_;
    EncoderStack enc_;
    std::vector<nnmod::Conv> hint_convs_;
    nnmod::Conv hint_out_;
    std::vector<nnmod::Conv> zero_convs_;
};

// Full control-conditioned denoiser forward: base encoder features plus
// zero-projected branch features, then the base decoder. The branch runs in
// spatial mode even when the base attends across frames.
inline nn::Var acm_forward(const DenoiserNet& base, const ControlBranch& branch,
                           const nn::Var& z, const std::vector<int>& t, const nn::Var& cond,
                           const nn::Var& priors, bool st_mode = false) {
    EncoderStack::Features f = base.encoder().run(z, t, cond, st_mode);
    std::vector<nn::Var> base_feats = f.skips;
    base_feats.push_back(f.middle);
    const std::vector<nn::Var> branch_feats = branch.run(z, t, cond, priors, false);
    std::vector<nn::Var> injected = inject_control(base_feats, branch_feats,
                                                   branch.zero_layers());
    f.middle = injected.back();
    injected.pop_back();
    f.skips = std::move(injected);
    return base.decode(std::move(f), st_mode);
}

struct AcmTrainOptions {
    int iterations = 1500;
    int batch = 8;
    float lr = 1e-3f;
    std::uint64_t seed = 0;
};

struct AcmTrainReport {
    double first_loss = 0.0;
    double final_loss = 0.0;
};

// One paired training item: ground-image latent plus its rendered prior.
struct ControlItem {
    Latent latent;
    Image prior;
};

// Trains the control branch with the base denoiser and prompt frozen; only
// branch parameters (copy blocks, hint encoder, zero layers) receive updates.
inline AcmTrainReport train_acm(const std::vector<ControlItem>& items, LdmModel& base,
                                ControlBranch& branch, const NoiseSchedule& schedule,
                                const nn::Shape& latent_shape, const AcmTrainOptions& opt) {
    if (items.empty()) throw std::invalid_argument("train_acm: no paired items");
    for (const auto& it : items)
        if (it.prior.width != branch.image_size() || it.prior.height != branch.image_size())
            throw std::invalid_argument("train_acm: prior resolution mismatch");

    base.net.set_trainable(false);
    base.prompt->requires_grad = false;
    branch.set_trainable(true);

    nn::Adam adam(opt.lr);
    std::vector<nn::Var> vars;
    for (auto& p : branch.params()) vars.push_back(p.var);
    adam.add_params(vars);

    Rng rng(derive_seed(opt.seed, "train_acm"));
    const int per_item = nn::numel(latent_shape) / latent_shape[0];
    AcmTrainReport report;
    for (int iter = 0; iter < opt.iterations; ++iter) {
        const int n = opt.batch;
        nn::Var zt = nn::make_var({n, latent_shape[1], latent_shape[2], latent_shape[3]});
        std::vector<float> eps_all(static_cast<std::size_t>(n) * per_item);
        std::vector<int> ts(static_cast<std::size_t>(n));
        std::vector<Image> priors;
        for (int b = 0; b < n; ++b) {
            const ControlItem& item = items[rng.uniform_index(items.size())];
            const int t = rng.uniform_int(1, schedule.T);
            ts[static_cast<std::size_t>(b)] = t;
            std::vector<float> eps(static_cast<std::size_t>(per_item));
            for (auto& e : eps) e = rng.normal_f();
            const std::vector<float> noisy = add_noise(item.latent, t, eps, schedule);
            std::copy(noisy.begin(), noisy.end(),
                      zt->v.begin() + static_cast<std::size_t>(b) * per_item);
            std::copy(eps.begin(), eps.end(),
                      eps_all.begin() + static_cast<std::size_t>(b) * per_item);
            priors.push_back(item.prior);
        }
        nn::Var prior_var = LatentCodec::image_to_var(priors);
        nn::Var pred = acm_forward(base.net, branch, zt, ts, base.cond_rows(n), prior_var);
        nn::Var loss = nn::mse_loss(pred, eps_all);
        if (!std::isfinite(loss->v[0])) throw std::runtime_error("train_acm: non-finite loss");
        if (iter == 0) report.first_loss = loss->v[0];
        report.final_loss = loss->v[0];
        adam.zero_grad();
        nn::backward(loss);
        adam.step();
    }
    return report;
}

// Control-conditioned evaluation loss on a fixed item set with a seeded
// (t, eps) draw; used by the control-relevance probe.
inline double acm_eval_loss(const std::vector<ControlItem>& items, const LdmModel& base,
                            const ControlBranch& branch, const NoiseSchedule& schedule,
                            const nn::Shape& latent_shape, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "acm_eval"));
    const int per_item = nn::numel(latent_shape) / latent_shape[0];
    double acc = 0.0;
    for (const auto& item : items) {
        const int t = rng.uniform_int(1, schedule.T);
        std::vector<float> eps(static_cast<std::size_t>(per_item));
        for (auto& e : eps) e = rng.normal_f();
        const std::vector<float> noisy = add_noise(item.latent, t, eps, schedule);
        nn::Var zt = nn::constant({1, latent_shape[1], latent_shape[2], latent_shape[3]}, noisy);
        nn::Var prior_var = LatentCodec::image_to_var({item.prior});
        nn::Var pred = acm_forward(base.net, branch, zt, {t}, base.cond_rows(1), prior_var);
        nn::Var loss = nn::mse_loss(pred, eps);
        acc += loss->v[0];
    }
    return acc / static_cast<double>(items.size());
}

// Generates the first ground frame: control-conditioned DDIM sample, decoded.
inline Image generate_first_frame(const LdmModel& base, const ControlBranch& branch,
                                  const LatentCodec& codec, const Image& prior,
                                  const NoiseSchedule& schedule, int steps,
                                  std::uint64_t seed) {
    const nn::Shape shape = codec.latent_shape(1);
    nn::Var prior_var = LatentCodec::image_to_var({prior});
    auto eps_fn = [&](const std::vector<float>& z, int t) {
        nn::Var zv = nn::constant(shape, z);
        nn::Var out = acm_forward(base.net, branch, zv, {t}, base.cond_rows(1), prior_var);
        return out->v;
    };
    const Latent z0 = ddim_sample(eps_fn, static_cast<std::size_t>(nn::numel(shape)), schedule,
                                  steps, seed);
    return codec.decode_latent(z0);
}

}  // namespace skyforge
