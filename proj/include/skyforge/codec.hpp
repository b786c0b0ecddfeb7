#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "skyforge/image.hpp"
#include "skyforge/tensor.hpp"
#include "skyforge/unet.hpp"
#include "skyforge/weights_io.hpp"

namespace skyforge {

struct CodecConfig {
    int image_size = 64;
    int factor = 4;  // spatial downsample, power of two
    int latent_channels = 4;
    int base_channels = 16;
    int groups = 4;

    int n_down() const {
        int n = 0;
        for (int f = factor; f > 1; f /= 2) ++n;
        return n;
    }
    nlohmann::json to_json() const {
        return {{"image_size", image_size},
                {"factor", factor},
                {"latent_channels", latent_channels},
                {"base_channels", base_channels},
                {"groups", groups}};
    }
    static CodecConfig from_json(const nlohmann::json& j) {
        CodecConfig c;
        c.image_size = j.at("image_size");
        c.factor = j.at("factor");
        c.latent_channels = j.at("latent_channels");
        c.base_channels = j.at("base_channels");
        c.groups = j.at("groups");
        return c;
    }
};

// Small convolutional autoencoder standing in for a pretrained latent codec.
// latent_scale maps raw encoder outputs to roughly unit variance for the
// diffusion stack; it is measured after training and stored with the weights.
class LatentCodec {
public:
    LatentCodec() = default;
    LatentCodec(const CodecConfig& cfg, std::uint64_t seed) { build(cfg, seed); }

    void build(const CodecConfig& cfg, std::uint64_t seed) {
        cfg_ = cfg;
        params_.clear();
        nnmod::Registry reg{&params_};
        Rng rng(derive_seed(seed, "codec"));
        // Replicate padding keeps borders consistent with the interior, so
        // spatially constant inputs stay exactly representable.
        const auto pad = nn::Pad::kReplicate;
        const int C = cfg.base_channels;
        enc_in_.init(reg, "enc.in", 3, C, 3, 1, rng, false, pad);
        enc_down_.resize(static_cast<std::size_t>(cfg.n_down()));
        int ch = C;
        for (std::size_t i = 0; i < enc_down_.size(); ++i) {
            const int out = ch * 2;
            enc_down_[i].init(reg, "enc.down" + std::to_string(i), ch, out, 3, 2, rng, false, pad);
            ch = out;
        }
        enc_out_.init(reg, "enc.out", ch, cfg.latent_channels, 3, 1, rng, false, pad);
        dec_in_.init(reg, "dec.in", cfg.latent_channels, ch, 3, 1, rng, false, pad);
        dec_up_.resize(enc_down_.size());
        for (std::size_t i = 0; i < dec_up_.size(); ++i) {
            const int out = ch / 2;
            dec_up_[i].init(reg, "dec.up" + std::to_string(i), ch, out, 3, 1, rng, false, pad);
            ch = out;
        }
        dec_out_.init(reg, "dec.out", ch, 3, 3, 1, rng, false, pad);
    }

    // images [N,3,H,W] in [0,1] -> latents [N,c,H/f,W/f] (unscaled).
    nn::Var encode(const nn::Var& images) const {
        nn::Var h = nn::silu(enc_in_(images));
        for (const auto& d : enc_down_) h = nn::silu(d(h));
        return enc_out_(h);
    }

    // latents (unscaled) -> images [N,3,H,W] in [0,1].
    nn::Var decode(const nn::Var& latents) const {
        nn::Var h = nn::silu(dec_in_(latents));
        for (const auto& u : dec_up_) h = nn::silu(u(nn::upsample_nearest2x(h)));
        return nn::sigmoid(dec_out_(h));
    }

    // Scaled variants used by the diffusion stack.
    std::vector<float> encode_image(const Image& img) const {
        nn::Var z = encode(image_to_var({img}));
        std::vector<float> out(z->v.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = z->v[i] * latent_scale;
        return out;
    }
    Image decode_latent(const std::vector<float>& z) const {
        const int hs = cfg_.image_size / cfg_.factor;
        nn::Var latent = nn::constant({1, cfg_.latent_channels, hs, hs}, z);
        for (auto& x : latent->v) x /= latent_scale;
        nn::Var img = decode(latent);
        return var_to_image(img, 0);
    }

    nn::Shape latent_shape(int n = 1) const {
        const int hs = cfg_.image_size / cfg_.factor;
        return {n, cfg_.latent_channels, hs, hs};
    }

    static nn::Var image_to_var(const std::vector<Image>& batch) {
        const int n = static_cast<int>(batch.size());
        const int h = batch[0].height, w = batch[0].width;
        nn::Var v = nn::make_var({n, 3, h, w});
        for (int s = 0; s < n; ++s)
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x)
                        v->v[((static_cast<std::size_t>(s) * 3 + c) * h + y) * w + x] =
                            batch[static_cast<std::size_t>(s)].at(x, y, c);
        return v;
    }
    static Image var_to_image(const nn::Var& v, int sample) {
        const int h = v->shape[2], w = v->shape[3];
        Image img(w, h, 3);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    img.at(x, y, c) =
                        v->v[((static_cast<std::size_t>(sample) * 3 + c) * h + y) * w + x];
        return img;
    }

    const CodecConfig& config() const { return cfg_; }
    std::vector<nn::Parameter>& params() { return params_; }
    const std::vector<nn::Parameter>& params() const { return params_; }
    void set_trainable(bool t) {
        for (auto& p : params_) {
            p.var->requires_grad = t;
            if (t) p.var->ensure_grad();
        }
    }

    float latent_scale = 1.f;

    void save(const std::filesystem::path& path) const {
        nlohmann::json hdr{{"kind", "codec"},
                           {"config", cfg_.to_json()},
                           {"latent_scale", latent_scale}};
        save_weights(path, hdr, params_);
    }
    static LatentCodec load(const std::filesystem::path& path) {
        WeightsFile wf = load_weights(path);
        LatentCodec codec(CodecConfig::from_json(wf.header.at("config")), 0);
        codec.latent_scale = wf.header.at("latent_scale");
        assign_weights(wf, codec.params_);
        return codec;
    }

private:
    CodecConfig cfg_;
    std::vector<nn::Parameter> params_;
    nnmod::Conv enc_in_, enc_out_, dec_in_, dec_out_;
    std::vector<nnmod::Conv> enc_down_, dec_up_;
};

struct CodecTrainReport {
    double first_loss = 0.0;
    double final_loss = 0.0;
    double holdout_psnr = 0.0;
};

struct CodecTrainOptions {
    int iterations = 1500;
    int batch = 8;
    float lr = 2e-3f;
    double holdout_frac = 0.1;
    std::uint64_t seed = 0;
};

// Trains the autoencoder on pixel L2. The trailing holdout_frac of the images
// is held out for the reconstruction PSNR report.
inline std::pair<LatentCodec, CodecTrainReport> train_codec(const std::vector<Image>& images,
                                                            const CodecConfig& cfg,
                                                            const CodecTrainOptions& opt) {
    if (images.size() < 100)
        throw std::invalid_argument("train_codec: need at least 100 training images");
    const std::size_t holdout =
        std::max<std::size_t>(1, static_cast<std::size_t>(images.size() * opt.holdout_frac));
    const std::size_t n_train = images.size() - holdout;

    LatentCodec codec(cfg, opt.seed);
    nn::Adam adam(opt.lr);
    std::vector<nn::Var> vars;
    for (auto& p : codec.params()) vars.push_back(p.var);
    adam.add_params(vars);

    Rng rng(derive_seed(opt.seed, "train_codec"));
    CodecTrainReport report;
    for (int iter = 0; iter < opt.iterations; ++iter) {
        // Exponential decay to 5% of the base rate over the run.
        adam.set_lr(opt.lr * static_cast<float>(std::pow(0.02, double(iter) / opt.iterations)));
        std::vector<Image> batch;
        for (int b = 0; b < opt.batch; ++b)
            batch.push_back(images[rng.uniform_index(n_train)]);
        nn::Var x = LatentCodec::image_to_var(batch);
        nn::Var recon = codec.decode(codec.encode(x));
        nn::Var loss = nn::mse_loss(recon, x->v);
        if (!std::isfinite(loss->v[0])) throw std::runtime_error("train_codec: non-finite loss");
        if (iter == 0) report.first_loss = loss->v[0];
        report.final_loss = loss->v[0];
        adam.zero_grad();
        nn::backward(loss);
        adam.step();
    }

    // Latent scale: inverse std over a sample of training latents.
    {
        std::vector<Image> probe;
        for (std::size_t i = 0; i < std::min<std::size_t>(16, n_train); ++i)
            probe.push_back(images[i]);
        nn::Var z = codec.encode(LatentCodec::image_to_var(probe));
        double mean = 0.0, var = 0.0;
        for (float v : z->v) mean += v;
        mean /= static_cast<double>(z->v.size());
        for (float v : z->v) var += (v - mean) * (v - mean);
        var /= static_cast<double>(z->v.size());
        codec.latent_scale = static_cast<float>(1.0 / std::max(1e-3, std::sqrt(var)));
    }

    // Held-out reconstruction PSNR.
    double acc = 0.0;
    for (std::size_t i = n_train; i < images.size(); ++i) {
        nn::Var x = LatentCodec::image_to_var({images[i]});
        nn::Var recon = codec.decode(codec.encode(x));
        double mse = 0.0;
        for (std::size_t k = 0; k < recon->v.size(); ++k) {
            const double d = static_cast<double>(recon->v[k]) - x->v[k];
            mse += d * d;
        }
        mse /= static_cast<double>(recon->v.size());
        acc += mse <= 1e-10 ? 99.0 : 10.0 * std::log10(1.0 / mse);
    }
    report.holdout_psnr = acc / static_cast<double>(holdout);
    return {std::move(codec), report};
}

}  // namespace skyforge
