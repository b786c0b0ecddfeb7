#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "skyforge/tensor.hpp"

namespace skyforge {

// Conditional U-Net denoiser configuration. attention_levels lists the level
// indices whose resolution gets (spatial or spatial-temporal) self-attention;
// the middle block always attends.
struct DenoiserConfig {
    int latent_channels = 4;
    int latent_size = 16;
    int base_channels = 32;
    std::vector<int> channel_mult{1, 2};
    std::vector<int> attention_levels{1};
    int heads = 4;
    int time_embed_dim = 64;
    int cond_embed_dim = 64;
    int groups = 8;

    nlohmann::json to_json() const {
        return {{"latent_channels", latent_channels}, {"latent_size", latent_size},
                {"base_channels", base_channels},     {"channel_mult", channel_mult},
                {"attention_levels", attention_levels}, {"heads", heads},
                {"time_embed_dim", time_embed_dim},   {"cond_embed_dim", cond_embed_dim},
                {"groups", groups}};
    }
    static DenoiserConfig from_json(const nlohmann::json& j) {
        DenoiserConfig c;
        c.latent_channels = j.at("latent_channels");
        c.latent_size = j.at("latent_size");
        c.base_channels = j.at("base_channels");
        c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
        c.attention_levels = j.at("attention_levels").get<std::vector<int>>();
        c.heads = j.at("heads");
        c.time_embed_dim = j.at("time_embed_dim");
        c.cond_embed_dim = j.at("cond_embed_dim");
        c.groups = j.at("groups");
        return c;
    }
};

namespace nnmod {

using nn::Var;

// Parameter registry shared by all modules of one network.
struct Registry {
    std::vector<nn::Parameter>* params = nullptr;
    Var add(const std::string& name, nn::Shape shape) {
        Var v = nn::make_var(std::move(shape), true);
        params->push_back({name, v});
        return v;
    }
};

struct Linear {
    Var w, b;
    void init(Registry& reg, const std::string& name, int in, int out, Rng& rng,
              bool zero = false) {
        w = reg.add(name + ".w", {in, out});
        b = reg.add(name + ".b", {out});
        if (!zero) nn::init_fan_in(w, rng);
    }
    Var operator()(const Var& x) const { return nn::linear(x, w, b); }
};

struct Conv {
    Var w, b;
    int stride = 1;
    nn::Pad pad_mode = nn::Pad::kZero;
    void init(Registry& reg, const std::string& name, int cin, int cout, int k, int s, Rng& rng,
              bool zero = false, nn::Pad mode = nn::Pad::kZero) {
        w = reg.add(name + ".w", {cout, cin, k, k});
        b = reg.add(name + ".b", {cout});
        stride = s;
        pad_mode = mode;
        if (!zero) nn::init_fan_in(w, rng);
    }
    Var operator()(const Var& x) const { return nn::conv2d(x, w, b, stride, -1, pad_mode); }
};

struct GroupNorm {
    Var gamma, beta;
    int groups = 8;
    void init(Registry& reg, const std::string& name, int channels, int g) {
        gamma = reg.add(name + ".g", {channels});
        beta = reg.add(name + ".b", {channels});
        std::fill(gamma->v.begin(), gamma->v.end(), 1.f);
        groups = std::min(g, channels);
        while (channels % groups != 0) --groups;
    }
    Var operator()(const Var& x) const { return nn::group_norm(x, gamma, beta, groups); }
};

// Token-space linear: [N,T,C] -> [N,T,M].
inline Var tokens_linear(const Var& tok, const Linear& l) {
    const int N = tok->shape[0], T = tok->shape[1], C = tok->shape[2];
    Var flat = nn::reshape(tok, {N * T, C});
    Var out = l(flat);
    return nn::reshape(out, {N, T, out->shape[1]});
}

struct ResBlock {
    GroupNorm gn1, gn2;
    Conv conv1, conv2;
    Linear emb_proj;
    Conv skip;  // 1x1 when channel counts differ
    bool has_skip = false;

    void init(Registry& reg, const std::string& name, int cin, int cout, int emb_dim,
              int groups, Rng& rng) {
        gn1.init(reg, name + ".gn1", cin, groups);
        conv1.init(reg, name + ".conv1", cin, cout, 3, 1, rng);
        emb_proj.init(reg, name + ".emb", emb_dim, cout, rng);
        gn2.init(reg, name + ".gn2", cout, groups);
        conv2.init(reg, name + ".conv2", cout, cout, 3, 1, rng, /*zero=*/true);
        if (cin != cout) {
            skip.init(reg, name + ".skip", cin, cout, 1, 1, rng);
            has_skip = true;
        }
    }
    Var operator()(const Var& x, const Var& emb) const {
        Var h = conv1(nn::silu(gn1(x)));
        h = nn::add_channelwise(h, emb_proj(emb));
        h = conv2(nn::silu(gn2(h)));
        return nn::add(h, has_skip ? skip(x) : x);
    }
};

struct AttnBlock {
    GroupNorm gn;
    Linear q, k, v, o;
    int heads = 4;

    void init(Registry& reg, const std::string& name, int channels, int n_heads, int groups,
              Rng& rng) {
        gn.init(reg, name + ".gn", channels, groups);
        q.init(reg, name + ".q", channels, channels, rng);
        k.init(reg, name + ".k", channels, channels, rng);
        v.init(reg, name + ".v", channels, channels, rng);
        o.init(reg, name + ".o", channels, channels, rng, /*zero=*/true);
        heads = n_heads;
    }
    // st_mode concatenates keys/values over the batch (frame) axis; the
    // projection weights are shared across frames either way.
    Var operator()(const Var& x, bool st_mode) const {
        const int H = x->shape[2], W = x->shape[3];
        Var tok = nn::nchw_to_tokens(gn(x));
        Var qt = tokens_linear(tok, q);
        Var kt = tokens_linear(tok, k);
        Var vt = tokens_linear(tok, v);
        Var att = nn::attention(qt, kt, vt, heads, st_mode);
        Var out = tokens_linear(att, o);
        return nn::add(x, nn::tokens_to_nchw(out, H, W));
    }
};

// Sinusoidal embedding of integer timesteps; injective over t in [0, T] for
// any practical T.
inline Var sinusoidal_embedding(const std::vector<int>& t, int dim) {
    Var out = nn::make_var({static_cast<int>(t.size()), dim});
    const int half = dim / 2;
    for (std::size_t s = 0; s < t.size(); ++s)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            out->v[s * static_cast<std::size_t>(dim) + i] =
                static_cast<float>(std::sin(t[s] * freq));
            out->v[s * static_cast<std::size_t>(dim) + half + i] =
                static_cast<float>(std::cos(t[s] * freq));
        }
    return out;
}

}  // namespace nnmod

// Encoder half of the denoiser (stem, down blocks, middle) plus the time and
// prompt conditioning path. Shared between the base net and the control
// branch, which is a trainable copy of exactly these blocks.
struct EncoderStack {
    DenoiserConfig cfg;
    nnmod::Linear time_l1, time_l2, cond_proj;
    nnmod::Conv stem;
    struct DownLevel {
        nnmod::ResBlock res;
        nnmod::AttnBlock attn;
        bool has_attn = false;
        nnmod::Conv down;
        bool has_down = false;
    };
    std::vector<DownLevel> downs;
    nnmod::ResBlock mid_res1, mid_res2;
    nnmod::AttnBlock mid_attn;

    void init(nnmod::Registry& reg, const std::string& prefix, const DenoiserConfig& c,
              Rng& rng) {
        cfg = c;
        time_l1.init(reg, prefix + "time.l1", c.time_embed_dim, c.time_embed_dim, rng);
        time_l2.init(reg, prefix + "time.l2", c.time_embed_dim, c.time_embed_dim, rng);
        cond_proj.init(reg, prefix + "cond", c.cond_embed_dim, c.time_embed_dim, rng);
        const int c0 = c.base_channels * c.channel_mult[0];
        stem.init(reg, prefix + "stem", c.latent_channels, c0, 3, 1, rng);

        int ch = c0;
        downs.resize(c.channel_mult.size());
        for (std::size_t i = 0; i < c.channel_mult.size(); ++i) {
            const int out_ch = c.base_channels * c.channel_mult[i];
            const std::string name = prefix + "down" + std::to_string(i);
            downs[i].res.init(reg, name + ".res", ch, out_ch, c.time_embed_dim, c.groups, rng);
            ch = out_ch;
            downs[i].has_attn =
                std::find(c.attention_levels.begin(), c.attention_levels.end(),
                          static_cast<int>(i)) != c.attention_levels.end();
            if (downs[i].has_attn)
                downs[i].attn.init(reg, name + ".attn", ch, c.heads, c.groups, rng);
            downs[i].has_down = i + 1 < c.channel_mult.size();
            if (downs[i].has_down)
                downs[i].down.init(reg, name + ".down", ch, ch, 3, 2, rng);
        }
        mid_res1.init(reg, prefix + "mid.res1", ch, ch, c.time_embed_dim, c.groups, rng);
        mid_attn.init(reg, prefix + "mid.attn", ch, c.heads, c.groups, rng);
        mid_res2.init(reg, prefix + "mid.res2", ch, ch, c.time_embed_dim, c.groups, rng);
    }

    nn::Var embed(const std::vector<int>& t, const nn::Var& cond) const {
        nn::Var e = nnmod::sinusoidal_embedding(t, cfg.time_embed_dim);
        e = time_l2(nn::silu(time_l1(e)));
        return nn::silu(nn::add(e, cond_proj(cond)));
    }

    struct Features {
        std::vector<nn::Var> skips;  // stem, then one per level res block
        nn::Var middle;
        nn::Var emb;
    };

    // stem_extra, when present, is added to the stem output (the control
    // branch's hint pathway).
    Features run(const nn::Var& z, const std::vector<int>& t, const nn::Var& cond,
                 bool st_mode, const nn::Var* stem_extra = nullptr) const {
        Features f;
        f.emb = embed(t, cond);
        nn::Var h = stem(z);
        if (stem_extra) h = nn::add(h, *stem_extra);
        f.skips.push_back(h);
        for (const auto& level : downs) {
            if (level.has_down) {
                h = level.res(h, f.emb);
                if (level.has_attn) h = level.attn(h, st_mode);
                f.skips.push_back(h);
                h = level.down(h);
            } else {
                h = level.res(h, f.emb);
                if (level.has_attn) h = level.attn(h, st_mode);
                f.skips.push_back(h);
            }
        }
        h = mid_res1(h, f.emb);
        h = mid_attn(h, st_mode);
        f.middle = mid_res2(h, f.emb);
        return f;
    }
};

// Noise-prediction U-Net. forward() optionally receives control additions
// (already projected through the branch's zero layers), index-aligned with
// the encoder skips plus the middle feature as the last element.
class DenoiserNet {
public:
    DenoiserNet() = default;
    DenoiserNet(const DenoiserConfig& cfg, std::uint64_t seed) { build(cfg, seed); }

    void build(const DenoiserConfig& cfg, std::uint64_t seed) {
        cfg_ = cfg;
        params_.clear();
        nnmod::Registry reg{&params_};
        Rng rng(derive_seed(seed, "denoiser"));
        enc_.init(reg, "", cfg, rng);

        struct UpSpec {
            int skip_ch, out_ch;
            bool attn;
            bool upsample;
        };
        std::vector<UpSpec> specs;
        const int levels = static_cast<int>(cfg.channel_mult.size());
        int ch = cfg.base_channels * cfg.channel_mult[static_cast<std::size_t>(levels - 1)];
        for (int i = levels - 1; i >= 0; --i) {
            const int level_ch = cfg.base_channels * cfg.channel_mult[static_cast<std::size_t>(i)];
            const bool attn = std::find(cfg.attention_levels.begin(), cfg.attention_levels.end(),
                                        i) != cfg.attention_levels.end();
            specs.push_back({level_ch, level_ch, attn, i > 0});
            if (i == 0) specs.push_back({cfg.base_channels * cfg.channel_mult[0],
                                         cfg.base_channels * cfg.channel_mult[0], attn, false});
        }
        ups_.resize(specs.size());
        Rng rng_up = rng.split("decoder");
        for (std::size_t j = 0; j < specs.size(); ++j) {
            const std::string name = "up" + std::to_string(j);
            ups_[j].res.init(reg, name + ".res", ch + specs[j].skip_ch, specs[j].out_ch,
                             cfg.time_embed_dim, cfg.groups, rng_up);
            ups_[j].has_attn = specs[j].attn;
            if (specs[j].attn)
                ups_[j].attn.init(reg, name + ".attn", specs[j].out_ch, cfg.heads, cfg.groups,
                                  rng_up);
            ups_[j].has_up = specs[j].upsample;
            if (specs[j].upsample)
                ups_[j].up.init(reg, name + ".up", specs[j].out_ch, specs[j].out_ch, 3, 1,
                                rng_up);
            ch = specs[j].out_ch;
        }
        out_gn_.init(reg, "out.gn", ch, cfg.groups);
        out_conv_.init(reg, "out.conv", ch, cfg.latent_channels, 3, 1, rng_up, /*zero=*/true);
    }

    // Decoder half over encoder features (possibly control-injected).
    nn::Var decode(EncoderStack::Features f, bool st_mode = false) const {
        nn::Var h = f.middle;
        for (auto& up : ups_) {
            nn::Var skip = f.skips.back();
            f.skips.pop_back();
            h = up.res(nn::concat_channels(h, skip), f.emb);
            if (up.has_attn) h = up.attn(h, st_mode);
            if (up.has_up) h = up.up(nn::upsample_nearest2x(h));
        }
        return out_conv_(nn::silu(out_gn_(h)));
    }

    // z [N,C,H,W]; t one timestep per sample; cond [N, cond_embed_dim].
    nn::Var forward(const nn::Var& z, const std::vector<int>& t, const nn::Var& cond,
                    bool st_mode = false) const {
        return decode(enc_.run(z, t, cond, st_mode), st_mode);
    }

    const DenoiserConfig& config() const { return cfg_; }
    std::vector<nn::Parameter>& params() { return params_; }
    const std::vector<nn::Parameter>& params() const { return params_; }
    const EncoderStack& encoder() const { return enc_; }

    void set_trainable(bool trainable) {
        for (auto& p : params_) {
            p.var->requires_grad = trainable;
            if (trainable) p.var->ensure_grad();
        }
    }

private:
    DenoiserConfig cfg_;
    std::vector<nn::Parameter> params_;
    EncoderStack enc_;
    struct UpLevel {
        nnmod::ResBlock res;
        nnmod::AttnBlock attn;
        bool has_attn = false;
        nnmod::Conv up;
        bool has_up = false;
    };
    std::vector<UpLevel> ups_;
    nnmod::GroupNorm out_gn_;
    nnmod::Conv out_conv_;
};

}  // namespace skyforge
