#pragma once

#include <vector>

#include "skyforge/control.hpp"

namespace skyforge {

// Shared projection matrices of the spatial-temporal self-attention; one set
// serves every frame position. Row-major [dim, dim] blocks.
struct StAttentionWeights {
    std::vector<double> wq, wk, wv;
    int dim = 0;
    int heads = 1;
};

// Spatial-temporal self-attention for one query frame: queries come from
// frame i only, keys and values from the token-axis concatenation of all F
// frames, softmax(Q K^T / sqrt(d)) V per head. frames holds [F] row-major
// token grids of tokens x dim; the return value is frame i's token grid.
// Double precision throughout; the float training path mirrors this math.
inline std::vector<double> st_attention(const std::vector<std::vector<double>>& frames,
                                        int tokens, const StAttentionWeights& w,
                                        int query_frame) {
    const int F = static_cast<int>(frames.size());
    const int dim = w.dim;
    if (F < 1 || query_frame < 0 || query_frame >= F)
        throw std::invalid_argument("st_attention: bad frame index");
    for (const auto& f : frames)
        if (static_cast<int>(f.size()) != tokens * dim)
            throw std::invalid_argument("st_attention: frame token grid mismatch");
    if (static_cast<int>(w.wq.size()) != dim * dim || w.wk.size() != w.wq.size() ||
        w.wv.size() != w.wq.size() || dim % w.heads != 0)
        throw std::invalid_argument("st_attention: weight shape mismatch");

    const int d_head = dim / w.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
    auto project = [&](const std::vector<double>& x, const std::vector<double>& weight, int row,
                       int col) {
        double acc = 0.0;
        for (int e = 0; e < dim; ++e)
            acc += x[static_cast<std::size_t>(row) * dim + e] *
                   weight[static_cast<std::size_t>(e) * dim + col];
        return acc;
    };

    const int total_kv = F * tokens;
    std::vector<double> out(static_cast<std::size_t>(tokens) * dim, 0.0);
    std::vector<double> logits(static_cast<std::size_t>(total_kv));
    for (int h = 0; h < w.heads; ++h) {
        for (int tq = 0; tq < tokens; ++tq) {
            // Q from the query frame only; K over the full concatenation.
            for (int kv = 0; kv < total_kv; ++kv) {
                const auto& kf = frames[static_cast<std::size_t>(kv / tokens)];
                double dot = 0.0;
                for (int e = 0; e < d_head; ++e)
                    dot += project(frames[static_cast<std::size_t>(query_frame)], w.wq, tq,
                                   h * d_head + e) *
                           project(kf, w.wk, kv % tokens, h * d_head + e);
                logits[static_cast<std::size_t>(kv)] = dot * scale;
            }
            double mx = logits[0];
            for (int kv = 1; kv < total_kv; ++kv) mx = std::max(mx, logits[static_cast<std::size_t>(kv)]);
            double denom = 0.0;
            for (int kv = 0; kv < total_kv; ++kv) {
                logits[static_cast<std::size_t>(kv)] = std::exp(logits[static_cast<std::size_t>(kv)] - mx);
                denom += logits[static_cast<std::size_t>(kv)];
            }
            for (int e = 0; e < d_head; ++e) {
                double acc = 0.0;
                for (int kv = 0; kv < total_kv; ++kv)
                    acc += (logits[static_cast<std::size_t>(kv)] / denom) *
                           project(frames[static_cast<std::size_t>(kv / tokens)], w.wv,
                                   kv % tokens, h * d_head + e);
                out[static_cast<std::size_t>(tq) * dim + h * d_head + e] = acc;
            }
        }
    }
    return out;
}

// One training sequence: per-frame ground-image latents and rendered priors,
// index-aligned.
struct LatentSequence {
    std::vector<Latent> frames;
    std::vector<Image> priors;
};

struct VcmTrainOptions {
    int frames = 12;  // training window length
    int iterations = 800;
    float lr = 1e-3f;
    std::uint64_t seed = 0;
};

struct VcmTrainReport {
    double first_loss = 0.0;
    double final_loss = 0.0;
};

// Noised training batch with first-frame conditioning: frame 1 keeps its
// clean latent (timestep 0), frames 2..F get the shared timestep's noise,
// and the loss mask excludes frame 1.
struct VcmBatch {
    nn::Var zt;                  // [F, c, h, w]
    std::vector<float> eps;      // targets, zero for frame 1
    std::vector<float> mask;     // 1 for frames 2..F, 0 for frame 1
    std::vector<int> timesteps;  // t0 = 0, rest shared t
};

inline VcmBatch make_vcm_batch(const std::vector<Latent>& window, const nn::Shape& latent_shape,
                               const NoiseSchedule& schedule, Rng& rng) {
    const int F = static_cast<int>(window.size());
    if (F < 2) throw std::invalid_argument("make_vcm_batch: sequence shorter than 2");
    const int per = nn::numel(latent_shape) / latent_shape[0];
    VcmBatch batch;
    batch.zt = nn::make_var({F, latent_shape[1], latent_shape[2], latent_shape[3]});
    batch.eps.assign(static_cast<std::size_t>(F) * per, 0.f);
    batch.mask.assign(static_cast<std::size_t>(F) * per, 0.f);
    batch.timesteps.assign(static_cast<std::size_t>(F), 0);

    const int t = rng.uniform_int(1, schedule.T);
    // Frame 1 enters clean at every sampled t.
    std::copy(window[0].begin(), window[0].end(), batch.zt->v.begin());
    for (int f = 1; f < F; ++f) {
        batch.timesteps[static_cast<std::size_t>(f)] = t;
        std::vector<float> eps(static_cast<std::size_t>(per));
        for (auto& e : eps) e = rng.normal_f();
        const std::vector<float> noisy =
            add_noise(window[static_cast<std::size_t>(f)], t, eps, schedule);
        std::copy(noisy.begin(), noisy.end(),
                  batch.zt->v.begin() + static_cast<std::size_t>(f) * per);
        std::copy(eps.begin(), eps.end(),
                  batch.eps.begin() + static_cast<std::size_t>(f) * per);
        std::fill_n(batch.mask.begin() + static_cast<std::size_t>(f) * per, per, 1.f);
    }
    return batch;
}

// Selects the spatial-temporal attention parameters (shared q/k/v/o
// projections and their biases) of the base denoiser.
inline std::vector<nn::Parameter> vcm_trainable_params(DenoiserNet& net) {
    std::vector<nn::Parameter> out;
    for (auto& p : net.params()) {
        if (p.name.find(".attn.") == std::string::npos) continue;
        for (const char* piece : {".q.", ".k.", ".v.", ".o."})
            if (p.name.find(piece) != std::string::npos) {
                out.push_back(p);
                break;
            }
    }
    return out;
}

// Trains the view-consistency stage: base and control branch stay frozen
// except the attention projections, which now attend across all frames with
// shared weights. Loss covers frames 2..F only.
inline VcmTrainReport train_vcm(const std::vector<LatentSequence>& sequences, LdmModel& base,
                                ControlBranch& branch, const NoiseSchedule& schedule,
                                const nn::Shape& latent_shape, const VcmTrainOptions& opt) {
    if (sequences.empty()) throw std::invalid_argument("train_vcm: no sequences");
    for (const auto& s : sequences) {
        if (s.frames.size() < 2) throw std::invalid_argument("train_vcm: sequence shorter than 2");
        if (s.frames.size() != s.priors.size())
            throw std::invalid_argument("train_vcm: priors misaligned with frames");
    }

    base.net.set_trainable(false);
    base.prompt->requires_grad = false;
    branch.set_trainable(false);
    std::vector<nn::Parameter> trainable = vcm_trainable_params(base.net);
    for (auto& p : trainable) {
        p.var->requires_grad = true;
        p.var->ensure_grad();
    }

    nn::Adam adam(opt.lr);
    std::vector<nn::Var> vars;
    for (auto& p : trainable) vars.push_back(p.var);
    adam.add_params(vars);

    Rng rng(derive_seed(opt.seed, "train_vcm"));
    VcmTrainReport report;
    for (int iter = 0; iter < opt.iterations; ++iter) {
        const LatentSequence& seq = sequences[rng.uniform_index(sequences.size())];
        const int avail = static_cast<int>(seq.frames.size());
        const int F = std::min(opt.frames, avail);
        const int start = avail > F ? static_cast<int>(rng.uniform_index(
                                          static_cast<std::uint64_t>(avail - F + 1)))
                                    : 0;
        std::vector<Latent> window(seq.frames.begin() + start, seq.frames.begin() + start + F);
        VcmBatch batch = make_vcm_batch(window, latent_shape, schedule, rng);

        std::vector<Image> priors(seq.priors.begin() + start, seq.priors.begin() + start + F);
        nn::Var prior_var = LatentCodec::image_to_var(priors);
        nn::Var pred = acm_forward(base.net, branch, batch.zt, batch.timesteps,
                                   base.cond_rows(F), prior_var, /*st_mode=*/true);
        nn::Var loss = nn::mse_loss(pred, batch.eps, &batch.mask);
        if (!std::isfinite(loss->v[0])) throw std::runtime_error("train_vcm: non-finite loss");
        if (iter == 0) report.first_loss = loss->v[0];
        report.final_loss = loss->v[0];
        adam.zero_grad();
        nn::backward(loss);
        adam.step();
    }
    return report;
}

// Saves only the attention projections fine-tuned by the VCM stage.
inline void save_vcm_weights(const std::filesystem::path& path, DenoiserNet& net) {
    nlohmann::json hdr{{"kind", "vcm"}, {"config", net.config().to_json()}};
    save_weights(path, hdr, vcm_trainable_params(net));
}

inline void load_vcm_weights(const std::filesystem::path& path, DenoiserNet& net) {
    const WeightsFile wf = load_weights(path);
    std::vector<nn::Parameter> target = vcm_trainable_params(net);
    assign_weights(wf, target);
}

// Jointly denoises frames 2..F conditioned on the first frame: frame 1 stays
// clamped to E(x1) (timestep 0) at every step. Returns decoded frames 2..F.
inline std::vector<Image> generate_sequence(const Image& first_frame,
                                            const std::vector<Image>& priors_all,
                                            const LdmModel& base, const ControlBranch& branch,
                                            const LatentCodec& codec,
                                            const NoiseSchedule& schedule, int steps,
                                            std::uint64_t seed) {
    const int F = static_cast<int>(priors_all.size());
    if (F < 2) throw std::invalid_argument("generate_sequence: need at least 2 priors");
    const nn::Shape shape1 = codec.latent_shape(1);
    const int per = nn::numel(shape1);
    const Latent z1 = codec.encode_image(first_frame);

    Rng rng(derive_seed(seed, "generate_sequence"));
    std::vector<float> z(static_cast<std::size_t>(F) * per);
    std::copy(z1.begin(), z1.end(), z.begin());
    for (std::size_t i = static_cast<std::size_t>(per); i < z.size(); ++i) z[i] = rng.normal_f();

    nn::Var prior_var = LatentCodec::image_to_var(priors_all);
    const std::vector<int> taus = ddim_timesteps(schedule, steps);
    for (int k = static_cast<int>(taus.size()) - 1; k >= 0; --k) {
        const int t = taus[static_cast<std::size_t>(k)];
        const int t_prev = k > 0 ? taus[static_cast<std::size_t>(k) - 1] : 0;
        const double ab_t = schedule.alpha_bar[static_cast<std::size_t>(t)];
        const double ab_p = schedule.alpha_bar[static_cast<std::size_t>(t_prev)];

        nn::Var zv = nn::constant({F, shape1[1], shape1[2], shape1[3]}, z);
        std::vector<int> ts(static_cast<std::size_t>(F), t);
        ts[0] = 0;  // conditioning frame
        nn::Var eps = acm_forward(base.net, branch, zv, ts, base.cond_rows(F), prior_var,
                                  /*st_mode=*/true);

        const double sa = std::sqrt(ab_t), sb = std::sqrt(1.0 - ab_t);
        const double pa = std::sqrt(ab_p), pb = std::sqrt(1.0 - ab_p);
        for (std::size_t i = static_cast<std::size_t>(per); i < z.size(); ++i) {
            const double z0 = (z[i] - sb * eps->v[i]) / sa;
            z[i] = static_cast<float>(pa * z0 + pb * eps->v[i]);
        }
        // Frame 1 is a condition, not an output; it never moves.
    }

    std::vector<Image> out;
    for (int f = 1; f < F; ++f)
        out.push_back(codec.decode_latent(
            Latent(z.begin() + static_cast<std::size_t>(f) * per,
                   z.begin() + static_cast<std::size_t>(f + 1) * per)));
    return out;
}

// Per-window record of the chaining: which frame conditioned the window and
// how many new frames it produced.
struct WindowTrace {
    Image condition;
    std::size_t produced = 0;
};

// Long-sequence generation by window chaining: the first window opens with an
// appearance-control frame, every later window is conditioned on the last
// frame of the previous one (1-frame overlap). Output count equals the prior
// count; a short leftover tail becomes a short window.
inline std::vector<Image> generate_long(const std::vector<Image>& priors, const LdmModel& base,
                                        const ControlBranch& branch, const LatentCodec& codec,
                                        const NoiseSchedule& schedule, int window_frames,
                                        int steps, std::uint64_t seed,
                                        std::vector<WindowTrace>* trace = nullptr) {
    if (priors.empty()) throw std::invalid_argument("generate_long: no priors");
    std::vector<Image> out;
    Image first = generate_first_frame(base, branch, codec, priors[0], schedule, steps,
                                       derive_seed(seed, "first_frame"));
    out.push_back(first);

    std::size_t covered = 1;
    std::uint64_t window_idx = 0;
    while (covered < priors.size()) {
        const std::size_t take =
            std::min<std::size_t>(static_cast<std::size_t>(window_frames) - 1,
                                  priors.size() - covered);
        // Window = conditioning frame's prior + the tail still to generate.
        std::vector<Image> window_priors;
        window_priors.push_back(priors[covered - 1]);
        for (std::size_t i = 0; i < take; ++i) window_priors.push_back(priors[covered + i]);
        if (trace) trace->push_back({out.back(), take});
        const std::vector<Image> frames =
            generate_sequence(out.back(), window_priors, base, branch, codec, schedule, steps,
                              derive_seed(seed, "window" + std::to_string(window_idx++)));
        for (const auto& f : frames) out.push_back(f);
        covered += take;
    }
    return out;
}

}  // namespace skyforge
