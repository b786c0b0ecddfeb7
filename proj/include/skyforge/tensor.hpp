#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "skyforge/common.hpp"

namespace skyforge::nn {

using Shape = std::vector<int>;

inline int numel(const Shape& s) {
    int n = 1;
    for (int d : s) n *= d;
    return n;
}

// One node of the autodiff tape: a value buffer, an optional gradient buffer,
// parent links and a backward closure that scatters this node's gradient
// into its parents.
struct Node {
    Shape shape;
    std::vector<float> v;
    std::vector<float> g;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    int numel() const { return nn::numel(shape); }
    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), 0.f);
    }
};

using Var = std::shared_ptr<Node>;

inline Var make_var(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->v.assign(static_cast<std::size_t>(n->numel()), 0.f);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return n;
}

inline Var constant(Shape shape, std::vector<float> data) {
    auto n = make_var(std::move(shape));
    if (static_cast<int>(data.size()) != n->numel())
        throw std::invalid_argument("constant: size mismatch");
    n->v = std::move(data);
    return n;
}

namespace detail {

inline Var op(Shape shape, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = make_var(std::move(shape));
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    n->parents = std::move(parents);
    if (n->requires_grad) {
        n->ensure_grad();
        n->backward_fn = std::move(bw);
    }
    return n;
}

inline void topo(const Var& root, std::vector<Node*>& order,
                 std::unordered_set<Node*>& seen) {
    if (!root || seen.count(root.get())) return;
    seen.insert(root.get());
    for (const auto& p : root->parents) topo(p, order, seen);
    order.push_back(root.get());
}

using EigenMapRM =
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using EigenMapRMConst =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// Reverse-mode sweep from a scalar root.
inline void backward(const Var& root) {
    if (root->numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    detail::topo(root, order, seen);
    for (Node* n : order)
        if (n->requires_grad) n->ensure_grad();
    root->g[0] = 1.f;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---- elementwise ----

inline Var add(const Var& a, const Var& b) {
    if (a->shape != b->shape) throw std::invalid_argument("add: shape mismatch");
    auto out = detail::op(a->shape, {a, b}, [a, b](Node& n) {
        if (a->requires_grad)
            for (std::size_t i = 0; i < n.g.size(); ++i) a->g[i] += n.g[i];
        if (b->requires_grad)
            for (std::size_t i = 0; i < n.g.size(); ++i) b->g[i] += n.g[i];
    });
    for (std::size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] + b->v[i];
    return out;
}

inline Var scale(const Var& a, float s) {
    auto out = detail::op(a->shape, {a}, [a, s](Node& n) {
        if (a->requires_grad)
            for (std::size_t i = 0; i < n.g.size(); ++i) a->g[i] += s * n.g[i];
    });
    for (std::size_t i = 0; i < out->v.size(); ++i) out->v[i] = s * a->v[i];
    return out;
}

inline Var silu(const Var& a) {
    auto out = detail::op(a->shape, {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < n.g.size(); ++i) {
            const float x = a->v[i];
            const float s = 1.f / (1.f + std::exp(-x));
            a->g[i] += n.g[i] * s * (1.f + x * (1.f - s));
        }
    });
    for (std::size_t i = 0; i < out->v.size(); ++i) {
        const float x = a->v[i];
        out->v[i] = x / (1.f + std::exp(-x));
    }
    return out;
}

inline Var sigmoid(const Var& a) {
    auto out = detail::op(a->shape, {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        for (std::size_t i = 0; i < n.g.size(); ++i) {
            const float s = n.v[i];
            a->g[i] += n.g[i] * s * (1.f - s);
        }
    });
    for (std::size_t i = 0; i < out->v.size(); ++i)
        out->v[i] = 1.f / (1.f + std::exp(-a->v[i]));
    return out;
}

// ---- shape plumbing ----

inline Var reshape(const Var& a, Shape shape) {
    if (numel(shape) != a->numel()) throw std::invalid_argument("reshape: numel mismatch");
    auto out = detail::op(std::move(shape), {a}, [a](Node& n) {
        if (a->requires_grad)
            for (std::size_t i = 0; i < n.g.size(); ++i) a->g[i] += n.g[i];
    });
    out->v = a->v;
    return out;
}

// [N,C,H,W] -> [N, H*W, C] token layout.
inline Var nchw_to_tokens(const Var& a) {
    const int N = a->shape[0], C = a->shape[1], H = a->shape[2], W = a->shape[3];
    const int T = H * W;
    auto out = detail::op({N, T, C}, {a}, [a, N, C, T](Node& n) {
        if (!a->requires_grad) return;
        for (int b = 0; b < N; ++b)
            for (int t = 0; t < T; ++t)
                for (int c = 0; c < C; ++c)
                    a->g[(static_cast<std::size_t>(b) * C + c) * T + t] +=
                        n.g[(static_cast<std::size_t>(b) * T + t) * C + c];
    });
    for (int b = 0; b < N; ++b)
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < C; ++c)
                out->v[(static_cast<std::size_t>(b) * T + t) * C + c] =
                    a->v[(static_cast<std::size_t>(b) * C + c) * T + t];
    return out;
}

inline Var tokens_to_nchw(const Var& a, int H, int W) {
    const int N = a->shape[0], T = a->shape[1], C = a->shape[2];
    if (T != H * W) throw std::invalid_argument("tokens_to_nchw: token count mismatch");
    auto out = detail::op({N, C, H, W}, {a, }, [a, N, C, T](Node& n) {
        if (!a->requires_grad) return;
        for (int b = 0; b < N; ++b)
            for (int t = 0; t < T; ++t)
                for (int c = 0; c < C; ++c)
                    a->g[(static_cast<std::size_t>(b) * T + t) * C + c] +=
                        n.g[(static_cast<std::size_t>(b) * C + c) * T + t];
    });
    for (int b = 0; b < N; ++b)
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < C; ++c)
                out->v[(static_cast<std::size_t>(b) * C + c) * T + t] =
                    a->v[(static_cast<std::size_t>(b) * T + t) * C + c];
    return out;
}

inline Var concat_channels(const Var& a, const Var& b) {
    if (a->shape.size() != 4 || b->shape.size() != 4 || a->shape[0] != b->shape[0] ||
        a->shape[2] != b->shape[2] || a->shape[3] != b->shape[3])
        throw std::invalid_argument("concat_channels: incompatible shapes");
    const int N = a->shape[0], Ca = a->shape[1], Cb = b->shape[1];
    const int HW = a->shape[2] * a->shape[3];
    auto out = detail::op({N, Ca + Cb, a->shape[2], a->shape[3]}, {a, b},
                          [a, b, N, Ca, Cb, HW](Node& n) {
        for (int s = 0; s < N; ++s) {
            const std::size_t base = static_cast<std::size_t>(s) * (Ca + Cb) * HW;
            if (a->requires_grad)
                for (int i = 0; i < Ca * HW; ++i)
                    a->g[static_cast<std::size_t>(s) * Ca * HW + i] += n.g[base + i];
            if (b->requires_grad)
                for (int i = 0; i < Cb * HW; ++i)
                    b->g[static_cast<std::size_t>(s) * Cb * HW + i] +=
                        n.g[base + static_cast<std::size_t>(Ca) * HW + i];
        }
    });
    for (int s = 0; s < N; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * (Ca + Cb) * HW;
        std::copy_n(a->v.begin() + static_cast<std::size_t>(s) * Ca * HW, Ca * HW,
                    out->v.begin() + base);
        std::copy_n(b->v.begin() + static_cast<std::size_t>(s) * Cb * HW, Cb * HW,
                    out->v.begin() + base + static_cast<std::size_t>(Ca) * HW);
    }
    return out;
}

// Adds a per-sample, per-channel vector [N,C] across the spatial dims of x.
inline Var add_channelwise(const Var& x, const Var& y) {
    const int N = x->shape[0], C = x->shape[1];
    const int HW = x->shape[2] * x->shape[3];
    if (y->shape != Shape{N, C}) throw std::invalid_argument("add_channelwise: shape");
    auto out = detail::op(x->shape, {x, y}, [x, y, N, C, HW](Node& n) {
        if (x->requires_grad)
            for (std::size_t i = 0; i < n.g.size(); ++i) x->g[i] += n.g[i];
        if (y->requires_grad)
            for (int s = 0; s < N; ++s)
                for (int c = 0; c < C; ++c) {
                    float acc = 0.f;
                    const std::size_t base = (static_cast<std::size_t>(s) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) acc += n.g[base + i];
                    y->g[static_cast<std::size_t>(s) * C + c] += acc;
                }
    });
    for (int s = 0; s < N; ++s)
        for (int c = 0; c < C; ++c) {
            const float b = y->v[static_cast<std::size_t>(s) * C + c];
            const std::size_t base = (static_cast<std::size_t>(s) * C + c) * HW;
            for (int i = 0; i < HW; ++i) out->v[base + i] = x->v[base + i] + b;
        }
    return out;
}

// Tiles a vector [D] into rows of [N, D]; gradient sums over rows.
inline Var broadcast_rows(const Var& v, int n) {
    const int d = v->numel();
    auto out = detail::op({n, d}, {v}, [v, n, d](Node& node) {
        if (!v->requires_grad) return;
        for (int r = 0; r < n; ++r)
            for (int i = 0; i < d; ++i)
                v->g[static_cast<std::size_t>(i)] += node.g[static_cast<std::size_t>(r) * d + i];
    });
    for (int r = 0; r < n; ++r)
        std::copy_n(v->v.begin(), d, out->v.begin() + static_cast<std::size_t>(r) * d);
    return out;
}

// ---- linear algebra ----

// x [N,K] * w [K,M] + b [M].
inline Var linear(const Var& x, const Var& w, const Var& b) {
    const int N = x->shape[0], K = x->shape[1], M = w->shape[1];
    if (w->shape[0] != K || (b && b->shape != Shape{M}))
        throw std::invalid_argument("linear: shape mismatch");
    std::vector<Var> parents{x, w};
    if (b) parents.push_back(b);
    auto out = detail::op({N, M}, parents, [x, w, b, N, K, M](Node& n) {
        detail::EigenMapRMConst gm(n.g.data(), N, M);
        if (x->requires_grad) {
            detail::EigenMapRM xg(x->g.data(), N, K);
            detail::EigenMapRMConst wm(w->v.data(), K, M);
            xg.noalias() += gm * wm.transpose();
        }
        if (w->requires_grad) {
            detail::EigenMapRM wg(w->g.data(), K, M);
            detail::EigenMapRMConst xm(x->v.data(), N, K);
            wg.noalias() += xm.transpose() * gm;
        }
        if (b && b->requires_grad)
            for (int s = 0; s < N; ++s)
                for (int m = 0; m < M; ++m)
                    b->g[static_cast<std::size_t>(m)] += n.g[static_cast<std::size_t>(s) * M + m];
    });
    detail::EigenMapRM om(out->v.data(), N, M);
    detail::EigenMapRMConst xm(x->v.data(), N, K);
    detail::EigenMapRMConst wm(w->v.data(), K, M);
    om.noalias() = xm * wm;
    if (b)
        for (int s = 0; s < N; ++s)
            for (int m = 0; m < M; ++m) out->v[static_cast<std::size_t>(s) * M + m] += b->v[static_cast<std::size_t>(m)];
    return out;
}

// Border handling for convolutions: zeros (default) or edge replication.
enum class Pad { kZero, kReplicate };

namespace detail {

inline void im2col(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, Pad mode, float* col) {
    // col layout: [C*kh*kw, Ho*Wo]
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                float* dst = col + ((static_cast<std::size_t>(c) * kh + i) * kw + j) *
                                       (static_cast<std::size_t>(Ho) * Wo);
                for (int y = 0; y < Ho; ++y) {
                    int sy = y * stride + i - pad;
                    for (int xw = 0; xw < Wo; ++xw) {
                        int sx = xw * stride + j - pad;
                        float v = 0.f;
                        if (mode == Pad::kReplicate) {
                            const int cy = std::clamp(sy, 0, H - 1);
                            const int cx = std::clamp(sx, 0, W - 1);
                            v = x[(static_cast<std::size_t>(c) * H + cy) * W + cx];
                        } else if (sy >= 0 && sy < H && sx >= 0 && sx < W) {
                            v = x[(static_cast<std::size_t>(c) * H + sy) * W + sx];
                        }
                        dst[static_cast<std::size_t>(y) * Wo + xw] = v;
                    }
                }
            }
}

inline void col2im_add(const float* col, int C, int H, int W, int kh, int kw, int stride,
                       int pad, int Ho, int Wo, Pad mode, float* x) {
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                const float* src = col + ((static_cast<std::size_t>(c) * kh + i) * kw + j) *
                                             (static_cast<std::size_t>(Ho) * Wo);
                for (int y = 0; y < Ho; ++y) {
                    int sy = y * stride + i - pad;
                    if (mode == Pad::kReplicate) sy = std::clamp(sy, 0, H - 1);
                    if (sy < 0 || sy >= H) continue;
                    for (int xw = 0; xw < Wo; ++xw) {
                        int sx = xw * stride + j - pad;
                        if (mode == Pad::kReplicate) sx = std::clamp(sx, 0, W - 1);
                        if (sx < 0 || sx >= W) continue;
                        x[(static_cast<std::size_t>(c) * H + sy) * W + sx] +=
                            src[static_cast<std::size_t>(y) * Wo + xw];
                    }
                }
            }
}

}  // namespace detail

// x [N,Cin,H,W], w [Cout,Cin,kh,kw], optional b [Cout].
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = -1,
                  Pad mode = Pad::kZero) {
    const int N = x->shape[0], Cin = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Cout = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    if (w->shape[1] != Cin) throw std::invalid_argument("conv2d: channel mismatch");
    if (pad < 0) pad = kh / 2;
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    const int K = Cin * kh * kw;
    const int P = Ho * Wo;

    std::vector<Var> parents{x, w};
    if (b) parents.push_back(b);
    auto out = detail::op({N, Cout, Ho, Wo}, parents,
                          [x, w, b, N, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, P,
                           mode](Node& n) {
        std::vector<float> col(static_cast<std::size_t>(K) * P);
        std::vector<float> dcol(static_cast<std::size_t>(K) * P);
        for (int s = 0; s < N; ++s) {
            detail::EigenMapRMConst go(n.g.data() + static_cast<std::size_t>(s) * Cout * P,
                                       Cout, P);
            if (w->requires_grad || x->requires_grad)
                detail::im2col(x->v.data() + static_cast<std::size_t>(s) * Cin * H * W, Cin, H,
                               W, kh, kw, stride, pad, Ho, Wo, mode, col.data());
            if (w->requires_grad) {
                detail::EigenMapRM wg(w->g.data(), Cout, K);
                detail::EigenMapRMConst cm(col.data(), K, P);
                wg.noalias() += go * cm.transpose();
            }
            if (x->requires_grad) {
                detail::EigenMapRM dc(dcol.data(), K, P);
                detail::EigenMapRMConst wm(w->v.data(), Cout, K);
                dc.noalias() = wm.transpose() * go;
                detail::col2im_add(dcol.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo, mode,
                                   x->g.data() + static_cast<std::size_t>(s) * Cin * H * W);
            }
            if (b && b->requires_grad)
                for (int c = 0; c < Cout; ++c) {
                    float acc = 0.f;
                    for (int i = 0; i < P; ++i)
                        acc += n.g[(static_cast<std::size_t>(s) * Cout + c) * P + i];
                    b->g[static_cast<std::size_t>(c)] += acc;
                }
        }
    });

    std::vector<float> col(static_cast<std::size_t>(K) * P);
    for (int s = 0; s < N; ++s) {
        detail::im2col(x->v.data() + static_cast<std::size_t>(s) * Cin * H * W, Cin, H, W, kh,
                       kw, stride, pad, Ho, Wo, mode, col.data());
        detail::EigenMapRM om(out->v.data() + static_cast<std::size_t>(s) * Cout * P, Cout, P);
        detail::EigenMapRMConst wm(w->v.data(), Cout, K);
        detail::EigenMapRMConst cm(col.data(), K, P);
        om.noalias() = wm * cm;
        if (b)
            for (int c = 0; c < Cout; ++c) {
                const float bv = b->v[static_cast<std::size_t>(c)];
                float* dst = out->v.data() + (static_cast<std::size_t>(s) * Cout + c) * P;
                for (int i = 0; i < P; ++i) dst[i] += bv;
            }
    }
    return out;
}

inline Var upsample_nearest2x(const Var& x) {
    const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    auto out = detail::op({N, C, H * 2, W * 2}, {x}, [x, N, C, H, W](Node& n) {
        if (!x->requires_grad) return;
        for (int s = 0; s < N * C; ++s)
            for (int y = 0; y < H * 2; ++y)
                for (int xw = 0; xw < W * 2; ++xw)
                    x->g[(static_cast<std::size_t>(s) * H + y / 2) * W + xw / 2] +=
                        n.g[(static_cast<std::size_t>(s) * H * 2 + y) * W * 2 + xw];
    });
    for (int s = 0; s < N * C; ++s)
        for (int y = 0; y < H * 2; ++y)
            for (int xw = 0; xw < W * 2; ++xw)
                out->v[(static_cast<std::size_t>(s) * H * 2 + y) * W * 2 + xw] =
                    x->v[(static_cast<std::size_t>(s) * H + y / 2) * W + xw / 2];
    return out;
}

// Group normalization over [N,C,H,W] with per-channel affine.
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups,
                      float eps = 1e-5f) {
    const int N = x->shape[0], C = x->shape[1];
    const int HW = x->shape[2] * x->shape[3];
    if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
    const int gc = C / groups;
    const int m = gc * HW;

    auto stats = std::make_shared<std::vector<float>>();  // per (sample, group): mean, inv_std
    stats->resize(static_cast<std::size_t>(N) * groups * 2);

    auto out = detail::op(x->shape, {x, gamma, beta},
                          [x, gamma, beta, stats, N, C, HW, groups, gc, m](Node& n) {
        for (int s = 0; s < N; ++s)
            for (int g = 0; g < groups; ++g) {
                const float mean = (*stats)[(static_cast<std::size_t>(s) * groups + g) * 2];
                const float inv_std =
                    (*stats)[(static_cast<std::size_t>(s) * groups + g) * 2 + 1];
                const std::size_t base =
                    (static_cast<std::size_t>(s) * C + static_cast<std::size_t>(g) * gc) * HW;
                // dL/dxhat, plus the two reduction terms of the norm backward.
                float sum_dxhat = 0.f, sum_dxhat_xhat = 0.f;
                for (int i = 0; i < m; ++i) {
                    const int c = g * gc + i / HW;
                    const float xhat = (x->v[base + i] - mean) * inv_std;
                    const float dxhat = n.g[base + i] * gamma->v[static_cast<std::size_t>(c)];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gamma->requires_grad)
                        gamma->g[static_cast<std::size_t>(c)] += n.g[base + i] * xhat;
                    if (beta->requires_grad) beta->g[static_cast<std::size_t>(c)] += n.g[base + i];
                }
                if (x->requires_grad) {
                    const float inv_m = 1.f / static_cast<float>(m);
                    for (int i = 0; i < m; ++i) {
                        const int c = g * gc + i / HW;
                        const float xhat = (x->v[base + i] - mean) * inv_std;
                        const float dxhat = n.g[base + i] * gamma->v[static_cast<std::size_t>(c)];
                        x->g[base + i] += inv_std * (dxhat - inv_m * sum_dxhat -
                                                     xhat * inv_m * sum_dxhat_xhat);
                    }
                }
            }
    });

    for (int s = 0; s < N; ++s)
        for (int g = 0; g < groups; ++g) {
            const std::size_t base =
                (static_cast<std::size_t>(s) * C + static_cast<std::size_t>(g) * gc) * HW;
            float mean = 0.f;
            for (int i = 0; i < m; ++i) mean += x->v[base + i];
            mean /= static_cast<float>(m);
            float var = 0.f;
            for (int i = 0; i < m; ++i) {
                const float d = x->v[base + i] - mean;
                var += d * d;
            }
            var /= static_cast<float>(m);
            const float inv_std = 1.f / std::sqrt(var + eps);
            (*stats)[(static_cast<std::size_t>(s) * groups + g) * 2] = mean;
            (*stats)[(static_cast<std::size_t>(s) * groups + g) * 2 + 1] = inv_std;
            for (int i = 0; i < m; ++i) {
                const int c = g * gc + i / HW;
                out->v[base + i] = ((x->v[base + i] - mean) * inv_std) *
                                       gamma->v[static_cast<std::size_t>(c)] +
                                   beta->v[static_cast<std::size_t>(c)];
            }
        }
    return out;
}

namespace detail {

// Scaled dot-product attention for one head: q [Tq,d], k/v [Tk,d].
inline void attention_head_forward(const float* q, const float* k, const float* v, int Tq,
                                   int Tk, int d, float* probs, float* out) {
    const float scale = 1.f / std::sqrt(static_cast<float>(d));
    EigenMapRMConst Q(q, Tq, d), K(k, Tk, d), V(v, Tk, d);
    EigenMapRM P(probs, Tq, Tk), O(out, Tq, d);
    P.noalias() = Q * K.transpose() * scale;
    for (int r = 0; r < Tq; ++r) {
        float mx = P(r, 0);
        for (int c = 1; c < Tk; ++c) mx = std::max(mx, P(r, c));
        float sum = 0.f;
        for (int c = 0; c < Tk; ++c) {
            P(r, c) = std::exp(P(r, c) - mx);
            sum += P(r, c);
        }
        const float inv = 1.f / sum;
        for (int c = 0; c < Tk; ++c) P(r, c) *= inv;
    }
    O.noalias() = P * V;
}

inline void attention_head_backward(const float* q, const float* k, const float* v,
                                    const float* probs, const float* dout, int Tq, int Tk,
                                    int d, float* dq, float* dk, float* dv) {
    const float scale = 1.f / std::sqrt(static_cast<float>(d));
    EigenMapRMConst Q(q, Tq, d), K(k, Tk, d), V(v, Tk, d), P(probs, Tq, Tk), dO(dout, Tq, d);
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dP = dO * V.transpose();
    // Softmax backward per row: dS = P .* (dP - rowsum(dP .* P)).
    for (int r = 0; r < Tq; ++r) {
        float dot = 0.f;
        for (int c = 0; c < Tk; ++c) dot += dP(r, c) * P(r, c);
        for (int c = 0; c < Tk; ++c) dP(r, c) = P(r, c) * (dP(r, c) - dot);
    }
    EigenMapRM dQ(dq, Tq, d), dK(dk, Tk, d), dV(dv, Tk, d);
    dQ.noalias() += dP * K * scale;
    dK.noalias() += dP.transpose() * Q * scale;
    dV.noalias() += P.transpose() * dO;
}

}  // namespace detail

// Multi-head attention over token tensors q [N,Tq,C], k/v [N,Tk,C] with C =
// heads * head_dim. When st_mode is set, keys and values are the token-axis
// concatenation over the batch (frame) dimension, so every query frame
// attends to all frames; projections upstream are shared by construction.
inline Var attention(const Var& q, const Var& k, const Var& v, int heads, bool st_mode) {
    const int N = q->shape[0], Tq = q->shape[1], C = q->shape[2];
    const int Tk = k->shape[1];
    if (C % heads != 0) throw std::invalid_argument("attention: C % heads != 0");
    if (k->shape[0] != N || v->shape[0] != N || v->shape[1] != Tk || k->shape[2] != C ||
        v->shape[2] != C)
        throw std::invalid_argument("attention: shape mismatch");
    const int d = C / heads;
    const int Tkv = st_mode ? N * Tk : Tk;

    // Per-(sample, head) softmax probabilities are kept for the backward pass.
    auto probs = std::make_shared<std::vector<float>>(
        static_cast<std::size_t>(N) * heads * Tq * Tkv);

    auto out = detail::op({N, Tq, C}, {q, k, v}, [q, k, v, probs, N, Tq, Tk, C, heads, d,
                                                  st_mode, Tkv](Node& n) {
        std::vector<float> qh(static_cast<std::size_t>(Tq) * d), dqh(qh.size());
        std::vector<float> kh(static_cast<std::size_t>(Tkv) * d), dkh(kh.size());
        std::vector<float> vh(kh.size()), dvh(kh.size());
        std::vector<float> doh(qh.size());
        for (int s = 0; s < N; ++s)
            for (int h = 0; h < heads; ++h) {
                for (int t = 0; t < Tq; ++t)
                    for (int e = 0; e < d; ++e)
                        qh[static_cast<std::size_t>(t) * d + e] =
                            q->v[(static_cast<std::size_t>(s) * Tq + t) * C + h * d + e];
                for (int t = 0; t < Tkv; ++t) {
                    const int src_s = st_mode ? t / Tk : s;
                    const int src_t = st_mode ? t % Tk : t;
                    for (int e = 0; e < d; ++e) {
                        kh[static_cast<std::size_t>(t) * d + e] =
                            k->v[(static_cast<std::size_t>(src_s) * Tk + src_t) * C + h * d + e];
                        vh[static_cast<std::size_t>(t) * d + e] =
                            v->v[(static_cast<std::size_t>(src_s) * Tk + src_t) * C + h * d + e];
                    }
                }
                for (int t = 0; t < Tq; ++t)
                    for (int e = 0; e < d; ++e)
                        doh[static_cast<std::size_t>(t) * d + e] =
                            n.g[(static_cast<std::size_t>(s) * Tq + t) * C + h * d + e];
                std::fill(dqh.begin(), dqh.end(), 0.f);
                std::fill(dkh.begin(), dkh.end(), 0.f);
                std::fill(dvh.begin(), dvh.end(), 0.f);
                detail::attention_head_backward(
                    qh.data(), kh.data(), vh.data(),
                    probs->data() + (static_cast<std::size_t>(s) * heads + h) * Tq * Tkv,
                    doh.data(), Tq, Tkv, d, dqh.data(), dkh.data(), dvh.data());
                if (q->requires_grad)
                    for (int t = 0; t < Tq; ++t)
                        for (int e = 0; e < d; ++e)
                            q->g[(static_cast<std::size_t>(s) * Tq + t) * C + h * d + e] +=
                                dqh[static_cast<std::size_t>(t) * d + e];
                for (int t = 0; t < Tkv; ++t) {
                    const int src_s = st_mode ? t / Tk : s;
                    const int src_t = st_mode ? t % Tk : t;
                    if (k->requires_grad)
                        for (int e = 0; e < d; ++e)
                            k->g[(static_cast<std::size_t>(src_s) * Tk + src_t) * C + h * d + e] +=
                                dkh[static_cast<std::size_t>(t) * d + e];
                    if (v->requires_grad)
                        for (int e = 0; e < d; ++e)
                            v->g[(static_cast<std::size_t>(src_s) * Tk + src_t) * C + h * d + e] +=
                                dvh[static_cast<std::size_t>(t) * d + e];
                }
            }
    });

    std::vector<float> qh(static_cast<std::size_t>(Tq) * d);
    std::vector<float> kh(static_cast<std::size_t>(Tkv) * d);
    std::vector<float> vh(kh.size());
    std::vector<float> oh(qh.size());
    for (int s = 0; s < N; ++s)
        for (int h = 0; h < heads; ++h) {
            for (int t = 0; t < Tq; ++t)
                for (int e = 0; e < d; ++e)
                    qh[static_cast<std::size_t>(t) * d + e] =
                        q->v[(static_cast<std::size_t>(s) * Tq + t) * C + h * d + e];
            for (int t = 0; t < Tkv; ++t) {
                const int src_s = st_mode ? t / Tk : s;
                const int src_t = st_mode ? t % Tk : t;
                for (int e = 0; e < d; ++e) {
                    kh[static_cast<std::size_t>(t) * d + e] =
                        k->v[(static_cast<std::size_t>(src_s) * Tk + src_t) * C + h * d + e];
                    vh[static_cast<std::size_t>(t) * d + e] =
                        v->v[(static_cast<std::size_t>(src_s) * Tk + src_t) * C + h * d + e];
                }
            }
            detail::attention_head_forward(
                qh.data(), kh.data(), vh.data(), Tq, Tkv, d,
                probs->data() + (static_cast<std::size_t>(s) * heads + h) * Tq * Tkv,
                oh.data());
            for (int t = 0; t < Tq; ++t)
                for (int e = 0; e < d; ++e)
                    out->v[(static_cast<std::size_t>(s) * Tq + t) * C + h * d + e] =
                        oh[static_cast<std::size_t>(t) * d + e];
        }
    return out;
}

// ---- reductions / losses ----

// Mean squared error against a constant target, optionally restricted by a
// per-element weight mask (1 = include). The divisor is the included count.
inline Var mse_loss(const Var& x, const std::vector<float>& target,
                    const std::vector<float>* mask = nullptr) {
    if (target.size() != x->v.size()) throw std::invalid_argument("mse_loss: target size");
    double count = 0.0;
    if (mask) {
        for (float m : *mask) count += m;
    } else {
        count = static_cast<double>(x->v.size());
    }
    if (count <= 0.0) throw std::invalid_argument("mse_loss: empty mask");
    auto target_copy = std::make_shared<std::vector<float>>(target);
    auto mask_copy = mask ? std::make_shared<std::vector<float>>(*mask) : nullptr;
    const float inv = static_cast<float>(1.0 / count);
    auto out = detail::op({1}, {x}, [x, target_copy, mask_copy, inv](Node& n) {
        if (!x->requires_grad) return;
        const float s = n.g[0] * inv * 2.f;
        for (std::size_t i = 0; i < x->v.size(); ++i) {
            const float m = mask_copy ? (*mask_copy)[i] : 1.f;
            x->g[i] += s * m * (x->v[i] - (*target_copy)[i]);
        }
    });
    double acc = 0.0;
    for (std::size_t i = 0; i < x->v.size(); ++i) {
        const float m = mask_copy ? (*mask_copy)[i] : 1.f;
        const double di = static_cast<double>(x->v[i]) - (*target_copy)[i];
        acc += m * di * di;
    }
    out->v[0] = static_cast<float>(acc * inv);
    return out;
}

// ---- parameters and optimizer ----

struct Parameter {
    std::string name;
    Var var;
};

inline Var make_param(std::string /*unused*/, Shape shape) { return make_var(shape, true); }

inline void fill_normal(Var& v, Rng& rng, float stddev) {
    for (auto& x : v->v) x = rng.normal_f() * stddev;
}

// He-style fan-in init for conv / linear weights.
inline void init_fan_in(Var& v, Rng& rng) {
    int fan_in = 1;
    for (std::size_t i = 1; i < v->shape.size(); ++i) fan_in *= v->shape[i];
    fill_normal(v, rng, std::sqrt(2.f / static_cast<float>(fan_in)));
}

class Adam {
public:
    explicit Adam(float lr = 1e-3f, float b1 = 0.9f, float b2 = 0.999f, float eps = 1e-8f)
        : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void add_params(const std::vector<Var>& params) {
        for (const auto& p : params) {
            slots_.push_back({p, std::vector<float>(p->v.size(), 0.f),
                              std::vector<float>(p->v.size(), 0.f)});
        }
    }

    void zero_grad() {
        for (auto& s : slots_) std::fill(s.var->g.begin(), s.var->g.end(), 0.f);
    }

    void step() {
        ++t_;
        const float c1 = 1.f - std::pow(b1_, static_cast<float>(t_));
        const float c2 = 1.f - std::pow(b2_, static_cast<float>(t_));
        for (auto& s : slots_) {
            for (std::size_t i = 0; i < s.var->v.size(); ++i) {
                const float g = s.var->g[i];
                s.m[i] = b1_ * s.m[i] + (1.f - b1_) * g;
                s.v[i] = b2_ * s.v[i] + (1.f - b2_) * g * g;
                s.var->v[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
            }
        }
    }

    void set_lr(float lr) { lr_ = lr; }

private:
    struct Slot {
        Var var;
        std::vector<float> m, v;
    };
    std::vector<Slot> slots_;
    float lr_, b1_, b2_, eps_;
    int t_ = 0;
};

}  // namespace skyforge::nn
