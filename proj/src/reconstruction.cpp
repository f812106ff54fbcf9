#include "qmamba/reconstruction.hpp"

#include "qmamba/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qmamba {

namespace {

inline double round_even(double v) { return std::nearbyint(v); }

// dL/d(pre-quant) and scale-grad accumulation through one recorded STE.
// For disabled quantizers the record is absent and gradients pass through.
void ste_backward(const SteRecord& rec, QuantKind kind, const std::vector<double>& g_post,
                  std::vector<double>& g_pre, std::vector<double>* g_scale) {
    for (size_t i = 0; i < g_post.size(); ++i) {
        g_pre[i] = rec.state[i] == 0 ? g_post[i] : 0.0;
        if (g_scale != nullptr && kind != QuantKind::LtSQ) {
            const size_t gi = rec.group.empty() ? 0 : static_cast<size_t>(rec.group[i]);
            (*g_scale)[gi] += g_post[i] * static_cast<double>(rec.coef[i]);
        }
    }
}

struct SteHook {
    const SteRecord* rec = nullptr;
    QuantKind kind = QuantKind::Uniform;
    std::vector<double>* scale_grads = nullptr;
};

SteHook make_hook(const BlockTrace& trace, const QuantizerAssignment* qa,
                  const std::string& name, ScaleGradients& sg, bool learn_scales) {
    SteHook h;
    if (qa == nullptr) return h;
    const QuantSlot& slot = qa->slot(name);
    if (!slot.enabled) return h;
    auto it = trace.ste.find(name);
    if (it == trace.ste.end())
        throw std::invalid_argument("block_backward: trace is missing STE record for " + name);
    h.rec = &it->second;
    h.kind = slot.params.kind;
    if (learn_scales && !slot.params.scales.empty()) {
        auto [e, inserted] = sg.emplace(name, std::vector<double>(slot.params.scales.size(), 0.0));
        (void)inserted;
        h.scale_grads = &e->second;
    }
    return h;
}

// g_pre = STE(g_post); identity when no record
void run_hook(const SteHook& h, const std::vector<double>& g_post, std::vector<double>& g_pre) {
    if (h.rec == nullptr) {
        g_pre = g_post;
        return;
    }
    g_pre.resize(g_post.size());
    ste_backward(*h.rec, h.kind, g_post, g_pre, h.scale_grads);
}

} // namespace

SteGrads ste_fake_quant_grads(const Tensor& x, const QuantParams& p) {
    SteGrads out;
    out.dxhat_dx = Tensor(x.shape());
    out.dxhat_ds = Tensor(x.shape());
    const int qmax = p.qmax();

    switch (p.kind) {
        case QuantKind::Uniform:
        case QuantKind::TGQ: {
            // TGQ inputs are treated elementwise against their group's scale;
            // callers resolve the group via tgq_group_index.
            for (size_t i = 0; i < x.size(); ++i) {
                size_t gi = 0;
                if (p.kind == QuantKind::TGQ) {
                    // interpret leading axis as time when shaped (L, ...)
                    const size_t slice = x.size() / x.dim(0);
                    gi = static_cast<size_t>(tgq_group_index(
                        static_cast<int>(i / slice), p.group_length, p.seq_length));
                }
                const double s = p.scales[gi];
                const int z = p.zero_points[gi];
                const double v = static_cast<double>(x[i]) / s;
                const double r = round_even(v);
                const double qu = r + z;
                if (qu < 0.0) {
                    out.dxhat_dx[i] = 0.0f;
                    out.dxhat_ds[i] = static_cast<float>(0 - z);
                } else if (qu > qmax) {
                    out.dxhat_dx[i] = 0.0f;
                    out.dxhat_ds[i] = static_cast<float>(qmax - z);
                } else {
                    out.dxhat_dx[i] = 1.0f;
                    out.dxhat_ds[i] = static_cast<float>(r - v); // (xhat - x)/s
                }
            }
            break;
        }
        case QuantKind::LtSQ: {
            for (size_t i = 0; i < x.size(); ++i) {
                out.dxhat_dx[i] = (x[i] >= 0.0f && x[i] < 1.0f) ? 1.0f : 0.0f;
                out.dxhat_ds[i] = 0.0f;
            }
            break;
        }
        default:
            throw std::invalid_argument("ste_fake_quant_grads: unsupported quantizer kind");
    }
    return out;
}

BlockGradients block_backward(const BlockTrace& trace, const MambaBlockWeights& w,
                              const QuantizerAssignment* qa, const Tensor& grad_out,
                              bool want_weight_grads, bool learn_weight_scales) {
    if (trace.out.empty())
        throw std::invalid_argument("block_backward: missing forward trace");
    const size_t B = trace.B, L = trace.L, Dm = trace.Dm, D = trace.D, N = trace.N,
                 K = trace.K;
    if (grad_out.size() != B * L * Dm)
        throw std::invalid_argument("block_backward: grad_out shape mismatch");

    BlockGradients result;
    ScaleGradients& sg = result.scales;

    const SteHook hk_out_act = make_hook(trace, qa, "out_proj.act", sg, true);
    const SteHook hk_xt = make_hook(trace, qa, "x_t", sg, true);
    const SteHook hk_dt = make_hook(trace, qa, "delta_t", sg, true);
    const SteHook hk_bt = make_hook(trace, qa, "B_t", sg, true);
    const SteHook hk_ct = make_hook(trace, qa, "C_t", sg, true);
    const SteHook hk_abar = make_hook(trace, qa, "abar_t", sg, true);
    const SteHook hk_h = make_hook(trace, qa, "h_t", sg, true);
    const SteHook hk_conv_act = make_hook(trace, qa, "conv1d.act", sg, true);
    const SteHook hk_in_act = make_hook(trace, qa, "in_proj.act", sg, true);

    const Tensor& Wo_hat = trace.w_hat.at("W_out");
    const Tensor& Wc_hat = trace.w_hat.at("W_conv1d");
    const Tensor& Win_hat = trace.w_hat.at("W_in");
    const Tensor& Wd_hat = trace.w_hat.at("W_delta");
    const Tensor& WB_hat = trace.w_hat.at("W_B");
    const Tensor& WC_hat = trace.w_hat.at("W_C");
    const Tensor& A_hat = trace.w_hat.at("A");
    const Tensor& Dskip_hat = trace.w_hat.at("D");

    // ---- out-projection: out[b,l,m] = sum_d Wo[m,d] ym_hat[b,l,d]
    std::vector<double> g_ym_hat(B * L * D, 0.0);
    std::vector<double> g_Wo(Dm * D, 0.0);
    for (size_t p = 0; p < B * L; ++p)
        for (size_t m = 0; m < Dm; ++m) {
            const double go = grad_out[p * Dm + m];
            for (size_t d = 0; d < D; ++d) {
                g_ym_hat[p * D + d] += go * Wo_hat[m * D + d];
                g_Wo[m * D + d] += go * trace.ym_hat[p * D + d];
            }
        }

    std::vector<double> g_ym;
    run_hook(hk_out_act, g_ym_hat, g_ym);

    // ---- gating: ym = yssm * silu(u_gate)
    std::vector<double> g_yssm(B * L * D), g_ugate(B * L * D);
    for (size_t i = 0; i < B * L * D; ++i) {
        const double sgate = silu(trace.u_gate[i]);
        g_yssm[i] = g_ym[i] * sgate;
        g_ugate[i] = g_ym[i] * static_cast<double>(trace.yssm[i]) * silu_grad(trace.u_gate[i]);
    }

    // ---- scan backward through time
    std::vector<double> g_xs_hat(B * L * D, 0.0);
    std::vector<double> g_delta_hat(B * L * D, 0.0);
    std::vector<double> g_Bt_hat(B * L * N, 0.0);
    std::vector<double> g_Ct_hat(B * L * N, 0.0);
    std::vector<double> g_abar_hat(B * L * D * N, 0.0);
    std::vector<double> g_Dskip(D, 0.0);

    std::vector<double> carry(D * N), g_h_hat(D * N), g_h_raw(D * N);
    for (size_t b = 0; b < B; ++b) {
        std::fill(carry.begin(), carry.end(), 0.0);
        for (size_t t = L; t-- > 0;) {
            const size_t bd = (b * L + t) * D;
            const size_t bn = (b * L + t) * N;
            const size_t bdn = (b * L + t) * D * N;

            for (size_t d = 0; d < D; ++d)
                for (size_t n = 0; n < N; ++n)
                    g_h_hat[d * N + n] =
                        g_yssm[bd + d] * static_cast<double>(trace.Ct_hat[bn + n]) +
                        carry[d * N + n];

            // h_t STE for this slice
            if (hk_h.rec != nullptr) {
                for (size_t i = 0; i < D * N; ++i) {
                    const size_t gi = bdn + i;
                    g_h_raw[i] = hk_h.rec->state[gi] == 0 ? g_h_hat[i] : 0.0;
                    if (hk_h.scale_grads != nullptr)
                        (*hk_h.scale_grads)[hk_h.rec->group[gi]] +=
                            g_h_hat[i] * static_cast<double>(hk_h.rec->coef[gi]);
                }
            } else {
                g_h_raw = g_h_hat;
            }

            for (size_t d = 0; d < D; ++d) {
                const double xs_v = trace.xs_hat[bd + d];
                const double dt_v = trace.delta_hat[bd + d];
                double acc_delta = 0.0, acc_xs = 0.0;
                for (size_t n = 0; n < N; ++n) {
                    const size_t dn = d * N + n;
                    const double gr = g_h_raw[dn];
                    const double h_prev =
                        t == 0 ? 0.0 : static_cast<double>(trace.h_hat[bdn - D * N + dn]);
                    g_abar_hat[bdn + dn] = gr * h_prev;
                    const double bt_v = trace.Bt_hat[bn + n];
                    acc_delta += gr * bt_v * xs_v;
                    acc_xs += gr * dt_v * bt_v;
                    g_Bt_hat[bn + n] += gr * dt_v * xs_v;
                    g_Ct_hat[bn + n] +=
                        g_yssm[bd + d] * static_cast<double>(trace.h_hat[bdn + dn]);
                    carry[dn] = static_cast<double>(trace.abar_hat[bdn + dn]) * gr;
                }
                g_delta_hat[bd + d] += acc_delta;
                g_xs_hat[bd + d] += acc_xs + g_yssm[bd + d] * static_cast<double>(Dskip_hat[d]);
                g_Dskip[d] += g_yssm[bd + d] * xs_v;
            }
        }
    }

    // ---- abar quantizer + discretization abar = exp(delta_hat * A_hat)
    std::vector<double> g_abar;
    run_hook(hk_abar, g_abar_hat, g_abar);

    std::vector<double> g_A(D * N, 0.0);
    for (size_t b = 0; b < B; ++b)
        for (size_t t = 0; t < L; ++t) {
            const size_t bd = (b * L + t) * D;
            const size_t bdn = (b * L + t) * D * N;
            for (size_t d = 0; d < D; ++d) {
                double acc = 0.0;
                const double dt_v = trace.delta_hat[bd + d];
                for (size_t n = 0; n < N; ++n) {
                    const double ga = g_abar[bdn + d * N + n] *
                                      static_cast<double>(trace.abar[bdn + d * N + n]);
                    acc += ga * static_cast<double>(A_hat[d * N + n]);
                    g_A[d * N + n] += ga * dt_v;
                }
                g_delta_hat[bd + d] += acc;
            }
        }

    // ---- delta_t / B_t / C_t quantizers and their projections
    std::vector<double> g_delta;
    run_hook(hk_dt, g_delta_hat, g_delta);
    std::vector<double> g_dpre(B * L * D);
    for (size_t i = 0; i < B * L * D; ++i)
        g_dpre[i] = g_delta[i] * sigmoid(trace.dpre[i]);

    std::vector<double> g_Bt, g_Ct;
    run_hook(hk_bt, g_Bt_hat, g_Bt);
    run_hook(hk_ct, g_Ct_hat, g_Ct);

    std::vector<double> g_Wd(D * D, 0.0), g_WB(N * D, 0.0), g_WC(N * D, 0.0);
    for (size_t p = 0; p < B * L; ++p) {
        const size_t bd = p * D;
        const size_t bn = p * N;
        for (size_t i = 0; i < D; ++i) {
            const double g = g_dpre[bd + i];
            if (g != 0.0)
                for (size_t j = 0; j < D; ++j) {
                    g_Wd[i * D + j] += g * trace.xs_hat[bd + j];
                    g_xs_hat[bd + j] += g * static_cast<double>(Wd_hat[i * D + j]);
                }
        }
        for (size_t i = 0; i < N; ++i) {
            const double gb = g_Bt[bn + i];
            const double gc = g_Ct[bn + i];
            for (size_t j = 0; j < D; ++j) {
                g_WB[i * D + j] += gb * trace.xs_hat[bd + j];
                g_WC[i * D + j] += gc * trace.xs_hat[bd + j];
                g_xs_hat[bd + j] += gb * static_cast<double>(WB_hat[i * D + j]) +
                                    gc * static_cast<double>(WC_hat[i * D + j]);
            }
        }
    }

    // ---- x_t quantizer, SiLU, conv
    std::vector<double> g_xs;
    run_hook(hk_xt, g_xs_hat, g_xs);
    std::vector<double> g_conv_pre(B * L * D);
    for (size_t i = 0; i < B * L * D; ++i)
        g_conv_pre[i] = g_xs[i] * silu_grad(trace.conv_pre[i]);

    std::vector<double> g_Wc(D * K, 0.0);
    std::vector<double> g_um_hat(B * L * D, 0.0);
    for (size_t b = 0; b < B; ++b)
        for (size_t l = 0; l < L; ++l)
            for (size_t d = 0; d < D; ++d) {
                const double g = g_conv_pre[(b * L + l) * D + d];
                if (g == 0.0) continue;
                for (size_t k = 0; k < K; ++k) {
                    const long lp =
                        static_cast<long>(l) - static_cast<long>(K) + 1 + static_cast<long>(k);
                    if (lp < 0) continue;
                    const size_t src = (b * L + static_cast<size_t>(lp)) * D + d;
                    g_Wc[d * K + k] += g * trace.u_main_hat[src];
                    g_um_hat[src] += g * static_cast<double>(Wc_hat[d * K + k]);
                }
            }

    std::vector<double> g_um;
    run_hook(hk_conv_act, g_um_hat, g_um);

    // ---- in-projection (rows [0,D) main path, [D,2D) gate)
    std::vector<double> g_Win(2 * D * Dm, 0.0);
    std::vector<double> g_xin_hat(B * L * Dm, 0.0);
    for (size_t p = 0; p < B * L; ++p)
        for (size_t r = 0; r < 2 * D; ++r) {
            const double g = r < D ? g_um[p * D + r] : g_ugate[p * D + (r - D)];
            if (g == 0.0) continue;
            for (size_t m = 0; m < Dm; ++m) {
                g_Win[r * Dm + m] += g * trace.xin_hat[p * Dm + m];
                g_xin_hat[p * Dm + m] += g * static_cast<double>(Win_hat[r * Dm + m]);
            }
        }

    std::vector<double> g_xin;
    run_hook(hk_in_act, g_xin_hat, g_xin);
    result.input = Tensor(trace.xin.shape());
    for (size_t i = 0; i < g_xin.size(); ++i)
        result.input[i] = static_cast<float>(g_xin[i]);

    // ---- weight quantizer scale gradients / raw weight gradients
    struct WG {
        const char* name;
        const std::vector<double>* g;
        const Tensor* shape_like;
    };
    const WG wgs[] = {{"W_out", &g_Wo, &w.W_out},      {"W_conv1d", &g_Wc, &w.W_conv1d},
                      {"W_in", &g_Win, &w.W_in},       {"W_delta", &g_Wd, &w.ssm.W_delta},
                      {"W_B", &g_WB, &w.ssm.W_B},      {"W_C", &g_WC, &w.ssm.W_C},
                      {"A", &g_A, &w.ssm.A},           {"D", &g_Dskip, &w.ssm.D_skip}};
    for (const auto& e : wgs) {
        const SteHook hook = make_hook(trace, qa, e.name, sg, learn_weight_scales);
        std::vector<double> g_raw;
        run_hook(hook, *e.g, g_raw);
        if (want_weight_grads) {
            Tensor t(e.shape_like->shape());
            for (size_t i = 0; i < g_raw.size(); ++i) t[i] = static_cast<float>(g_raw[i]);
            result.weights[e.name] = std::move(t);
        }
    }
    return result;
}

ScaleGradients backward_block(const Tensor& fp_out, const BlockTrace& trace,
                              const MambaBlockWeights& w, const QuantizerAssignment& qa,
                              bool learn_weight_scales) {
    if (trace.out.empty())
        throw std::invalid_argument("backward_block: missing forward trace");
    if (!fp_out.same_shape(trace.out))
        throw std::invalid_argument("backward_block: fp/quant output shape mismatch");
    Tensor grad_out(fp_out.shape());
    const double inv_n = 1.0 / static_cast<double>(fp_out.size());
    for (size_t i = 0; i < fp_out.size(); ++i)
        grad_out[i] = static_cast<float>(
            2.0 * (static_cast<double>(trace.out[i]) - static_cast<double>(fp_out[i])) * inv_n);
    return block_backward(trace, w, &qa, grad_out, false, learn_weight_scales).scales;
}

namespace {

using dvec = std::vector<double>;

dvec to_dvec(const Tensor& t) { return dvec(t.data(), t.data() + t.size()); }

struct ReplayScales {
    std::map<std::string, dvec> by_name;

    ReplayScales(const QuantizerAssignment& qa, const ScaleVector& sv, const dvec& values) {
        for (const auto& [name, slot] : qa.slots)
            if (slot.enabled && !slot.params.scales.empty())
                by_name[name] = dvec(slot.params.scales.begin(), slot.params.scales.end());
        for (size_t i = 0; i < sv.keys.size(); ++i) {
            auto it = by_name.find(sv.keys[i].first);
            if (it != by_name.end()) it->second[sv.keys[i].second] = values[i];
        }
    }
};

dvec replay_quant(dvec x, const std::string& name, const QuantizerAssignment& qa,
                  const FrozenTrace& ste, const ReplayScales& rs) {
    const QuantSlot& slot = qa.slot(name);
    if (!slot.enabled) return x;
    auto it = ste.find(name);
    if (it == ste.end())
        throw std::invalid_argument("replay: no STE record for " + name);
    const SteRecord& rec = it->second;
    if (rec.state.size() != x.size())
        throw std::invalid_argument("replay: size mismatch for " + name);
    const dvec* scales = nullptr;
    if (slot.params.kind != QuantKind::LtSQ) scales = &rs.by_name.at(name);
    for (size_t i = 0; i < x.size(); ++i) {
        if (slot.params.kind == QuantKind::LtSQ) {
            x[i] = rec.state[i] == 0 ? x[i] + rec.coef[i] : rec.coef[i];
        } else {
            const double s = rec.group.empty() ? (*scales)[0] : (*scales)[rec.group[i]];
            x[i] = rec.state[i] == 0 ? x[i] + s * rec.coef[i] : s * rec.coef[i];
        }
    }
    return x;
}

dvec replay_project(const dvec& in, const dvec& W, size_t rows, size_t cols) {
    const size_t bl = in.size() / cols;
    dvec out(bl * rows, 0.0);
    for (size_t p = 0; p < bl; ++p)
        for (size_t i = 0; i < rows; ++i) {
            double acc = 0.0;
            for (size_t j = 0; j < cols; ++j) acc += W[i * cols + j] * in[p * cols + j];
            out[p * rows + i] = acc;
        }
    return out;
}

} // namespace

double replay_block_loss(const Tensor& x, const MambaBlockWeights& w,
                         const QuantizerAssignment& qa, const FrozenTrace& ste,
                         const ScaleVector& sv, const std::vector<double>& scales,
                         const Tensor& fp_out) {
    const size_t B = x.dim(0), L = x.dim(1), Dm = x.dim(2);
    const size_t D = static_cast<size_t>(w.inner_dim), K = static_cast<size_t>(w.conv_k),
                 N = static_cast<size_t>(w.ssm.dim_n);
    const ReplayScales rs(qa, sv, scales);

    const dvec xin = replay_quant(to_dvec(x), "in_proj.act", qa, ste, rs);
    const dvec Win = replay_quant(to_dvec(w.W_in), "W_in", qa, ste, rs);
    const dvec Wc = replay_quant(to_dvec(w.W_conv1d), "W_conv1d", qa, ste, rs);
    const dvec Wo = replay_quant(to_dvec(w.W_out), "W_out", qa, ste, rs);
    const dvec A = replay_quant(to_dvec(w.ssm.A), "A", qa, ste, rs);
    const dvec Dsk = replay_quant(to_dvec(w.ssm.D_skip), "D", qa, ste, rs);
    const dvec Wd = replay_quant(to_dvec(w.ssm.W_delta), "W_delta", qa, ste, rs);
    const dvec WB = replay_quant(to_dvec(w.ssm.W_B), "W_B", qa, ste, rs);
    const dvec WC = replay_quant(to_dvec(w.ssm.W_C), "W_C", qa, ste, rs);

    const dvec u = replay_project(xin, Win, 2 * D, Dm);
    dvec u_main(B * L * D), u_gate(B * L * D);
    for (size_t p = 0; p < B * L; ++p)
        for (size_t d = 0; d < D; ++d) {
            u_main[p * D + d] = u[p * 2 * D + d];
            u_gate[p * D + d] = u[p * 2 * D + D + d];
        }
    const dvec um = replay_quant(std::move(u_main), "conv1d.act", qa, ste, rs);

    dvec xs(B * L * D);
    for (size_t b = 0; b < B; ++b)
        for (size_t l = 0; l < L; ++l)
            for (size_t d = 0; d < D; ++d) {
                double acc = 0.0;
                for (size_t k = 0; k < K; ++k) {
                    const long lp = static_cast<long>(l) - static_cast<long>(K) + 1 +
                                    static_cast<long>(k);
                    if (lp < 0) continue;
                    acc += Wc[d * K + k] * um[(b * L + static_cast<size_t>(lp)) * D + d];
                }
                xs[(b * L + l) * D + d] = silu(acc);
            }
    const dvec xsh = replay_quant(std::move(xs), "x_t", qa, ste, rs);

    dvec delta = replay_project(xsh, Wd, D, D);
    for (double& v : delta) v = softplus(v);
    const dvec dh = replay_quant(std::move(delta), "delta_t", qa, ste, rs);
    const dvec Bh = replay_quant(replay_project(xsh, WB, N, D), "B_t", qa, ste, rs);
    const dvec Ch = replay_quant(replay_project(xsh, WC, N, D), "C_t", qa, ste, rs);

    dvec abar(B * L * D * N);
    for (size_t p = 0; p < B * L; ++p)
        for (size_t d = 0; d < D; ++d)
            for (size_t n = 0; n < N; ++n)
                abar[(p * D + d) * N + n] = std::exp(dh[p * D + d] * A[d * N + n]);
    const dvec ah = replay_quant(std::move(abar), "abar_t", qa, ste, rs);

    const QuantSlot& hslot = qa.slot("h_t");
    const SteRecord* hrec = nullptr;
    if (hslot.enabled) {
        auto it = ste.find("h_t");
        if (it == ste.end()) throw std::invalid_argument("replay: no STE record for h_t");
        hrec = &it->second;
    }

    dvec ym(B * L * D);
    std::vector<double> hprev(D * N);
    for (size_t b = 0; b < B; ++b) {
        std::fill(hprev.begin(), hprev.end(), 0.0);
        for (size_t t = 0; t < L; ++t) {
            const size_t bd = (b * L + t) * D;
            const size_t bn = (b * L + t) * N;
            const size_t bdn = (b * L + t) * D * N;
            for (size_t d = 0; d < D; ++d) {
                double yacc = 0.0;
                for (size_t n = 0; n < N; ++n) {
                    const size_t dn = d * N + n;
                    double h = ah[bdn + dn] * hprev[dn] + dh[bd + d] * Bh[bn + n] * xsh[bd + d];
                    if (hrec != nullptr) {
                        const size_t i = bdn + dn;
                        const double s = rs.by_name.at("h_t")[hrec->group[i]];
                        h = hrec->state[i] == 0 ? h + s * hrec->coef[i] : s * hrec->coef[i];
                    }
                    hprev[dn] = h;
                    yacc += Ch[bn + n] * h;
                }
                ym[bd + d] = (yacc + Dsk[d] * xsh[bd + d]) * silu(u_gate[bd + d]);
            }
        }
    }

    const dvec ymh = replay_quant(std::move(ym), "out_proj.act", qa, ste, rs);
    const dvec out = replay_project(ymh, Wo, Dm, D);

    double acc = 0.0;
    for (size_t i = 0; i < out.size(); ++i) {
        const double dlt = out[i] - static_cast<double>(fp_out[i]);
        acc += dlt * dlt;
    }
    return acc / static_cast<double>(out.size());
}

std::vector<double> finite_diff_grads(
    const std::function<double(const std::vector<double>&)>& loss_fn,
    const std::vector<double>& scales, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grads: eps must be positive");
    std::vector<double> grads(scales.size());
    std::vector<double> work = scales;
    for (size_t i = 0; i < scales.size(); ++i) {
        const double h = eps * std::max(1.0, std::abs(scales[i]));
        work[i] = scales[i] + h;
        const double up = loss_fn(work);
        work[i] = scales[i] - h;
        const double dn = loss_fn(work);
        work[i] = scales[i];
        grads[i] = (up - dn) / (2.0 * h);
    }
    return grads;
}

ScaleVector collect_scales(const QuantizerAssignment& qa, bool include_weights) {
    ScaleVector sv;
    const auto& wnames = QuantizerAssignment::ssm_weight_names();
    const auto& bwnames = QuantizerAssignment::block_weight_names();
    auto is_weight = [&](const std::string& n) {
        return std::find(wnames.begin(), wnames.end(), n) != wnames.end() ||
               std::find(bwnames.begin(), bwnames.end(), n) != bwnames.end();
    };
    for (const auto& [name, slot] : qa.slots) {
        if (!slot.enabled || slot.params.scales.empty()) continue;
        if (!include_weights && is_weight(name)) continue;
        for (size_t i = 0; i < slot.params.scales.size(); ++i) {
            sv.keys.emplace_back(name, static_cast<int>(i));
            sv.values.push_back(slot.params.scales[i]);
        }
    }
    return sv;
}

void assign_scales(QuantizerAssignment& qa, const ScaleVector& sv,
                   const std::vector<double>& values) {
    if (values.size() != sv.keys.size())
        throw std::invalid_argument("assign_scales: value count mismatch");
    for (size_t i = 0; i < values.size(); ++i) {
        const auto& [name, idx] = sv.keys[i];
        qa.mutable_slot(name).params.scales[idx] = static_cast<float>(values[i]);
    }
}

void ReconConfig::validate() const {
    if (iterations < 1) throw std::invalid_argument("recon: iterations must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("recon: lr must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
        throw std::invalid_argument("recon: betas must lie in (0,1)");
    if (batch_size < 1) throw std::invalid_argument("recon: batch_size must be >= 1");
}

void Adam::step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
        params[i] -= lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
    }
}

ReconResult reconstruct_block(const MambaBlockWeights& block, const QuantizerAssignment& qa0,
                              const Tensor& calib, const ReconConfig& cfg) {
    cfg.validate();
    if (calib.rank() != 3) throw std::invalid_argument("reconstruct_block: calib must be (N,L,Dm)");
    const size_t ncal = calib.dim(0), L = calib.dim(1), Dm = calib.dim(2);

    const Tensor fp_all = mamba_block_forward(calib, block, nullptr);

    ReconResult res;
    res.qa = qa0;
    res.initial_mse = mse(fp_all, mamba_block_forward(calib, block, &res.qa));

    // scales are learned as rho = ln(s): the magnitudes of the different
    // quantizers span several decades and Adam steps have to stay relative
    ScaleVector sv = collect_scales(res.qa, cfg.learn_weight_scales);
    std::vector<double> rho(sv.values.size());
    for (size_t i = 0; i < rho.size(); ++i) rho[i] = std::log(sv.values[i]);
    Adam opt(sv.values.size(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    Rng rng(cfg.seed);

    Tensor xb({static_cast<size_t>(cfg.batch_size), L, Dm});
    Tensor fb({static_cast<size_t>(cfg.batch_size), L, Dm});
    std::vector<double> grads(sv.values.size());

    for (int it = 0; it < cfg.iterations; ++it) {
        for (int b = 0; b < cfg.batch_size; ++b) {
            const size_t idx = rng.uniform_index(ncal);
            std::copy_n(calib.data() + idx * L * Dm, L * Dm, xb.data() + b * L * Dm);
            std::copy_n(fp_all.data() + idx * L * Dm, L * Dm, fb.data() + b * L * Dm);
        }

        BlockTrace trace;
        mamba_block_forward(xb, block, &res.qa, false, &trace);
        const double loss = mse(fb, trace.out);
        if (!std::isfinite(loss))
            throw std::runtime_error("reconstruct_block: non-finite loss at iteration " +
                                     std::to_string(it));
        const double lr_now = cosine_lr(cfg.lr, it, cfg.iterations);
        res.curve.push_back({it, loss, lr_now});

        const ScaleGradients sgrads =
            backward_block(fb, trace, block, res.qa, cfg.learn_weight_scales);
        std::fill(grads.begin(), grads.end(), 0.0);
        for (size_t i = 0; i < sv.keys.size(); ++i) {
            auto it2 = sgrads.find(sv.keys[i].first);
            if (it2 != sgrads.end())
                grads[i] = it2->second[sv.keys[i].second] * sv.values[i]; // dL/drho
        }

        opt.step(rho, grads, lr_now);
        for (size_t i = 0; i < rho.size(); ++i)
            sv.values[i] = std::max(std::exp(rho[i]), 1e-8);
        assign_scales(res.qa, sv, sv.values);
    }

    res.final_mse = mse(fp_all, mamba_block_forward(calib, block, &res.qa));
    return res;
}

} // namespace qmamba
