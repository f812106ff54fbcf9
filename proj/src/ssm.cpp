#include "qmamba/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qmamba {

namespace {

inline double round_even(double v) { return std::nearbyint(v); }

struct QuantCtx {
    const QuantizerAssignment* qa = nullptr;
    BlockTrace* trace = nullptr;
};

// Tensor-wise quantizer application with optional STE capture.
// Disabled slots (and the FP path) return the input untouched.
Tensor apply_quant(const Tensor& x, const std::string& name, const QuantCtx& ctx) {
    if (ctx.qa == nullptr) return x;
    const QuantSlot& slot = ctx.qa->slot(name);
    if (!slot.enabled) return x;
    const QuantParams& p = slot.params;
    const int qmax = p.qmax();

    SteRecord rec;
    const bool capture = ctx.trace != nullptr;
    if (capture) {
        rec.state.resize(x.size());
        rec.coef.resize(x.size());
    }

    Tensor out(x.shape());
    switch (p.kind) {
        case QuantKind::Uniform: {
            const double s = p.scales[0];
            const int z = p.zero_points[0];
            for (size_t i = 0; i < x.size(); ++i) {
                const double v = static_cast<double>(x[i]) / s;
                const double r = round_even(v);
                const double qu = r + z;
                int8_t state = 0;
                double coef, xhat;
                if (qu < 0.0) {
                    state = -1;
                    coef = -z;
                    xhat = s * coef;
                } else if (qu > qmax) {
                    state = 1;
                    coef = qmax - z;
                    xhat = s * coef;
                } else {
                    coef = r - v; // (xhat - x)/s
                    xhat = s * r;
                }
                out[i] = static_cast<float>(xhat);
                if (capture) {
                    rec.state[i] = state;
                    rec.coef[i] = static_cast<float>(coef);
                }
            }
            break;
        }
        case QuantKind::LtSQ: {
            for (size_t i = 0; i < x.size(); ++i) {
                const double a = x[i];
                if (a < 0.0)
                    throw std::invalid_argument("abar quantizer: A-bar out of range (a < 0)");
                int8_t state = 0;
                double ahat;
                if (a >= 1.0) {
                    state = 1; // saturate at the largest code
                    ahat = 1.0 - std::exp2(-static_cast<double>(qmax));
                } else {
                    const double w = -std::log2(1.0 - a);
                    const double q = std::min(std::max(round_even(w), 0.0),
                                              static_cast<double>(qmax));
                    ahat = 1.0 - std::exp2(-q);
                }
                out[i] = static_cast<float>(ahat);
                if (capture) {
                    rec.state[i] = state;
                    rec.coef[i] = state == 0 ? static_cast<float>(ahat - a)
                                             : static_cast<float>(ahat);
                }
            }
            break;
        }
        default:
            throw std::invalid_argument("apply_quant: unsupported kind for " + name);
    }
    if (capture) ctx.trace->ste[name] = std::move(rec);
    return out;
}

// out[b,l,i] = sum_j W[i,j] * in[b,l,j]
Tensor project(const Tensor& in, const Tensor& W, size_t rows, size_t cols) {
    const size_t bl = in.size() / cols;
    Tensor out({in.dim(0), in.dim(1), rows});
    for (size_t p = 0; p < bl; ++p) {
        const float* src = in.data() + p * cols;
        float* dst = out.data() + p * rows;
        for (size_t i = 0; i < rows; ++i) {
            double acc = 0.0;
            const float* w = W.data() + i * cols;
            for (size_t j = 0; j < cols; ++j) acc += static_cast<double>(w[j]) * src[j];
            dst[i] = static_cast<float>(acc);
        }
    }
    return out;
}

struct ScanInputs {
    const Tensor& xs_hat;
    const Tensor& delta_hat;
    const Tensor& Bt_hat;
    const Tensor& Ct_hat;
    const Tensor& abar_hat;
    const Tensor& Dskip_hat;
    const std::vector<int32_t>* abar_codes; // LtSQ codes when shift is in play
};

// Sequential recurrence with optional TGQ state quantization and the
// bit-shift decay path. Fills h_raw/h_hat (and the h_t STE record) when
// tracing.
Tensor scan_recurrence(const ScanInputs& in, size_t B, size_t L, size_t D, size_t N,
                       const QuantSlot* h_slot, bool use_shift, const QuantCtx& ctx) {
    const bool quant_h = h_slot != nullptr && h_slot->enabled;
    const QuantParams* hp = quant_h ? &h_slot->params : nullptr;
    const bool h_grouped = quant_h && hp->kind == QuantKind::TGQ;
    if (quant_h && !h_grouped && hp->kind != QuantKind::Uniform)
        throw std::invalid_argument("h_t quantizer must be TGQ or tensor-wise uniform");
    if (h_grouped && hp->seq_length != static_cast<int>(L))
        throw std::invalid_argument("h_t quantizer seq_length does not match input");

    SteRecord rec;
    const bool capture = ctx.trace != nullptr && quant_h;
    if (capture) {
        rec.state.assign(B * L * D * N, 0);
        rec.coef.assign(B * L * D * N, 0.0f);
        rec.group.assign(B * L * D * N, 0);
    }

    const bool shift_path = use_shift && quant_h && in.abar_codes != nullptr;

    Tensor y({B, L, D});
    Tensor h_raw_t, h_hat_t;
    if (ctx.trace != nullptr) {
        h_raw_t = Tensor({B, L, D, N});
        h_hat_t = Tensor({B, L, D, N});
    }

    // recurrence state carried in double; quantization snaps it back to f32
    std::vector<double> h_prev(D * N);
    std::vector<int64_t> hq_prev(D * N);
    for (size_t b = 0; b < B; ++b) {
        std::fill(h_prev.begin(), h_prev.end(), 0.0);
        std::fill(hq_prev.begin(), hq_prev.end(), 0);
        float s_prev = 0.0f;
        int z_prev = 0;
        bool have_codes = false;

        for (size_t t = 0; t < L; ++t) {
            const size_t base_d = (b * L + t) * D;
            const size_t base_n = (b * L + t) * N;
            const size_t base_dn = (b * L + t) * D * N;

            int g = 0;
            double sg = 0.0;
            int zg = 0, qmax = 0;
            if (quant_h) {
                if (h_grouped)
                    g = tgq_group_index(static_cast<int>(t), hp->group_length, hp->seq_length);
                sg = hp->scales[g];
                zg = hp->zero_points[g];
                qmax = hp->qmax();
            }

            for (size_t d = 0; d < D; ++d) {
                const double dh = in.delta_hat[base_d + d];
                const double xh = in.xs_hat[base_d + d];
                double yacc = 0.0;
                for (size_t n = 0; n < N; ++n) {
                    const size_t dn = d * N + n;
                    const double a = in.abar_hat[base_dn + dn];
                    double decay;
                    if (t == 0) {
                        decay = 0.0; // h_0 = 0
                    } else if (shift_path && have_codes) {
                        const int64_t v = hq_prev[dn] - z_prev;
                        decay = shift_decay_one(v, in.abar_codes->at(base_dn + dn), s_prev);
                    } else {
                        decay = a * h_prev[dn];
                    }
                    const double hraw =
                        decay + (dh * static_cast<double>(in.Bt_hat[base_n + n])) * xh;

                    double hhat = hraw;
                    if (quant_h) {
                        const double v = hraw / sg;
                        const double r = round_even(v);
                        const double qu = r + zg;
                        int8_t state = 0;
                        double coef;
                        int32_t code;
                        if (qu < 0.0) {
                            state = -1;
                            coef = -zg;
                            code = 0;
                        } else if (qu > qmax) {
                            state = 1;
                            coef = qmax - zg;
                            code = qmax;
                        } else {
                            coef = r - v;
                            code = static_cast<int32_t>(qu);
                        }
                        hhat = static_cast<float>(sg * (code - zg));
                        hq_prev[dn] = code;
                        if (capture) {
                            rec.state[base_dn + dn] = state;
                            rec.coef[base_dn + dn] = static_cast<float>(coef);
                            rec.group[base_dn + dn] = g;
                        }
                    }
                    h_prev[dn] = hhat;
                    if (ctx.trace != nullptr) {
                        h_raw_t[base_dn + dn] = static_cast<float>(hraw);
                        h_hat_t[base_dn + dn] = static_cast<float>(hhat);
                    }
                    yacc += static_cast<double>(in.Ct_hat[base_n + n]) * hhat;
                }
                y[base_d + d] =
                    static_cast<float>(yacc + static_cast<double>(in.Dskip_hat[d]) * xh);
            }
            if (quant_h) {
                s_prev = static_cast<float>(sg);
                z_prev = zg;
                have_codes = true;
            }
        }
    }

    if (ctx.trace != nullptr) {
        ctx.trace->h_raw = std::move(h_raw_t);
        ctx.trace->h_hat = std::move(h_hat_t);
        if (capture) ctx.trace->ste["h_t"] = std::move(rec);
    }
    return y;
}

// Shared SSM stage: quantize the entry tensor, project delta/B/C, discretize,
// quantize the decay factors, run the recurrence.
Tensor ssm_stage(const Tensor& xs, const SsmParams& p, const QuantCtx& ctx, bool use_shift) {
    const size_t B = xs.dim(0), L = xs.dim(1), D = xs.dim(2);
    const size_t N = static_cast<size_t>(p.dim_n);
    if (D != static_cast<size_t>(p.dim_d))
        throw std::invalid_argument("ssm: input channel dim does not match params");

    const Tensor xs_hat = apply_quant(xs, "x_t", ctx);
    const Tensor A_hat = apply_quant(p.A, "A", ctx);
    const Tensor Dskip_hat = apply_quant(p.D_skip, "D", ctx);
    const Tensor Wd_hat = apply_quant(p.W_delta, "W_delta", ctx);
    const Tensor WB_hat = apply_quant(p.W_B, "W_B", ctx);
    const Tensor WC_hat = apply_quant(p.W_C, "W_C", ctx);

    Tensor dpre = project(xs_hat, Wd_hat, D, D);
    Tensor delta(dpre.shape());
    for (size_t i = 0; i < dpre.size(); ++i)
        delta[i] = static_cast<float>(softplus(dpre[i]));
    const Tensor delta_hat = apply_quant(delta, "delta_t", ctx);

    Tensor Bt = project(xs_hat, WB_hat, N, D);
    Tensor Ct = project(xs_hat, WC_hat, N, D);
    const Tensor Bt_hat = apply_quant(Bt, "B_t", ctx);
    const Tensor Ct_hat = apply_quant(Ct, "C_t", ctx);

    Tensor abar({B, L, D, N});
    for (size_t b = 0; b < B; ++b)
        for (size_t t = 0; t < L; ++t)
            for (size_t d = 0; d < D; ++d) {
                const float dt = delta_hat[(b * L + t) * D + d];
                const size_t base = ((b * L + t) * D + d) * N;
                for (size_t n = 0; n < N; ++n)
                    abar[base + n] =
                        static_cast<float>(std::exp(static_cast<double>(dt) * A_hat[d * N + n]));
            }

    // LtSQ codes are re-derived from the dequantized values when the shift
    // kernel needs them; round-to-nearest on exact 1-2^-q values is stable.
    Tensor abar_hat = apply_quant(abar, "abar_t", ctx);
    std::vector<int32_t> abar_codes;
    const std::vector<int32_t>* codes_ptr = nullptr;
    if (ctx.qa != nullptr && use_shift) {
        const QuantSlot& aslot = ctx.qa->slot("abar_t");
        if (aslot.enabled && aslot.params.kind == QuantKind::LtSQ) {
            abar_codes.resize(abar_hat.size());
            const int qm = aslot.params.qmax();
            for (size_t i = 0; i < abar_hat.size(); ++i) {
                const double one_minus = 1.0 - static_cast<double>(abar_hat[i]);
                abar_codes[i] = one_minus <= 0.0
                                    ? qm
                                    : static_cast<int32_t>(std::min(
                                          std::max(round_even(-std::log2(one_minus)), 0.0),
                                          static_cast<double>(qm)));
            }
            codes_ptr = &abar_codes;
        }
    }

    if (ctx.trace != nullptr) {
        ctx.trace->B = static_cast<int>(B);
        ctx.trace->L = static_cast<int>(L);
        ctx.trace->D = static_cast<int>(D);
        ctx.trace->N = static_cast<int>(N);
        ctx.trace->xs = xs;
        ctx.trace->xs_hat = xs_hat;
        ctx.trace->dpre = std::move(dpre);
        ctx.trace->delta = std::move(delta);
        ctx.trace->delta_hat = delta_hat;
        ctx.trace->Bt = std::move(Bt);
        ctx.trace->Ct = std::move(Ct);
        ctx.trace->Bt_hat = Bt_hat;
        ctx.trace->Ct_hat = Ct_hat;
        ctx.trace->abar = std::move(abar);
        ctx.trace->abar_hat = abar_hat;
        ctx.trace->w_hat["A"] = A_hat;
        ctx.trace->w_hat["D"] = Dskip_hat;
        ctx.trace->w_hat["W_delta"] = Wd_hat;
        ctx.trace->w_hat["W_B"] = WB_hat;
        ctx.trace->w_hat["W_C"] = WC_hat;
    }

    const QuantSlot* h_slot = ctx.qa != nullptr ? &ctx.qa->slot("h_t") : nullptr;
    ScanInputs in{xs_hat, delta_hat, Bt_hat, Ct_hat, abar_hat, Dskip_hat, codes_ptr};
    Tensor y = scan_recurrence(in, B, L, D, N, h_slot, use_shift, ctx);
    if (ctx.trace != nullptr) ctx.trace->yssm = y;
    return y;
}

void require_slots(const QuantizerAssignment& qa, const std::vector<std::string>& names) {
    for (const auto& n : names)
        if (!qa.has(n)) throw std::invalid_argument("missing quantizer assignment: " + n);
}

} // namespace

void SsmParams::validate() const {
    if (dim_d <= 0 || dim_n <= 0) throw std::invalid_argument("ssm params: bad dims");
    const size_t d = static_cast<size_t>(dim_d), n = static_cast<size_t>(dim_n);
    if (A.size() != d * n) throw std::invalid_argument("ssm params: A must be (D,N)");
    for (size_t i = 0; i < A.size(); ++i)
        if (!(A[i] < 0.0f)) throw std::invalid_argument("ssm params: A entries must be negative");
    if (D_skip.size() != d) throw std::invalid_argument("ssm params: D_skip must be (D)");
    if (W_B.size() != n * d || W_C.size() != n * d)
        throw std::invalid_argument("ssm params: W_B/W_C must be (N,D)");
    if (W_delta.size() != d * d) throw std::invalid_argument("ssm params: W_delta must be (D,D)");
}

void MambaBlockWeights::validate() const {
    ssm.validate();
    if (model_dim <= 0 || inner_dim != ssm.dim_d || conv_k < 1)
        throw std::invalid_argument("block weights: bad dims");
    const size_t dm = static_cast<size_t>(model_dim), d = static_cast<size_t>(inner_dim);
    if (W_in.size() != 2 * d * dm) throw std::invalid_argument("block weights: W_in must be (2D,Dm)");
    if (W_conv1d.size() != d * static_cast<size_t>(conv_k))
        throw std::invalid_argument("block weights: W_conv1d must be (D,K)");
    if (W_out.size() != dm * d) throw std::invalid_argument("block weights: W_out must be (Dm,D)");
}

const std::vector<std::string>& QuantizerAssignment::ssm_activation_names() {
    static const std::vector<std::string> names = {"x_t", "delta_t", "B_t",
                                                   "C_t", "abar_t",  "h_t"};
    return names;
}

const std::vector<std::string>& QuantizerAssignment::block_activation_names() {
    static const std::vector<std::string> names = {"in_proj.act", "conv1d.act", "out_proj.act"};
    return names;
}

const std::vector<std::string>& QuantizerAssignment::ssm_weight_names() {
    static const std::vector<std::string> names = {"A", "D", "W_delta", "W_B", "W_C"};
    return names;
}

const std::vector<std::string>& QuantizerAssignment::block_weight_names() {
    static const std::vector<std::string> names = {"W_in", "W_conv1d", "W_out"};
    return names;
}

const QuantSlot& QuantizerAssignment::slot(const std::string& name) const {
    auto it = slots.find(name);
    if (it == slots.end()) throw std::invalid_argument("missing quantizer assignment: " + name);
    return it->second;
}

QuantSlot& QuantizerAssignment::mutable_slot(const std::string& name) {
    return slots[name];
}

QuantizerAssignment QuantizerAssignment::disabled_for_scan() {
    QuantizerAssignment qa;
    for (const auto& n : ssm_activation_names()) qa.slots[n] = QuantSlot{};
    for (const auto& n : ssm_weight_names()) qa.slots[n] = QuantSlot{};
    return qa;
}

QuantizerAssignment QuantizerAssignment::disabled_for_block() {
    QuantizerAssignment qa = disabled_for_scan();
    for (const auto& n : block_activation_names()) qa.slots[n] = QuantSlot{};
    for (const auto& n : block_weight_names()) qa.slots[n] = QuantSlot{};
    return qa;
}

std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& A, const Tensor& B) {
    for (size_t i = 0; i < delta.size(); ++i)
        if (!(delta[i] > 0.0f))
            throw std::invalid_argument("discretize: delta must be positive");

    if (delta.size() == A.size() && delta.size() == B.size()) {
        Tensor abar(delta.shape()), bbar(delta.shape());
        for (size_t i = 0; i < delta.size(); ++i) {
            abar[i] = static_cast<float>(
                std::exp(static_cast<double>(delta[i]) * static_cast<double>(A[i])));
            bbar[i] = delta[i] * B[i];
        }
        return {abar, bbar};
    }

    // delta (...,D), A (D,N), B (...,N) -> (...,D,N)
    if (A.rank() != 2) throw std::invalid_argument("discretize: A must be (D,N)");
    const size_t D = A.dim(0), N = A.dim(1);
    if (delta.dim(delta.rank() - 1) != D || B.dim(B.rank() - 1) != N)
        throw std::invalid_argument("discretize: trailing dims must match A");
    const size_t lead = delta.size() / D;
    if (B.size() / N != lead) throw std::invalid_argument("discretize: leading dims mismatch");

    std::vector<size_t> out_shape(delta.shape());
    out_shape.push_back(N);
    Tensor abar(out_shape), bbar(out_shape);
    for (size_t p = 0; p < lead; ++p)
        for (size_t d = 0; d < D; ++d) {
            const double dt = delta[p * D + d];
            for (size_t n = 0; n < N; ++n) {
                const size_t o = (p * D + d) * N + n;
                abar[o] = static_cast<float>(std::exp(dt * static_cast<double>(A[d * N + n])));
                bbar[o] = static_cast<float>(dt * static_cast<double>(B[p * N + n]));
            }
        }
    return {abar, bbar};
}

Tensor ssm_scan_fp(const Tensor& x, const SsmParams& p, BlockTrace* trace) {
    if (x.rank() != 3) throw std::invalid_argument("ssm_scan_fp: input must be (B,L,D)");
    p.validate();
    QuantCtx ctx{nullptr, trace};
    return ssm_stage(x, p, ctx, false);
}

Tensor ssm_scan_quant(const Tensor& x, const SsmParams& p, const QuantizerAssignment& qa,
                      bool use_shift, BlockTrace* trace) {
    if (x.rank() != 3) throw std::invalid_argument("ssm_scan_quant: input must be (B,L,D)");
    p.validate();
    require_slots(qa, QuantizerAssignment::ssm_activation_names());
    require_slots(qa, QuantizerAssignment::ssm_weight_names());
    QuantCtx ctx{&qa, trace};
    return ssm_stage(x, p, ctx, use_shift);
}

Tensor mamba_block_forward(const Tensor& x, const MambaBlockWeights& w,
                           const QuantizerAssignment* qa, bool use_shift, BlockTrace* trace) {
    if (x.rank() != 3) throw std::invalid_argument("mamba_block_forward: input must be (B,L,Dm)");
    w.validate();
    if (qa != nullptr) {
        require_slots(*qa, QuantizerAssignment::ssm_activation_names());
        require_slots(*qa, QuantizerAssignment::ssm_weight_names());
        require_slots(*qa, QuantizerAssignment::block_activation_names());
        require_slots(*qa, QuantizerAssignment::block_weight_names());
    }
    const size_t B = x.dim(0), L = x.dim(1), Dm = x.dim(2);
    const size_t D = static_cast<size_t>(w.inner_dim);
    const size_t K = static_cast<size_t>(w.conv_k);
    if (Dm != static_cast<size_t>(w.model_dim))
        throw std::invalid_argument("mamba_block_forward: model dim mismatch");

    QuantCtx ctx{qa, trace};

    const Tensor xin_hat = apply_quant(x, "in_proj.act", ctx);
    const Tensor Win_hat = apply_quant(w.W_in, "W_in", ctx);
    const Tensor Wc_hat = apply_quant(w.W_conv1d, "W_conv1d", ctx);
    const Tensor Wo_hat = apply_quant(w.W_out, "W_out", ctx);

    Tensor u = project(xin_hat, Win_hat, 2 * D, Dm); // (B,L,2D)
    Tensor u_main({B, L, D}), u_gate({B, L, D});
    for (size_t p = 0; p < B * L; ++p)
        for (size_t d = 0; d < D; ++d) {
            u_main[p * D + d] = u[p * 2 * D + d];
            u_gate[p * D + d] = u[p * 2 * D + D + d];
        }

    const Tensor um_hat = apply_quant(u_main, "conv1d.act", ctx);

    // causal depthwise conv, taps l-K+1..l, zero padded on the left
    Tensor conv_pre({B, L, D});
    for (size_t b = 0; b < B; ++b)
        for (size_t l = 0; l < L; ++l)
            for (size_t d = 0; d < D; ++d) {
                double acc = 0.0;
                for (size_t k = 0; k < K; ++k) {
                    const long lp = static_cast<long>(l) - static_cast<long>(K) + 1 +
                                    static_cast<long>(k);
                    if (lp < 0) continue;
                    acc += static_cast<double>(Wc_hat[d * K + k]) *
                           um_hat[(b * L + static_cast<size_t>(lp)) * D + d];
                }
                conv_pre[(b * L + l) * D + d] = static_cast<float>(acc);
            }

    Tensor xs(conv_pre.shape());
    for (size_t i = 0; i < conv_pre.size(); ++i)
        xs[i] = static_cast<float>(silu(conv_pre[i]));

    Tensor yssm = ssm_stage(xs, w.ssm, ctx, use_shift);

    Tensor ym({B, L, D});
    for (size_t i = 0; i < ym.size(); ++i)
        ym[i] = static_cast<float>(static_cast<double>(yssm[i]) * silu(u_gate[i]));

    const Tensor ym_hat = apply_quant(ym, "out_proj.act", ctx);
    Tensor out = project(ym_hat, Wo_hat, Dm, D);

    if (trace != nullptr) {
        trace->Dm = static_cast<int>(Dm);
        trace->K = static_cast<int>(K);
        trace->xin = x;
        trace->xin_hat = xin_hat;
        trace->u_main = std::move(u_main);
        trace->u_main_hat = um_hat;
        trace->u_gate = std::move(u_gate);
        trace->conv_pre = std::move(conv_pre);
        trace->ym = std::move(ym);
        trace->ym_hat = ym_hat;
        trace->out = out;
        trace->w_hat["W_in"] = Win_hat;
        trace->w_hat["W_conv1d"] = Wc_hat;
        trace->w_hat["W_out"] = Wo_hat;
    }
    return out;
}

Tensor classifier_logits(const MambaClassifier& model, const Tensor& x,
                         const std::vector<QuantizerAssignment>* qas, bool use_shift) {
    if (x.rank() != 3) throw std::invalid_argument("classifier: input must be (B,L,Dm)");
    if (qas != nullptr && qas->size() != model.blocks.size())
        throw std::invalid_argument("classifier: one assignment per block required");

    Tensor cur = x;
    for (size_t k = 0; k < model.blocks.size(); ++k) {
        const QuantizerAssignment* qa = qas != nullptr ? &(*qas)[k] : nullptr;
        cur = mamba_block_forward(cur, model.blocks[k], qa, use_shift);
    }

    const size_t B = cur.dim(0), L = cur.dim(1), Dm = cur.dim(2);
    const size_t C = static_cast<size_t>(model.num_classes);
    Tensor logits({B, C});
    for (size_t b = 0; b < B; ++b) {
        std::vector<double> pool(Dm, 0.0);
        for (size_t l = 0; l < L; ++l)
            for (size_t m = 0; m < Dm; ++m) pool[m] += cur[(b * L + l) * Dm + m];
        for (size_t m = 0; m < Dm; ++m) pool[m] /= static_cast<double>(L);
        for (size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (size_t m = 0; m < Dm; ++m)
                acc += static_cast<double>(model.W_head[c * Dm + m]) * pool[m];
            logits[b * C + c] = static_cast<float>(acc);
        }
    }
    return logits;
}

double classifier_accuracy(const MambaClassifier& model, const LabeledData& data,
                           const std::vector<QuantizerAssignment>* qas, bool use_shift) {
    const Tensor logits = classifier_logits(model, data.x, qas, use_shift);
    const size_t B = logits.dim(0), C = logits.dim(1);
    if (data.labels.size() != B) throw std::invalid_argument("accuracy: label count mismatch");
    size_t hits = 0;
    for (size_t b = 0; b < B; ++b) {
        size_t arg = 0;
        for (size_t c = 1; c < C; ++c)
            if (logits[b * C + c] > logits[b * C + arg]) arg = c;
        if (static_cast<int>(arg) == data.labels[b]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(B);
}

std::vector<BlockActStats> calibrate_model(const MambaClassifier& model, const Tensor& x,
                                           uint64_t seed, int lambda,
                                           const std::vector<QuantizerAssignment>* qas) {
    if (qas != nullptr && qas->size() != model.blocks.size())
        throw std::invalid_argument("calibrate_model: one assignment per block required");
    std::vector<BlockActStats> stats;
    stats.reserve(model.blocks.size());
    Tensor cur = x;
    uint64_t salt = 0;
    for (size_t bk = 0; bk < model.blocks.size(); ++bk) {
        const auto& block = model.blocks[bk];
        BlockTrace trace;
        Tensor next = mamba_block_forward(cur, block, qas != nullptr ? &(*qas)[bk] : nullptr,
                                          false, &trace);
        BlockActStats bs;
        auto add = [&](const std::string& name, const Tensor& t) {
            CalibStats cs(seed + 0x9e37 * (++salt));
            cs.observe(t);
            bs.by_name.emplace(name, std::move(cs));
        };
        add("x_t", trace.xs);
        add("delta_t", trace.delta);
        add("B_t", trace.Bt);
        add("C_t", trace.Ct);
        add("abar_t", trace.abar);
        add("h_t", trace.h_raw);
        add("in_proj.act", trace.xin);
        add("conv1d.act", trace.u_main);
        add("out_proj.act", trace.ym);

        if (lambda >= 1) {
            const size_t B = trace.B, L = trace.L, DN = static_cast<size_t>(trace.D) * trace.N;
            const int groups = tgq_num_groups(static_cast<int>(L), lambda);
            for (int g = 0; g < groups; ++g)
                bs.h_groups.emplace_back(seed + 0x9e37 * (++salt));
            for (size_t b = 0; b < B; ++b)
                for (size_t t = 0; t < L; ++t) {
                    const int g = tgq_group_index(static_cast<int>(t), lambda,
                                                  static_cast<int>(L));
                    Tensor slice({DN});
                    std::copy_n(trace.h_raw.data() + (b * L + t) * DN, DN, slice.data());
                    bs.h_groups[g].observe(slice);
                }
        }
        stats.push_back(std::move(bs));
        cur = std::move(next);
    }
    return stats;
}

double sensitivity_sweep(const MambaClassifier& model, const LabeledData& data,
                         const std::string& target, int bits, bool ltsq_for_abar) {
    const auto& names = QuantizerAssignment::ssm_activation_names();
    if (std::find(names.begin(), names.end(), target) == names.end())
        throw std::invalid_argument("sensitivity_sweep: unknown target " + target);

    const double fp_acc = classifier_accuracy(model, data);
    if (bits == 0) return 0.0; // target left at full precision

    const auto stats = calibrate_model(model, data.x, 1);
    std::vector<QuantizerAssignment> qas;
    for (size_t k = 0; k < model.blocks.size(); ++k) {
        QuantizerAssignment qa = QuantizerAssignment::disabled_for_block();
        QuantSlot& slot = qa.mutable_slot(target);
        slot.enabled = true;
        if (target == "abar_t" && ltsq_for_abar) {
            slot.params = QuantParams::ltsq(bits);
            qa.abar_route = Route::LtSQ;
        } else {
            slot.params = init_percentile(stats[k].by_name.at(target), bits);
        }
        qas.push_back(std::move(qa));
    }
    const double q_acc = classifier_accuracy(model, data, &qas);
    return fp_acc - q_acc;
}

} // namespace qmamba
