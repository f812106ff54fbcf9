#pragma once

// shared fixtures for the reconstruction / acceptance suites

#include "qmamba/calibration.hpp"
#include "qmamba/reconstruction.hpp"
#include "qmamba/rng.hpp"
#include "qmamba/ssm.hpp"

#include <cmath>

namespace qmamba::testing {

inline Tensor gauss_tensor(Rng& rng, std::vector<size_t> shape, double scale) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.gaussian() * scale);
    return t;
}

inline MambaBlockWeights make_block(Rng& rng, int Dm, int D, int N, int K,
                                    double a_min = 0.005, double a_max = 0.3) {
    MambaBlockWeights w;
    w.model_dim = Dm;
    w.inner_dim = D;
    w.conv_k = K;
    w.W_in = gauss_tensor(rng, {2 * (size_t)D, (size_t)Dm}, 1.0 / std::sqrt((double)Dm));
    w.W_conv1d = gauss_tensor(rng, {(size_t)D, (size_t)K}, 1.0 / std::sqrt((double)K));
    w.W_out = gauss_tensor(rng, {(size_t)Dm, (size_t)D}, 1.0 / std::sqrt((double)D));
    w.ssm.dim_d = D;
    w.ssm.dim_n = N;
    w.ssm.A = Tensor({(size_t)D, (size_t)N});
    for (int d = 0; d < D; ++d)
        for (int n = 0; n < N; ++n) {
            const double frac = N > 1 ? static_cast<double>(n) / (N - 1) : 0.0;
            w.ssm.A[d * N + n] = static_cast<float>(-a_min * std::pow(a_max / a_min, frac));
        }
    w.ssm.D_skip = gauss_tensor(rng, {(size_t)D}, 0.5);
    w.ssm.W_B = gauss_tensor(rng, {(size_t)N, (size_t)D}, 1.0 / std::sqrt((double)D));
    w.ssm.W_C = gauss_tensor(rng, {(size_t)N, (size_t)D}, 1.0 / std::sqrt((double)D));
    w.ssm.W_delta = gauss_tensor(rng, {(size_t)D, (size_t)D}, 0.4 / std::sqrt((double)D));
    return w;
}

// Percentile-initialized W/A assignment for a single block, outside the
// full pipeline: minmax weights, percentile activations, LtSQ or uniform
// abar by the skewness condition, TGQ over h with `lambda` groups.
inline QuantizerAssignment init_block_assignment(const MambaBlockWeights& w,
                                                 const Tensor& calib_x, int wbits, int abits,
                                                 int lambda, double alpha,
                                                 Initializer init = Initializer::Percentile) {
    BlockTrace trace;
    mamba_block_forward(calib_x, w, nullptr, false, &trace);
    QuantizerAssignment qa = QuantizerAssignment::disabled_for_block();

    auto wparams = [&](const Tensor& t) {
        double mn = tensor_min(t), mx = tensor_max(t);
        if (!(mx > mn)) {
            mn -= 1e-3;
            mx += 1e-3;
        }
        auto [s, z] = init_scale_zero(mn, mx, wbits);
        return QuantParams::uniform(wbits, s, z);
    };
    qa.mutable_slot("W_in") = {true, wparams(w.W_in)};
    qa.mutable_slot("W_conv1d") = {true, wparams(w.W_conv1d)};
    qa.mutable_slot("W_out") = {true, wparams(w.W_out)};
    qa.mutable_slot("A") = {true, wparams(w.ssm.A)};
    qa.mutable_slot("D") = {true, wparams(w.ssm.D_skip)};
    qa.mutable_slot("W_B") = {true, wparams(w.ssm.W_B)};
    qa.mutable_slot("W_C") = {true, wparams(w.ssm.W_C)};
    qa.mutable_slot("W_delta") = {true, wparams(w.ssm.W_delta)};

    auto aparams = [&](const Tensor& t, int bits) {
        CalibStats cs(101);
        cs.observe(t);
        return init_from_stats(init, cs, bits);
    };
    qa.mutable_slot("x_t") = {true, aparams(trace.xs, abits)};
    qa.mutable_slot("delta_t") = {true, aparams(trace.delta, abits)};
    qa.mutable_slot("B_t") = {true, aparams(trace.Bt, abits)};
    qa.mutable_slot("C_t") = {true, aparams(trace.Ct, abits)};
    qa.mutable_slot("in_proj.act") = {true, aparams(trace.xin, 8)};
    qa.mutable_slot("conv1d.act") = {true, aparams(trace.u_main, 8)};
    qa.mutable_slot("out_proj.act") = {true, aparams(trace.ym, 8)};

    if (median(trace.abar) > alpha) {
        qa.abar_route = Route::LtSQ;
        qa.mutable_slot("abar_t") = {true, QuantParams::ltsq(abits)};
    } else {
        qa.abar_route = Route::Uniform;
        qa.mutable_slot("abar_t") = {true, aparams(trace.abar, abits)};
    }

    const int L = static_cast<int>(calib_x.dim(1));
    const int G = tgq_num_groups(L, lambda);
    const size_t B = trace.B, DN = static_cast<size_t>(trace.D) * trace.N;
    std::vector<float> scales(G);
    std::vector<int> zps(G);
    for (int g = 0; g < G; ++g) {
        CalibStats cs(202 + g);
        for (size_t b = 0; b < B; ++b)
            for (int t = 0; t < L; ++t) {
                if (tgq_group_index(t, lambda, L) != g) continue;
                Tensor slice({DN});
                std::copy_n(trace.h_raw.data() + (b * L + t) * DN, DN, slice.data());
                cs.observe(slice);
            }
        const QuantParams gp = init_from_stats(init, cs, abits);
        scales[g] = gp.scales[0];
        zps[g] = gp.zero_points[0];
    }
    qa.mutable_slot("h_t") = {true, QuantParams::tgq(abits, lambda, L, scales, zps)};
    return qa;
}

} // namespace qmamba::testing
