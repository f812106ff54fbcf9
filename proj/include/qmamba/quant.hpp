#pragma once

#include "qmamba/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace qmamba {

enum class QuantKind { Uniform, Log2, LtSQ, TGQ };

std::string quant_kind_name(QuantKind k);
QuantKind quant_kind_from_name(const std::string& s);

// Affine / non-uniform quantizer state. For Uniform and Log2 there is a
// single (scale, zero_point); TGQ carries one pair per temporal group;
// LtSQ is parameter-free (codes are exponents of 1 - a).
struct QuantParams {
    int bits = 8;
    QuantKind kind = QuantKind::Uniform;
    std::vector<float> scales;
    std::vector<int> zero_points;
    int group_length = 0; // TGQ lambda
    int seq_length = 0;   // TGQ L

    int qmax() const { return (1 << bits) - 1; }

    static QuantParams uniform(int bits, float scale, int zero_point);
    static QuantParams log2(int bits);
    static QuantParams ltsq(int bits);
    static QuantParams tgq(int bits, int lambda, int seq_len,
                           std::vector<float> scales, std::vector<int> zero_points);

    // Throws std::invalid_argument when any invariant is violated.
    void validate() const;
};

// Integer codes produced by a quantizer, each in [0, 2^bits - 1].
struct QTensor {
    std::vector<size_t> shape;
    std::vector<int32_t> data;
    QuantParams params;
};

struct FakeQuantResult {
    QTensor q;
    Tensor dequant;
};

// q = clip(round(x/s) + z, 0, 2^b-1), xhat = s*(q - z).
// Rounding is round-half-to-even throughout.
FakeQuantResult uniform_fake_quant(const Tensor& x, const QuantParams& p);

// Scale/zero-point from an observed range: s = (ub-lb)/(2^b-1),
// z = clip(round(-lb/s), 0, 2^b-1). Throws on ub <= lb.
std::pair<float, int> init_scale_zero(double lb, double ub, int bits);

// q = clip(round(-log2 x), 0, 2^b-1), xhat = 2^-q. Domain (0, 1].
FakeQuantResult log2_fake_quant(const Tensor& x, int bits);

// Long-tailed skewness quantizer for decay factors a in [0,1):
//   q = clip(round(-log2(1 - a)), 0, 2^b-1), ahat = 1 - 2^-q.
// Codes get exponentially finer as a -> 1. Inputs >= 1 saturate at the
// largest code (exp(dA) can round to 1.0f when d is tiny); a < 0 throws.
FakeQuantResult ltsq_fake_quant(const Tensor& a, int bits);

enum class Route { LtSQ, Uniform };

std::string route_name(Route r);

// Skewness condition: LtSQ iff median over all calibration elements
// strictly exceeds alpha, else Uniform.
Route skewness_route(const Tensor& abar_calib, double alpha);

// Temporal grouping: G = max(1, floor(L/lambda)) groups, 0-based t,
// trailing remainder steps merged into the last group.
int tgq_num_groups(int seq_len, int lambda);
int tgq_group_index(int t, int lambda, int seq_len);

// Group-wise uniform quantization of a hidden-state sequence shaped
// (L, ...) or (B, L, ...): time slice t uses the (s, z) pair of its group.
FakeQuantResult tgq_fake_quant(const Tensor& h, const QuantParams& p);

// Arithmetic right shift as floor division by 2^k, defined for any k >= 0.
inline int64_t floor_shift(int64_t v, int k) {
    if (k <= 0) return v;
    if (k >= 63) return v < 0 ? -1 : 0;
    return v >> k; // arithmetic for signed operands (C++20)
}

// Fused decay product of Eq. ahat*hhat for LtSQ codes: with v = hq - z,
//   result = s * (v - (v >> aq))
// which approximates s*v*(1 - 2^-aq) within one LSB (|error| < s).
std::vector<float> shift_decay(const std::vector<int64_t>& hq_minus_z,
                               const std::vector<int32_t>& aq_codes, float scale);
inline float shift_decay_one(int64_t v, int32_t aq, float scale) {
    return scale * static_cast<float>(v - floor_shift(v, aq));
}

} // namespace qmamba
