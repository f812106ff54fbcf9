#include "qmamba/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qmamba {

namespace {

// round-half-to-even; relies on the default FE_TONEAREST mode
inline double round_even(double v) { return std::nearbyint(v); }

inline int32_t clip_code(double q, int qmax) {
    if (q < 0.0) return 0;
    if (q > qmax) return qmax;
    return static_cast<int32_t>(q);
}

} // namespace

std::string quant_kind_name(QuantKind k) {
    switch (k) {
        case QuantKind::Uniform: return "uniform";
        case QuantKind::Log2: return "log2";
        case QuantKind::LtSQ: return "ltsq";
        case QuantKind::TGQ: return "tgq";
    }
    return "uniform";
}

QuantKind quant_kind_from_name(const std::string& s) {
    if (s == "uniform") return QuantKind::Uniform;
    if (s == "log2") return QuantKind::Log2;
    if (s == "ltsq") return QuantKind::LtSQ;
    if (s == "tgq") return QuantKind::TGQ;
    throw std::invalid_argument("unknown quantizer kind: " + s);
}

std::string route_name(Route r) { return r == Route::LtSQ ? "ltsq" : "uniform"; }

QuantParams QuantParams::uniform(int bits, float scale, int zero_point) {
    QuantParams p;
    p.bits = bits;
    p.kind = QuantKind::Uniform;
    p.scales = {scale};
    p.zero_points = {zero_point};
    p.validate();
    return p;
}

QuantParams QuantParams::log2(int bits) {
    QuantParams p;
    p.bits = bits;
    p.kind = QuantKind::Log2;
    p.validate();
    return p;
}

QuantParams QuantParams::ltsq(int bits) {
    QuantParams p;
    p.bits = bits;
    p.kind = QuantKind::LtSQ;
    p.validate();
    return p;
}

QuantParams QuantParams::tgq(int bits, int lambda, int seq_len,
                             std::vector<float> scales, std::vector<int> zero_points) {
    QuantParams p;
    p.bits = bits;
    p.kind = QuantKind::TGQ;
    p.group_length = lambda;
    p.seq_length = seq_len;
    p.scales = std::move(scales);
    p.zero_points = std::move(zero_points);
    p.validate();
    return p;
}

void QuantParams::validate() const {
    if (bits < 2 || bits > 8)
        throw std::invalid_argument("quantizer bits must be in [2,8]");
    for (float s : scales)
        if (!(s > 0.0f))
            throw std::invalid_argument("quantizer scale must be positive");
    for (int z : zero_points)
        if (z < 0 || z > qmax())
            throw std::invalid_argument("zero point outside [0, 2^b-1]");
    if (scales.size() != zero_points.size())
        throw std::invalid_argument("scales/zero_points length mismatch");
    switch (kind) {
        case QuantKind::Uniform:
            if (scales.size() != 1)
                throw std::invalid_argument("uniform quantizer needs a single scale");
            break;
        case QuantKind::Log2:
        case QuantKind::LtSQ:
            if (!scales.empty())
                throw std::invalid_argument("log-family quantizers are parameter-free");
            break;
        case QuantKind::TGQ: {
            if (group_length < 1 || seq_length < 1)
                throw std::invalid_argument("TGQ needs group_length >= 1 and seq_length >= 1");
            const size_t g = static_cast<size_t>(tgq_num_groups(seq_length, group_length));
            if (scales.size() != g)
                throw std::invalid_argument("TGQ scale count mismatch: expected " +
                                            std::to_string(g) + ", got " +
                                            std::to_string(scales.size()));
            break;
        }
    }
}

FakeQuantResult uniform_fake_quant(const Tensor& x, const QuantParams& p) {
    if (p.kind != QuantKind::Uniform)
        throw std::invalid_argument("uniform_fake_quant: wrong quantizer kind");
    p.validate();
    const double s = p.scales[0];
    const int z = p.zero_points[0];
    const int qmax = p.qmax();

    FakeQuantResult r;
    r.q.shape = x.shape();
    r.q.params = p;
    r.q.data.resize(x.size());
    r.dequant = Tensor(x.shape());
    for (size_t i = 0; i < x.size(); ++i) {
        const int32_t q = clip_code(round_even(static_cast<double>(x[i]) / s) + z, qmax);
        r.q.data[i] = q;
        r.dequant[i] = static_cast<float>(s * (q - z));
    }
    return r;
}

std::pair<float, int> init_scale_zero(double lb, double ub, int bits) {
    if (!(ub > lb)) throw std::invalid_argument("init_scale_zero: degenerate range");
    const int qmax = (1 << bits) - 1;
    const double s = (ub - lb) / static_cast<double>(qmax);
    const int z = clip_code(round_even(-lb / s), qmax);
    return {static_cast<float>(s), z};
}

FakeQuantResult log2_fake_quant(const Tensor& x, int bits) {
    const int qmax = (1 << bits) - 1;
    FakeQuantResult r;
    r.q.shape = x.shape();
    r.q.params = QuantParams::log2(bits);
    r.q.data.resize(x.size());
    r.dequant = Tensor(x.shape());
    for (size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        if (!(v > 0.0)) throw std::invalid_argument("log2_fake_quant: log2 domain (x <= 0)");
        const int32_t q = clip_code(round_even(-std::log2(v)), qmax);
        r.q.data[i] = q;
        r.dequant[i] = static_cast<float>(std::exp2(-static_cast<double>(q)));
    }
    return r;
}

FakeQuantResult ltsq_fake_quant(const Tensor& a, int bits) {
    const int qmax = (1 << bits) - 1;
    FakeQuantResult r;
    r.q.shape = a.shape();
    r.q.params = QuantParams::ltsq(bits);
    r.q.data.resize(a.size());
    r.dequant = Tensor(a.shape());
    for (size_t i = 0; i < a.size(); ++i) {
        const double v = a[i];
        if (v < 0.0) throw std::invalid_argument("ltsq_fake_quant: A-bar out of range (a < 0)");
        int32_t q;
        if (v >= 1.0) {
            q = qmax; // saturate: exp(dA) can round to 1.0f for tiny d
        } else {
            q = clip_code(round_even(-std::log2(1.0 - v)), qmax);
        }
        r.q.data[i] = q;
        r.dequant[i] = static_cast<float>(1.0 - std::exp2(-static_cast<double>(q)));
    }
    return r;
}

Route skewness_route(const Tensor& abar_calib, double alpha) {
    if (abar_calib.empty())
        throw std::invalid_argument("skewness_route: empty calibration");
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("skewness_route: alpha outside [0,1]");
    return median(abar_calib) > alpha ? Route::LtSQ : Route::Uniform;
}

int tgq_num_groups(int seq_len, int lambda) {
    if (lambda < 1) throw std::invalid_argument("tgq: lambda must be >= 1");
    if (seq_len < 1) throw std::invalid_argument("tgq: seq length must be >= 1");
    return std::max(1, seq_len / lambda);
}

int tgq_group_index(int t, int lambda, int seq_len) {
    if (t < 0 || t >= seq_len)
        throw std::invalid_argument("tgq_group_index: time step outside [0, L)");
    const int g = tgq_num_groups(seq_len, lambda);
    return std::min(t / lambda, g - 1);
}

FakeQuantResult tgq_fake_quant(const Tensor& h, const QuantParams& p) {
    if (p.kind != QuantKind::TGQ)
        throw std::invalid_argument("tgq_fake_quant: wrong quantizer kind");
    p.validate();
    if (h.rank() < 2)
        throw std::invalid_argument("tgq_fake_quant: need (L,...) or (B,L,...) input");

    // (L, ...) when the leading extent matches seq_length, else (B, L, ...)
    size_t batch = 1, time_axis = 0;
    if (h.dim(0) != static_cast<size_t>(p.seq_length)) {
        if (h.rank() < 3 || h.dim(1) != static_cast<size_t>(p.seq_length))
            throw std::invalid_argument("tgq_fake_quant: no axis of length seq_length");
        batch = h.dim(0);
        time_axis = 1;
    }
    const size_t L = h.dim(time_axis);
    size_t slice = 1;
    for (size_t i = time_axis + 1; i < h.rank(); ++i) slice *= h.dim(i);

    const int qmaxv = p.qmax();
    FakeQuantResult r;
    r.q.shape = h.shape();
    r.q.params = p;
    r.q.data.resize(h.size());
    r.dequant = Tensor(h.shape());
    for (size_t b = 0; b < batch; ++b) {
        for (size_t t = 0; t < L; ++t) {
            const int g = tgq_group_index(static_cast<int>(t), p.group_length, p.seq_length);
            const double s = p.scales[g];
            const int z = p.zero_points[g];
            const size_t base = (b * L + t) * slice;
            for (size_t i = 0; i < slice; ++i) {
                const int32_t q =
                    clip_code(round_even(static_cast<double>(h[base + i]) / s) + z, qmaxv);
                r.q.data[base + i] = q;
                r.dequant[base + i] = static_cast<float>(s * (q - z));
            }
        }
    }
    return r;
}

std::vector<float> shift_decay(const std::vector<int64_t>& hq_minus_z,
                               const std::vector<int32_t>& aq_codes, float scale) {
    if (hq_minus_z.size() != aq_codes.size())
        throw std::invalid_argument("shift_decay: operand size mismatch");
    std::vector<float> out(hq_minus_z.size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (aq_codes[i] < 0)
            throw std::invalid_argument("shift_decay: negative shift code");
        out[i] = shift_decay_one(hq_minus_z[i], aq_codes[i], scale);
    }
    return out;
}

} // namespace qmamba
