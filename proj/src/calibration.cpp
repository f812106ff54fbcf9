#include "qmamba/calibration.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace qmamba {

CalibStats::CalibStats(uint64_t seed, size_t capacity)
    : min_(std::numeric_limits<double>::infinity()),
      max_(-std::numeric_limits<double>::infinity()),
      capacity_(capacity),
      rng_(seed) {
    if (capacity_ == 0) throw std::invalid_argument("CalibStats: capacity must be positive");
    reservoir_.reserve(std::min<size_t>(capacity_, 4096));
}

void CalibStats::observe(const Tensor& batch) {
    if (batch.empty()) throw std::invalid_argument("observe: empty batch");
    if (!all_finite(batch)) throw std::invalid_argument("observe: non-finite activation");
    for (size_t i = 0; i < batch.size(); ++i) {
        const float v = batch[i];
        if (v < min_) min_ = v;
        if (v > max_) max_ = v;
        const size_t pos = count_ + i;
        if (pos < capacity_) {
            reservoir_.push_back(v);
        } else {
            const uint64_t k = rng_.uniform_index(pos + 1);
            if (k < capacity_) reservoir_[k] = v;
        }
    }
    count_ += batch.size();
}

Tensor CalibStats::reservoir_tensor() const {
    if (reservoir_.empty()) throw std::invalid_argument("CalibStats: empty reservoir");
    return Tensor({reservoir_.size()}, reservoir_);
}

double CalibStats::reservoir_percentile(double p) const {
    return percentile(reservoir_tensor(), p);
}

QuantParams init_minmax(const CalibStats& stats, int bits) {
    if (stats.count() == 0) throw std::invalid_argument("init_minmax: no observations");
    if (!(stats.max() > stats.min()))
        throw std::invalid_argument("init_minmax: degenerate range");
    auto [s, z] = init_scale_zero(stats.min(), stats.max(), bits);
    return QuantParams::uniform(bits, s, z);
}

QuantParams init_percentile(const CalibStats& stats, int bits, double p_lo, double p_hi) {
    const double lb = stats.reservoir_percentile(p_lo);
    const double ub = stats.reservoir_percentile(p_hi);
    if (!(ub > lb)) throw std::invalid_argument("init_percentile: degenerate range");
    auto [s, z] = init_scale_zero(lb, ub, bits);
    return QuantParams::uniform(bits, s, z);
}

OmseSearchResult init_omse_detail(const CalibStats& stats, int bits) {
    const Tensor sample = stats.reservoir_tensor();
    const double mn = tensor_min(sample);
    const double mx = tensor_max(sample);

    bool found = false;
    OmseSearchResult best{};
    for (int k = 1; k <= 100; ++k) {
        const double c = k / 100.0;
        const double lb = c * mn;
        const double ub = c * mx;
        if (!(ub > lb)) continue;
        auto [s, z] = init_scale_zero(lb, ub, bits);
        const QuantParams cand = QuantParams::uniform(bits, s, z);
        const double m = mse(sample, uniform_fake_quant(sample, cand).dequant);
        if (!found || m < best.mse) { // strict: ties stay with the smaller c
            found = true;
            best = {cand, c, lb, ub, m};
        }
    }
    if (!found) throw std::invalid_argument("init_omse: degenerate range at all clip ratios");
    return best;
}

QuantParams init_omse(const CalibStats& stats, int bits) {
    return init_omse_detail(stats, bits).params;
}

Initializer initializer_from_name(const std::string& s) {
    if (s == "minmax") return Initializer::MinMax;
    if (s == "percentile") return Initializer::Percentile;
    if (s == "omse") return Initializer::Omse;
    throw std::invalid_argument("unknown initializer: " + s);
}

std::string initializer_name(Initializer init) {
    switch (init) {
        case Initializer::MinMax: return "minmax";
        case Initializer::Percentile: return "percentile";
        case Initializer::Omse: return "omse";
    }
    return "percentile";
}

QuantParams init_from_stats(Initializer init, const CalibStats& stats, int bits) {
    switch (init) {
        case Initializer::MinMax: return init_minmax(stats, bits);
        case Initializer::Percentile: return init_percentile(stats, bits);
        case Initializer::Omse: return init_omse(stats, bits);
    }
    throw std::invalid_argument("init_from_stats: bad initializer");
}

void BitPolicy::validate() const {
    auto check = [](int b) {
        if (b < 2 || b > 8) throw std::invalid_argument("bit policy: bits outside [2,8]");
    };
    check(default_weight_bits);
    check(default_act_bits);
    for (const auto& [pat, b] : overrides) {
        (void)pat;
        check(b);
    }
}

bool name_matches_pattern(const std::string& name, const std::string& pattern) {
    // iterative glob over '*' only
    size_t n = 0, p = 0, star = std::string::npos, mark = 0;
    while (n < name.size()) {
        if (p < pattern.size() && (pattern[p] == name[n])) {
            ++n;
            ++p;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = n;
        } else if (star != std::string::npos) {
            p = star + 1;
            n = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

bool is_weight_name(const std::string& tensor_name) {
    const size_t dot = tensor_name.rfind('.');
    const std::string leaf = dot == std::string::npos ? tensor_name : tensor_name.substr(dot + 1);
    if (leaf == "weight" || leaf == "A" || leaf == "D") return true;
    return leaf.rfind("W_", 0) == 0;
}

int apply_bit_policy(const BitPolicy& policy, const std::string& tensor_name) {
    policy.validate();
    for (const auto& [pattern, bits] : policy.overrides)
        if (name_matches_pattern(tensor_name, pattern)) return bits;
    return is_weight_name(tensor_name) ? policy.default_weight_bits : policy.default_act_bits;
}

} // namespace qmamba
