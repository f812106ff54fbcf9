#pragma once

#include "qmamba/quant.hpp"
#include "qmamba/rng.hpp"
#include "qmamba/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace qmamba {

// Streaming per-tensor statistics: exact min/max plus a uniform reservoir
// sample used for percentiles, medians and the OMSE search.
class CalibStats {
public:
    explicit CalibStats(uint64_t seed = 0, size_t capacity = 65536);

    // Exact min/max update + reservoir sampling (Algorithm R). Throws
    // "non-finite activation" when the batch contains NaN/Inf.
    void observe(const Tensor& batch);

    double min() const { return min_; }
    double max() const { return max_; }
    size_t count() const { return count_; }
    const std::vector<float>& reservoir() const { return reservoir_; }
    size_t capacity() const { return capacity_; }

    Tensor reservoir_tensor() const;
    double reservoir_percentile(double p) const;
    double running_median() const { return reservoir_percentile(50.0); }

private:
    double min_ = 0.0;
    double max_ = 0.0;
    size_t count_ = 0;
    size_t capacity_;
    std::vector<float> reservoir_;
    Rng rng_;
};

// Range initializers. Each returns a tensor-wise uniform QuantParams.
QuantParams init_minmax(const CalibStats& stats, int bits);
QuantParams init_percentile(const CalibStats& stats, int bits,
                            double p_lo = 1.0, double p_hi = 99.0);

// OMSE: 1-D grid search over clip ratios c in {0.01..1.00}; the candidate
// range is [c*min, c*max] and the winner minimizes reservoir reconstruction
// MSE. Ties break toward the smaller ratio.
QuantParams init_omse(const CalibStats& stats, int bits);

struct OmseSearchResult {
    QuantParams params;
    double clip_ratio;
    double lb, ub;
    double mse;
};
OmseSearchResult init_omse_detail(const CalibStats& stats, int bits);

enum class Initializer { MinMax, Percentile, Omse };
Initializer initializer_from_name(const std::string& s);
std::string initializer_name(Initializer init);
QuantParams init_from_stats(Initializer init, const CalibStats& stats, int bits);

// Bit-width policy: defaults per tensor class plus ordered wildcard
// overrides ('*' matches any run of characters), first match wins.
struct BitPolicy {
    int default_weight_bits = 8;
    int default_act_bits = 8;
    std::vector<std::pair<std::string, int>> overrides;

    void validate() const;
};

bool name_matches_pattern(const std::string& name, const std::string& pattern);
bool is_weight_name(const std::string& tensor_name);
int apply_bit_policy(const BitPolicy& policy, const std::string& tensor_name);

} // namespace qmamba
