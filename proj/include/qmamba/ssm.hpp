#pragma once

#include "qmamba/calibration.hpp"
#include "qmamba/quant.hpp"
#include "qmamba/tensor.hpp"

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace qmamba {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double softplus(double x) {
    // log(1+e^x) without overflow for large x
    return x > 30.0 ? x : std::log1p(std::exp(x));
}
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

// Parameters of one selective SSM: h_t = abar_t h_{t-1} + bbar_t x_t,
// y_t = C_t h_t + D x_t with abar_t = exp(delta_t A), bbar_t = delta_t B_t.
struct SsmParams {
    Tensor A;       // (D, N), strictly negative entries
    Tensor D_skip;  // (D)
    Tensor W_B;     // (N, D) produces B_t from x_t
    Tensor W_C;     // (N, D) produces C_t from x_t
    Tensor W_delta; // (D, D) produces the pre-softplus timescale

    int dim_d = 0;
    int dim_n = 0;

    void validate() const;
};

struct MambaBlockWeights {
    Tensor W_in;     // (2D, Dm): rows [0,D) feed the conv path, [D,2D) the gate
    Tensor W_conv1d; // (D, K) causal, no future taps
    Tensor W_out;    // (Dm, D)
    SsmParams ssm;

    int model_dim = 0;
    int inner_dim = 0;
    int conv_k = 1;

    void validate() const;
};

// One quantizer slot per named tensor; disabled slots pass values through
// untouched so a fully disabled assignment reproduces the FP path bit for bit.
struct QuantSlot {
    bool enabled = false;
    QuantParams params;
};

struct QuantizerAssignment {
    std::map<std::string, QuantSlot> slots;
    Route abar_route = Route::Uniform;

    static const std::vector<std::string>& ssm_activation_names();
    static const std::vector<std::string>& block_activation_names();
    static const std::vector<std::string>& ssm_weight_names();
    static const std::vector<std::string>& block_weight_names();

    const QuantSlot& slot(const std::string& name) const;
    QuantSlot& mutable_slot(const std::string& name);
    bool has(const std::string& name) const { return slots.count(name) != 0; }

    // every required slot present but disabled
    static QuantizerAssignment disabled_for_scan();
    static QuantizerAssignment disabled_for_block();
};

// Per-element straight-through record captured by a quantizer application:
// state 0 (in range):   xhat = x + s * coef,   coef = (xhat - x)/s
// state +-1 (clipped):  xhat = s * coef,       coef = qbar - z
// For LtSQ, state 0 means xhat = x + coef (additive residual, no scale).
struct SteRecord {
    std::vector<int8_t> state;
    std::vector<float> coef;
    std::vector<int32_t> group; // group index per element (TGQ), empty otherwise
};

using FrozenTrace = std::map<std::string, SteRecord>;

// Everything the reverse pass needs, captured by a forward with trace != null.
struct BlockTrace {
    int B = 0, L = 0, Dm = 0, D = 0, N = 0, K = 0;

    Tensor xin, xin_hat;            // (B,L,Dm)
    Tensor u_main, u_main_hat;      // (B,L,D)
    Tensor u_gate;                  // (B,L,D)
    Tensor conv_pre;                // (B,L,D)
    Tensor xs, xs_hat;              // (B,L,D)
    Tensor dpre, delta, delta_hat;  // (B,L,D)
    Tensor Bt, Bt_hat, Ct, Ct_hat;  // (B,L,N)
    Tensor abar, abar_hat;          // (B,L,D,N)
    Tensor h_raw, h_hat;            // (B,L,D,N)
    Tensor yssm;                    // (B,L,D)
    Tensor ym, ym_hat;              // (B,L,D)
    Tensor out;                     // (B,L,Dm)

    std::map<std::string, Tensor> w_hat; // dequantized weights actually used
    FrozenTrace ste;                     // per quantizer name
};

std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& A, const Tensor& B);

// Floating-point scan over x (B,L,D). h_0 = 0.
Tensor ssm_scan_fp(const Tensor& x, const SsmParams& p, BlockTrace* trace = nullptr);

// Quantized scan: every named activation passes through its slot before
// use; abar*h goes through the bit-shift kernel when use_shift and the
// abar route is LtSQ (and h carries TGQ codes), else dequantized multiply.
Tensor ssm_scan_quant(const Tensor& x, const SsmParams& p, const QuantizerAssignment& qa,
                      bool use_shift, BlockTrace* trace = nullptr);

// Full block: in-projection -> causal conv + SiLU -> SSM scan -> gating ->
// out-projection. qa == nullptr runs the FP path.
Tensor mamba_block_forward(const Tensor& x, const MambaBlockWeights& w,
                           const QuantizerAssignment* qa, bool use_shift = false,
                           BlockTrace* trace = nullptr);

struct LabeledData {
    Tensor x; // (Nsamples, L, Dm)
    std::vector<int> labels;
};

struct MambaClassifier {
    std::vector<MambaBlockWeights> blocks;
    Tensor W_head; // (num_classes, Dm), applied to the time-mean of the last block output
    int num_classes = 2;
};

Tensor classifier_logits(const MambaClassifier& model, const Tensor& x,
                         const std::vector<QuantizerAssignment>* qas = nullptr,
                         bool use_shift = false);
double classifier_accuracy(const MambaClassifier& model, const LabeledData& data,
                           const std::vector<QuantizerAssignment>* qas = nullptr,
                           bool use_shift = false);

// Collected per-block activation statistics from trace-enabled passes.
// When lambda >= 1, h_groups holds one CalibStats per TGQ time group.
// Passing per-block assignments collects the statistics under the already
// quantized predecessors instead of the FP model (h ranges in particular
// depend on what the quantized decay factors actually do to the state).
struct BlockActStats {
    std::map<std::string, CalibStats> by_name;
    std::vector<CalibStats> h_groups;
};
std::vector<BlockActStats> calibrate_model(const MambaClassifier& model, const Tensor& x,
                                           uint64_t seed, int lambda = 0,
                                           const std::vector<QuantizerAssignment>* qas = nullptr);

// Quantizes only `target` (tensor-wise uniform, Percentile init) across all
// blocks and returns the accuracy drop vs the FP model. bits == 0 leaves the
// target at full precision (drop exactly 0). Unknown target throws.
// ltsq_for_abar swaps the abar_t quantizer for LtSQ.
double sensitivity_sweep(const MambaClassifier& model, const LabeledData& data,
                         const std::string& target, int bits, bool ltsq_for_abar = false);

} // namespace qmamba
