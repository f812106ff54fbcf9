#include "qmamba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace qmamba {

namespace {
size_t shape_volume(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) {
        if (d == 0) throw std::invalid_argument("tensor extents must be positive");
        n *= d;
    }
    return n;
}
} // namespace

Tensor::Tensor(std::vector<size_t> shape)
    : shape_(std::move(shape)), data_(shape_volume(shape_), 0.0f) {}

Tensor::Tensor(std::vector<size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_volume(shape_) != data_.size())
        throw std::invalid_argument("tensor shape/data size mismatch");
}

std::string Tensor::shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape_[i]);
    }
    return s + ")";
}

double percentile(const Tensor& t, double p) {
    if (t.empty()) throw std::invalid_argument("percentile: empty input");
    if (p < 0.0 || p > 100.0) throw std::invalid_argument("percentile: p outside [0,100]");
    std::vector<float> sorted(t.vec());
    std::sort(sorted.begin(), sorted.end());
    const size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double rank = p / 100.0 * static_cast<double>(n - 1);
    const size_t lo = static_cast<size_t>(rank);
    const size_t hi = std::min(lo + 1, n - 1);
    const double frac = rank - static_cast<double>(lo);
    return static_cast<double>(sorted[lo]) +
           frac * (static_cast<double>(sorted[hi]) - static_cast<double>(sorted[lo]));
}

double median(const Tensor& t) { return percentile(t, 50.0); }

double mse(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("mse: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

double tensor_min(const Tensor& t) {
    if (t.empty()) throw std::invalid_argument("tensor_min: empty input");
    return *std::min_element(t.vec().begin(), t.vec().end());
}

double tensor_max(const Tensor& t) {
    if (t.empty()) throw std::invalid_argument("tensor_max: empty input");
    return *std::max_element(t.vec().begin(), t.vec().end());
}

bool all_finite(const Tensor& t) {
    for (float v : t.vec())
        if (!std::isfinite(v)) return false;
    return true;
}

} // namespace qmamba
