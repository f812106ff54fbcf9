#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace qmamba {

// Dense row-major f32 tensor. Immutable by convention once built: the
// numerical code constructs a tensor, fills it, and then only reads it.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<size_t> shape);
    Tensor(std::vector<size_t> shape, std::vector<float> data);

    static Tensor scalar(float v) { return Tensor({1}, {v}); }
    static Tensor of(std::initializer_list<float> vals) {
        return Tensor({vals.size()}, std::vector<float>(vals));
    }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](size_t i) { return data_[i]; }
    float operator[](size_t i) const { return data_[i]; }

    size_t dim(size_t i) const { return shape_[i]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    std::string shape_str() const;

private:
    std::vector<size_t> shape_;
    std::vector<float> data_;
};

// Order statistics over the flattened data, linear interpolation between
// closest ranks (rank = p/100 * (n-1)). Accumulation in double.
double percentile(const Tensor& t, double p);
double median(const Tensor& t);

// Mean squared elementwise difference; throws on shape mismatch.
double mse(const Tensor& a, const Tensor& b);

double tensor_min(const Tensor& t);
double tensor_max(const Tensor& t);
bool all_finite(const Tensor& t);

} // namespace qmamba
