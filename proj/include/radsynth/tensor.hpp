#pragma once

// Dense row-major double tensor with shared storage. Copies are shallow;
// use clone() for a deep copy. Shapes are small vectors of ints.

#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>
#include <cmath>

namespace radsynth {

class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)),
          store_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.store_->begin(), t.store_->end(), v);
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<double> vals) {
        if (count(shape) != static_cast<long long>(vals.size()))
            throw std::invalid_argument("Tensor::from: shape/value count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.store_ = std::make_shared<std::vector<double>>(std::move(vals));
        return t;
    }

    bool defined() const { return static_cast<bool>(store_); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    const std::vector<int>& shape() const { return shape_; }
    long long size() const { return store_ ? static_cast<long long>(store_->size()) : 0; }

    double* data() { return store_->data(); }
    const double* data() const { return store_->data(); }

    double& operator[](long long i) { return (*store_)[static_cast<size_t>(i)]; }
    double operator[](long long i) const { return (*store_)[static_cast<size_t>(i)]; }

    // Multi-index access, slow path for tests and small setups.
    double& at(std::initializer_list<int> idx) { return (*store_)[static_cast<size_t>(offset(idx))]; }
    double at(std::initializer_list<int> idx) const { return (*store_)[static_cast<size_t>(offset(idx))]; }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.store_ = std::make_shared<std::vector<double>>(*store_);
        return t;
    }

    // New shape over the same storage.
    Tensor reshaped(std::vector<int> shape) const {
        if (count(shape) != size())
            throw std::invalid_argument("Tensor::reshaped: element count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.store_ = store_;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool shares_storage(const Tensor& o) const { return store_ == o.store_; }

    void fill(double v) { std::fill(store_->begin(), store_->end(), v); }

    bool all_finite() const {
        for (double x : *store_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double sum() const {
        double s = 0;
        for (double x : *store_) s += x;
        return s;
    }

    double max_abs() const {
        double m = 0;
        for (double x : *store_) m = std::max(m, std::fabs(x));
        return m;
    }

    static long long count(const std::vector<int>& shape) {
        long long n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

  private:
    long long offset(std::initializer_list<int> idx) const {
        long long off = 0;
        int i = 0;
        for (int v : idx) {
            off = off * shape_[static_cast<size_t>(i)] + v;
            ++i;
        }
        return off;
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> store_;
};

inline uint64_t fnv1a64(const void* p, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t tensor_hash(const Tensor& t, uint64_t h = 1469598103934665603ull) {
    return fnv1a64(t.data(), static_cast<size_t>(t.size()) * sizeof(double), h);
}

} // namespace radsynth
