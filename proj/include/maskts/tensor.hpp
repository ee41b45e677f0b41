#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "maskts/errors.hpp"
#include "maskts/rng.hpp"

namespace maskts {

// Dense row-major tensor of rank 1..4. Rank-4 tensors follow the N,C,H,W
// convention used everywhere in this library.
template <class T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(size_t(numel()), fill);
    }

    TensorT(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        require_shape(int64_t(data_.size()) == numel(),
                      "tensor data length does not match shape " + shape_str());
    }

    static TensorT zeros_like(const TensorT& other) { return TensorT(other.shape_); }

    static TensorT random_uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = T(rng.uniform(lo, hi));
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return int(shape_.size()); }

    int64_t numel() const {
        int64_t n = shape_.empty() ? 0 : 1;
        for (int e : shape_) n *= e;
        return n;
    }

    // Extents under the N,C,H,W convention; trailing dims of low-rank tensors
    // read as 1 (a rank-2 tensor is N x C).
    int dim_n() const { return shape_.empty() ? 1 : shape_[0]; }
    int dim_c() const { return rank() >= 2 ? shape_[1] : 1; }
    int dim_h() const { return rank() >= 3 ? shape_[2] : 1; }
    int dim_w() const { return rank() >= 4 ? shape_[3] : 1; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    size_t size() const { return data_.size(); }

    T& operator[](int64_t i) { return data_[size_t(i)]; }
    const T& operator[](int64_t i) const { return data_[size_t(i)]; }

    int64_t index(int n, int c, int h, int w) const {
        return ((int64_t(n) * dim_c() + c) * dim_h() + h) * dim_w() + w;
    }

    T& at(int n, int c, int h, int w) { return data_[size_t(index(n, c, h, w))]; }
    const T& at(int n, int c, int h, int w) const { return data_[size_t(index(n, c, h, w))]; }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ")";
        return os.str();
    }

    template <class U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = U(data_[i]);
        return TensorT<U>(shape_, std::move(out));
    }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

private:
    void validate_shape() {
        require_shape(!shape_.empty() && shape_.size() <= 4,
                      "tensor rank must be between 1 and 4");
        for (int e : shape_)
            require_shape(e >= 1, "tensor extents must be >= 1, got " + shape_str());
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;

// Convenience for the common single-record map layout.
template <class T>
TensorT<T> make_map(int h, int w, T fill = T(0)) {
    return TensorT<T>({1, 1, h, w}, fill);
}

}  // namespace maskts
