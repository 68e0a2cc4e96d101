#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sgdiff/common.hpp"

namespace sgdiff {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); i++) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Row-major dense array. Copies share the underlying buffer; every op
// allocates a fresh buffer for its result, so a tensor's contents never
// change after construction (parameters are updated by swapping in a new
// tensor, not by writing through an old one).
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(static_cast<size_t>(shape_numel(shape_)))) {
        check_shape();
    }

    TensorT(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
        check_shape();
        SGDIFF_CHECK(static_cast<int64_t>(data_->size()) == shape_numel(shape_),
                     "tensor data size ", data_->size(), " does not match shape ", shape_str(shape_));
    }

    static TensorT full(Shape shape, T value) {
        TensorT t(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
    static TensorT ones(Shape shape) { return full(std::move(shape), T(1)); }

    static TensorT scalar(T value) { return TensorT({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_ ? data_->size() : 0); }
    bool defined() const { return static_cast<bool>(data_); }

    const std::vector<T>& data() const { return *data_; }
    std::vector<T>& data() { return *data_; }
    const T* ptr() const { return data_->data(); }
    T* ptr() { return data_->data(); }

    T at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    T& at(int64_t i) { return (*data_)[static_cast<size_t>(i)]; }

    T item() const {
        SGDIFF_CHECK(numel() == 1, "item() on tensor of shape ", shape_str(shape_));
        return (*data_)[0];
    }

    // Deep copy (fresh buffer).
    TensorT clone() const {
        TensorT t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    // Same buffer, new shape with equal element count.
    TensorT reshaped(Shape shape) const {
        SGDIFF_CHECK(shape_numel(shape) == numel(), "reshape ", shape_str(shape_), " -> ",
                     shape_str(shape), " changes element count");
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> t(shape_);
        for (int64_t i = 0; i < numel(); i++) t.at(i) = static_cast<U>(at(i));
        return t;
    }

    bool all_finite() const {
        for (const T& v : *data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

private:
    void check_shape() const {
        for (int64_t d : shape_)
            SGDIFF_CHECK(d > 0, "non-positive extent in shape ", shape_str(shape_));
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace sgdiff
