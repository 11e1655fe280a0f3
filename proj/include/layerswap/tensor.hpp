#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "layerswap/errors.hpp"

namespace layerswap {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

template <std::floating_point T>
constexpr std::string_view dtype_name() {
    if constexpr (sizeof(T) == 4) return "f32";
    else return "f64";
}

/// Dense row-major N-d array. Storage is shared and immutable, so copies are
/// cheap and a tensor never changes once constructed.
template <std::floating_point T>
class Tensor {
public:
    using value_type = T;

    Tensor() : data_(std::make_shared<const std::vector<T>>()) {}

    Tensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::make_shared<const std::vector<T>>(std::move(data))) {
        if (shape_size(shape_) != data_->size())
            throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

    static Tensor filled(Shape shape, T value) {
        const auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }

    static Tensor scalar(T value) { return Tensor({}, {value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_->size(); }
    bool is_scalar() const noexcept { return data_->size() == 1 && shape_.size() <= 1; }

    std::span<const T> data() const noexcept { return {data_->data(), data_->size()}; }
    const std::vector<T>& vec() const noexcept { return *data_; }
    T operator[](std::size_t i) const { return (*data_)[i]; }
    T item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
        return (*data_)[0];
    }

    T at(std::initializer_list<std::size_t> index) const {
        if (index.size() != shape_.size()) throw IndexError("index rank mismatch");
        std::size_t flat = 0;
        std::size_t k = 0;
        for (auto i : index) {
            if (i >= shape_[k]) throw IndexError("index out of range");
            flat = flat * shape_[k++] + i;
        }
        return (*data_)[flat];
    }

    Tensor reshape(Shape shape) const {
        if (shape_size(shape) != size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        Tensor out;
        out.shape_ = std::move(shape);
        out.data_ = data_;
        return out;
    }

    template <std::floating_point U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_->begin(), data_->end()));
    }

    bool shares_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

    /// Exact comparison: identical shape and identical values.
    friend bool operator==(const Tensor& a, const Tensor& b) {
        if (a.shape_ != b.shape_) return false;
        if (a.data_ == b.data_) return true;
        return *a.data_ == *b.data_;
    }

private:
    Shape shape_;
    std::shared_ptr<const std::vector<T>> data_;
};

template <std::floating_point T>
bool all_finite(std::span<const T> values) {
    // x - x is 0 for finite x and NaN otherwise; summing keeps the loop branch-free.
    T acc = T(0);
    for (T v : values) acc += v - v;
    return acc == T(0);
}

template <std::floating_point T>
const Tensor<T>& check_finite(const Tensor<T>& t, std::string_view op) {
    if (!all_finite(t.data())) throw NumericError(std::string(op) + ": non-finite value in output");
    return t;
}

/// Bit pattern comparison, distinguishes -0.0 from 0.0 and NaN payloads.
template <std::floating_point T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    auto da = a.data();
    auto db = b.data();
    return std::equal(da.begin(), da.end(), db.begin(), [](T x, T y) {
        return std::memcmp(&x, &y, sizeof(T)) == 0;
    });
}

}  // namespace layerswap
