#pragma once

#include "uvx/errors.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace uvx {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Row-major strides for `shape`.
inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

/// Allocator with a fixed 64-byte alignment. Vectorized reductions peel a
/// different number of leading elements depending on the buffer address, so a
/// fixed alignment keeps summation order, and therefore results, reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Dense row-major n-dimensional array. Rank 0 holds a single scalar.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() : data_(1, T{}) {}

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check_extents();
        if (data_.size() != shape_numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    /// Copy of the values.
    std::vector<T> vec() const { return std::vector<T>(data_.begin(), data_.end()); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::size_t offset(std::span<const std::size_t> index) const {
        if (index.size() != shape_.size()) throw ShapeError("index rank mismatch for " + shape_str(shape_));
        std::size_t off = 0;
        for (std::size_t i = 0; i < index.size(); ++i) {
            if (index[i] >= shape_[i]) throw ShapeError("index out of range for " + shape_str(shape_));
            off = off * shape_[i] + index[i];
        }
        return off;
    }
    T& at(std::initializer_list<std::size_t> index) {
        return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
    }
    const T& at(std::initializer_list<std::size_t> index) const {
        return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
    }

    T item() const {
        if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        Tensor out = *this;
        out.shape_ = std::move(shape);
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::copy(data_.begin(), data_.end(), out.data().begin());
        return out;
    }

    bool operator==(const Tensor& other) const = default;

private:
    void check_extents() const {
        for (std::size_t e : shape_) {
            if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<T, AlignedAllocator<T>> data_;
};

using LabelMap = Tensor<std::uint8_t>;

} // namespace uvx
