#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace derma {

/// Dense n-dimensional array with row-major layout and value semantics.
/// The scalar type is a template parameter: float for training throughput,
/// double for gradient verification.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), T(0));
    }

    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != count(shape_))
            throw std::invalid_argument("Tensor: element count " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_string(shape_));
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        t.fill(v);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at(int i) { return data_[check_offset(offset({i}))]; }
    T& at(int i, int j) { return data_[check_offset(offset({i, j}))]; }
    T& at(int i, int j, int k) { return data_[check_offset(offset({i, j, k}))]; }
    T& at(int i, int j, int k, int l) { return data_[check_offset(offset({i, j, k, l}))]; }
    const T& at(int i) const { return data_[check_offset(offset({i}))]; }
    const T& at(int i, int j) const { return data_[check_offset(offset({i, j}))]; }
    const T& at(int i, int j, int k) const { return data_[check_offset(offset({i, j, k}))]; }
    const T& at(int i, int j, int k, int l) const { return data_[check_offset(offset({i, j, k, l}))]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Size-preserving shape change.
    Tensor reshaped(std::vector<int> new_shape) const {
        if (count(new_shape) != size())
            throw std::invalid_argument("reshape: element count mismatch, " + shape_string(shape_) +
                                        " -> " + shape_string(new_shape));
        return Tensor(std::move(new_shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int e : shape) {
            if (e <= 0) throw std::invalid_argument("Tensor: non-positive extent in " + shape_string(shape));
            n *= e;
        }
        return n;
    }

    static std::string shape_string(const std::vector<int>& shape) {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ')';
        return os.str();
    }

private:
    std::int64_t offset(std::initializer_list<int> idx) const {
        if (idx.size() != shape_.size())
            throw std::invalid_argument("Tensor::at: index rank mismatch");
        std::int64_t off = 0;
        std::size_t axis = 0;
        for (int i : idx) {
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    std::size_t check_offset(std::int64_t off) const {
        if (off < 0 || off >= size()) throw std::out_of_range("Tensor::at: index out of range");
        return static_cast<std::size_t>(off);
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

}  // namespace derma
