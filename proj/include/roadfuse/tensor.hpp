#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "roadfuse/error.hpp"

namespace roadfuse {

struct Shape4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::size_t count() const noexcept {
        return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
               static_cast<std::size_t>(w);
    }
    std::string str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
    }
    bool operator==(const Shape4&) const = default;
};

/// Dense N x C x H x W array, contiguous and N-major.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.count(), fill) {}
    Tensor(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.count()) throw ShapeError("tensor data length does not match " + shape_.str());
    }

    const Shape4& shape() const noexcept { return shape_; }
    int n() const noexcept { return shape_.n; }
    int c() const noexcept { return shape_.c; }
    int h() const noexcept { return shape_.h; }
    int w() const noexcept { return shape_.w; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t offset(int n, int c, int h, int w) const noexcept {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    T& at(int n, int c, int h, int w) noexcept { return data_[offset(n, c, h, w)]; }
    T at(int n, int c, int h, int w) const noexcept { return data_[offset(n, c, h, w)]; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    T operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }

    // One image (all channels) of the batch.
    std::span<T> image(int n) noexcept {
        const std::size_t stride = static_cast<std::size_t>(shape_.c) * shape_.h * shape_.w;
        return {data_.data() + stride * n, stride};
    }
    std::span<const T> image(int n) const noexcept {
        const std::size_t stride = static_cast<std::size_t>(shape_.c) * shape_.h * shape_.w;
        return {data_.data() + stride * n, stride};
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape4 shape_{};
    std::vector<T> data_;
};

}  // namespace roadfuse
