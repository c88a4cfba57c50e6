#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unitscope {

using Shape = std::vector<int>;

/// 64-byte aligned allocator. Vectorized kernels peel loops by address alignment, so aligned
/// storage keeps results independent of where a buffer happens to live.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t alignment = 64;
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n)
    {
        const std::size_t bytes = ((n * sizeof(T) + alignment - 1) / alignment) * alignment;
        return static_cast<T*>(::operator new(bytes == 0 ? alignment : bytes, std::align_val_t{alignment}));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{alignment}); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 array. 4-D tensors use (batch, channels, height, width).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);
    Tensor(Shape shape, FloatBuffer data);

    static Tensor from(std::initializer_list<int> shape, std::initializer_list<float> values);

    const Shape& shape() const noexcept { return shape_; }
    int dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t ndim() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    FloatBuffer& storage() noexcept { return data_; }
    const FloatBuffer& storage() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& at(int n, int c, int h, int w);
    float at(int n, int c, int h, int w) const;

    /// Reinterpret with a new shape of equal element count.
    Tensor reshaped(Shape shape) const;

    /// Number of elements in one batch item (product of all dims after the first).
    std::size_t item_size() const;
    std::span<float> item(int n);
    std::span<const float> item(int n) const;
    /// Shape of one batch item (all dims after the first).
    Shape item_shape() const;

    /// Copy of batch items [begin, end).
    Tensor slice(int begin, int end) const;

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) noexcept;

private:
    Shape shape_;
    FloatBuffer data_;
};

/// Stack per-item tensors (all of equal shape) along a new leading batch dimension.
Tensor stack(std::span<const Tensor> items);

/// Bitwise equality of float payloads (distinguishes -0.0 and NaN payloads).
bool bit_identical(const Tensor& a, const Tensor& b) noexcept;

} // namespace unitscope
