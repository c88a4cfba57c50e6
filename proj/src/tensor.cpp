#include "unitscope/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace unitscope {

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : Tensor(std::move(shape), FloatBuffer(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, FloatBuffer data) : shape_(std::move(shape)), data_(std::move(data))
{
    if (shape_numel(shape_) != data_.size()) {
        throw std::invalid_argument("tensor shape " + shape_str(shape_) + " does not match " +
                                    std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::from(std::initializer_list<int> shape, std::initializer_list<float> values)
{
    return Tensor(Shape(shape), std::vector<float>(values));
}

float& Tensor::at(int n, int c, int h, int w)
{
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

float Tensor::at(int n, int c, int h, int w) const
{
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

Tensor Tensor::reshaped(Shape shape) const
{
    return Tensor(std::move(shape), data_);
}

std::size_t Tensor::item_size() const
{
    if (shape_.empty()) return 0;
    return data_.size() / static_cast<std::size_t>(shape_[0]);
}

std::span<float> Tensor::item(int n)
{
    const std::size_t k = item_size();
    return std::span<float>(data_).subspan(static_cast<std::size_t>(n) * k, k);
}

std::span<const float> Tensor::item(int n) const
{
    const std::size_t k = item_size();
    return std::span<const float>(data_).subspan(static_cast<std::size_t>(n) * k, k);
}

Shape Tensor::item_shape() const
{
    return Shape(shape_.begin() + 1, shape_.end());
}

Tensor Tensor::slice(int begin, int end) const
{
    if (begin < 0 || end > shape_.at(0) || begin >= end) throw std::out_of_range("bad batch slice");
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t k = item_size();
    return Tensor(std::move(s), FloatBuffer(data_.begin() + static_cast<std::ptrdiff_t>(begin * k),
                                            data_.begin() + static_cast<std::ptrdiff_t>(end * k)));
}

bool Tensor::all_finite() const noexcept
{
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

bool operator==(const Tensor& a, const Tensor& b) noexcept
{
    return a.shape_ == b.shape_ && a.data_ == b.data_;
}

Tensor stack(std::span<const Tensor> items)
{
    if (items.empty()) throw std::invalid_argument("stack of zero tensors");
    Shape s{static_cast<int>(items.size())};
    s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
    FloatBuffer data;
    data.reserve(items.size() * items[0].size());
    for (const auto& t : items) {
        if (t.shape() != items[0].shape()) throw std::invalid_argument("stack of mismatched shapes");
        data.insert(data.end(), t.storage().begin(), t.storage().end());
    }
    return Tensor(std::move(s), std::move(data));
}

bool bit_identical(const Tensor& a, const Tensor& b) noexcept
{
    return a.shape() == b.shape() &&
           std::memcmp(a.storage().data(), b.storage().data(), a.size() * sizeof(float)) == 0;
}

} // namespace unitscope
