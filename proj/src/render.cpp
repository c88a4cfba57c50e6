#include "unitscope/render.hpp"

#include <algorithm>
#include <stdexcept>

namespace unitscope {

namespace {

void check_image(const Tensor& t)
{
    if (t.ndim() != 3 || t.dim(0) != 3) throw std::invalid_argument("expected a (3, H, W) image, got " + shape_str(t.shape()));
}

} // namespace

Tensor hconcat(std::span<const Tensor> images, int gap, float fill)
{
    if (images.empty()) return {};
    int W = 0;
    const int H = images[0].dim(1);
    for (const auto& im : images) {
        check_image(im);
        if (im.dim(1) != H) throw std::invalid_argument("hconcat: heights differ");
        W += im.dim(2);
    }
    W += gap * static_cast<int>(images.size() - 1);
    Tensor out({3, H, W}, fill);
    int x0 = 0;
    for (const auto& im : images) {
        const int w = im.dim(2);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < w; ++x) out[(c * H + y) * W + x0 + x] = im[(c * H + y) * w + x];
        x0 += w + gap;
    }
    return out;
}

Tensor vconcat(std::span<const Tensor> images, int gap, float fill)
{
    if (images.empty()) return {};
    int H = 0;
    const int W = images[0].dim(2);
    for (const auto& im : images) {
        check_image(im);
        if (im.dim(2) != W) throw std::invalid_argument("vconcat: widths differ");
        H += im.dim(1);
    }
    H += gap * static_cast<int>(images.size() - 1);
    Tensor out({3, H, W}, fill);
    int y0 = 0;
    for (const auto& im : images) {
        const int h = im.dim(1);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < W; ++x) out[(c * H + y0 + y) * W + x] = im[(c * h + y) * W + x];
        y0 += h + gap;
    }
    return out;
}

Tensor upscale_nearest(const Tensor& image, int factor)
{
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Tensor out({C, H * factor, W * factor});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H * factor; ++y)
            for (int x = 0; x < W * factor; ++x)
                out[(c * H * factor + y) * W * factor + x] = image[(c * H + y / factor) * W + x / factor];
    return out;
}

Tensor triptych(const Tensor& original, const Tensor& adversarial, float amplify)
{
    check_image(original);
    if (original.shape() != adversarial.shape()) throw std::invalid_argument("triptych: shapes differ");
    Tensor diff(original.shape());
    for (std::size_t i = 0; i < diff.size(); ++i)
        diff[i] = std::clamp(0.5f + amplify * (adversarial[i] - original[i]), 0.0f, 1.0f);
    const Tensor parts[] = {original, diff, adversarial};
    return hconcat(parts);
}

Tensor overlay_mask(const Tensor& image, std::span<const std::uint8_t> mask, std::array<float, 3> color)
{
    check_image(image);
    const int H = image.dim(1), W = image.dim(2);
    if (mask.size() != static_cast<std::size_t>(H) * W) throw std::invalid_argument("overlay_mask: mask size mismatch");
    Tensor out = image;
    auto on = [&](int y, int x) { return y >= 0 && y < H && x >= 0 && x < W && mask[y * W + x]; };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const bool in = on(y, x);
            const bool edge = in && (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1));
            for (int c = 0; c < 3; ++c) {
                float& v = out[(c * H + y) * W + x];
                if (edge) v = color[c];
                else if (!in) v = 0.35f * v;
            }
        }
    return out;
}

Tensor heatmap(std::span<const double> values, int h, int w, int cell, double vmax)
{
    if (values.size() != static_cast<std::size_t>(h) * w) throw std::invalid_argument("heatmap: size mismatch");
    double top = vmax;
    if (top <= 0.0)
        for (double v : values) top = std::max(top, v);
    Tensor out({3, h * cell, w * cell});
    const int H = h * cell, W = w * cell;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double v = values[(y / cell) * w + x / cell];
            const auto t = static_cast<float>(top > 0.0 ? std::clamp(v / top, 0.0, 1.0) : 0.0);
            out[(0 * H + y) * W + x] = t;
            out[(1 * H + y) * W + x] = 0.2f + 0.6f * t * (1.0f - t);
            out[(2 * H + y) * W + x] = 1.0f - t;
        }
    return out;
}

} // namespace unitscope
