#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "unitscope/tensor.hpp"

namespace unitscope {

/// Images are (3, H, W) with values in [0, 1].

/// Side by side with `gap` columns of `fill` between; heights must agree.
Tensor hconcat(std::span<const Tensor> images, int gap = 2, float fill = 1.0f);
Tensor vconcat(std::span<const Tensor> images, int gap = 2, float fill = 1.0f);
Tensor upscale_nearest(const Tensor& image, int factor);

/// Original, perturbation (amplified around mid-gray), adversarial.
Tensor triptych(const Tensor& original, const Tensor& adversarial, float amplify = 10.0f);

/// Image dimmed outside the mask, with the mask edge drawn in `color`.
Tensor overlay_mask(const Tensor& image, std::span<const std::uint8_t> mask, std::array<float, 3> color = {1.0f, 0.8f, 0.0f});

/// Blue-to-red rendering of an (h, w) grid normalized by its maximum (or `vmax` when positive).
Tensor heatmap(std::span<const double> values, int h, int w, int cell = 8, double vmax = 0.0);

} // namespace unitscope
