#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>

#include "unitscope/model.hpp"
#include "unitscope/tensor.hpp"

namespace unitscope {

/// Called with the post-nonlinearity activation of one example at a tapped layer; may overwrite it.
using ActivationHook = std::function<void(const std::string& layer, int example, std::span<float> activation)>;

struct ForwardOptions {
    /// Layers whose post-nonlinearity activations are returned (after any hook has run).
    std::set<std::string> record;
    /// Layers at which `hook` is invoked.
    std::set<std::string> hook_layers;
    ActivationHook hook;
    /// When set, `input` is the recorded activation of this layer and evaluation continues after it.
    std::optional<std::string> resume_after;
    /// When set, evaluation stops at this layer's tap and its activation becomes the output.
    std::optional<std::string> stop_after;
};

struct ForwardResult {
    Tensor output;
    std::map<std::string, Tensor> activations;
};

/// Batched forward pass. Each example is evaluated independently, so an example's result does
/// not depend on what else is in the batch.
ForwardResult forward(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                      const std::set<std::string>& record = {});
ForwardResult forward(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                      const ForwardOptions& options);

enum class LossKind { cross_entropy, mean_squared_error };

struct BackwardResult {
    double loss = 0.0;
    ParameterStore grads;
    Tensor input_grad;
    Tensor output;
};

/// Loss and gradients for a batch.
///
/// cross_entropy: `target` holds class indices, shape (N) for class logits or (N,H,W) for
/// segmentation logits; the loss is the mean negative log-likelihood. When the model ends in a
/// softmax layer its output is treated as probabilities, otherwise as logits.
/// mean_squared_error: `target` has the output's shape; the loss is the mean squared difference.
BackwardResult backward(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                        LossKind loss_kind, const Tensor& target, bool param_grads = true);

/// Corner-aligned bilinear resampling of a single (h, w) plane to (out_h, out_w).
void bilinear_resize(std::span<const float> src, int h, int w, std::span<float> dst, int out_h, int out_w);
/// Adjoint of bilinear_resize: accumulates `grad_out` into `grad_in`.
void bilinear_resize_backward(std::span<const float> grad_out, int out_h, int out_w, std::span<float> grad_in,
                              int h, int w);

/// Set the worker count used by batched evaluation (1 = serial). Results do not depend on it.
void set_num_jobs(int jobs);
int num_jobs();

} // namespace unitscope
