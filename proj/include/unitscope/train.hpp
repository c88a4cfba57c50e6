#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "unitscope/model.hpp"
#include "unitscope/nn.hpp"

namespace unitscope {

/// Random-access source of (input, target) pairs with fixed per-example shapes.
class Dataset {
public:
    virtual ~Dataset() = default;
    virtual std::size_t size() const = 0;
    virtual Shape input_shape() const = 0;
    /// Per-example target shape; empty for a scalar class index.
    virtual Shape target_shape() const = 0;
    virtual void fill(std::size_t index, std::span<float> input, std::span<float> target) const = 0;
};

/// Dataset over two batch tensors held in memory.
class TensorDataset final : public Dataset {
public:
    TensorDataset(Tensor inputs, Tensor targets);
    std::size_t size() const override { return static_cast<std::size_t>(inputs_.dim(0)); }
    Shape input_shape() const override { return inputs_.item_shape(); }
    Shape target_shape() const override { return targets_.item_shape(); }
    void fill(std::size_t index, std::span<float> input, std::span<float> target) const override;

private:
    Tensor inputs_;
    Tensor targets_;
};

/// Gather the given examples of `data` into batch tensors.
std::pair<Tensor, Tensor> gather_batch(const Dataset& data, std::span<const std::size_t> indices);

struct OptimizerConfig {
    float learning_rate = 1e-3f;
    /// SGD momentum; ignored when `adam` is set.
    float momentum = 0.9f;
    bool adam = true;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
    int epochs = 1;
    int batch_size = 32;
    std::uint64_t seed = 0;
};

class TrainError : public std::runtime_error {
public:
    TrainError(int epoch, int batch, const std::string& what)
        : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch) + ": " + what),
          epoch_(epoch), batch_(batch) {}
    int epoch() const noexcept { return epoch_; }
    int batch() const noexcept { return batch_; }

private:
    int epoch_;
    int batch_;
};

struct TrainResult {
    ParameterStore params;
    std::vector<double> epoch_loss;
};

using EpochCallback = std::function<void(int epoch, double mean_loss, const ParameterStore& params)>;

/// Mini-batch training. Deterministic for a given seed: the seed drives both the initial weights
/// (when `initial` is empty) and the per-epoch shuffling.
TrainResult train(const ModelSpec& model, const Dataset& data, LossKind loss, const OptimizerConfig& config,
                  std::optional<ParameterStore> initial = std::nullopt, const EpochCallback& on_epoch = {});

/// Argmax class per example, evaluated in batches.
std::vector<int> predict_classes(const ModelSpec& model, const ParameterStore& params, const Tensor& inputs,
                                 int batch_size = 64);

/// Argmax over channels per pixel for segmentation logits; one label grid per example.
std::vector<std::vector<std::uint8_t>> predict_labels(const ModelSpec& model, const ParameterStore& params,
                                                      const Tensor& inputs, int batch_size = 32);

} // namespace unitscope
