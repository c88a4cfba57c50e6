#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "unitscope/tensor.hpp"

namespace unitscope {

enum class LayerKind { conv2d, relu, maxpool2x2, upsample2x_bilinear, upsample2x_nearest, linear, softmax };
enum class OutputSemantics { class_logits, image, segmentation_logits };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);
std::string to_string(OutputSemantics s);
OutputSemantics output_semantics_from_string(const std::string& s);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::string name;
    // conv2d
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
    int padding = 0;
    // linear
    int in_features = 0;
    int out_features = 0;

    bool has_params() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }
    /// Shape of one example after this layer, given the shape before it.
    Shape output_shape(const Shape& in) const;
    Shape weight_shape() const;
    Shape bias_shape() const;
};

LayerSpec conv(std::string name, int in, int out, int kernel = 3, int stride = 1, int padding = -1);
LayerSpec relu(std::string name);
LayerSpec maxpool(std::string name);
LayerSpec upsample_bilinear(std::string name);
LayerSpec upsample_nearest(std::string name);
LayerSpec linear(std::string name, int in, int out);
LayerSpec softmax(std::string name);

/// Error raised by model evaluation; names the offending layer.
class ModelError : public std::runtime_error {
public:
    ModelError(std::string layer, const std::string& what)
        : std::runtime_error("layer '" + layer + "': " + what), layer_(std::move(layer)) {}
    const std::string& layer() const noexcept { return layer_; }

private:
    std::string layer_;
};

struct ModelSpec {
    std::vector<LayerSpec> layers;
    Shape input_shape; // one example, no batch dimension
    OutputSemantics output = OutputSemantics::class_logits;

    /// Throws ModelError if names repeat or shapes do not chain.
    void validate() const;
    /// Per-example shape after every layer.
    std::vector<Shape> layer_shapes() const;
    Shape output_shape() const;
    std::optional<std::size_t> index_of(const std::string& layer) const;
    std::size_t require_index(const std::string& layer) const;
    /// Index of the layer whose output is the post-nonlinearity activation of `layer`:
    /// the named layer itself, advanced over any directly following relu layers.
    std::size_t tap_index(const std::string& layer) const;
    /// Per-example shape of the activation recorded for `layer`.
    Shape tap_shape(const std::string& layer) const;
};

/// Sub-model consisting of layers [first, last] of `model`, with the matching input shape.
ModelSpec sub_model(const ModelSpec& model, std::size_t first, std::size_t last, OutputSemantics output);

struct LayerParams {
    Tensor weight;
    Tensor bias;
};

class ParameterStore {
public:
    std::map<std::string, LayerParams>& layers() noexcept { return layers_; }
    const std::map<std::string, LayerParams>& layers() const noexcept { return layers_; }
    LayerParams& at(const std::string& name);
    const LayerParams& at(const std::string& name) const;
    bool contains(const std::string& name) const { return layers_.count(name) > 0; }
    LayerParams& operator[](const std::string& name) { return layers_[name]; }

    /// Zero-filled store with the parameter shapes of `model`.
    static ParameterStore zeros_like(const ModelSpec& model);
    /// Throws ModelError when a parameterized layer is missing or mis-shaped.
    void check_against(const ModelSpec& model) const;
    std::size_t parameter_count() const;

    friend bool operator==(const ParameterStore& a, const ParameterStore& b) noexcept;

private:
    std::map<std::string, LayerParams> layers_;
};

/// Fan-in scaled Gaussian weights (std = sqrt(2 / fan_in)), zero biases.
ParameterStore init_params(const ModelSpec& model, std::uint64_t seed);

nlohmann::json to_json(const ModelSpec& model);
ModelSpec model_from_json(const nlohmann::json& j);

} // namespace unitscope
