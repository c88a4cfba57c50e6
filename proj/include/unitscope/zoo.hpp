#pragma once

#include <string>

#include "unitscope/model.hpp"
#include "unitscope/scenegen.hpp"
#include "unitscope/train.hpp"

namespace unitscope {

/// Four conv stages (conv1..conv4, relu after each, pooling between) and a linear head.
ModelSpec classifier_spec(int n_classes);

/// Encoder-decoder producing background + one logit plane per object kind at image resolution.
ModelSpec segmenter_spec();
constexpr int kSegmenterClasses = kShapeKinds + 1;

/// Convolutional autoencoder. Layers up to and including "code" form the encoder, the rest the
/// decoder (the generator).
ModelSpec autoencoder_spec();
ModelSpec encoder_of(const ModelSpec& autoencoder);
ModelSpec decoder_of(const ModelSpec& autoencoder);

/// Decoder layer analyzed by generator dissection and edited by interventions.
inline const std::string kGeneratorLayer = "layer2";
inline const std::string kClassifierLastConv = "conv4";
inline const std::string kClassifierFirstConv = "conv1";

enum class SceneTarget { class_id, object_labels, image };

/// Adapts a SceneSet to the trainer.
class SceneDataset final : public Dataset {
public:
    SceneDataset(const SceneSet& scenes, SceneTarget target) : scenes_(scenes), target_(target) {}
    std::size_t size() const override { return static_cast<std::size_t>(scenes_.size()); }
    Shape input_shape() const override { return {3, kImageSize, kImageSize}; }
    Shape target_shape() const override;
    void fill(std::size_t index, std::span<float> input, std::span<float> target) const override;

private:
    const SceneSet& scenes_;
    SceneTarget target_;
};

} // namespace unitscope
