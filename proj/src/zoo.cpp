#include "unitscope/zoo.hpp"

#include <algorithm>

namespace unitscope {

ModelSpec classifier_spec(int n_classes)
{
    ModelSpec m;
    m.input_shape = {3, kImageSize, kImageSize};
    m.output = OutputSemantics::class_logits;
    m.layers = {
        conv("conv1", 3, 16),   relu("relu1"), maxpool("pool1"),
        conv("conv2", 16, 32),  relu("relu2"), maxpool("pool2"),
        conv("conv3", 32, 64),  relu("relu3"), maxpool("pool3"),
        conv("conv4", 64, 128), relu("relu4"), maxpool("pool4"),
        linear("fc", 128 * 4 * 4, n_classes),
    };
    m.validate();
    return m;
}

ModelSpec segmenter_spec()
{
    ModelSpec m;
    m.input_shape = {3, kImageSize, kImageSize};
    m.output = OutputSemantics::segmentation_logits;
    m.layers = {
        conv("enc1", 3, 16),  relu("enc1_relu"), maxpool("enc1_pool"),
        conv("enc2", 16, 32), relu("enc2_relu"), maxpool("enc2_pool"),
        conv("enc3", 32, 48), relu("enc3_relu"),
        conv("enc4", 48, 48), relu("enc4_relu"),
        upsample_bilinear("up1"), conv("dec1", 48, 24), relu("dec1_relu"),
        upsample_bilinear("up2"), conv("dec2", 24, 12), relu("dec2_relu"),
        conv("logits", 12, kSegmenterClasses, 1),
    };
    m.validate();
    return m;
}

ModelSpec autoencoder_spec()
{
    ModelSpec m;
    m.input_shape = {3, kImageSize, kImageSize};
    m.output = OutputSemantics::image;
    m.layers = {
        conv("e1", 3, 16),  relu("e1_relu"), maxpool("e1_pool"),
        conv("e2", 16, 32), relu("e2_relu"), maxpool("e2_pool"),
        conv("e3", 32, 32), relu("e3_relu"), maxpool("e3_pool"),
        conv("e4", 32, 32), relu("e4_relu"), maxpool("e4_pool"),
        conv("code", 32, 16, 1),
        conv("layer1", 16, 64), relu("layer1_relu"), upsample_nearest("up2"),
        conv("layer2", 64, 64), relu("layer2_relu"), upsample_nearest("up3"),
        conv("layer3", 64, 32), relu("layer3_relu"), upsample_nearest("up4"),
        conv("layer4", 32, 16), relu("layer4_relu"), upsample_nearest("up5"),
        conv("layer5", 16, 16), relu("layer5_relu"),
        conv("rgb", 16, 3),
    };
    m.validate();
    return m;
}

ModelSpec encoder_of(const ModelSpec& autoencoder)
{
    return sub_model(autoencoder, 0, autoencoder.require_index("code"), OutputSemantics::image);
}

ModelSpec decoder_of(const ModelSpec& autoencoder)
{
    return sub_model(autoencoder, autoencoder.require_index("code") + 1, autoencoder.layers.size() - 1,
                     OutputSemantics::image);
}

Shape SceneDataset::target_shape() const
{
    switch (target_) {
    case SceneTarget::class_id: return {};
    case SceneTarget::object_labels: return {kImageSize, kImageSize};
    case SceneTarget::image: return {3, kImageSize, kImageSize};
    }
    return {};
}

void SceneDataset::fill(std::size_t index, std::span<float> input, std::span<float> target) const
{
    const int i = static_cast<int>(index);
    const Tensor img = scenes_.image(i);
    std::copy(img.storage().begin(), img.storage().end(), input.begin());
    switch (target_) {
    case SceneTarget::class_id: target[0] = static_cast<float>(scenes_.class_of(i)); break;
    case SceneTarget::object_labels: {
        const auto seg = scenes_.seg(i);
        for (std::size_t p = 0; p < seg.object.size(); ++p) target[p] = seg.object[p];
        break;
    }
    case SceneTarget::image: std::copy(img.storage().begin(), img.storage().end(), target.begin()); break;
    }
}

} // namespace unitscope
