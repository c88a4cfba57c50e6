#include "unitscope/model.hpp"

#include <cmath>
#include <random>
#include <set>

namespace unitscope {

namespace {

const std::map<LayerKind, std::string>& kind_names()
{
    static const std::map<LayerKind, std::string> names = {
        {LayerKind::conv2d, "conv2d"},
        {LayerKind::relu, "relu"},
        {LayerKind::maxpool2x2, "maxpool2x2"},
        {LayerKind::upsample2x_bilinear, "upsample2x_bilinear"},
        {LayerKind::upsample2x_nearest, "upsample2x_nearest"},
        {LayerKind::linear, "linear"},
        {LayerKind::softmax, "softmax"},
    };
    return names;
}

} // namespace

std::string to_string(LayerKind kind)
{
    return kind_names().at(kind);
}

LayerKind layer_kind_from_string(const std::string& s)
{
    for (const auto& [k, n] : kind_names())
        if (n == s) return k;
    throw std::invalid_argument("unknown layer kind '" + s + "'");
}

std::string to_string(OutputSemantics s)
{
    switch (s) {
    case OutputSemantics::class_logits: return "class-logits";
    case OutputSemantics::image: return "image";
    case OutputSemantics::segmentation_logits: return "segmentation-logits";
    }
    return "?";
}

OutputSemantics output_semantics_from_string(const std::string& s)
{
    if (s == "class-logits") return OutputSemantics::class_logits;
    if (s == "image") return OutputSemantics::image;
    if (s == "segmentation-logits") return OutputSemantics::segmentation_logits;
    throw std::invalid_argument("unknown output semantics '" + s + "'");
}

Shape LayerSpec::output_shape(const Shape& in) const
{
    auto need_chw = [&] {
        if (in.size() != 3) throw ModelError(name, "expects a (C,H,W) input, got " + shape_str(in));
    };
    switch (kind) {
    case LayerKind::conv2d: {
        need_chw();
        if (in[0] != in_channels)
            throw ModelError(name, "expects " + std::to_string(in_channels) + " input channels, got " +
                                       std::to_string(in[0]));
        const int h = (in[1] + 2 * padding - kernel) / stride + 1;
        const int w = (in[2] + 2 * padding - kernel) / stride + 1;
        if (h <= 0 || w <= 0) throw ModelError(name, "input " + shape_str(in) + " too small for kernel");
        return {out_channels, h, w};
    }
    case LayerKind::relu:
    case LayerKind::softmax: return in;
    case LayerKind::maxpool2x2:
        need_chw();
        if (in[1] < 2 || in[2] < 2) throw ModelError(name, "input " + shape_str(in) + " too small to pool");
        return {in[0], in[1] / 2, in[2] / 2};
    case LayerKind::upsample2x_bilinear:
    case LayerKind::upsample2x_nearest: need_chw(); return {in[0], in[1] * 2, in[2] * 2};
    case LayerKind::linear: {
        const auto n = static_cast<int>(shape_numel(in));
        if (n != in_features)
            throw ModelError(name, "expects " + std::to_string(in_features) + " input features, got " +
                                       std::to_string(n));
        return {out_features};
    }
    }
    throw ModelError(name, "unhandled layer kind");
}

Shape LayerSpec::weight_shape() const
{
    if (kind == LayerKind::conv2d) return {out_channels, in_channels, kernel, kernel};
    if (kind == LayerKind::linear) return {out_features, in_features};
    return {};
}

Shape LayerSpec::bias_shape() const
{
    if (kind == LayerKind::conv2d) return {out_channels};
    if (kind == LayerKind::linear) return {out_features};
    return {};
}

LayerSpec conv(std::string name, int in, int out, int kernel, int stride, int padding)
{
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.name = std::move(name);
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding < 0 ? kernel / 2 : padding;
    return l;
}

namespace {
LayerSpec simple(LayerKind kind, std::string name)
{
    LayerSpec l;
    l.kind = kind;
    l.name = std::move(name);
    return l;
}
} // namespace

LayerSpec relu(std::string name) { return simple(LayerKind::relu, std::move(name)); }
LayerSpec maxpool(std::string name) { return simple(LayerKind::maxpool2x2, std::move(name)); }
LayerSpec upsample_bilinear(std::string name) { return simple(LayerKind::upsample2x_bilinear, std::move(name)); }
LayerSpec upsample_nearest(std::string name) { return simple(LayerKind::upsample2x_nearest, std::move(name)); }
LayerSpec softmax(std::string name) { return simple(LayerKind::softmax, std::move(name)); }

LayerSpec linear(std::string name, int in, int out)
{
    LayerSpec l;
    l.kind = LayerKind::linear;
    l.name = std::move(name);
    l.in_features = in;
    l.out_features = out;
    return l;
}

void ModelSpec::validate() const
{
    if (layers.empty()) throw ModelError("<model>", "model has no layers");
    std::set<std::string> seen;
    for (const auto& l : layers) {
        if (l.name.empty()) throw ModelError("<unnamed>", "layer without a name");
        if (!seen.insert(l.name).second) throw ModelError(l.name, "duplicate layer name");
        if (l.kind == LayerKind::conv2d && (l.kernel <= 0 || l.stride <= 0 || l.padding < 0 ||
                                            l.in_channels <= 0 || l.out_channels <= 0))
            throw ModelError(l.name, "invalid convolution parameters");
        if (l.kind == LayerKind::linear && (l.in_features <= 0 || l.out_features <= 0))
            throw ModelError(l.name, "invalid linear parameters");
    }
    const Shape out = output_shape();
    switch (output) {
    case OutputSemantics::class_logits:
        if (out.size() != 1) throw ModelError(layers.back().name, "class-logits output must be a vector");
        break;
    case OutputSemantics::image:
    case OutputSemantics::segmentation_logits:
        if (out.size() != 3) throw ModelError(layers.back().name, "spatial output must be (C,H,W)");
        break;
    }
}

std::vector<Shape> ModelSpec::layer_shapes() const
{
    std::vector<Shape> shapes;
    shapes.reserve(layers.size());
    Shape s = input_shape;
    for (const auto& l : layers) {
        s = l.output_shape(s);
        shapes.push_back(s);
    }
    return shapes;
}

Shape ModelSpec::output_shape() const
{
    return layer_shapes().back();
}

std::optional<std::size_t> ModelSpec::index_of(const std::string& layer) const
{
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i].name == layer) return i;
    return std::nullopt;
}

std::size_t ModelSpec::require_index(const std::string& layer) const
{
    auto i = index_of(layer);
    if (!i) throw ModelError(layer, "no such layer in model");
    return *i;
}

std::size_t ModelSpec::tap_index(const std::string& layer) const
{
    std::size_t i = require_index(layer);
    while (i + 1 < layers.size() && layers[i + 1].kind == LayerKind::relu) ++i;
    return i;
}

Shape ModelSpec::tap_shape(const std::string& layer) const
{
    return layer_shapes()[tap_index(layer)];
}

ModelSpec sub_model(const ModelSpec& model, std::size_t first, std::size_t last, OutputSemantics output)
{
    if (first > last || last >= model.layers.size()) throw std::out_of_range("bad sub-model range");
    ModelSpec m;
    m.layers.assign(model.layers.begin() + static_cast<std::ptrdiff_t>(first),
                    model.layers.begin() + static_cast<std::ptrdiff_t>(last) + 1);
    m.input_shape = first == 0 ? model.input_shape : model.layer_shapes()[first - 1];
    m.output = output;
    return m;
}

LayerParams& ParameterStore::at(const std::string& name)
{
    auto it = layers_.find(name);
    if (it == layers_.end()) throw ModelError(name, "missing parameters");
    return it->second;
}

const LayerParams& ParameterStore::at(const std::string& name) const
{
    auto it = layers_.find(name);
    if (it == layers_.end()) throw ModelError(name, "missing parameters");
    return it->second;
}

ParameterStore ParameterStore::zeros_like(const ModelSpec& model)
{
    ParameterStore p;
    for (const auto& l : model.layers)
        if (l.has_params()) p.layers_[l.name] = {Tensor(l.weight_shape()), Tensor(l.bias_shape())};
    return p;
}

void ParameterStore::check_against(const ModelSpec& model) const
{
    for (const auto& l : model.layers) {
        if (!l.has_params()) continue;
        const auto& p = at(l.name);
        if (p.weight.shape() != l.weight_shape())
            throw ModelError(l.name, "weight shape " + shape_str(p.weight.shape()) + " expected " +
                                         shape_str(l.weight_shape()));
        if (p.bias.shape() != l.bias_shape())
            throw ModelError(l.name, "bias shape " + shape_str(p.bias.shape()) + " expected " +
                                         shape_str(l.bias_shape()));
    }
}

std::size_t ParameterStore::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& [_, p] : layers_) n += p.weight.size() + p.bias.size();
    return n;
}

bool operator==(const ParameterStore& a, const ParameterStore& b) noexcept
{
    if (a.layers_.size() != b.layers_.size()) return false;
    for (auto ia = a.layers_.begin(), ib = b.layers_.begin(); ia != a.layers_.end(); ++ia, ++ib) {
        if (ia->first != ib->first) return false;
        if (!bit_identical(ia->second.weight, ib->second.weight) || !bit_identical(ia->second.bias, ib->second.bias))
            return false;
    }
    return true;
}

ParameterStore init_params(const ModelSpec& model, std::uint64_t seed)
{
    model.validate();
    ParameterStore p = ParameterStore::zeros_like(model);
    std::mt19937_64 rng(seed);
    for (const auto& l : model.layers) {
        if (!l.has_params()) continue;
        const int fan_in = l.kind == LayerKind::conv2d ? l.in_channels * l.kernel * l.kernel : l.in_features;
        std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
        for (float& w : p.at(l.name).weight.storage()) w = dist(rng);
    }
    return p;
}

nlohmann::json to_json(const ModelSpec& model)
{
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : model.layers) {
        nlohmann::json j{{"kind", to_string(l.kind)}, {"name", l.name}};
        if (l.kind == LayerKind::conv2d) {
            j["in_channels"] = l.in_channels;
            j["out_channels"] = l.out_channels;
            j["kernel"] = l.kernel;
            j["stride"] = l.stride;
            j["padding"] = l.padding;
        } else if (l.kind == LayerKind::linear) {
            j["in_features"] = l.in_features;
            j["out_features"] = l.out_features;
        }
        layers.push_back(std::move(j));
    }
    return {{"layers", layers}, {"input_shape", model.input_shape}, {"output_semantics", to_string(model.output)}};
}

ModelSpec model_from_json(const nlohmann::json& j)
{
    ModelSpec m;
    m.input_shape = j.at("input_shape").get<Shape>();
    m.output = output_semantics_from_string(j.at("output_semantics").get<std::string>());
    for (const auto& lj : j.at("layers")) {
        LayerSpec l;
        l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
        l.name = lj.at("name").get<std::string>();
        l.in_channels = lj.value("in_channels", 0);
        l.out_channels = lj.value("out_channels", 0);
        l.kernel = lj.value("kernel", 0);
        l.stride = lj.value("stride", 1);
        l.padding = lj.value("padding", 0);
        l.in_features = lj.value("in_features", 0);
        l.out_features = lj.value("out_features", 0);
        m.layers.push_back(std::move(l));
    }
    m.validate();
    return m;
}

} // namespace unitscope
