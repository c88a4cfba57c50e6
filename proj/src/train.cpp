#include "unitscope/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace unitscope {

TensorDataset::TensorDataset(Tensor inputs, Tensor targets) : inputs_(std::move(inputs)), targets_(std::move(targets))
{
    if (inputs_.empty() || targets_.empty() || inputs_.dim(0) != targets_.dim(0))
        throw std::invalid_argument("inputs and targets must have the same nonzero batch size");
}

void TensorDataset::fill(std::size_t index, std::span<float> input, std::span<float> target) const
{
    auto x = inputs_.item(static_cast<int>(index));
    auto t = targets_.item(static_cast<int>(index));
    std::copy(x.begin(), x.end(), input.begin());
    std::copy(t.begin(), t.end(), target.begin());
}

std::pair<Tensor, Tensor> gather_batch(const Dataset& data, std::span<const std::size_t> indices)
{
    const int n = static_cast<int>(indices.size());
    Shape xs{n}, ts{n};
    const Shape is = data.input_shape(), tsh = data.target_shape();
    xs.insert(xs.end(), is.begin(), is.end());
    ts.insert(ts.end(), tsh.begin(), tsh.end());
    Tensor x(xs), t(ts);
    for (int i = 0; i < n; ++i) data.fill(indices[static_cast<std::size_t>(i)], x.item(i), t.item(i));
    return {std::move(x), std::move(t)};
}

namespace {

struct OptimizerState {
    ParameterStore m;
    ParameterStore v;
    long step = 0;
};

void update(FloatBuffer& w, const FloatBuffer& g, FloatBuffer& m, FloatBuffer& v,
            const OptimizerConfig& c, long step)
{
    if (c.adam) {
        const double bc1 = 1.0 - std::pow(static_cast<double>(c.beta1), static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(static_cast<double>(c.beta2), static_cast<double>(step));
        const auto lr = static_cast<float>(c.learning_rate * std::sqrt(bc2) / bc1);
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = c.beta1 * m[i] + (1.0f - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0f - c.beta2) * g[i] * g[i];
            w[i] -= lr * m[i] / (std::sqrt(v[i]) + c.epsilon);
        }
    } else {
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = c.momentum * m[i] + g[i];
            w[i] -= c.learning_rate * m[i];
        }
    }
}

} // namespace

TrainResult train(const ModelSpec& model, const Dataset& data, LossKind loss, const OptimizerConfig& config,
                  std::optional<ParameterStore> initial, const EpochCallback& on_epoch)
{
    model.validate();
    if (data.input_shape() != model.input_shape)
        throw std::invalid_argument("dataset input shape " + shape_str(data.input_shape()) +
                                    " does not match model input " + shape_str(model.input_shape));
    if (config.batch_size <= 0 || config.epochs < 0) throw std::invalid_argument("bad optimizer config");

    TrainResult result;
    result.params = initial ? std::move(*initial) : init_params(model, config.seed);
    result.params.check_against(model);
    OptimizerState state{ParameterStore::zeros_like(model), ParameterStore::zeros_like(model), 0};

    std::mt19937_64 rng(config.seed ^ 0x5eedf00dULL);
    std::vector<std::size_t> order(data.size());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
            auto [x, t] = gather_batch(data, std::span<const std::size_t>(order).subspan(begin, end - begin));
            BackwardResult br;
            try {
                br = backward(model, result.params, x, loss, t);
            } catch (const ModelError& e) {
                throw TrainError(epoch, batches, e.what());
            }
            if (!std::isfinite(br.loss)) throw TrainError(epoch, batches, "loss is NaN");
            ++state.step;
            for (auto& [name, p] : result.params.layers()) {
                const auto& g = br.grads.at(name);
                update(p.weight.storage(), g.weight.storage(), state.m.at(name).weight.storage(),
                       state.v.at(name).weight.storage(), config, state.step);
                update(p.bias.storage(), g.bias.storage(), state.m.at(name).bias.storage(),
                       state.v.at(name).bias.storage(), config, state.step);
            }
            loss_sum += br.loss;
            ++batches;
        }
        const double mean = batches ? loss_sum / batches : 0.0;
        result.epoch_loss.push_back(mean);
        if (on_epoch) on_epoch(epoch, mean, result.params);
    }
    return result;
}

std::vector<int> predict_classes(const ModelSpec& model, const ParameterStore& params, const Tensor& inputs,
                                 int batch_size)
{
    std::vector<int> out;
    const int n = inputs.dim(0);
    out.reserve(static_cast<std::size_t>(n));
    for (int b = 0; b < n; b += batch_size) {
        const Tensor logits = forward(model, params, inputs.slice(b, std::min(n, b + batch_size))).output;
        for (int i = 0; i < logits.dim(0); ++i) {
            auto row = logits.item(i);
            out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
        }
    }
    return out;
}

std::vector<std::vector<std::uint8_t>> predict_labels(const ModelSpec& model, const ParameterStore& params,
                                                      const Tensor& inputs, int batch_size)
{
    std::vector<std::vector<std::uint8_t>> out;
    const int n = inputs.dim(0);
    for (int b = 0; b < n; b += batch_size) {
        const Tensor logits = forward(model, params, inputs.slice(b, std::min(n, b + batch_size))).output;
        const int C = logits.dim(1);
        const std::size_t plane = logits.item_size() / static_cast<std::size_t>(C);
        for (int i = 0; i < logits.dim(0); ++i) {
            auto v = logits.item(i);
            std::vector<std::uint8_t> labels(plane);
            for (std::size_t px = 0; px < plane; ++px) {
                int best = 0;
                for (int c = 1; c < C; ++c)
                    if (v[c * plane + px] > v[best * plane + px]) best = c;
                labels[px] = static_cast<std::uint8_t>(best);
            }
            out.push_back(std::move(labels));
        }
    }
    return out;
}

} // namespace unitscope
