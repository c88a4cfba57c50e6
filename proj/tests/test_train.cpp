#include <doctest.h>

#include <cmath>

#include "unitscope/train.hpp"

using namespace unitscope;

namespace {

ModelSpec neuron()
{
    ModelSpec m;
    m.layers = {linear("fc", 2, 2)};
    m.input_shape = {2};
    m.output = OutputSemantics::class_logits;
    return m;
}

TensorDataset two_points()
{
    return TensorDataset(Tensor::from({2, 2}, {1.0f, 0.5f, -1.0f, -0.25f}), Tensor::from({2}, {0, 1}));
}

} // namespace

TEST_CASE("learning rate 0 leaves parameters unchanged")
{
    const ModelSpec m = neuron();
    const ParameterStore init = init_params(m, 4);
    for (bool adam : {true, false}) {
        OptimizerConfig c;
        c.learning_rate = 0.0f;
        c.adam = adam;
        c.epochs = 3;
        c.batch_size = 1;
        const auto r = train(m, two_points(), LossKind::cross_entropy, c, init);
        CHECK(r.params == init);
        CHECK(r.epoch_loss.size() == 3);
    }
}

TEST_CASE("single linear neuron separates two points within 100 epochs")
{
    const ModelSpec m = neuron();
    OptimizerConfig c;
    c.learning_rate = 0.1f;
    c.adam = false;
    c.momentum = 0.0f;
    c.epochs = 100;
    c.batch_size = 2;
    c.seed = 17;
    const auto r = train(m, two_points(), LossKind::cross_entropy, c);
    const auto pred = predict_classes(m, r.params, Tensor::from({2, 2}, {1.0f, 0.5f, -1.0f, -0.25f}));
    CHECK(pred == std::vector<int>{0, 1});
    CHECK(r.epoch_loss.back() < r.epoch_loss.front());
}

TEST_CASE("fixed seed gives bit-identical parameters")
{
    ModelSpec m;
    m.layers = {conv("c", 1, 3), relu("r"), maxpool("p"), linear("fc", 3 * 2 * 2, 2)};
    m.input_shape = {1, 4, 4};
    m.output = OutputSemantics::class_logits;
    Tensor x({16, 1, 4, 4});
    Tensor t({16});
    for (int i = 0; i < 16; ++i) {
        for (int k = 0; k < 16; ++k) x.item(i)[static_cast<std::size_t>(k)] = std::sin(static_cast<float>(i * 16 + k));
        t[static_cast<std::size_t>(i)] = static_cast<float>(i % 2);
    }
    const TensorDataset data(x, t);
    OptimizerConfig c;
    c.epochs = 4;
    c.batch_size = 5;
    c.seed = 123;
    const auto a = train(m, data, LossKind::cross_entropy, c);
    const auto b = train(m, data, LossKind::cross_entropy, c);
    CHECK(a.params == b.params);
    CHECK(a.epoch_loss == b.epoch_loss);
    c.seed = 124;
    CHECK_FALSE(train(m, data, LossKind::cross_entropy, c).params == a.params);
}

TEST_CASE("divergence aborts with the epoch and batch index")
{
    ModelSpec m;
    m.layers = {linear("fc", 1, 1)};
    m.input_shape = {1};
    m.output = OutputSemantics::class_logits;
    const TensorDataset data(Tensor::from({2, 1}, {1e20f, 1e20f}), Tensor::from({2, 1}, {0, 0}));
    OptimizerConfig c;
    c.learning_rate = 1e30f;
    c.adam = false;
    c.epochs = 5;
    c.batch_size = 1;
    ParameterStore p = ParameterStore::zeros_like(m);
    p.at("fc").weight[0] = 1e20f;
    try {
        train(m, data, LossKind::mean_squared_error, c, p);
        FAIL("expected TrainError");
    } catch (const TrainError& e) {
        CHECK(e.epoch() == 0);
        CHECK(e.batch() == 0);
    }
}
