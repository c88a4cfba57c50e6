#include <doctest.h>

#include "gradcheck.hpp"

using namespace unitscope;

TEST_CASE("zero-weight linear model against a zero target has zero loss and gradients")
{
    ModelSpec m;
    m.layers = {linear("fc", 3, 2)};
    m.input_shape = {3};
    m.output = OutputSemantics::class_logits;
    const auto br = backward(m, ParameterStore::zeros_like(m), Tensor::from({1, 3}, {1, 2, 3}),
                             LossKind::mean_squared_error, Tensor({1, 2}));
    CHECK(br.loss == 0.0);
    for (float g : br.grads.at("fc").weight.storage()) CHECK(g == 0.0f);
    for (float g : br.grads.at("fc").bias.storage()) CHECK(g == 0.0f);
}

TEST_CASE("single linear neuron: dL/dw = 2(wx - t)x")
{
    ModelSpec m;
    m.layers = {linear("fc", 1, 1)};
    m.input_shape = {1};
    m.output = OutputSemantics::class_logits;
    ParameterStore p = ParameterStore::zeros_like(m);
    p.at("fc").weight[0] = 1.0f;
    const auto br = backward(m, p, Tensor::from({1, 1}, {1}), LossKind::mean_squared_error, Tensor({1, 1}));
    CHECK(br.loss == doctest::Approx(1.0));
    CHECK(br.grads.at("fc").weight[0] == doctest::Approx(2.0));
    CHECK(br.input_grad[0] == doctest::Approx(2.0));
}

TEST_CASE("every layer kind matches central finite differences on 20 random shapes")
{
    std::mt19937_64 rng(2024);
    for (LayerKind kind : gradcheck::all_kinds()) {
        for (int trial = 0; trial < 20; ++trial) {
            auto c = gradcheck::make_case(kind, rng);
            const auto err = gradcheck::check(c.model, c.params, c.input, c.loss, c.target);
            CAPTURE(to_string(kind));
            CAPTURE(trial);
            CAPTURE(shape_str(c.model.input_shape));
            CHECK(err.input < 1e-3);
            CHECK(err.params < 1e-3);
        }
    }
}

TEST_CASE("layer stacks match finite differences on the input")
{
    std::mt19937_64 rng(99);
    int checked = 0;
    for (int trial = 0; checked < 10 && trial < 100; ++trial) {
        ModelSpec m;
        m.layers = {conv("c1", 1, 2, 3, 1, 1), relu("r1"), maxpool("p1"), upsample_bilinear("u1"),
                    conv("c2", 2, 2, 3, 1, 1), upsample_nearest("u2"), conv("c3", 2, 3, 1, 1, 0), softmax("s")};
        m.input_shape = {1, 2, 4};
        m.output = OutputSemantics::segmentation_logits;
        const ParameterStore p = init_params(m, rng());
        const Tensor x = gradcheck::random_tensor({1, 1, 2, 4}, rng);
        // skip draws that put a relu input or a pooling window near its kink
        ModelSpec pre = m;
        pre.layers.resize(1);
        pre.output = OutputSemantics::image;
        const Tensor z = forward(pre, p, x).output;
        bool near_kink = false;
        for (float v : z.storage()) near_kink |= std::abs(v) < 0.05f;
        for (int c = 0; c < 2; ++c)
            for (int ox = 0; ox < 2; ++ox) {
                std::vector<float> w;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) w.push_back(std::max(0.0f, z.at(0, c, dy, 2 * ox + dx)));
                std::sort(w.begin(), w.end());
                if (w[3] > 0 && w[3] - w[2] < 0.05f) near_kink = true;
            }
        if (near_kink) continue;
        Tensor target({1, 4, 8}, 0.0f);
        for (std::size_t i = 0; i < target.size(); ++i) target[i] = static_cast<float>(rng() % 3);
        const auto err = gradcheck::check(m, p, x, LossKind::cross_entropy, target, 1e-2);
        CHECK(err.input < 1e-3);
        CHECK(err.params < 1e-3);
        ++checked;
    }
    CHECK(checked == 10);
}

TEST_CASE("non-finite loss reports the first offending layer")
{
    ModelSpec m;
    m.layers = {linear("fc1", 2, 2), relu("r"), linear("fc2", 2, 1)};
    m.input_shape = {2};
    m.output = OutputSemantics::class_logits;
    ParameterStore p = init_params(m, 3);
    p.at("fc1").weight[0] = std::numeric_limits<float>::infinity();
    try {
        backward(m, p, Tensor::from({1, 2}, {1, 1}), LossKind::mean_squared_error, Tensor({1, 1}));
        FAIL("expected ModelError");
    } catch (const ModelError& e) {
        CHECK(e.layer() == "fc1");
    }
}

TEST_CASE("backward is bit-identical across runs and worker counts")
{
    ModelSpec m;
    m.layers = {conv("c1", 3, 4), relu("r1"), maxpool("p1"), linear("fc", 4 * 4 * 4, 3)};
    m.input_shape = {3, 8, 8};
    m.output = OutputSemantics::class_logits;
    std::mt19937_64 rng(5);
    const ParameterStore p = init_params(m, 1);
    const Tensor x = gradcheck::random_tensor({20, 3, 8, 8}, rng);
    Tensor t({20});
    for (int i = 0; i < 20; ++i) t[static_cast<std::size_t>(i)] = static_cast<float>(i % 3);
    const auto a = backward(m, p, x, LossKind::cross_entropy, t);
    set_num_jobs(4);
    const auto b = backward(m, p, x, LossKind::cross_entropy, t);
    set_num_jobs(1);
    CHECK(a.loss == b.loss);
    CHECK(a.grads == b.grads);
    CHECK(bit_identical(a.input_grad, b.input_grad));
}
