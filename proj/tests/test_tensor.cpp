#include <doctest.h>

#include <random>

#include "unitscope/nn.hpp"

using namespace unitscope;

namespace {

ModelSpec single(LayerSpec l, Shape in, OutputSemantics out = OutputSemantics::image)
{
    ModelSpec m;
    m.layers = {std::move(l)};
    m.input_shape = std::move(in);
    m.output = out;
    return m;
}

Tensor random_tensor(Shape s, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d;
    Tensor t(std::move(s));
    for (float& v : t.storage()) v = d(rng);
    return t;
}

} // namespace

TEST_CASE("1x1 identity convolution reproduces its input")
{
    ModelSpec m = single(conv("c", 3, 3, 1, 1, 0), {3, 5, 4});
    ParameterStore p = ParameterStore::zeros_like(m);
    for (int o = 0; o < 3; ++o) p.at("c").weight[static_cast<std::size_t>(o * 3 + o)] = 1.0f;
    const Tensor x = random_tensor({2, 3, 5, 4}, 1);
    CHECK(bit_identical(forward(m, p, x).output, x));
}

TEST_CASE("relu clamps negatives")
{
    ModelSpec m = single(relu("r"), {3}, OutputSemantics::class_logits);
    const Tensor y = forward(m, {}, Tensor::from({1, 3}, {-1, 0, 2})).output;
    CHECK(y == Tensor::from({1, 3}, {0, 0, 2}));
}

TEST_CASE("3x3 all-ones convolution with zero padding counts the covered pixels")
{
    ModelSpec m = single(conv("c", 1, 1, 3, 1, 1), {1, 5, 5});
    ParameterStore p = ParameterStore::zeros_like(m);
    for (float& w : p.at("c").weight.storage()) w = 1.0f;
    const Tensor y = forward(m, p, Tensor({1, 1, 5, 5}, 1.0f)).output;
    // hand count: interior sees 9 ones, edges 6, corners 4
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 5; ++c) {
            const bool edge_r = r == 0 || r == 4, edge_c = c == 0 || c == 4;
            const float expect = edge_r && edge_c ? 4.0f : (edge_r || edge_c ? 6.0f : 9.0f);
            CHECK(y.at(0, 0, r, c) == expect);
        }
}

TEST_CASE("strided convolution output size")
{
    ModelSpec m = single(conv("c", 2, 4, 3, 2, 1), {2, 8, 7});
    CHECK(m.output_shape() == Shape{4, 4, 4});
}

TEST_CASE("shape mismatch names the offending layer")
{
    ModelSpec m;
    m.layers = {conv("c1", 3, 8), relu("r1"), conv("c2", 4, 8)};
    m.input_shape = {3, 8, 8};
    m.output = OutputSemantics::image;
    try {
        m.validate();
        FAIL("expected a ModelError");
    } catch (const ModelError& e) {
        CHECK(e.layer() == "c2");
    }

    ModelSpec ok = single(conv("c", 3, 2), {3, 4, 4});
    try {
        forward(ok, init_params(ok, 1), Tensor({1, 2, 4, 4}));
        FAIL("expected a ModelError");
    } catch (const ModelError& e) {
        CHECK(e.layer() == "c");
    }
}

TEST_CASE("duplicate layer names are rejected")
{
    ModelSpec m;
    m.layers = {relu("a"), relu("a")};
    m.input_shape = {4};
    CHECK_THROWS_AS(m.validate(), ModelError);
}

TEST_CASE("bilinear upsampling keeps constants and corners exact")
{
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<float> u(-3.0f, 3.0f);
    for (int trial = 0; trial < 20; ++trial) {
        const int h = 2 + trial % 5, w = 2 + (trial * 3) % 6;
        const float c = u(rng);
        std::vector<float> src(static_cast<std::size_t>(h * w), c), dst(static_cast<std::size_t>(4 * h * w));
        bilinear_resize(src, h, w, dst, 2 * h, 2 * w);
        for (float v : dst) CHECK(v == c);

        for (float& v : src) v = u(rng);
        bilinear_resize(src, h, w, dst, 2 * h, 2 * w);
        const int W = 2 * w, H = 2 * h;
        CHECK(dst[0] == src[0]);
        CHECK(dst[static_cast<std::size_t>(W - 1)] == src[static_cast<std::size_t>(w - 1)]);
        CHECK(dst[static_cast<std::size_t>((H - 1) * W)] == src[static_cast<std::size_t>((h - 1) * w)]);
        CHECK(dst.back() == src.back());
    }
}

TEST_CASE("maxpool backward routes each window's gradient to exactly one input")
{
    ModelSpec m = single(maxpool("p"), {2, 4, 6});
    const Tensor x = random_tensor({1, 2, 4, 6}, 3);
    const Tensor target({1, 2, 2, 3});
    const auto br = backward(m, {}, x, LossKind::mean_squared_error, target);
    const Tensor y = br.output;
    for (int c = 0; c < 2; ++c)
        for (int oy = 0; oy < 2; ++oy)
            for (int ox = 0; ox < 3; ++ox) {
                int nonzero = 0;
                float routed = 0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const float g = br.input_grad.at(0, c, 2 * oy + dy, 2 * ox + dx);
                        if (g != 0.0f) {
                            ++nonzero;
                            routed = g;
                            CHECK(x.at(0, c, 2 * oy + dy, 2 * ox + dx) == y.at(0, c, oy, ox));
                        }
                    }
                CHECK(nonzero == 1);
                CHECK(routed == doctest::Approx(2.0 * y.at(0, c, oy, ox) / 12.0).epsilon(1e-5));
            }
}

TEST_CASE("maxpool ties go to the first position in row-major order")
{
    ModelSpec m = single(maxpool("p"), {1, 2, 2});
    const Tensor x({1, 1, 2, 2}, 1.0f);
    const auto br = backward(m, {}, x, LossKind::mean_squared_error, Tensor({1, 1, 1, 1}));
    CHECK(br.input_grad[0] != 0.0f);
    CHECK(br.input_grad[1] == 0.0f);
    CHECK(br.input_grad[2] == 0.0f);
    CHECK(br.input_grad[3] == 0.0f);
}

TEST_CASE("forward is deterministic and independent of batch composition")
{
    ModelSpec m;
    m.layers = {conv("c1", 3, 8), relu("r1"), maxpool("p1"), conv("c2", 8, 4), relu("r2"),
                linear("fc", 4 * 4 * 4, 5)};
    m.input_shape = {3, 8, 8};
    m.output = OutputSemantics::class_logits;
    const ParameterStore p = init_params(m, 11);
    const Tensor x = random_tensor({6, 3, 8, 8}, 12);
    const auto a = forward(m, p, x, {"c1", "c2"});
    const auto b = forward(m, p, x, {"c1", "c2"});
    CHECK(bit_identical(a.output, b.output));
    const auto single = forward(m, p, x.slice(3, 4));
    CHECK(std::equal(single.output.storage().begin(), single.output.storage().end(), a.output.item(3).begin()));

    set_num_jobs(3);
    const auto threaded = forward(m, p, x, {"c1"});
    set_num_jobs(1);
    CHECK(bit_identical(threaded.output, a.output));

    // recorded activations are post-nonlinearity
    for (float v : a.activations.at("c1").storage()) CHECK(v >= 0.0f);
    CHECK(a.activations.at("c2").shape() == Shape{6, 4, 4, 4});
}

TEST_CASE("resume and stop evaluate a slice of the model")
{
    ModelSpec m;
    m.layers = {conv("c1", 3, 4), relu("r1"), maxpool("p1"), conv("c2", 4, 4), relu("r2")};
    m.input_shape = {3, 8, 8};
    m.output = OutputSemantics::image;
    const ParameterStore p = init_params(m, 5);
    const Tensor x = random_tensor({2, 3, 8, 8}, 6);
    const auto full = forward(m, p, x, {"c1"});
    ForwardOptions stop;
    stop.stop_after = "c1";
    CHECK(bit_identical(forward(m, p, x, stop).output, full.activations.at("c1")));
    ForwardOptions resume;
    resume.resume_after = "c1";
    CHECK(bit_identical(forward(m, p, full.activations.at("c1"), resume).output, full.output));
}

TEST_CASE("softmax rows sum to one")
{
    ModelSpec m = single(softmax("s"), {4, 3, 3}, OutputSemantics::segmentation_logits);
    const Tensor y = forward(m, {}, random_tensor({2, 4, 3, 3}, 8)).output;
    for (int n = 0; n < 2; ++n)
        for (int px = 0; px < 9; ++px) {
            double s = 0;
            for (int c = 0; c < 4; ++c) s += y[static_cast<std::size_t>((n * 4 + c) * 9 + px)];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
}
