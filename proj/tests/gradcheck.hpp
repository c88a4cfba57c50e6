#pragma once

// Central finite-difference oracle for backward(). The loss here is recomputed from the forward
// output in double precision and shares no code with the analytic loss gradient.

#include <cmath>
#include <algorithm>
#include <random>

#include "unitscope/nn.hpp"

namespace gradcheck {

using namespace unitscope;

inline double oracle_loss(const ModelSpec& m, const ParameterStore& p, const Tensor& x, LossKind kind,
                          const Tensor& target)
{
    const Tensor y = forward(m, p, x).output;
    if (kind == LossKind::mean_squared_error) {
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double d = static_cast<double>(y[i]) - target[i];
            s += d * d;
        }
        return s / static_cast<double>(y.size());
    }
    const int n = y.dim(0), C = y.dim(1);
    const std::size_t plane = y.item_size() / static_cast<std::size_t>(C);
    const bool probs = m.layers.back().kind == LayerKind::softmax;
    double s = 0;
    for (int e = 0; e < n; ++e)
        for (std::size_t px = 0; px < plane; ++px) {
            auto v = [&](int c) { return static_cast<double>(y[(static_cast<std::size_t>(e) * C + c) * plane + px]); };
            const int t = static_cast<int>(target[static_cast<std::size_t>(e) * plane + px]);
            if (probs) {
                s -= std::log(v(t));
            } else {
                double z = 0;
                for (int c = 0; c < C; ++c) z += std::exp(v(c));
                s -= v(t) - std::log(z);
            }
        }
    return s / (static_cast<double>(n) * plane);
}

struct Errors {
    double input = 0;
    double params = 0;
};

/// Relative L2 error between analytic and finite-difference gradients, per group.
inline Errors check(const ModelSpec& m, ParameterStore p, Tensor x, LossKind kind, const Tensor& target,
                    double step = 1e-3)
{
    const BackwardResult br = backward(m, p, x, kind, target);
    auto rel = [](const std::vector<double>& a, const std::vector<double>& n) {
        double diff = 0, na = 0, nn = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            diff += (a[i] - n[i]) * (a[i] - n[i]);
            na += a[i] * a[i];
            nn += n[i] * n[i];
        }
        return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-2});
    };
    auto fd = [&](float& slot) {
        const float orig = slot;
        slot = static_cast<float>(orig + step);
        const double up = oracle_loss(m, p, x, kind, target);
        slot = static_cast<float>(orig - step);
        const double down = oracle_loss(m, p, x, kind, target);
        slot = orig;
        return (up - down) / (2 * step);
    };
    Errors err;
    {
        std::vector<double> a, n;
        for (std::size_t i = 0; i < x.size(); ++i) {
            a.push_back(br.input_grad[i]);
            n.push_back(fd(x[i]));
        }
        err.input = rel(a, n);
    }
    std::vector<double> a, n;
    for (auto& [name, lp] : p.layers()) {
        const auto& g = br.grads.at(name);
        for (std::size_t i = 0; i < lp.weight.size(); ++i) {
            a.push_back(g.weight[i]);
            n.push_back(fd(lp.weight[i]));
        }
        for (std::size_t i = 0; i < lp.bias.size(); ++i) {
            a.push_back(g.bias[i]);
            n.push_back(fd(lp.bias[i]));
        }
    }
    err.params = a.empty() ? 0.0 : rel(a, n);
    return err;
}

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, float scale = 1.0f)
{
    std::normal_distribution<float> d(0.0f, scale);
    Tensor t(std::move(s));
    for (float& v : t.storage()) v = d(rng);
    return t;
}

/// Values bounded away from zero, for layers with a kink at zero.
inline Tensor away_from_zero(Shape s, std::mt19937_64& rng, float margin = 0.1f)
{
    std::uniform_real_distribution<float> u(margin, 1.5f);
    std::bernoulli_distribution sign(0.5);
    Tensor t(std::move(s));
    for (float& v : t.storage()) v = sign(rng) ? u(rng) : -u(rng);
    return t;
}

struct Case {
    ModelSpec model;
    ParameterStore params;
    Tensor input;
    LossKind loss = LossKind::mean_squared_error;
    Tensor target;
};

/// A random single-layer problem of the given kind with a 4-8 element input tensor.
inline Case make_case(LayerKind kind, std::mt19937_64& rng)
{
    std::uniform_int_distribution<int> pick(0, 1 << 20);
    auto rnd = [&](int lo, int hi) { return lo + pick(rng) % (hi - lo + 1); };
    Case c;
    c.model.output = OutputSemantics::image;
    switch (kind) {
    case LayerKind::conv2d: {
        int C, H, W;
        do {
            C = rnd(1, 2);
            H = rnd(2, 4);
            W = rnd(2, 4);
        } while (C * H * W < 4 || C * H * W > 8);
        const int k = rnd(1, std::min({3, H + 1, W + 1}));
        const int pad = rnd(0, 1);
        const int stride = rnd(1, 2);
        c.model.layers = {conv("conv", C, rnd(1, 3), k, stride, pad)};
        c.model.input_shape = {C, H, W};
        if (H + 2 * pad < k || W + 2 * pad < k) c.model.layers[0].padding = k / 2 + 1;
        c.input = random_tensor({1, C, H, W}, rng);
        break;
    }
    case LayerKind::relu: {
        const int n = rnd(4, 8);
        c.model.layers = {relu("relu")};
        c.model.input_shape = {1, 1, n};
        c.input = away_from_zero({1, 1, 1, n}, rng);
        break;
    }
    case LayerKind::maxpool2x2: {
        const bool two = rnd(0, 1) == 1;
        const int C = 1, H = 2, W = two ? 4 : rnd(2, 3);
        c.model.layers = {maxpool("pool")};
        c.model.input_shape = {C, H, W};
        // distinct values spaced well beyond the finite-difference step
        std::vector<float> vals;
        for (int i = 0; i < C * H * W; ++i) vals.push_back(0.1f * static_cast<float>(i) - 0.3f);
        std::shuffle(vals.begin(), vals.end(), rng);
        c.input = Tensor({1, C, H, W}, vals);
        break;
    }
    case LayerKind::upsample2x_bilinear:
    case LayerKind::upsample2x_nearest: {
        int C, H, W;
        do {
            C = rnd(1, 2);
            H = rnd(1, 4);
            W = rnd(1, 4);
        } while (C * H * W < 4 || C * H * W > 8);
        c.model.layers = {kind == LayerKind::upsample2x_bilinear ? upsample_bilinear("up") : upsample_nearest("up")};
        c.model.input_shape = {C, H, W};
        c.input = random_tensor({1, C, H, W}, rng);
        break;
    }
    case LayerKind::linear: {
        const int in = rnd(4, 8);
        c.model.layers = {linear("fc", in, rnd(2, 4))};
        c.model.input_shape = {in};
        c.model.output = OutputSemantics::class_logits;
        c.input = random_tensor({1, in}, rng);
        break;
    }
    case LayerKind::softmax: {
        const int k = rnd(4, 8);
        c.model.layers = {softmax("softmax")};
        c.model.input_shape = {k};
        c.model.output = OutputSemantics::class_logits;
        c.input = random_tensor({1, k}, rng);
        break;
    }
    }
    c.params = init_params(c.model, rng());
    for (auto& [_, lp] : c.params.layers())
        for (float& b : lp.bias.storage()) b = std::normal_distribution<float>(0.0f, 0.3f)(rng);
    const Shape out = c.model.output_shape();
    const bool use_ce = (kind == LayerKind::linear || kind == LayerKind::softmax) && rnd(0, 1) == 1;
    if (use_ce) {
        c.loss = LossKind::cross_entropy;
        c.target = Tensor({1}, static_cast<float>(rnd(0, out[0] - 1)));
    } else {
        Shape ts{1};
        ts.insert(ts.end(), out.begin(), out.end());
        c.target = random_tensor(ts, rng);
    }
    return c;
}

inline const std::vector<LayerKind>& all_kinds()
{
    static const std::vector<LayerKind> kinds = {LayerKind::conv2d,      LayerKind::relu,
                                                 LayerKind::maxpool2x2,  LayerKind::upsample2x_bilinear,
                                                 LayerKind::upsample2x_nearest, LayerKind::linear,
                                                 LayerKind::softmax};
    return kinds;
}

} // namespace gradcheck
