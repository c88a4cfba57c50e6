#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "unitscope/attack.hpp"
#include "unitscope/render.hpp"
#include "unitscope/stats.hpp"

using namespace unitscope;

namespace {

ModelSpec small_classifier()
{
    ModelSpec m;
    m.input_shape = {3, 8, 8};
    m.output = OutputSemantics::class_logits;
    m.layers = {conv("c1", 3, 4), relu("r1"), maxpool("p1"), conv("c2", 4, 6), relu("r2"), maxpool("p2"),
                linear("fc", 6 * 2 * 2, 3)};
    m.validate();
    return m;
}

Tensor random_image(std::uint64_t seed)
{
    Tensor t({3, 8, 8});
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> ud(0.0f, 1.0f);
    for (auto& v : t.storage()) v = ud(rng);
    return t;
}

int predict(const ModelSpec& m, const ParameterStore& p, const Tensor& img)
{
    const Tensor out = forward(m, p, img.reshaped({1, 3, 8, 8})).output;
    return static_cast<int>(std::max_element(out.storage().begin(), out.storage().end()) - out.storage().begin());
}

} // namespace

TEST_CASE("zero bound leaves the image alone")
{
    const ModelSpec m = small_classifier();
    const ParameterStore p = init_params(m, 1);
    for (int i = 0; i < 5; ++i) {
        const Tensor img = random_image(i);
        const int pred = predict(m, p, img);
        AttackConfig c;
        c.linf_bound = 0.0f;
        c.iterations = 20;
        c.target = (pred + 1) % 3;
        const AttackResult r = targeted_attack(m, p, img, pred, c);
        CHECK(r.linf == 0.0);
        CHECK_FALSE(r.success);
        CHECK(bit_identical(r.adversarial, img));
        c.target = pred;
        CHECK(targeted_attack(m, p, img, pred, c).success);
    }
}

TEST_CASE("target equal to the source succeeds immediately")
{
    const ModelSpec m = small_classifier();
    ParameterStore p = init_params(m, 2);
    const Tensor img = random_image(3);
    const int pred = predict(m, p, img);
    // Make the predicted class win by a wide margin.
    p.at("fc").bias[pred] += 10.0f;
    AttackConfig c;
    c.target = pred;
    const AttackResult r = targeted_attack(m, p, img, pred, c);
    CHECK(r.success);
    CHECK(r.source_correct);
    CHECK(r.iterations_run == 1);
    CHECK(r.l2 == 0.0);
}

TEST_CASE("bound and pixel range are respected, results are deterministic")
{
    const ModelSpec m = small_classifier();
    const ParameterStore p = init_params(m, 4);
    for (int i = 0; i < 6; ++i) {
        const Tensor img = random_image(10 + i);
        const int pred = predict(m, p, img);
        AttackConfig c;
        c.linf_bound = 0.05f;
        c.step = 0.01f;
        c.iterations = 40;
        c.target = (pred + 2) % 3;
        const AttackResult r = targeted_attack(m, p, img, pred, c);
        CHECK(r.linf <= 0.05 + 1e-7);
        for (std::size_t k = 0; k < img.size(); ++k) {
            CHECK(r.adversarial[k] >= 0.0f);
            CHECK(r.adversarial[k] <= 1.0f);
            CHECK(r.perturbation[k] == r.adversarial[k] - img[k]);
        }
        if (r.success) CHECK(predict(m, p, r.adversarial) == c.target);
        const AttackResult again = targeted_attack(m, p, img, pred, c);
        CHECK(bit_identical(again.adversarial, r.adversarial));
        CHECK(again.to_json() == r.to_json());
    }
}

TEST_CASE("more iterations never lower the success count")
{
    const ModelSpec m = small_classifier();
    const ParameterStore p = init_params(m, 5);
    int prev = -1;
    for (int iters : {1, 3, 10, 40}) {
        int ok = 0;
        for (int i = 0; i < 12; ++i) {
            const Tensor img = random_image(100 + i);
            const int pred = predict(m, p, img);
            AttackConfig c;
            c.iterations = iters;
            c.linf_bound = 0.1f;
            c.step = 0.01f;
            c.target = (pred + 1) % 3;
            ok += targeted_attack(m, p, img, pred, c).success;
        }
        CHECK(ok >= prev);
        prev = ok;
    }
    CHECK(prev > 0);
}

TEST_CASE("non-finite values abort with the iteration index")
{
    const ModelSpec m = small_classifier();
    ParameterStore p = init_params(m, 6);
    p.at("fc").weight[0] = std::numeric_limits<float>::quiet_NaN();
    AttackConfig c;
    c.target = 1;
    try {
        targeted_attack(m, p, random_image(1), 0, c);
        FAIL("expected an AttackError");
    } catch (const AttackError& e) {
        CHECK(e.iteration() == 0);
        CHECK(std::string(e.what()).find("iteration 0") != std::string::npos);
    }
    AttackConfig bad;
    bad.iterations = 0;
    CHECK_THROWS_AS(targeted_attack(m, p, random_image(1), 0, bad), std::invalid_argument);
}

TEST_CASE("unit delta report")
{
    const ModelSpec m = small_classifier();
    ParameterStore p = init_params(m, 7);
    const Tensor a = random_image(1);
    Tensor b = a;
    for (std::size_t k = 0; k < b.size(); k += 3) b[k] = std::clamp(b[k] + 0.2f, 0.0f, 1.0f);
    const std::vector<int> units = {0, 1, 2, 3, 4, 5};
    for (const auto& d : unit_delta_report(m, p, a, a, "c2", units)) {
        CHECK(d.delta_peak == 0.0f);
        CHECK(d.max_increase == 0.0f);
    }
    // Unit 2 of c2 sees nothing from its inputs.
    auto& w = p.at("c2").weight;
    std::fill(w.storage().begin() + 2 * 36, w.storage().begin() + 3 * 36, 0.0f);
    const auto rep = unit_delta_report(m, p, a, b, "c2", units, 16);
    CHECK(rep[2].delta_peak == 0.0f);

    ForwardOptions opts;
    opts.stop_after = "c2";
    const Tensor act_a = forward(m, p, a.reshaped({1, 3, 8, 8}), opts).output;
    const Tensor act_b = forward(m, p, b.reshaped({1, 3, 8, 8}), opts).output;
    for (int u = 0; u < 6; ++u) {
        float pa = -1e30f, pb = -1e30f;
        for (int k = 0; k < 16; ++k) {
            pa = std::max(pa, act_a[u * 16 + k]);
            pb = std::max(pb, act_b[u * 16 + k]);
        }
        CHECK(rep[u].peak_original == pa);
        CHECK(rep[u].peak_adversarial == pb);
        CHECK(rep[u].delta_peak == pb - pa);
        // Locations at 16x16: the max-increase pixel has the largest upsampled difference.
        const Tensor ua = upsample_activation(act_a.reshaped({6, 4, 4}), 16, 16);
        const Tensor ub = upsample_activation(act_b.reshaped({6, 4, 4}), 16, 16);
        float best = -1e30f;
        for (int k = 0; k < 256; ++k) best = std::max(best, ub[u * 256 + k] - ua[u * 256 + k]);
        CHECK(rep[u].max_increase == best);
        const int at = rep[u].increase_y * 16 + rep[u].increase_x;
        CHECK(ub[u * 256 + at] - ua[u * 256 + at] == best);
    }
}

TEST_CASE("targets differ from sources")
{
    std::vector<int> src = {0, 1, 2, 3, 4, 0, 0, 0};
    const auto t = choose_targets(src, 5, 3);
    for (std::size_t i = 0; i < src.size(); ++i) {
        CHECK(t[i] != src[i]);
        CHECK(t[i] >= 0);
        CHECK(t[i] < 5);
    }
    CHECK(t == choose_targets(src, 5, 3));
}

TEST_CASE("importance delta aggregation")
{
    ImportanceTable imp;
    imp.n_classes = 2;
    imp.units = 6;
    // Class 0 ranks units 0,1,2,...; class 1 ranks 5,4,3,...
    imp.delta = {6, 5, 4, 3, 2, 1, 1, 2, 3, 4, 5, 6};
    AttackResult r;
    r.source = 0;
    r.target = 1;
    const std::vector<float> dp = {1.0f, -2.0f, 0.5f, 0.25f, -3.0f, 4.0f};
    for (int u = 0; u < 6; ++u) {
        UnitDelta d;
        d.unit = u;
        d.delta_peak = dp[u];
        r.unit_deltas.push_back(d);
    }
    const std::vector<RankBucket> buckets = {{"top-1", 0, 1}, {"2-2", 1, 2}, {"rest", 2, -1}};
    const std::vector<AttackResult> one = {r};
    const auto s = aggregate_importance_delta(one, imp, buckets, 6, 0.99, 1);
    // Best ranks: u0 0, u5 0, u1 1, u4 1, u2 2, u3 2.
    CHECK(s.buckets[0].interval.mean == doctest::Approx((1.0 + 4.0) / 2));
    CHECK(s.buckets[1].interval.mean == doctest::Approx((2.0 + 3.0) / 2));
    CHECK(s.buckets[2].interval.mean == doctest::Approx((0.5 + 0.25) / 2));
    CHECK(s.random.interval.mean == doctest::Approx((1 + 2 + 0.5 + 0.25 + 3 + 4) / 6.0));
    CHECK(s.top_minus_random.per_attack.size() == 1);

    AttackResult zero = r;
    for (auto& d : zero.unit_deltas) d.delta_peak = 0.0f;
    const std::vector<AttackResult> zeros = {zero, zero, zero};
    const auto z = aggregate_importance_delta(zeros, imp, default_rank_buckets(), 2, 0.99, 1);
    for (const auto& b : z.buckets) {
        CHECK(b.interval.mean == 0.0);
        CHECK(b.interval.hi == 0.0);
    }
    AttackResult missing = r;
    missing.unit_deltas.pop_back();
    const std::vector<AttackResult> bad = {missing};
    CHECK_THROWS(aggregate_importance_delta(bad, imp, buckets, 2, 0.99, 1));
}

TEST_CASE("bootstrap interval")
{
    const std::vector<double> same(30, 2.5);
    const Interval c = bootstrap_mean_ci(same, 0.99, 1);
    CHECK(c.mean == 2.5);
    CHECK(c.lo == 2.5);
    CHECK(c.hi == 2.5);
    CHECK(c.excludes_zero());

    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd(1.0, 1.0);
    std::vector<double> v(400);
    for (auto& x : v) x = nd(rng);
    const Interval i = bootstrap_mean_ci(v, 0.95, 2);
    // Normal-theory half width 1.96 / 20.
    CHECK(i.hi - i.lo == doctest::Approx(2 * 1.96 / 20).epsilon(0.15));
    CHECK(i.lo < i.mean);
    CHECK(i.mean < i.hi);
    CHECK(quantile({1, 2, 3, 4}, 0.5) == 2.5);
    CHECK(quantile({5}, 0.9) == 5);
}

TEST_CASE("image composition")
{
    Tensor a({3, 4, 4}, 0.2f), b({3, 4, 4}, 0.3f);
    const Tensor t = triptych(a, b);
    CHECK(t.shape() == Shape{3, 4, 16});
    CHECK(t[4 + 2 + 1] == doctest::Approx(1.0f));
    CHECK(t[0] == 0.2f);
    const Tensor v = vconcat(std::vector<Tensor>{a, b}, 1);
    CHECK(v.shape() == Shape{3, 9, 4});
    CHECK(upscale_nearest(a, 3).shape() == Shape{3, 12, 12});
    std::vector<std::uint8_t> mask(16, 0);
    mask[5] = 1;
    const Tensor o = overlay_mask(a, mask);
    CHECK(o[5] == 1.0f);
    CHECK(o[0] == doctest::Approx(0.07f));
    const std::vector<double> vals = {0, 1, 2, 4};
    const Tensor h = heatmap(vals, 2, 2, 2);
    CHECK(h.shape() == Shape{3, 4, 4});
    CHECK(h[3 * 4 + 3] == 1.0f);
}
