#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "unitscope/dissect.hpp"
#include "unitscope/nn.hpp"
#include "unitscope/zoo.hpp"

using namespace unitscope;

namespace {

/// 1x1 identity conv over C channels: the activation equals the input.
std::pair<ModelSpec, ParameterStore> identity_model(int C, int size)
{
    ModelSpec m;
    m.input_shape = {C, size, size};
    m.output = OutputSemantics::image;
    m.layers = {conv("id", C, C, 1)};
    m.validate();
    ParameterStore p = ParameterStore::zeros_like(m);
    for (int c = 0; c < C; ++c) p.at("id").weight[static_cast<std::size_t>(c) * C + c] = 1.0f;
    return {m, p};
}

SegmentationMap object_only(int h, int w, std::vector<std::uint8_t> object)
{
    SegmentationMap s;
    s.height = h;
    s.width = w;
    s.object = std::move(object);
    return s;
}

} // namespace

TEST_CASE("reservoir keeps every value while under capacity")
{
    QuantileReservoir r(10, 1);
    for (int i = 0; i < 7; ++i) r.add(static_cast<float>(i));
    CHECK(r.seen() == 7);
    CHECK(r.samples() == std::vector<float>{0, 1, 2, 3, 4, 5, 6});
}

TEST_CASE("add_stream keeps the same items as add")
{
    QuantileReservoir a(50, 9), b(50, 9);
    for (int i = 0; i < 5000; ++i) a.add(static_cast<float>(i));
    int calls = 0;
    for (int chunk = 0; chunk < 50; ++chunk)
        b.add_stream(100, [&](std::uint64_t k) {
            ++calls;
            return static_cast<float>(chunk * 100 + static_cast<int>(k));
        });
    CHECK(a.samples() == b.samples());
    CHECK(b.seen() == 5000);
    CHECK(calls < 1000);
}

TEST_CASE("reservoir inclusion is uniform")
{
    constexpr int n = 400, cap = 40, trials = 3000;
    std::vector<int> hits(n, 0);
    for (int t = 0; t < trials; ++t) {
        QuantileReservoir r(cap, static_cast<std::uint64_t>(t));
        for (int i = 0; i < n; ++i) r.add(static_cast<float>(i));
        for (float v : r.samples()) ++hits[static_cast<int>(v)];
    }
    // Expected 300 per item, binomial sd ~16.4.
    std::vector<double> quarter(4, 0.0);
    for (int i = 0; i < n; ++i) {
        CHECK(std::abs(hits[i] - 300) < 90);
        quarter[i / 100] += hits[i];
    }
    for (double q : quarter) CHECK(std::abs(q / 30000.0 - 1.0) < 0.03);
}

TEST_CASE("merged reservoir samples both streams in proportion")
{
    constexpr int trials = 2000;
    double from_a = 0.0;
    std::vector<int> hits(1000, 0);
    for (int t = 0; t < trials; ++t) {
        QuantileReservoir a(50, 2 * t), b(50, 2 * t + 1);
        for (int i = 0; i < 200; ++i) a.add(static_cast<float>(i));
        for (int i = 200; i < 1000; ++i) b.add(static_cast<float>(i));
        a.merge(b);
        CHECK(a.seen() == 1000);
        REQUIRE(a.samples().size() == 50);
        for (float v : a.samples()) {
            ++hits[static_cast<int>(v)];
            if (v < 200) from_a += 1.0;
        }
    }
    CHECK(from_a / (trials * 50.0) == doctest::Approx(0.2).epsilon(0.03));
    double lo = 1e9, hi = 0;
    for (int h : hits) {
        lo = std::min<double>(lo, h);
        hi = std::max<double>(hi, h);
    }
    // Expected 100 per item.
    CHECK(lo > 55);
    CHECK(hi < 150);
}

TEST_CASE("merge continues sampling correctly")
{
    QuantileReservoir a(64, 3), b(64, 4);
    for (int i = 0; i < 3000; ++i) a.add(0.0f);
    for (int i = 0; i < 1000; ++i) b.add(0.0f);
    a.merge(b);
    // 4000 more items with value 1: about half of the final sample.
    int ones = 0;
    for (int t = 0; t < 400; ++t) {
        QuantileReservoir c = a;
        for (int i = 0; i < 4000; ++i) c.add(1.0f);
        for (float v : c.samples()) ones += v == 1.0f;
    }
    CHECK(ones / (400.0 * 64) == doctest::Approx(0.5).epsilon(0.04));
}

TEST_CASE("merge of small streams keeps everything")
{
    QuantileReservoir a(10, 1), b(10, 2);
    a.add(1);
    a.add(2);
    b.add(3);
    a.merge(b);
    auto s = a.samples();
    std::sort(s.begin(), s.end());
    CHECK(s == std::vector<float>{1, 2, 3});
    CHECK(a.seen() == 3);
}

TEST_CASE("threshold index")
{
    QuantileReservoir r(1000, 0);
    for (int i = 1; i <= 100; ++i) r.add(static_cast<float>(101 - i));
    CHECK(r.threshold(0.01) == 99.0f);
    CHECK(r.threshold(0.05) == 95.0f);
    CHECK(r.threshold(0.5) == 50.0f);
}

TEST_CASE("threshold exceedance on a large stream")
{
    std::mt19937_64 rng(5);
    std::normal_distribution<float> nd;
    std::vector<float> values(200000);
    for (auto& v : values) v = nd(rng);
    QuantileReservoir r(QuantileReservoir::kDefaultCapacity, 11);
    for (float v : values) r.add(v);
    const float t = r.threshold(0.01);
    const double above = static_cast<double>(std::count_if(values.begin(), values.end(), [&](float v) { return v > t; })) /
                         static_cast<double>(values.size());
    CHECK(std::abs(above - 0.01) < 0.003);
}

TEST_CASE("upsample_activation is corner aligned bilinear")
{
    Tensor m({2, 8, 8});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) m[(c * 8 + y) * 8 + x] = static_cast<float>(c + 0.5 * y - 0.25 * x);
    const Tensor up = upsample_activation(m, 64, 64);
    REQUIRE(up.shape() == Shape{2, 64, 64});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const double sy = y * 7.0 / 63.0, sx = x * 7.0 / 63.0;
                CHECK(up[(c * 64 + y) * 64 + x] == doctest::Approx(c + 0.5 * sy - 0.25 * sx).epsilon(1e-5));
            }
    // Source grid points land on every 9th output pixel.
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) CHECK(up[(64 + 9 * y) * 64 + 9 * x] == m[(8 + y) * 8 + x]);
}

TEST_CASE("fit_thresholds: quantile per unit and constant units")
{
    auto [m, p] = identity_model(3, 64);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<float> ud(0.0f, 1.0f);
    const int n = 40;
    Tensor x({n, 3, 64, 64});
    for (int i = 0; i < n; ++i)
        for (int px = 0; px < 4096; ++px) {
            x[(i * 3 + 0) * 4096 + px] = ud(rng);
            x[(i * 3 + 1) * 4096 + px] = 10.0f + ud(rng) * ud(rng);
            x[(i * 3 + 2) * 4096 + px] = 0.5f;
        }
    DissectConfig cfg;
    cfg.seed = 4;
    const ThresholdTable t = fit_thresholds(m, p, {"id"}, inputs_of(x), cfg);
    const auto& l = t.at("id");
    REQUIRE(l.t.size() == 3);
    CHECK(l.samples_seen[0] == 40u * 4096u);
    CHECK_FALSE(l.constant[0]);
    CHECK(l.constant[2]);
    CHECK(l.t[2] == 0.5f);
    for (int u = 0; u < 2; ++u) {
        std::size_t above = 0;
        for (int i = 0; i < n; ++i)
            for (int px = 0; px < 4096; ++px) above += x[(i * 3 + u) * 4096 + px] > l.t[u];
        CHECK(std::abs(static_cast<double>(above) / (n * 4096.0) - 0.01) < 0.003);
    }
    CHECK(l.t[0] == doctest::Approx(0.99).epsilon(0.005));

    DissectConfig other = cfg;
    other.seed = 4;
    CHECK(fit_thresholds(m, p, {"id"}, inputs_of(x), other).at("id").t == l.t);

    const ThresholdTable back = ThresholdTable::from_json(nlohmann::json::parse(t.to_json().dump()));
    CHECK(back.at("id").t == l.t);
    CHECK(back.at("id").constant == l.constant);
    CHECK(back.at("id").samples_seen == l.samples_seen);
}

TEST_CASE("fit_thresholds does not depend on the job count")
{
    auto [m, p] = identity_model(4, 64);
    std::mt19937_64 rng(8);
    std::normal_distribution<float> nd;
    Tensor x({12, 4, 64, 64});
    for (auto& v : x.storage()) v = nd(rng);
    DissectConfig cfg;
    cfg.reservoir_capacity = 2000;
    cfg.batch_size = 5;
    set_num_jobs(1);
    const auto a = fit_thresholds(m, p, {"id"}, inputs_of(x), cfg);
    set_num_jobs(3);
    const auto b = fit_thresholds(m, p, {"id"}, inputs_of(x), cfg);
    set_num_jobs(1);
    CHECK(a.at("id").t == b.at("id").t);
}

TEST_CASE("IoU accumulator matches brute force on random 8x8 masks")
{
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const double pa = (rng() % 100) / 100.0, pb = (rng() % 100) / 100.0;
        std::bernoulli_distribution ba(pa), bb(pb);
        std::vector<std::uint8_t> a(64), b(64);
        for (int i = 0; i < 64; ++i) {
            a[i] = ba(rng);
            b[i] = bb(rng);
        }
        IoUAccumulator acc(1, 38);
        std::vector<std::uint8_t> labels(64);
        for (int i = 0; i < 64; ++i) labels[i] = b[i] ? 4 : 0;
        acc.add_masks({a}, object_only(8, 8, labels));
        int inter = 0, uni = 0;
        for (int i = 0; i < 64; ++i) {
            inter += a[i] && b[i];
            uni += a[i] || b[i];
        }
        const double expect = uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
        CHECK(acc.iou(0, 3) == expect);
        CHECK(acc.intersection(0, 3) == static_cast<std::uint64_t>(inter));
        CHECK(acc.union_count(0, 3) == static_cast<std::uint64_t>(uni));
    }
}

TEST_CASE("IoU accumulator merges exactly across shards")
{
    std::mt19937_64 rng(23);
    std::vector<std::vector<std::uint8_t>> masks_a, labels_a;
    IoUAccumulator whole(3, 38);
    std::vector<IoUAccumulator> shards(4, IoUAccumulator(3, 38));
    for (int ex = 0; ex < 40; ++ex) {
        std::vector<std::vector<std::uint8_t>> masks(3, std::vector<std::uint8_t>(64));
        for (auto& m : masks)
            for (auto& v : m) v = rng() % 3 == 0;
        std::vector<std::uint8_t> labels(64);
        for (auto& v : labels) v = static_cast<std::uint8_t>(rng() % 7);
        SegmentationMap seg = object_only(8, 8, labels);
        seg.color.resize(64);
        for (auto& v : seg.color) v = static_cast<std::uint8_t>(rng() % 2 ? 31 + rng() % 8 : 0);
        whole.add_masks(masks, seg);
        shards[ex % 4].add_masks(masks, seg);
    }
    IoUAccumulator merged;
    for (const auto& s : shards) merged.merge(s);
    CHECK(merged == whole);
}

TEST_CASE("IoU of an empty union is zero")
{
    IoUAccumulator acc(1, 38);
    acc.add_masks({std::vector<std::uint8_t>(16, 0)}, object_only(4, 4, std::vector<std::uint8_t>(16, 0)));
    CHECK(acc.iou(0, 0) == 0.0);
}

TEST_CASE("activation form thresholds the upsampled map")
{
    std::mt19937_64 rng(31);
    std::normal_distribution<float> nd;
    std::vector<float> act(2 * 8 * 8);
    for (auto& v : act) v = nd(rng);
    std::vector<float> t = {0.3f, -0.2f};
    std::vector<std::uint8_t> labels(64 * 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) labels[y * 64 + x] = x < 32 ? 1 : (y < 20 ? 3 : 0);
    const SegmentationMap seg = object_only(64, 64, labels);

    IoUAccumulator direct(2, 38), reference(2, 38);
    direct.add(act, 8, 8, t, seg);
    const Tensor up = upsample_activation(Tensor({2, 8, 8}, act), 64, 64);
    std::vector<std::vector<std::uint8_t>> masks(2, std::vector<std::uint8_t>(4096));
    for (int u = 0; u < 2; ++u)
        for (int p = 0; p < 4096; ++p) masks[u][p] = up[u * 4096 + p] > t[u];
    reference.add_masks(masks, seg);
    CHECK(direct == reference);
}

TEST_CASE("label_units: argmax, ties and cutoff")
{
    IoUTable t;
    t.units = 4;
    t.concepts = 38;
    t.values.assign(4 * 38, 0.0);
    auto set = [&](int u, int c, double v) { t.values[u * 38 + c] = v; };
    set(0, 5, 0.2);
    set(0, 31, 0.3);
    set(1, 7, 0.1);
    set(1, 2, 0.1);
    set(2, 0, 0.039);
    set(3, 4, 0.04);
    const auto labels = label_units(t, 0.04);
    CHECK(labels[0].concept_id == 31);
    CHECK(labels[0].category == ConceptCategory::color);
    CHECK(labels[1].concept_id == 2);
    CHECK(labels[1].score == 0.1);
    CHECK_FALSE(labels[2].matched());
    CHECK(labels[2].score == 0.039);
    CHECK(labels[3].concept_id == 4);

    const auto s = summarize_layer("x", labels);
    CHECK(s.matched == 3);
    CHECK(s.units == 4);
    CHECK(s.category_counts.at(ConceptCategory::object) == 2);
    CHECK(s.distinct_concepts.at(ConceptCategory::object) == 2);
    CHECK(s.concept_counts.at(31) == 1);

    CHECK(t.rank_units(4).front() == 3);
    const auto r = t.rank_units(30);
    CHECK(r == std::vector<int>{0, 1, 2, 3});

    const IoUTable back = IoUTable::from_json(nlohmann::json::parse(t.to_json().dump()));
    CHECK(back.values == t.values);
    const std::string csv = t.to_csv();
    CHECK(csv.rfind("unit,circle,square,", 0) == 0);
}

TEST_CASE("top_k_by_peak breaks ties by index")
{
    std::vector<float> peaks = {1, 3, 3, 2, 3};
    CHECK(top_k_by_peak(peaks, 4) == std::vector<int>{1, 2, 4, 3});
    CHECK(top_k_by_peak(peaks, 10).size() == 5);
}

TEST_CASE("peaks and exemplars from a model")
{
    auto [m, p] = identity_model(2, 8);
    Tensor x({3, 2, 8, 8});
    x[0 * 128 + 5] = 2.0f;
    x[1 * 128 + 9] = 4.0f;
    x[2 * 128 + 64 + 3] = 1.0f;
    const Tensor peaks = peak_activations(m, p, "id", inputs_of(x));
    CHECK(peaks.shape() == Shape{3, 2});
    CHECK(peaks[0] == 2.0f);
    CHECK(peaks[2] == 4.0f);
    CHECK(peaks[5] == 1.0f);
    const auto ex = top_activating(m, p, "id", 0, 0.5f, inputs_of(x), 2, 8);
    REQUIRE(ex.size() == 2);
    CHECK(ex[0].image == 1);
    CHECK(ex[1].image == 0);
    CHECK(ex[0].mask[9] == 1);
    CHECK(std::count(ex[0].mask.begin(), ex[0].mask.end(), 1) == 1);
}

TEST_CASE("unit as classifier")
{
    std::vector<float> pos = {0.9f, 0.2f, 0.7f, 0.8f};
    std::vector<float> neg = {0.1f, 0.6f, 0.5f};
    const auto r = evaluate_unit_classifier(pos, neg, 0.55f);
    CHECK(r.true_positive_rate == 0.75);
    CHECK(r.true_negative_rate == doctest::Approx(2.0 / 3.0));
    CHECK(r.balanced_accuracy == doctest::Approx((0.75 + 2.0 / 3.0) / 2));
    CHECK_THROWS(evaluate_unit_classifier(pos, {}, 0.5f));
}

TEST_CASE("segmenter quality floor")
{
    SegmenterQuality q;
    q.mean_object_iou = 0.49;
    CHECK_THROWS_WITH_AS(require_segmenter_quality(q, false), doctest::Contains("below the 0.5 floor"),
                         std::runtime_error);
    CHECK_NOTHROW(require_segmenter_quality(q, true));
    q.mean_object_iou = 0.5;
    CHECK_NOTHROW(require_segmenter_quality(q, false));
}

TEST_CASE("an all-background segmenter scores zero on objects")
{
    const ModelSpec seg = segmenter_spec();
    const ParameterStore p = ParameterStore::zeros_like(seg);
    SceneSet scenes(2);
    SceneSpec s;
    s.objects.push_back({ShapeKind::square, 32, 32, 10, 2, 0});
    scenes.set(0, render_scene(s), 0);
    scenes.set(1, render_scene(background_scene(3)), -1);
    const auto q = evaluate_segmenter(seg, p, scenes);
    CHECK(q.object_iou.at(object_concept(ShapeKind::square)) == 0.0);
    CHECK(q.mean_object_iou == 0.0);
    CHECK(q.background_iou == doctest::Approx((8192.0 - 256.0) / 8192.0));
    const auto maps = segment_images(seg, p, scenes.images(0, 1));
    REQUIRE(maps.size() == 1);
    CHECK(std::all_of(maps[0].object.begin(), maps[0].object.end(), [](auto v) { return v == 0; }));
    CHECK(std::all_of(maps[0].color.begin(), maps[0].color.end(), [](auto v) { return v == 0; }));
}
