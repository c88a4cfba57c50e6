#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include <unistd.h>

#include "unitscope/io.hpp"
#include "unitscope/scenegen.hpp"
#include "unitscope/seed.hpp"

using namespace unitscope;

namespace {

std::size_t count(const std::vector<std::uint8_t>& m)
{
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

std::filesystem::path scratch_dir(const std::string& tag)
{
    auto p = std::filesystem::temp_directory_path() / ("unitscope_scenegen_" + tag + "_" + std::to_string(getpid()));
    std::filesystem::remove_all(p);
    return p;
}

SceneSpec single(ShapeKind kind, int cx, int cy, int r, int color)
{
    SceneSpec s;
    s.objects.push_back({kind, cx, cy, r, color, 0});
    return s;
}

} // namespace

TEST_CASE("standard catalog")
{
    const auto& cat = ConceptCatalog::standard();
    CHECK(cat.size() == 38);
    CHECK(cat.ids_in(ConceptCategory::object).size() == 6);
    CHECK(cat.ids_in(ConceptCategory::part).size() == 24);
    CHECK(cat.ids_in(ConceptCategory::color).size() == 8);
    CHECK(cat.at(part_concept(ShapeKind::ring, PartSide::left)).name == "ring-left");
    CHECK(cat.at(part_concept(ShapeKind::ring, PartSide::left)).parent == object_concept(ShapeKind::ring));
    CHECK(cat.id_of("orange") == color_concept(7));
    CHECK(cat.hash() == ConceptCatalog::standard().hash());
    CHECK_THROWS_AS(ConceptCatalog({{0, "a", ConceptCategory::object, -1}, {1, "a", ConceptCategory::color, -1}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(ConceptCatalog({{0, "a", ConceptCategory::object, -1}, {1, "a-middle", ConceptCategory::part, 0}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(ConceptCatalog({{1, "a", ConceptCategory::object, -1}}), std::invalid_argument);
}

TEST_CASE("zero objects gives a background-only scene")
{
    const RenderedScene r = render_scene(background_scene(5));
    for (const auto* g : {&r.seg.object, &r.seg.part_vertical, &r.seg.part_horizontal, &r.seg.color})
        CHECK(std::all_of(g->begin(), g->end(), [](auto v) { return v == 0; }));
    CHECK(r.image.shape() == Shape{3, 64, 64});
}

TEST_CASE("centered square: mask is the square's pixel set and colored k")
{
    for (int k = 0; k < kPaletteSize; ++k) {
        const RenderedScene r = render_scene(single(ShapeKind::square, 32, 32, 10, k));
        // half-width 8 around a pixel-corner center covers pixels 24..39
        const auto m = r.seg.mask(object_concept(ShapeKind::square));
        bool exact = true;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const bool inside = x >= 24 && x < 40 && y >= 24 && y < 40;
                exact &= (m[static_cast<std::size_t>(y * 64 + x)] == 1) == inside;
                if (inside) {
                    exact &= r.seg.color[static_cast<std::size_t>(y * 64 + x)] == color_concept(k) + 1;
                    for (int c = 0; c < 3; ++c)
                        exact &= r.image[static_cast<std::size_t>(c * 4096 + y * 64 + x)] ==
                                 palette()[static_cast<std::size_t>(k)].rgb[static_cast<std::size_t>(c)];
                }
            }
        CHECK(exact);
        CHECK(count(m) == 256);
    }
}

TEST_CASE("overlapping squares: occluded mask loses exactly the overlap area")
{
    SceneSpec s;
    s.objects.push_back({ShapeKind::square, 30, 30, 10, 3, 0});
    s.objects.push_back({ShapeKind::square, 35, 33, 10, 5, 1});
    // both 16x16, offset (5, 3): they overlap in an 11x13 rectangle. Same kind, so count by color.
    const RenderedScene r = render_scene(s);
    std::size_t red = 0, blue = 0;
    for (std::size_t p = 0; p < 4096; ++p) {
        red += r.seg.color[p] == color_concept(3) + 1;
        blue += r.seg.color[p] == color_concept(5) + 1;
    }
    CHECK(blue == 256);
    CHECK(red == 256 - 11 * 13);

    SceneSpec t;
    t.objects.push_back({ShapeKind::square, 30, 30, 10, 3, 1});
    t.objects.push_back({ShapeKind::circle, 36, 30, 8, 5, 0});
    const RenderedScene q = render_scene(t);
    std::size_t circle_alone = 0, overlap = 0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const double dx = x + 0.5 - 36, dy = y + 0.5 - 30;
            const bool in_circle = dx * dx + dy * dy <= 64.0;
            const bool in_square = x >= 22 && x < 38 && y >= 22 && y < 38;
            circle_alone += in_circle;
            overlap += in_circle && in_square;
        }
    CHECK(count(q.seg.mask(object_concept(ShapeKind::circle))) == circle_alone - overlap);
    CHECK(count(q.seg.mask(object_concept(ShapeKind::square))) == 256);
}

TEST_CASE("segmentation equals each object re-rasterized under its occluders")
{
    const auto recipes = class_recipes(12);
    for (int trial = 0; trial < 60; ++trial) {
        const SceneSpec s = sample_scene(recipes[static_cast<std::size_t>(trial % 12)], trial % 12,
                                         derive_seed(77, static_cast<std::uint64_t>(trial)));
        CHECK(s.validate().empty());
        CHECK(s.objects.size() >= 2);
        const RenderedScene r = render_scene(s);
        for (const auto& o : s.objects) {
            std::vector<std::uint8_t> expect(4096);
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x) {
                    bool visible = covers(o, x, y);
                    for (const auto& p : s.objects)
                        if (p.depth > o.depth && covers(p, x, y)) visible = false;
                    expect[static_cast<std::size_t>(y * 64 + x)] = visible;
                }
            CHECK(r.seg.mask(o.concept_id()) == expect);
        }
        for (std::size_t p = 0; p < 4096; ++p) {
            if (!r.seg.object[p]) {
                CHECK(r.seg.part_vertical[p] == 0);
                CHECK(r.seg.part_horizontal[p] == 0);
            }
        }
    }
}

TEST_CASE("scene validation")
{
    CHECK(single(ShapeKind::circle, 5, 30, 6, 0).validate() == "object extends outside the canvas");
    CHECK(single(ShapeKind::circle, 6, 30, 6, 9).validate() == "palette index out of range");
    SceneSpec s = single(ShapeKind::circle, 20, 20, 6, 0);
    s.objects.push_back({ShapeKind::bar, 40, 40, 6, 2, 0});
    CHECK(s.validate() == "depth order is not total");
}

TEST_CASE("part masks of a full canvas")
{
    const std::vector<std::uint8_t> full(64 * 64, 1);
    const PartMasks p = derive_part_masks(full, 64, 64);
    for (int y = 0; y < 64; ++y) {
        CHECK(p.top[static_cast<std::size_t>(y * 64 + 5)] == (y < 32));
        CHECK(p.left[static_cast<std::size_t>(5 * 64 + y)] == (y < 32));
    }
    CHECK(count(derive_part_masks(std::vector<std::uint8_t>(64, 0), 8, 8).top) == 0);
}

TEST_CASE("halves partition every random mask")
{
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::uint8_t> m(12 * 10);
        for (auto& v : m) v = rng() % 3 == 0;
        const PartMasks p = derive_part_masks(m, 12, 10);
        for (std::size_t i = 0; i < m.size(); ++i) {
            CHECK((p.top[i] | p.bottom[i]) == m[i]);
            CHECK((p.left[i] | p.right[i]) == m[i]);
            CHECK((p.top[i] & p.bottom[i]) == 0);
            CHECK((p.left[i] & p.right[i]) == 0);
        }
    }
}

TEST_CASE("two disjoint blobs get per-component halves")
{
    // blob A rows 0..3 cols 0..1, blob B rows 6..7 cols 5..8 (10 x 10 grid)
    std::vector<std::uint8_t> m(100);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 2; ++x) m[static_cast<std::size_t>(y * 10 + x)] = 1;
    for (int y = 6; y < 8; ++y)
        for (int x = 5; x < 9; ++x) m[static_cast<std::size_t>(y * 10 + x)] = 1;
    const PartMasks p = derive_part_masks(m, 10, 10);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) {
            const auto i = static_cast<std::size_t>(y * 10 + x);
            const bool a = y < 4 && x < 2, b = y >= 6 && y < 8 && x >= 5 && x < 9;
            CHECK(p.top[i] == ((a && y < 2) || (b && y == 6)));
            CHECK(p.left[i] == ((a && x == 0) || (b && x < 7)));
        }
    // a global bbox (rows 0..7) would have put all of blob B in the bottom half
    CHECK(p.top[6 * 10 + 5] == 1);
}

TEST_CASE("color labels")
{
    for (int k = 0; k < kPaletteSize; ++k) {
        Tensor img({3, 4, 4});
        for (int c = 0; c < 3; ++c)
            for (int p = 0; p < 16; ++p)
                img[static_cast<std::size_t>(c * 16 + p)] = palette()[static_cast<std::size_t>(k)].rgb[static_cast<std::size_t>(c)];
        const auto l = color_label_map(img);
        CHECK(std::all_of(l.begin(), l.end(), [&](auto v) { return v == color_concept(k) + 1; }));
    }
    Tensor gray({3, 1, 1}, 0.5f);
    CHECK(color_label_map(gray)[0] == ConceptCatalog::standard().id_of("gray") + 1);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor img({3, 16, 16});
    for (auto& v : img.storage()) v = static_cast<float>(u(rng));
    const auto l = color_label_map(img);
    const double anchors[8][3] = {{0, 0, 0}, {255, 255, 255}, {128, 128, 128}, {255, 0, 0},
                                  {0, 160, 0}, {0, 0, 255}, {255, 255, 0}, {255, 128, 0}};
    for (std::size_t p = 0; p < 256; ++p) {
        int best = 0;
        double bd = 1e9;
        for (int k = 0; k < 8; ++k) {
            double d = 0;
            for (int c = 0; c < 3; ++c) {
                const double e = img[c * 256 + p] - anchors[k][c] / 255.0;
                d += e * e;
            }
            if (d < bd) {
                bd = d;
                best = k;
            }
        }
        CHECK(l[p] == color_concept(best) + 1);
    }
}

TEST_CASE("class recipes")
{
    CHECK_THROWS_AS(class_recipes(1), std::invalid_argument);
    CHECK_THROWS_AS(class_recipes(16), std::invalid_argument);
    const auto r = class_recipes(15);
    std::set<std::set<int>> pairs, triples;
    for (const auto& c : r) {
        CHECK(c.required[0] != c.required[1]);
        CHECK(c.distractor != c.required[0]);
        CHECK(c.distractor != c.required[1]);
        pairs.insert({static_cast<int>(c.required[0]), static_cast<int>(c.required[1])});
        triples.insert({static_cast<int>(c.required[0]), static_cast<int>(c.required[1]), static_cast<int>(c.distractor)});
    }
    CHECK(pairs.size() == 15);
    CHECK(triples.size() == 15);
    std::map<int, int> uses;
    for (const auto& c : class_recipes(12))
        for (auto k : c.required) ++uses[static_cast<int>(k)];
    for (int k = 0; k < kShapeKinds; ++k) CHECK(uses[k] == 4);
}

TEST_CASE("corpus plan is deterministic and balanced")
{
    CorpusConfig c;
    c.n_train = 600;
    c.n_val = 120;
    const auto a = plan_corpus(c), b = plan_corpus(c);
    CHECK(a.to_json().dump() == b.to_json().dump());
    std::map<int, int> val_counts;
    for (const auto& it : a.val) ++val_counts[it.class_id];
    CHECK(val_counts.size() == 12);
    for (auto [k, n] : val_counts) CHECK(n == 10);
    std::set<std::uint64_t> train_seeds;
    for (const auto& it : a.train) train_seeds.insert(it.seed);
    for (const auto& it : a.val) CHECK(train_seeds.count(it.seed) == 0);
    c.n_val = 125;
    CHECK_THROWS_AS(plan_corpus(c), std::invalid_argument);
    c.n_val = 120;
    c.n_classes = 20;
    CHECK_THROWS_AS(plan_corpus(c), std::invalid_argument);
    c.n_classes = 12;
    c.seed = 2;
    CHECK(plan_corpus(c).to_json().dump() != a.to_json().dump());
}

TEST_CASE("every object concept appears in at least two classes")
{
    CorpusConfig c;
    c.n_train = 600;
    c.n_val = 12;
    const auto m = plan_corpus(c);
    const SceneSet set = render_split(m, "train");
    std::map<int, std::set<int>> classes_with;
    for (int i = 0; i < set.size(); ++i) {
        const auto seg = set.seg(i);
        for (int k = 0; k < kShapeKinds; ++k)
            if (std::count(seg.object.begin(), seg.object.end(), static_cast<std::uint8_t>(k + 1)) > 0)
                classes_with[k].insert(set.class_of(i));
    }
    for (int k = 0; k < kShapeKinds; ++k) CHECK(classes_with[k].size() >= 2);
}

TEST_CASE("corpus on disk is byte-identical across builds and loads back exactly")
{
    CorpusConfig c;
    c.n_train = 30;
    c.n_val = 12;
    c.shard_size = 16;
    const auto d1 = scratch_dir("a"), d2 = scratch_dir("b");
    const auto m = build_corpus(c, d1);
    build_corpus(c, d2);
    for (const auto& e : std::filesystem::recursive_directory_iterator(d1)) {
        if (!e.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(e.path(), d1);
        CHECK(read_file(e.path()) == read_file(d2 / rel));
    }
    CHECK(std::filesystem::exists(d1 / "train/images_001.utsr"));
    const auto loaded = load_manifest(d1);
    CHECK(loaded.to_json() == m.to_json());
    for (const std::string split : {"train", "val"}) {
        const SceneSet a = load_split(d1, loaded, split), b = render_split(m, split);
        REQUIRE(a.size() == b.size());
        for (int i = 0; i < a.size(); ++i) {
            CHECK(bit_identical(a.image(i), b.image(i)));
            CHECK(a.seg(i).object == b.seg(i).object);
            CHECK(a.seg(i).color == b.seg(i).color);
            CHECK(a.seg(i).part_horizontal == b.seg(i).part_horizontal);
            CHECK(a.class_of(i) == b.class_of(i));
        }
    }
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
}
