#include "unitscope/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

#include "unitscope/io.hpp"
#include "unitscope/nn.hpp"
#include "unitscope/parallel.hpp"
#include "unitscope/seed.hpp"

namespace unitscope {

namespace {

constexpr const char* kSideNames[4] = {"top", "bottom", "left", "right"};
constexpr const char* kKindNames[kShapeKinds] = {"circle", "square", "triangle", "bar", "ring", "cross"};

constexpr int kObjectBase = 0;
constexpr int kPartBase = kShapeKinds;
constexpr int kColorBase = kShapeKinds * 5;

constexpr int kSegChannels = 4;

std::uint8_t quantize(float v)
{
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

float texture_noise(std::uint64_t seed, int x, int y)
{
    const std::uint64_t h = splitmix64(seed ^ (static_cast<std::uint64_t>(y) << 32 | static_cast<std::uint32_t>(x)));
    return static_cast<float>(h >> 40) / static_cast<float>(1 << 23) - 1.0f;
}

std::string shard_name(const std::string& split, const char* what, int shard)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s/%s_%03d.utsr", split.c_str(), what, shard);
    return buf;
}

} // namespace

std::string to_string(ConceptCategory c)
{
    switch (c) {
    case ConceptCategory::object: return "object";
    case ConceptCategory::part: return "part";
    case ConceptCategory::color: return "color";
    }
    return "?";
}

std::string to_string(ShapeKind k)
{
    return kKindNames[static_cast<int>(k)];
}

int object_concept(ShapeKind k)
{
    return kObjectBase + static_cast<int>(k);
}

int part_concept(ShapeKind k, PartSide side)
{
    return kPartBase + 4 * static_cast<int>(k) + static_cast<int>(side);
}

int color_concept(int palette_index)
{
    return kColorBase + palette_index;
}

const std::array<PaletteColor, kPaletteSize>& palette()
{
    static const std::array<PaletteColor, kPaletteSize> p = [] {
        const std::pair<const char*, std::array<int, 3>> anchors[kPaletteSize] = {
            {"black", {0, 0, 0}},   {"white", {255, 255, 255}}, {"gray", {128, 128, 128}},
            {"red", {255, 0, 0}},   {"green", {0, 160, 0}},     {"blue", {0, 0, 255}},
            {"yellow", {255, 255, 0}}, {"orange", {255, 128, 0}},
        };
        std::array<PaletteColor, kPaletteSize> out;
        for (int i = 0; i < kPaletteSize; ++i) {
            out[i].name = anchors[i].first;
            for (int c = 0; c < 3; ++c) out[i].rgb[c] = static_cast<float>(anchors[i].second[c]) / 255.0f;
        }
        return out;
    }();
    return p;
}

ConceptCatalog::ConceptCatalog(std::vector<Concept> concepts) : concepts_(std::move(concepts))
{
    std::set<std::string> names;
    for (std::size_t i = 0; i < concepts_.size(); ++i) {
        const Concept& c = concepts_[i];
        if (c.id != static_cast<int>(i)) throw std::invalid_argument("concept ids must be dense from 0");
        if (!names.insert(c.name).second) throw std::invalid_argument("duplicate concept name '" + c.name + "'");
        if (c.category == ConceptCategory::part) {
            if (c.parent < 0 || c.parent >= static_cast<int>(concepts_.size()) ||
                concepts_[static_cast<std::size_t>(c.parent)].category != ConceptCategory::object)
                throw std::invalid_argument("part '" + c.name + "' has no object parent");
            const std::string& base = concepts_[static_cast<std::size_t>(c.parent)].name;
            bool ok = false;
            for (const char* s : kSideNames) ok |= c.name == base + "-" + s;
            if (!ok) throw std::invalid_argument("part '" + c.name + "' lacks a side suffix");
        }
    }
}

const ConceptCatalog& ConceptCatalog::standard()
{
    static const ConceptCatalog catalog = [] {
        std::vector<Concept> v;
        for (int k = 0; k < kShapeKinds; ++k) v.push_back({k, kKindNames[k], ConceptCategory::object, -1});
        for (int k = 0; k < kShapeKinds; ++k)
            for (int s = 0; s < 4; ++s)
                v.push_back({static_cast<int>(v.size()), std::string(kKindNames[k]) + "-" + kSideNames[s],
                             ConceptCategory::part, k});
        for (int i = 0; i < kPaletteSize; ++i)
            v.push_back({static_cast<int>(v.size()), palette()[static_cast<std::size_t>(i)].name,
                         ConceptCategory::color, -1});
        return ConceptCatalog(std::move(v));
    }();
    return catalog;
}

int ConceptCatalog::id_of(const std::string& name) const
{
    for (const auto& c : concepts_)
        if (c.name == name) return c.id;
    throw std::invalid_argument("unknown concept '" + name + "'");
}

std::vector<int> ConceptCatalog::ids_in(ConceptCategory category) const
{
    std::vector<int> out;
    for (const auto& c : concepts_)
        if (c.category == category) out.push_back(c.id);
    return out;
}

nlohmann::json ConceptCatalog::to_json() const
{
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : concepts_) {
        nlohmann::json j{{"id", c.id}, {"name", c.name}, {"category", to_string(c.category)}};
        if (c.parent >= 0) j["parent"] = c.parent;
        arr.push_back(std::move(j));
    }
    return arr;
}

std::string ConceptCatalog::hash() const
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json().dump())));
    return buf;
}

bool covers(const PlacedObject& o, int x, int y)
{
    const float dx = static_cast<float>(x) + 0.5f - static_cast<float>(o.cx);
    const float dy = static_cast<float>(y) + 0.5f - static_cast<float>(o.cy);
    const auto r = static_cast<float>(o.radius);
    const float ax = std::abs(dx), ay = std::abs(dy);
    switch (o.kind) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return ax <= 0.8f * r && ay <= 0.8f * r;
    case ShapeKind::triangle: return ay <= r && ax <= 0.5f * (dy + r);
    case ShapeKind::bar: return ax <= r && ay <= 0.35f * r;
    case ShapeKind::ring: {
        const float d2 = dx * dx + dy * dy;
        return d2 <= r * r && d2 >= 0.3f * r * r;
    }
    case ShapeKind::cross: return (ax <= r && ay <= 0.3f * r) || (ay <= r && ax <= 0.3f * r);
    }
    return false;
}

std::string SceneSpec::validate() const
{
    std::set<int> depths;
    for (const auto& o : objects) {
        if (o.radius < 1) return "object radius must be positive";
        if (o.cx - o.radius < 0 || o.cy - o.radius < 0 || o.cx + o.radius > kImageSize ||
            o.cy + o.radius > kImageSize)
            return "object extends outside the canvas";
        if (o.color < 0 || o.color >= kPaletteSize) return "palette index out of range";
        if (!depths.insert(o.depth).second) return "depth order is not total";
    }
    return {};
}

const std::vector<std::uint8_t>& SegmentationMap::grid_for(int concept_id) const
{
    const Concept& c = ConceptCatalog::standard().at(concept_id);
    switch (c.category) {
    case ConceptCategory::object: return object;
    case ConceptCategory::color: return color;
    case ConceptCategory::part: return (concept_id - kPartBase) % 4 < 2 ? part_vertical : part_horizontal;
    }
    return object;
}

std::vector<std::uint8_t> SegmentationMap::mask(int concept_id) const
{
    const auto& g = grid_for(concept_id);
    std::vector<std::uint8_t> m(g.size());
    const auto label = static_cast<std::uint8_t>(concept_id + 1);
    for (std::size_t i = 0; i < g.size(); ++i) m[i] = g[i] == label;
    return m;
}

PartMasks derive_part_masks(std::span<const std::uint8_t> mask, int height, int width)
{
    const auto n = static_cast<std::size_t>(height) * width;
    if (mask.size() != n) throw std::invalid_argument("mask size does not match grid");
    PartMasks out{std::vector<std::uint8_t>(n), std::vector<std::uint8_t>(n), std::vector<std::uint8_t>(n),
                  std::vector<std::uint8_t>(n)};
    std::vector<int> comp(n, -1);
    std::vector<int> stack, members;
    int next = 0;
    for (std::size_t seed = 0; seed < n; ++seed) {
        if (!mask[seed] || comp[seed] >= 0) continue;
        members.clear();
        stack.assign(1, static_cast<int>(seed));
        comp[seed] = next;
        int y0 = height, y1 = -1, x0 = width, x1 = -1;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            members.push_back(p);
            const int y = p / width, x = p % width;
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (const auto& q : nb) {
                if (q[0] < 0 || q[0] >= height || q[1] < 0 || q[1] >= width) continue;
                const auto qi = static_cast<std::size_t>(q[0] * width + q[1]);
                if (mask[qi] && comp[qi] < 0) {
                    comp[qi] = next;
                    stack.push_back(static_cast<int>(qi));
                }
            }
        }
        const int top_rows = (y1 - y0 + 2) / 2, left_cols = (x1 - x0 + 2) / 2;
        for (int p : members) {
            const int y = p / width, x = p % width;
            const auto pi = static_cast<std::size_t>(p);
            (y - y0 < top_rows ? out.top : out.bottom)[pi] = 1;
            (x - x0 < left_cols ? out.left : out.right)[pi] = 1;
        }
        ++next;
    }
    return out;
}

std::vector<std::uint8_t> color_label_map(const Tensor& image)
{
    if (image.ndim() != 3 || image.dim(0) != 3) throw std::invalid_argument("expected a (3, H, W) image");
    const std::size_t plane = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
    const auto& pal = palette();
    std::vector<std::uint8_t> out(plane);
    for (std::size_t p = 0; p < plane; ++p) {
        int best = 0;
        float best_d = std::numeric_limits<float>::infinity();
        for (int k = 0; k < kPaletteSize; ++k) {
            float d = 0.0f;
            for (int c = 0; c < 3; ++c) {
                const float e = image[c * plane + p] - pal[static_cast<std::size_t>(k)].rgb[static_cast<std::size_t>(c)];
                d += e * e;
            }
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        out[p] = static_cast<std::uint8_t>(color_concept(best) + 1);
    }
    return out;
}

void complete_segmentation(SegmentationMap& seg, const Tensor& image)
{
    const std::size_t n = static_cast<std::size_t>(seg.height) * seg.width;
    seg.part_vertical.assign(n, 0);
    seg.part_horizontal.assign(n, 0);
    for (int k = 0; k < kShapeKinds; ++k) {
        const auto kind = static_cast<ShapeKind>(k);
        const auto label = static_cast<std::uint8_t>(object_concept(kind) + 1);
        std::vector<std::uint8_t> m(n);
        bool any = false;
        for (std::size_t i = 0; i < n; ++i) any |= (m[i] = seg.object[i] == label) != 0;
        if (!any) continue;
        const PartMasks parts = derive_part_masks(m, seg.height, seg.width);
        for (std::size_t i = 0; i < n; ++i) {
            if (parts.top[i]) seg.part_vertical[i] = static_cast<std::uint8_t>(part_concept(kind, PartSide::top) + 1);
            if (parts.bottom[i])
                seg.part_vertical[i] = static_cast<std::uint8_t>(part_concept(kind, PartSide::bottom) + 1);
            if (parts.left[i]) seg.part_horizontal[i] = static_cast<std::uint8_t>(part_concept(kind, PartSide::left) + 1);
            if (parts.right[i])
                seg.part_horizontal[i] = static_cast<std::uint8_t>(part_concept(kind, PartSide::right) + 1);
        }
    }
    seg.color = color_label_map(image);
    for (std::size_t i = 0; i < n; ++i)
        if (!seg.object[i]) seg.color[i] = 0;
}

RenderedScene render_scene(const SceneSpec& spec)
{
    const int S = kImageSize;
    const std::size_t plane = static_cast<std::size_t>(S) * S;
    RenderedScene out{Tensor({3, S, S}), {}};
    out.seg.height = out.seg.width = S;
    out.seg.object.assign(plane, 0);

    const Background& bg = spec.background;
    const float ca = std::cos(bg.angle), sa = std::sin(bg.angle);
    const std::uint64_t tex_seed = derive_seed(spec.seed, "texture");
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const float u = ((static_cast<float>(x) - 31.5f) * ca + (static_cast<float>(y) - 31.5f) * sa) / 90.0f + 0.5f;
            const float t = std::clamp(u, 0.0f, 1.0f);
            const float noise = bg.texture * texture_noise(tex_seed, x, y);
            for (int c = 0; c < 3; ++c) {
                const auto cs = static_cast<std::size_t>(c);
                const float v = bg.from[cs] + (bg.to[cs] - bg.from[cs]) * t + noise;
                out.image[c * plane + static_cast<std::size_t>(y * S + x)] = quantize(v) / 255.0f;
            }
        }

    std::vector<const PlacedObject*> order;
    for (const auto& o : spec.objects) order.push_back(&o);
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->depth < b->depth; });
    for (const PlacedObject* o : order) {
        const auto& rgb = palette()[static_cast<std::size_t>(o->color)].rgb;
        for (int y = std::max(0, o->cy - o->radius); y < std::min(S, o->cy + o->radius + 1); ++y)
            for (int x = std::max(0, o->cx - o->radius); x < std::min(S, o->cx + o->radius + 1); ++x) {
                if (!covers(*o, x, y)) continue;
                const auto p = static_cast<std::size_t>(y * S + x);
                for (int c = 0; c < 3; ++c) out.image[c * plane + p] = rgb[static_cast<std::size_t>(c)];
                out.seg.object[p] = static_cast<std::uint8_t>(o->concept_id() + 1);
            }
    }
    complete_segmentation(out.seg, out.image);
    return out;
}

std::vector<ClassRecipe> class_recipes(int n_classes)
{
    // The 15 pairs of the 6 kinds, grouped into 5 perfect matchings.
    std::vector<std::array<int, 2>> pairs;
    for (int r = 0; r < 5; ++r) {
        pairs.push_back({r, 5});
        pairs.push_back({(r + 1) % 5, (r + 4) % 5});
        pairs.push_back({(r + 2) % 5, (r + 3) % 5});
    }
    if (n_classes < 2 || n_classes > static_cast<int>(pairs.size()))
        throw std::invalid_argument("config infeasible: n_classes must be in [2, " + std::to_string(pairs.size()) +
                                    "], got " + std::to_string(n_classes));
    std::vector<ClassRecipe> out;
    std::set<std::array<int, 3>> triples;
    std::array<int, kShapeKinds> used{};
    for (int i = 0; i < n_classes; ++i) {
        auto [a, b] = pairs[static_cast<std::size_t>(i)];
        if (a > b) std::swap(a, b);
        int best = -1;
        for (int d = 0; d < kShapeKinds; ++d) {
            if (d == a || d == b) continue;
            std::array<int, 3> t{a, b, d};
            std::sort(t.begin(), t.end());
            if (triples.count(t)) continue;
            if (best < 0 || used[static_cast<std::size_t>(d)] < used[static_cast<std::size_t>(best)]) best = d;
        }
        std::array<int, 3> t{a, b, best};
        std::sort(t.begin(), t.end());
        triples.insert(t);
        ++used[static_cast<std::size_t>(best)];
        out.push_back({std::string(kKindNames[a]) + "+" + kKindNames[b],
                       {static_cast<ShapeKind>(a), static_cast<ShapeKind>(b)},
                       static_cast<ShapeKind>(best)});
    }
    return out;
}

namespace {

Background sample_background(std::mt19937_64& rng)
{
    std::uniform_real_distribution<float> pastel(0.78f, 1.0f);
    Background bg;
    for (auto& v : bg.from) v = pastel(rng);
    for (auto& v : bg.to) v = pastel(rng);
    bg.angle = std::uniform_real_distribution<float>(0.0f, 2.0f * std::numbers::pi_v<float>)(rng);
    bg.texture = 0.04f;
    return bg;
}

} // namespace

SceneSpec sample_scene(const ClassRecipe& recipe, int class_id, std::uint64_t seed, double distractor_p)
{
    std::mt19937_64 rng(seed);
    SceneSpec spec;
    spec.seed = seed;
    spec.class_id = class_id;
    spec.background = sample_background(rng);

    std::vector<ShapeKind> kinds(recipe.required.begin(), recipe.required.end());
    if (std::bernoulli_distribution(distractor_p)(rng)) kinds.push_back(recipe.distractor);
    std::shuffle(kinds.begin(), kinds.end(), rng);

    std::vector<int> colors;
    for (int c = 0; c < kPaletteSize; ++c)
        if (c != kWhite) colors.push_back(c);
    std::shuffle(colors.begin(), colors.end(), rng);

    std::uniform_int_distribution<int> radius(6, 11);
    for (std::size_t i = 0; i < kinds.size(); ++i) {
        PlacedObject o;
        o.kind = kinds[i];
        o.color = colors[i];
        o.depth = static_cast<int>(i);
        for (int attempt = 0; attempt < 200; ++attempt) {
            o.radius = radius(rng);
            std::uniform_int_distribution<int> pos(o.radius, kImageSize - o.radius);
            o.cx = pos(rng);
            o.cy = pos(rng);
            bool ok = true;
            for (const auto& p : spec.objects) {
                const double d = std::hypot(o.cx - p.cx, o.cy - p.cy);
                if (d < 0.8 * (o.radius + p.radius)) ok = false;
            }
            if (ok) break;
        }
        spec.objects.push_back(o);
    }
    return spec;
}

SceneSpec background_scene(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    SceneSpec spec;
    spec.seed = seed;
    spec.background = sample_background(rng);
    return spec;
}

nlohmann::json CorpusConfig::to_json() const
{
    return {{"n_classes", n_classes}, {"n_train", n_train},   {"n_val", n_val},
            {"image_size", image_size}, {"seed", seed},       {"distractor_p", distractor_p},
            {"shard_size", shard_size}};
}

CorpusConfig CorpusConfig::from_json(const nlohmann::json& j)
{
    CorpusConfig c;
    c.n_classes = j.value("n_classes", c.n_classes);
    c.n_train = j.value("n_train", c.n_train);
    c.n_val = j.value("n_val", c.n_val);
    c.image_size = j.value("image_size", c.image_size);
    c.seed = j.value("seed", c.seed);
    c.distractor_p = j.value("distractor_p", c.distractor_p);
    c.shard_size = j.value("shard_size", c.shard_size);
    return c;
}

std::string CorpusConfig::hash() const
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json().dump())));
    return buf;
}

const std::vector<CorpusItem>& CorpusManifest::split(const std::string& name) const
{
    if (name == "train") return train;
    if (name == "val") return val;
    throw std::invalid_argument("unknown split '" + name + "'");
}

nlohmann::json CorpusManifest::to_json() const
{
    auto items = [](const std::vector<CorpusItem>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& it : v)
            a.push_back({{"image", it.image}, {"seg", it.seg}, {"index", it.index}, {"class_id", it.class_id},
                         {"seed", it.seed}});
        return a;
    };
    return {{"config", config.to_json()}, {"class_names", class_names}, {"catalog", "catalog.json"},
            {"catalog_hash", catalog_hash}, {"config_hash", config_hash}, {"train", items(train)},
            {"val", items(val)}};
}

CorpusManifest CorpusManifest::from_json(const nlohmann::json& j)
{
    CorpusManifest m;
    m.config = CorpusConfig::from_json(j.at("config"));
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.catalog_hash = j.at("catalog_hash").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    auto items = [](const nlohmann::json& a) {
        std::vector<CorpusItem> v;
        for (const auto& e : a)
            v.push_back({e.at("image").get<std::string>(), e.at("seg").get<std::string>(), e.at("index").get<int>(),
                         e.at("class_id").get<int>(), e.at("seed").get<std::uint64_t>()});
        return v;
    };
    m.train = items(j.at("train"));
    m.val = items(j.at("val"));
    return m;
}

CorpusManifest plan_corpus(const CorpusConfig& config)
{
    if (config.image_size != kImageSize)
        throw std::invalid_argument("config infeasible: only " + std::to_string(kImageSize) + "px images supported");
    const auto recipes = class_recipes(config.n_classes);
    if (config.n_train < config.n_classes || config.n_val < config.n_classes || config.n_val % config.n_classes)
        throw std::invalid_argument("config infeasible: n_val must be a positive multiple of n_classes and n_train >= n_classes");
    if (config.shard_size <= 0) throw std::invalid_argument("shard_size must be positive");

    CorpusManifest m;
    m.config = config;
    for (const auto& r : recipes) m.class_names.push_back(r.name);
    m.catalog_hash = ConceptCatalog::standard().hash();
    m.config_hash = config.hash();
    auto plan = [&](const std::string& split, int n, std::vector<CorpusItem>& out) {
        const std::uint64_t split_seed = derive_seed(config.seed, split);
        for (int i = 0; i < n; ++i) {
            const int shard = i / config.shard_size;
            out.push_back({shard_name(split, "images", shard), shard_name(split, "seg", shard), i % config.shard_size,
                           i % config.n_classes, derive_seed(split_seed, static_cast<std::uint64_t>(i))});
        }
    };
    plan("train", config.n_train, m.train);
    plan("val", config.n_val, m.val);
    return m;
}

SceneSet::SceneSet(int size)
    : pixels_(static_cast<std::size_t>(size) * 3 * kImageSize * kImageSize),
      labels_(static_cast<std::size_t>(size) * kSegChannels * kImageSize * kImageSize),
      classes_(static_cast<std::size_t>(size), -1)
{
}

void SceneSet::set(int i, const RenderedScene& scene, int class_id)
{
    const std::size_t plane = kImageSize * kImageSize;
    std::uint8_t* px = pixels_.data() + static_cast<std::size_t>(i) * 3 * plane;
    for (std::size_t k = 0; k < 3 * plane; ++k) px[k] = quantize(scene.image[k]);
    std::uint8_t* lb = labels_.data() + static_cast<std::size_t>(i) * kSegChannels * plane;
    std::copy(scene.seg.object.begin(), scene.seg.object.end(), lb);
    std::copy(scene.seg.part_vertical.begin(), scene.seg.part_vertical.end(), lb + plane);
    std::copy(scene.seg.part_horizontal.begin(), scene.seg.part_horizontal.end(), lb + 2 * plane);
    std::copy(scene.seg.color.begin(), scene.seg.color.end(), lb + 3 * plane);
    classes_.at(static_cast<std::size_t>(i)) = class_id;
}

Tensor SceneSet::image(int i) const
{
    Tensor t = images(i, i + 1);
    return t.reshaped({3, kImageSize, kImageSize});
}

Tensor SceneSet::images(int begin, int end) const
{
    std::vector<int> idx;
    for (int i = begin; i < end; ++i) idx.push_back(i);
    return images(idx);
}

Tensor SceneSet::images(std::span<const int> indices) const
{
    const std::size_t item = 3 * kImageSize * kImageSize;
    Tensor t({static_cast<int>(indices.size()), 3, kImageSize, kImageSize});
    for (std::size_t j = 0; j < indices.size(); ++j) {
        const std::uint8_t* px = pixels_.data() + static_cast<std::size_t>(indices[j]) * item;
        float* dst = t.storage().data() + j * item;
        for (std::size_t k = 0; k < item; ++k) dst[k] = static_cast<float>(px[k]) / 255.0f;
    }
    return t;
}

SegmentationMap SceneSet::seg(int i) const
{
    const std::size_t plane = kImageSize * kImageSize;
    const std::uint8_t* lb = labels_.data() + static_cast<std::size_t>(i) * kSegChannels * plane;
    SegmentationMap s;
    s.height = s.width = kImageSize;
    s.object.assign(lb, lb + plane);
    s.part_vertical.assign(lb + plane, lb + 2 * plane);
    s.part_horizontal.assign(lb + 2 * plane, lb + 3 * plane);
    s.color.assign(lb + 3 * plane, lb + 4 * plane);
    return s;
}

SceneSet SceneSet::subset(std::span<const int> indices) const
{
    SceneSet out(static_cast<int>(indices.size()));
    const std::size_t pi = 3 * kImageSize * kImageSize, li = kSegChannels * kImageSize * kImageSize;
    for (std::size_t j = 0; j < indices.size(); ++j) {
        const auto i = static_cast<std::size_t>(indices[j]);
        std::copy_n(pixels_.begin() + static_cast<std::ptrdiff_t>(i * pi), pi,
                    out.pixels_.begin() + static_cast<std::ptrdiff_t>(j * pi));
        std::copy_n(labels_.begin() + static_cast<std::ptrdiff_t>(i * li), li,
                    out.labels_.begin() + static_cast<std::ptrdiff_t>(j * li));
        out.classes_[j] = classes_[i];
    }
    return out;
}

SceneSet render_split(const CorpusManifest& manifest, const std::string& split)
{
    const auto& items = manifest.split(split);
    const auto recipes = class_recipes(manifest.config.n_classes);
    SceneSet set(static_cast<int>(items.size()));
    parallel_for(items.size(), num_jobs(), [&](std::size_t i) {
        const auto& it = items[i];
        set.set(static_cast<int>(i),
                render_scene(sample_scene(recipes[static_cast<std::size_t>(it.class_id)], it.class_id, it.seed,
                                          manifest.config.distractor_p)),
                it.class_id);
    });
    return set;
}

CorpusManifest build_corpus(const CorpusConfig& config, const std::filesystem::path& dir)
{
    const CorpusManifest m = plan_corpus(config);
    for (const std::string split : {"train", "val"}) {
        const SceneSet set = render_split(m, split);
        const auto& items = m.split(split);
        for (std::size_t begin = 0; begin < items.size(); begin += static_cast<std::size_t>(config.shard_size)) {
            const std::size_t end = std::min(items.size(), begin + static_cast<std::size_t>(config.shard_size));
            const int n = static_cast<int>(end - begin);
            save_tensor(dir / items[begin].image, set.images(static_cast<int>(begin), static_cast<int>(end)));
            Tensor seg({n, kSegChannels, kImageSize, kImageSize});
            const std::size_t plane = kImageSize * kImageSize;
            for (int j = 0; j < n; ++j) {
                const SegmentationMap s = set.seg(static_cast<int>(begin) + j);
                float* dst = seg.item(j).data();
                const std::vector<std::uint8_t>* grids[kSegChannels] = {&s.object, &s.part_vertical,
                                                                        &s.part_horizontal, &s.color};
                for (int g = 0; g < kSegChannels; ++g)
                    for (std::size_t p = 0; p < plane; ++p) dst[g * plane + p] = (*grids[g])[p];
            }
            save_tensor(dir / items[begin].seg, seg);
        }
    }
    write_text(dir / "catalog.json", ConceptCatalog::standard().to_json().dump(1) + "\n");
    write_text(dir / "manifest.json", m.to_json().dump(1) + "\n");
    return m;
}

CorpusManifest load_manifest(const std::filesystem::path& dir)
{
    const auto m = CorpusManifest::from_json(nlohmann::json::parse(read_text(dir / "manifest.json")));
    if (m.catalog_hash != ConceptCatalog::standard().hash())
        throw FormatError("corpus catalog hash " + m.catalog_hash + " does not match this build's catalog");
    return m;
}

SceneSet load_split(const std::filesystem::path& dir, const CorpusManifest& manifest, const std::string& split)
{
    const auto& items = manifest.split(split);
    SceneSet set(static_cast<int>(items.size()));
    std::map<std::string, Tensor> images, segs;
    const std::size_t plane = kImageSize * kImageSize;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        if (!images.count(it.image)) {
            images.clear();
            segs.clear();
            images.emplace(it.image, load_tensor(dir / it.image));
            segs.emplace(it.seg, load_tensor(dir / it.seg));
        }
        const Tensor& im = images.at(it.image);
        const Tensor& sg = segs.at(it.seg);
        if (it.index >= im.dim(0) || it.index >= sg.dim(0) || sg.dim(1) != kSegChannels)
            throw FormatError("shard " + it.image + " does not hold item " + std::to_string(it.index));
        RenderedScene scene{Tensor(im.item_shape()), {}};
        auto src = im.item(it.index);
        std::copy(src.begin(), src.end(), scene.image.storage().begin());
        scene.seg.height = scene.seg.width = kImageSize;
        auto lab = sg.item(it.index);
        std::vector<std::uint8_t>* grids[kSegChannels] = {&scene.seg.object, &scene.seg.part_vertical,
                                                          &scene.seg.part_horizontal, &scene.seg.color};
        for (int g = 0; g < kSegChannels; ++g) {
            grids[g]->resize(plane);
            for (std::size_t p = 0; p < plane; ++p)
                (*grids[g])[p] = static_cast<std::uint8_t>(lab[static_cast<std::size_t>(g) * plane + p]);
        }
        set.set(static_cast<int>(i), scene, it.class_id);
    }
    return set;
}

} // namespace unitscope
