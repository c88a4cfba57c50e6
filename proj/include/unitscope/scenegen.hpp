#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unitscope/tensor.hpp"

namespace unitscope {

constexpr int kImageSize = 64;

enum class ConceptCategory { object, part, color };
std::string to_string(ConceptCategory c);

struct Concept {
    int id = 0;
    std::string name;
    ConceptCategory category = ConceptCategory::object;
    /// Owning object concept for parts, -1 otherwise.
    int parent = -1;
};

class ConceptCatalog {
public:
    /// Throws std::invalid_argument unless ids are dense from 0, names are unique and every part
    /// names an object parent with a top/bottom/left/right suffix.
    explicit ConceptCatalog(std::vector<Concept> concepts);

    /// 6 object kinds, their 24 halves, 8 palette colors.
    static const ConceptCatalog& standard();

    const std::vector<Concept>& concepts() const noexcept { return concepts_; }
    int size() const noexcept { return static_cast<int>(concepts_.size()); }
    const Concept& at(int id) const { return concepts_.at(static_cast<std::size_t>(id)); }
    int id_of(const std::string& name) const;
    std::vector<int> ids_in(ConceptCategory category) const;
    /// Stable content hash (hex).
    std::string hash() const;
    nlohmann::json to_json() const;

private:
    std::vector<Concept> concepts_;
};

enum class ShapeKind : int { circle, square, triangle, bar, ring, cross };
constexpr int kShapeKinds = 6;
std::string to_string(ShapeKind k);

enum class PartSide : int { top, bottom, left, right };

int object_concept(ShapeKind k);
int part_concept(ShapeKind k, PartSide side);
int color_concept(int palette_index);

struct PaletteColor {
    std::string name;
    std::array<float, 3> rgb;
};
constexpr int kPaletteSize = 8;
constexpr int kWhite = 1;
const std::array<PaletteColor, kPaletteSize>& palette();

struct PlacedObject {
    ShapeKind kind = ShapeKind::circle;
    int cx = 0;
    int cy = 0;
    int radius = 1;
    int color = 0;
    /// Larger is nearer the viewer.
    int depth = 0;

    int concept_id() const { return object_concept(kind); }
};

/// Hard-edged membership test at the pixel center (x + 0.5, y + 0.5).
bool covers(const PlacedObject& o, int x, int y);

struct Background {
    std::array<float, 3> from{1, 1, 1};
    std::array<float, 3> to{1, 1, 1};
    /// Gradient direction in radians.
    float angle = 0.0f;
    /// Amplitude of the per-pixel texture noise.
    float texture = 0.0f;
};

struct SceneSpec {
    std::uint64_t seed = 0;
    /// -1 for background-only scenes.
    int class_id = -1;
    Background background;
    std::vector<PlacedObject> objects;

    /// Empty string when valid, else the first problem found.
    std::string validate() const;
};

/// Label grids store concept id + 1; 0 means none. Parts overlap (a pixel can be both "top" and
/// "left"), so they use two grids.
struct SegmentationMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> object;
    std::vector<std::uint8_t> part_vertical;
    std::vector<std::uint8_t> part_horizontal;
    std::vector<std::uint8_t> color;

    /// Binary mask of one concept.
    std::vector<std::uint8_t> mask(int concept_id) const;
    /// Grid that holds labels for concepts of this category and side.
    const std::vector<std::uint8_t>& grid_for(int concept_id) const;
};

struct RenderedScene {
    /// (3, H, W), values k/255.
    Tensor image;
    SegmentationMap seg;
};

RenderedScene render_scene(const SceneSpec& spec);

struct PartMasks {
    std::vector<std::uint8_t> top, bottom, left, right;
};

/// Halves of each 4-connected component's bounding box intersected with the mask. The top and left
/// halves take the middle row/column of an odd-sized box.
PartMasks derive_part_masks(std::span<const std::uint8_t> mask, int height, int width);

/// Nearest palette color in RGB for each pixel of a (3, H, W) image; labels are color concept id + 1.
std::vector<std::uint8_t> color_label_map(const Tensor& image);

/// Fill parts and colors of `seg` from its object grid and the image. Colors are labeled on object
/// pixels only.
void complete_segmentation(SegmentationMap& seg, const Tensor& image);

struct ClassRecipe {
    std::string name;
    std::array<ShapeKind, 2> required;
    ShapeKind distractor;
};

/// At most 15 recipes: pairs of object kinds ordered so that each prefix of 3 * m classes uses every
/// kind equally often. Throws std::invalid_argument when n_classes is out of range.
std::vector<ClassRecipe> class_recipes(int n_classes);

SceneSpec sample_scene(const ClassRecipe& recipe, int class_id, std::uint64_t seed, double distractor_p = 0.5);
SceneSpec background_scene(std::uint64_t seed);

struct CorpusConfig {
    int n_classes = 12;
    int n_train = 10000;
    int n_val = 1200;
    int image_size = kImageSize;
    std::uint64_t seed = 1;
    double distractor_p = 0.5;
    int shard_size = 500;

    nlohmann::json to_json() const;
    static CorpusConfig from_json(const nlohmann::json& j);
    std::string hash() const;
};

struct CorpusItem {
    std::string image;
    std::string seg;
    int index = 0;
    int class_id = 0;
    std::uint64_t seed = 0;
};

struct CorpusManifest {
    CorpusConfig config;
    std::vector<std::string> class_names;
    std::string catalog_hash;
    std::string config_hash;
    std::vector<CorpusItem> train;
    std::vector<CorpusItem> val;

    const std::vector<CorpusItem>& split(const std::string& name) const;
    nlohmann::json to_json() const;
    static CorpusManifest from_json(const nlohmann::json& j);
};

/// Deterministic item plan: classes balanced round-robin, per-item seeds from the master seed.
CorpusManifest plan_corpus(const CorpusConfig& config);

/// Scenes held in memory as 8-bit pixels and labels.
class SceneSet {
public:
    SceneSet() = default;
    explicit SceneSet(int size);

    int size() const noexcept { return static_cast<int>(classes_.size()); }
    int class_of(int i) const { return classes_.at(static_cast<std::size_t>(i)); }
    const std::vector<int>& classes() const noexcept { return classes_; }

    void set(int i, const RenderedScene& scene, int class_id);
    Tensor image(int i) const;
    /// Images [begin, end) as a (n, 3, H, W) batch.
    Tensor images(int begin, int end) const;
    Tensor images(std::span<const int> indices) const;
    SegmentationMap seg(int i) const;
    SceneSet subset(std::span<const int> indices) const;

private:
    std::vector<std::uint8_t> pixels_;
    std::vector<std::uint8_t> labels_;
    std::vector<int> classes_;
};

/// Render a split in memory (no disk).
SceneSet render_split(const CorpusManifest& manifest, const std::string& split);

/// Render every item and write shards, manifest.json and catalog.json under `dir`.
CorpusManifest build_corpus(const CorpusConfig& config, const std::filesystem::path& dir);
CorpusManifest load_manifest(const std::filesystem::path& dir);
SceneSet load_split(const std::filesystem::path& dir, const CorpusManifest& manifest, const std::string& split);

} // namespace unitscope
