#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "unitscope/dissect.hpp"
#include "unitscope/intervene.hpp"

namespace httplib {
class Server;
}

namespace unitscope {

struct PaletteConcept {
    int concept_id = 0;
    std::string name;
    ConceptCategory category = ConceptCategory::object;
    std::vector<int> units;
};

/// Per concept, the n units of the generator layer with the highest IoU.
struct ConceptPalette {
    std::string layer;
    int units_per_concept = 20;
    std::vector<PaletteConcept> concepts;
    /// Threshold t_u of every unit of the layer; drawing forces a unit to it.
    std::vector<float> thresholds;

    static ConceptPalette build(const IoUTable& iou, const LayerThresholds& thresholds, int n = 20,
                                const ConceptCatalog& catalog = ConceptCatalog::standard());
    const PaletteConcept* find(int concept_id) const;

    nlohmann::json to_json() const;
    static ConceptPalette from_json(const nlohmann::json& j);
};

/// Row-major binary mask as alternating run lengths, starting with a run of zeros (possibly 0 long).
struct RunLengthMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> counts;

    static RunLengthMask encode(const std::vector<std::uint8_t>& bits, int height, int width);
    /// Throws std::invalid_argument when the runs do not cover exactly height * width pixels.
    std::vector<std::uint8_t> decode() const;

    nlohmann::json to_json() const;
    static RunLengthMask from_json(const nlohmann::json& j);
};

/// Cell (y, x) of the out_h x out_w grid is set when at least `coverage` of its pixels are set.
std::vector<std::uint8_t> downsample_mask(const std::vector<std::uint8_t>& mask, int height, int width, int out_h,
                                          int out_w, double coverage = 0.25);

enum class StrokeMode { draw, erase };
std::string to_string(StrokeMode m);
StrokeMode stroke_mode_from_string(const std::string& s);

struct Stroke {
    int concept_id = 0;
    StrokeMode mode = StrokeMode::draw;
    /// Featuremap cells of the palette layer.
    std::vector<std::uint8_t> cells;
    std::int64_t timestamp_ms = 0;
};

/// Later strokes override earlier ones per (unit, cell): drawn cells hold t_u, erased cells hold 0.
InterventionSpec strokes_to_spec(const ConceptPalette& palette, const std::vector<Stroke>& strokes, int cells);

class SessionNotFound : public std::runtime_error {
public:
    explicit SessionNotFound(const std::string& id) : std::runtime_error("unknown session '" + id + "'") {}
};

class InvalidStroke : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct SessionView {
    std::string id;
    std::optional<std::uint64_t> seed;
    Tensor latent;
    std::vector<Stroke> strokes;
    /// Featuremap grid of the stroke cells.
    int cells_height = 0;
    int cells_width = 0;
    Tensor base_image;
    Tensor image;
    std::vector<std::string> warnings;
};

class PaintEngine {
public:
    /// `latents` draws session latents from seeds.
    PaintEngine(GeneratorModel generator, LatentGaussian latents, ConceptPalette palette);

    const ConceptPalette& palette() const noexcept { return palette_; }
    const GeneratorModel& generator() const noexcept { return gen_; }
    Shape featuremap_shape() const;
    const Shape& code_shape() const noexcept { return latents_.code_shape(); }

    /// Without a seed, one is derived from the session counter.
    SessionView create_session(std::optional<std::uint64_t> seed = std::nullopt);
    /// `latent` has the generator's code shape, optionally with a leading batch dimension of 1.
    SessionView create_session_from_latent(const Tensor& latent);

    /// Mask at image resolution. Throws InvalidStroke for an unknown concept or a mask of the wrong
    /// size or without pixels; a mask that covers no cell after downsampling is a no-op with a warning.
    SessionView apply_stroke(const std::string& id, int concept_id, StrokeMode mode, const RunLengthMask& mask);
    /// Removes the last stroke; with no strokes returns the base image.
    SessionView undo(const std::string& id);
    SessionView state(const std::string& id) const;

    /// Latent and strokes; enough to rebuild the session exactly.
    nlohmann::json export_session(const std::string& id) const;
    SessionView import_session(const nlohmann::json& j);

    /// Image for a latent (code shape) under the strokes.
    Tensor render(const Tensor& latent, const std::vector<Stroke>& strokes) const;

    std::size_t session_count() const;

private:
    struct Session {
        std::string id;
        std::optional<std::uint64_t> seed;
        Tensor latent;
        std::vector<Stroke> strokes;
        Tensor base_image;
        Tensor image;
        mutable std::mutex mutex;
    };

    std::shared_ptr<Session> find(const std::string& id) const;
    SessionView insert(std::optional<std::uint64_t> seed, Tensor latent, std::vector<Stroke> strokes);
    SessionView view_of(const Session& s) const;

    GeneratorModel gen_;
    LatentGaussian latents_;
    ConceptPalette palette_;
    std::uint64_t nonce_;
    std::uint64_t counter_ = 0;
    mutable std::shared_mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
};

nlohmann::json session_json(const SessionView& v, bool include_state);

/// Registers the HTTP routes of the paint service on `server`.
void install_paint_routes(httplib::Server& server, PaintEngine& engine, const std::string& cors_origin = "*");

} // namespace unitscope
