#include "unitscope/paint.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <random>

#include <httplib.h>

#include "unitscope/io.hpp"
#include "unitscope/seed.hpp"

namespace unitscope {

namespace {

ConceptCategory category_from_string(const std::string& s)
{
    for (auto c : {ConceptCategory::object, ConceptCategory::part, ConceptCategory::color})
        if (to_string(c) == s) return c;
    throw std::invalid_argument("unknown concept category '" + s + "'");
}

std::int64_t now_ms()
{
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string hex_id(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

nlohmann::json stroke_json(const Stroke& s, int h, int w)
{
    return {{"concept", s.concept_id},
            {"mode", to_string(s.mode)},
            {"cells", RunLengthMask::encode(s.cells, h, w).to_json()},
            {"timestamp", s.timestamp_ms}};
}

} // namespace

ConceptPalette ConceptPalette::build(const IoUTable& iou, const LayerThresholds& thresholds, int n,
                                     const ConceptCatalog& catalog)
{
    if (n <= 0 || n > iou.units) throw std::invalid_argument("palette size must be in [1, units]");
    if (static_cast<int>(thresholds.t.size()) != iou.units)
        throw std::invalid_argument("thresholds do not match the IoU table's units");
    if (iou.concepts != catalog.size()) throw std::invalid_argument("IoU table does not match the catalog");
    ConceptPalette p;
    p.layer = iou.layer;
    p.units_per_concept = n;
    p.thresholds = thresholds.t;
    for (const auto& c : catalog.concepts()) {
        auto ranked = iou.rank_units(c.id);
        ranked.resize(static_cast<std::size_t>(n));
        p.concepts.push_back({c.id, c.name, c.category, std::move(ranked)});
    }
    return p;
}

const PaletteConcept* ConceptPalette::find(int concept_id) const
{
    for (const auto& c : concepts)
        if (c.concept_id == concept_id) return &c;
    return nullptr;
}

nlohmann::json ConceptPalette::to_json() const
{
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : concepts)
        cs.push_back({{"id", c.concept_id}, {"name", c.name}, {"category", to_string(c.category)}, {"units", c.units}});
    return {{"layer", layer}, {"units_per_concept", units_per_concept}, {"thresholds", thresholds}, {"concepts", cs}};
}

ConceptPalette ConceptPalette::from_json(const nlohmann::json& j)
{
    ConceptPalette p;
    p.layer = j.at("layer").get<std::string>();
    p.units_per_concept = j.at("units_per_concept").get<int>();
    p.thresholds = j.at("thresholds").get<std::vector<float>>();
    for (const auto& c : j.at("concepts"))
        p.concepts.push_back({c.at("id").get<int>(), c.at("name").get<std::string>(),
                              category_from_string(c.at("category").get<std::string>()),
                              c.at("units").get<std::vector<int>>()});
    return p;
}

RunLengthMask RunLengthMask::encode(const std::vector<std::uint8_t>& bits, int height, int width)
{
    if (bits.size() != static_cast<std::size_t>(height) * width)
        throw std::invalid_argument("mask size does not match its dimensions");
    RunLengthMask m{height, width, {}};
    std::uint8_t current = 0;
    std::uint32_t run = 0;
    for (std::uint8_t b : bits) {
        const std::uint8_t v = b ? 1 : 0;
        if (v != current) {
            m.counts.push_back(run);
            run = 0;
            current = v;
        }
        ++run;
    }
    m.counts.push_back(run);
    return m;
}

std::vector<std::uint8_t> RunLengthMask::decode() const
{
    if (height <= 0 || width <= 0) throw std::invalid_argument("mask dimensions must be positive");
    const std::size_t total = static_cast<std::size_t>(height) * width;
    std::vector<std::uint8_t> out;
    out.reserve(total);
    std::uint8_t v = 0;
    for (std::uint32_t c : counts) {
        if (out.size() + c > total) throw std::invalid_argument("mask runs exceed " + std::to_string(total) + " pixels");
        out.insert(out.end(), c, v);
        v ^= 1;
    }
    if (out.size() != total)
        throw std::invalid_argument("mask runs cover " + std::to_string(out.size()) + " of " + std::to_string(total) +
                                    " pixels");
    return out;
}

nlohmann::json RunLengthMask::to_json() const
{
    return {{"height", height}, {"width", width}, {"counts", counts}};
}

RunLengthMask RunLengthMask::from_json(const nlohmann::json& j)
{
    RunLengthMask m;
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    for (const auto& c : j.at("counts")) {
        if (!c.is_number_integer() || c.get<std::int64_t>() < 0)
            throw std::invalid_argument("mask counts must be non-negative integers");
        m.counts.push_back(c.get<std::uint32_t>());
    }
    return m;
}

std::vector<std::uint8_t> downsample_mask(const std::vector<std::uint8_t>& mask, int height, int width, int out_h,
                                          int out_w, double coverage)
{
    if (mask.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("mask size mismatch");
    if (out_h <= 0 || out_w <= 0 || height % out_h || width % out_w)
        throw std::invalid_argument("mask size must be a multiple of the grid size");
    const int ch = height / out_h, cw = width / out_w;
    const double need = coverage * ch * cw;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(out_h) * out_w, 0);
    for (int gy = 0; gy < out_h; ++gy)
        for (int gx = 0; gx < out_w; ++gx) {
            int n = 0;
            for (int y = gy * ch; y < (gy + 1) * ch; ++y)
                for (int x = gx * cw; x < (gx + 1) * cw; ++x) n += mask[static_cast<std::size_t>(y) * width + x] != 0;
            out[static_cast<std::size_t>(gy) * out_w + gx] = n >= need ? 1 : 0;
        }
    return out;
}

std::string to_string(StrokeMode m)
{
    return m == StrokeMode::draw ? "draw" : "erase";
}

StrokeMode stroke_mode_from_string(const std::string& s)
{
    if (s == "draw") return StrokeMode::draw;
    if (s == "erase") return StrokeMode::erase;
    throw std::invalid_argument("unknown stroke mode '" + s + "'");
}

InterventionSpec strokes_to_spec(const ConceptPalette& palette, const std::vector<Stroke>& strokes, int cells)
{
    const std::size_t n = static_cast<std::size_t>(cells);
    std::map<int, std::pair<std::vector<std::uint8_t>, std::vector<float>>> per_unit;
    for (const auto& s : strokes) {
        const PaletteConcept* c = palette.find(s.concept_id);
        if (!c) throw InvalidStroke("concept " + std::to_string(s.concept_id) + " is not in the palette");
        if (s.cells.size() != n) throw InvalidStroke("stroke has the wrong number of cells");
        for (int u : c->units) {
            auto& [mask, values] = per_unit[u];
            if (mask.empty()) {
                mask.assign(n, 0);
                values.assign(n, 0.0f);
            }
            const float v = s.mode == StrokeMode::draw ? palette.thresholds.at(static_cast<std::size_t>(u)) : 0.0f;
            for (std::size_t p = 0; p < n; ++p)
                if (s.cells[p]) {
                    mask[p] = 1;
                    values[p] = v;
                }
        }
    }
    InterventionSpec spec;
    for (auto& [u, mv] : per_unit) {
        InterventionTarget t{palette.layer, u, InterventionMode::force_masked, 0.0f, std::move(mv.first), {}};
        t.cell_values = std::move(mv.second);
        spec.targets.push_back(std::move(t));
    }
    return spec;
}

PaintEngine::PaintEngine(GeneratorModel generator, LatentGaussian latents, ConceptPalette palette)
    : gen_(std::move(generator)), latents_(std::move(latents)), palette_(std::move(palette)),
      nonce_(std::random_device{}())
{
    const Shape s = gen_.decoder.tap_shape(palette_.layer);
    if (static_cast<int>(palette_.thresholds.size()) != s.at(0))
        throw std::invalid_argument("palette thresholds do not match layer '" + palette_.layer + "'");
}

Shape PaintEngine::featuremap_shape() const
{
    return gen_.decoder.tap_shape(palette_.layer);
}

Tensor PaintEngine::render(const Tensor& latent, const std::vector<Stroke>& strokes) const
{
    const Shape fm = featuremap_shape();
    const InterventionSpec spec = strokes_to_spec(palette_, strokes, fm.at(1) * fm.at(2));
    Shape batched{1};
    batched.insert(batched.end(), latent.shape().begin(), latent.shape().end());
    const Tensor img = generate(gen_, latent.reshaped(batched), spec, 1);
    return img.reshaped(img.item_shape());
}

SessionView PaintEngine::view_of(const Session& s) const
{
    const Shape fm = featuremap_shape();
    return {s.id, s.seed, s.latent, s.strokes, fm.at(1), fm.at(2), s.base_image, s.image, {}};
}

SessionView PaintEngine::insert(std::optional<std::uint64_t> seed, Tensor latent, std::vector<Stroke> strokes)
{
    auto s = std::make_shared<Session>();
    s->seed = seed;
    s->latent = std::move(latent);
    s->strokes = std::move(strokes);
    s->base_image = render(s->latent, {});
    s->image = s->strokes.empty() ? s->base_image : render(s->latent, s->strokes);
    std::unique_lock lock(sessions_mutex_);
    s->id = hex_id(splitmix64(nonce_ ^ splitmix64(++counter_)));
    sessions_[s->id] = s;
    return view_of(*s);
}

SessionView PaintEngine::create_session(std::optional<std::uint64_t> seed)
{
    std::uint64_t sd;
    if (seed) {
        sd = *seed;
    } else {
        std::unique_lock lock(sessions_mutex_);
        sd = derive_seed(nonce_, counter_ + 1);
    }
    Tensor z = latents_.sample(1, sd);
    return insert(sd, z.reshaped(z.item_shape()), {});
}

SessionView PaintEngine::create_session_from_latent(const Tensor& latent)
{
    const Shape& code = latents_.code_shape();
    Shape s = latent.shape();
    if (s.size() == code.size() + 1 && s[0] == 1) s.erase(s.begin());
    if (s != code) throw std::invalid_argument("latent shape does not match the generator's code shape");
    return insert(std::nullopt, latent.reshaped(s), {});
}

std::shared_ptr<PaintEngine::Session> PaintEngine::find(const std::string& id) const
{
    std::shared_lock lock(sessions_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw SessionNotFound(id);
    return it->second;
}

SessionView PaintEngine::apply_stroke(const std::string& id, int concept_id, StrokeMode mode,
                                      const RunLengthMask& mask)
{
    auto s = find(id);
    if (!palette_.find(concept_id)) throw InvalidStroke("concept " + std::to_string(concept_id) + " is not in the palette");
    const Shape img = gen_.decoder.output_shape();
    if (mask.height != img.at(1) || mask.width != img.at(2))
        throw InvalidStroke("mask must be " + std::to_string(img.at(1)) + "x" + std::to_string(img.at(2)));
    std::vector<std::uint8_t> bits;
    try {
        bits = mask.decode();
    } catch (const std::invalid_argument& e) {
        throw InvalidStroke(e.what());
    }
    if (std::none_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }))
        throw InvalidStroke("mask is empty");
    const Shape fm = featuremap_shape();
    Stroke st{concept_id, mode, downsample_mask(bits, mask.height, mask.width, fm.at(1), fm.at(2)), now_ms()};

    std::lock_guard lock(s->mutex);
    if (std::none_of(st.cells.begin(), st.cells.end(), [](std::uint8_t b) { return b != 0; })) {
        SessionView v = view_of(*s);
        v.warnings.push_back("stroke covers no featuremap cell at 25% coverage; ignored");
        return v;
    }
    s->strokes.push_back(std::move(st));
    s->image = render(s->latent, s->strokes);
    return view_of(*s);
}

SessionView PaintEngine::undo(const std::string& id)
{
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    if (!s->strokes.empty()) {
        s->strokes.pop_back();
        s->image = s->strokes.empty() ? s->base_image : render(s->latent, s->strokes);
    }
    return view_of(*s);
}

SessionView PaintEngine::state(const std::string& id) const
{
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    return view_of(*s);
}

nlohmann::json PaintEngine::export_session(const std::string& id) const
{
    const SessionView v = state(id);
    nlohmann::json j = session_json(v, true);
    j.erase("image");
    j.erase("base_image");
    return j;
}

SessionView PaintEngine::import_session(const nlohmann::json& j)
{
    const Shape& code = latents_.code_shape();
    const auto values = j.at("latent").get<std::vector<float>>();
    if (values.size() != shape_numel(code)) throw std::invalid_argument("latent has the wrong size");
    Tensor z(code);
    std::copy(values.begin(), values.end(), z.storage().begin());
    const Shape fm = featuremap_shape();
    std::vector<Stroke> strokes;
    for (const auto& sj : j.at("strokes")) {
        Stroke s;
        s.concept_id = sj.at("concept").get<int>();
        s.mode = stroke_mode_from_string(sj.at("mode").get<std::string>());
        const RunLengthMask cells = RunLengthMask::from_json(sj.at("cells"));
        if (cells.height != fm.at(1) || cells.width != fm.at(2)) throw InvalidStroke("stroke cells do not match the layer");
        s.cells = cells.decode();
        s.timestamp_ms = sj.value("timestamp", std::int64_t{0});
        if (!palette_.find(s.concept_id)) throw InvalidStroke("concept " + std::to_string(s.concept_id) + " is not in the palette");
        strokes.push_back(std::move(s));
    }
    std::optional<std::uint64_t> seed;
    if (j.contains("seed") && !j.at("seed").is_null()) seed = j.at("seed").get<std::uint64_t>();
    return insert(seed, std::move(z), std::move(strokes));
}

std::size_t PaintEngine::session_count() const
{
    std::shared_lock lock(sessions_mutex_);
    return sessions_.size();
}

nlohmann::json session_json(const SessionView& v, bool include_state)
{
    nlohmann::json j = {{"id", v.id}, {"image", base64_encode(encode_png(v.image))}};
    if (!v.warnings.empty()) j["warnings"] = v.warnings;
    if (!include_state) return j;
    j["seed"] = v.seed ? nlohmann::json(*v.seed) : nlohmann::json(nullptr);
    j["latent_shape"] = v.latent.shape();
    j["latent"] = std::vector<float>(v.latent.storage().begin(), v.latent.storage().end());
    nlohmann::json strokes = nlohmann::json::array();
    for (const auto& s : v.strokes) strokes.push_back(stroke_json(s, v.cells_height, v.cells_width));
    j["strokes"] = strokes;
    j["base_image"] = base64_encode(encode_png(v.base_image));
    return j;
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& j)
{
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message)
{
    send_json(res, status, {{"error", message}});
}

template <class F>
void guarded(httplib::Response& res, F&& f)
{
    try {
        f();
    } catch (const SessionNotFound& e) {
        send_error(res, 404, e.what());
    } catch (const InvalidStroke& e) {
        send_error(res, 422, e.what());
    } catch (const nlohmann::json::exception& e) {
        send_error(res, 422, std::string("malformed request: ") + e.what());
    } catch (const std::invalid_argument& e) {
        send_error(res, 422, e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, e.what());
    }
}

nlohmann::json parse_body(const httplib::Request& req)
{
    if (req.body.empty()) return nlohmann::json::object();
    nlohmann::json j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw std::invalid_argument("request body must be a JSON object");
    return j;
}

} // namespace

void install_paint_routes(httplib::Server& server, PaintEngine& engine, const std::string& cors_origin)
{
    server.set_default_headers({{"Access-Control-Allow-Origin", cors_origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/palette", [&engine](const httplib::Request&, httplib::Response& res) {
        nlohmann::json j = engine.palette().to_json();
        j.erase("thresholds");
        send_json(res, 200, j);
    });

    server.Post("/session", [&engine](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const nlohmann::json body = parse_body(req);
            SessionView v;
            if (body.contains("latent")) {
                const auto values = body.at("latent").get<std::vector<float>>();
                if (values.size() != shape_numel(engine.code_shape()))
                    throw std::invalid_argument("latent must have " + std::to_string(shape_numel(engine.code_shape())) +
                                                " values");
                Tensor z(engine.code_shape());
                std::copy(values.begin(), values.end(), z.storage().begin());
                v = engine.create_session_from_latent(z);
            } else if (body.contains("seed") && !body.at("seed").is_null()) {
                v = engine.create_session(body.at("seed").get<std::uint64_t>());
            } else {
                v = engine.create_session();
            }
            send_json(res, 201, session_json(v, false));
        });
    });

    server.Post("/session/import", [&engine](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 201, session_json(engine.import_session(parse_body(req)), false)); });
    });

    server.Get(R"(/session/([^/]+))", [&engine](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, session_json(engine.state(req.matches[1]), true)); });
    });

    server.Get(R"(/session/([^/]+)/export)", [&engine](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, engine.export_session(req.matches[1])); });
    });

    server.Post(R"(/session/([^/]+)/stroke)", [&engine](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string id = req.matches[1];
            engine.state(id);
            nlohmann::json body;
            try {
                body = parse_body(req);
            } catch (const std::exception& e) {
                throw InvalidStroke(std::string("malformed stroke: ") + e.what());
            }
            int concept_id = -1;
            StrokeMode mode;
            RunLengthMask mask;
            try {
                const auto& c = body.at("concept");
                if (c.is_string()) {
                    const std::string name = c.get<std::string>();
                    for (const auto& pc : engine.palette().concepts)
                        if (pc.name == name) concept_id = pc.concept_id;
                    if (concept_id < 0) throw InvalidStroke("unknown concept '" + name + "'");
                } else {
                    concept_id = c.get<int>();
                }
                mode = stroke_mode_from_string(body.at("mode").get<std::string>());
                mask = RunLengthMask::from_json(body.at("mask"));
            } catch (const InvalidStroke&) {
                throw;
            } catch (const std::exception& e) {
                throw InvalidStroke(std::string("malformed stroke: ") + e.what());
            }
            send_json(res, 200, session_json(engine.apply_stroke(id, concept_id, mode, mask), false));
        });
    });

    server.Post(R"(/session/([^/]+)/undo)", [&engine](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, session_json(engine.undo(req.matches[1]), false)); });
    });
}

} // namespace unitscope
