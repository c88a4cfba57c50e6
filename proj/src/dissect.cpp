#include "unitscope/dissect.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "unitscope/nn.hpp"
#include "unitscope/parallel.hpp"
#include "unitscope/seed.hpp"
#include "unitscope/zoo.hpp"

namespace unitscope {

namespace {

double unit_open(std::mt19937_64& rng)
{
    // (0, 1]
    return (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
}

std::uint64_t geometric_skip(double u, double w)
{
    const double s = std::floor(std::log(u) / std::log1p(-w));
    if (!(s < 0x1.0p62)) return std::uint64_t{1} << 62;
    return static_cast<std::uint64_t>(s);
}

} // namespace

QuantileReservoir::QuantileReservoir(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed)
{
    if (capacity == 0) throw std::invalid_argument("reservoir capacity must be positive");
    samples_.reserve(capacity);
}

void QuantileReservoir::advance_skip()
{
    w_ *= std::exp(std::log(unit_open(rng_)) / static_cast<double>(capacity_));
    next_ += geometric_skip(unit_open(rng_), w_) + 1;
}

void QuantileReservoir::add(float v)
{
    if (samples_.size() < capacity_) {
        samples_.push_back(v);
        ++seen_;
        if (samples_.size() == capacity_) {
            w_ = std::exp(std::log(unit_open(rng_)) / static_cast<double>(capacity_));
            next_ = seen_ + geometric_skip(unit_open(rng_), w_);
        }
        return;
    }
    if (seen_ == next_) {
        samples_[static_cast<std::size_t>(rng_() % capacity_)] = v;
        advance_skip();
    }
    ++seen_;
}

void QuantileReservoir::merge(const QuantileReservoir& other)
{
    if (other.seen_ == 0) return;
    const std::uint64_t total = seen_ + other.seen_;
    if (total <= capacity_) {
        std::vector<float> mine = samples_;
        samples_.clear();
        seen_ = 0;
        for (float v : mine) add(v);
        for (float v : other.samples_) add(v);
        return;
    }
    // Sequential draws without replacement from the two streams, each stream's draws served by
    // a uniform pick (without replacement) from its own sample.
    std::vector<float> a = samples_;
    std::vector<float> b = other.samples_;
    std::uint64_t ra = seen_, rb = other.seen_;
    std::vector<float> out;
    out.reserve(capacity_);
    auto take = [&](std::vector<float>& pool) {
        const auto j = static_cast<std::size_t>(rng_() % pool.size());
        out.push_back(pool[j]);
        pool[j] = pool.back();
        pool.pop_back();
    };
    while (out.size() < capacity_) {
        const double pa = static_cast<double>(ra) / static_cast<double>(ra + rb);
        if (unit_open(rng_) <= pa) {
            take(a);
            --ra;
        } else {
            take(b);
            --rb;
        }
    }
    samples_ = std::move(out);
    seen_ = total;
    // The largest kept key among `total` uniforms is Beta(k, total - k + 1).
    const auto k = static_cast<double>(capacity_);
    std::gamma_distribution<double> ga(k, 1.0), gb(static_cast<double>(total) - k + 1.0, 1.0);
    const double x = ga(rng_), y = gb(rng_);
    w_ = x / (x + y);
    next_ = seen_ + geometric_skip(unit_open(rng_), w_);
}

float QuantileReservoir::threshold(double q) const
{
    if (samples_.empty()) throw std::logic_error("threshold of an empty reservoir");
    std::vector<float> s = samples_;
    const auto n = static_cast<std::ptrdiff_t>(s.size());
    const auto above = static_cast<std::ptrdiff_t>(std::ceil(q * static_cast<double>(n) - 1e-9));
    const std::ptrdiff_t k = std::clamp<std::ptrdiff_t>(n - 1 - above, 0, n - 1);
    std::nth_element(s.begin(), s.begin() + k, s.end());
    return s[static_cast<std::size_t>(k)];
}

InputSource inputs_of(const SceneSet& scenes)
{
    return {scenes.size(), [&scenes](int begin, int end) { return scenes.images(begin, end); }};
}

InputSource inputs_of(const Tensor& batch)
{
    auto held = std::make_shared<Tensor>(batch);
    return {batch.dim(0), [held](int begin, int end) { return held->slice(begin, end); }};
}

const LayerThresholds& ThresholdTable::at(const std::string& layer) const
{
    auto it = layers.find(layer);
    if (it == layers.end()) throw std::out_of_range("no thresholds for layer '" + layer + "'");
    return it->second;
}

nlohmann::json ThresholdTable::to_json() const
{
    nlohmann::json j;
    j["q"] = q;
    j["layers"] = nlohmann::json::object();
    for (const auto& [name, l] : layers) {
        std::vector<int> constant(l.constant.begin(), l.constant.end());
        j["layers"][name] = {{"t", l.t}, {"samples_seen", l.samples_seen}, {"constant", constant}};
    }
    return j;
}

ThresholdTable ThresholdTable::from_json(const nlohmann::json& j)
{
    ThresholdTable t;
    t.q = j.at("q").get<double>();
    for (const auto& [name, l] : j.at("layers").items()) {
        LayerThresholds lt;
        lt.t = l.at("t").get<std::vector<float>>();
        lt.samples_seen = l.at("samples_seen").get<std::vector<std::uint64_t>>();
        for (int c : l.at("constant").get<std::vector<int>>()) lt.constant.push_back(c != 0);
        t.layers[name] = std::move(lt);
    }
    return t;
}

Tensor upsample_activation(const Tensor& map, int out_h, int out_w)
{
    if (map.ndim() != 3) throw std::invalid_argument("upsample_activation expects (C, h, w), got " + shape_str(map.shape()));
    const int C = map.dim(0), h = map.dim(1), w = map.dim(2);
    Tensor out({C, out_h, out_w});
    const std::size_t in_plane = static_cast<std::size_t>(h) * w, out_plane = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < C; ++c)
        bilinear_resize(map.data().subspan(c * in_plane, in_plane), h, w, out.data().subspan(c * out_plane, out_plane),
                        out_h, out_w);
    return out;
}

namespace {

Shape spatial_tap_shape(const ModelSpec& model, const std::string& layer)
{
    Shape s = model.tap_shape(layer);
    if (s.size() != 3) throw ModelError(layer, "dissection needs a spatial (C, h, w) activation, got " + shape_str(s));
    return s;
}

std::string deepest(const ModelSpec& model, const std::vector<std::string>& layers)
{
    std::string best = layers.front();
    for (const auto& l : layers)
        if (model.tap_index(l) > model.tap_index(best)) best = l;
    return best;
}

} // namespace

ThresholdTable fit_thresholds(const ModelSpec& model, const ParameterStore& params,
                              const std::vector<std::string>& layers, const InputSource& inputs,
                              const DissectConfig& config)
{
    if (layers.empty()) throw std::invalid_argument("fit_thresholds: no layers given");
    if (inputs.size <= 0) throw std::invalid_argument("fit_thresholds: no inputs");
    if (!(config.q > 0.0 && config.q < 1.0)) throw std::invalid_argument("fit_thresholds: q must be in (0, 1)");
    const int R = config.resolution;

    struct LayerState {
        Shape shape;
        std::vector<QuantileReservoir> reservoirs;
        std::vector<float> lo, hi;
    };
    std::map<std::string, LayerState> state;
    for (const auto& name : layers) {
        LayerState st;
        st.shape = spatial_tap_shape(model, name);
        const int C = st.shape[0];
        const std::uint64_t layer_seed = derive_seed(config.seed, name);
        for (int u = 0; u < C; ++u)
            st.reservoirs.emplace_back(config.reservoir_capacity, derive_seed(layer_seed, static_cast<std::uint64_t>(u)));
        st.lo.assign(C, std::numeric_limits<float>::infinity());
        st.hi.assign(C, -std::numeric_limits<float>::infinity());
        state.emplace(name, std::move(st));
    }

    ForwardOptions opts;
    opts.record = std::set<std::string>(layers.begin(), layers.end());
    opts.stop_after = deepest(model, layers);

    for (int b = 0; b < inputs.size; b += config.batch_size) {
        const int e = std::min(inputs.size, b + config.batch_size);
        const ForwardResult fwd = forward(model, params, inputs.batch(b, e), opts);
        for (auto& [name, st] : state) {
            const Tensor& act = fwd.activations.at(name);
            const int n = act.dim(0), C = st.shape[0], h = st.shape[1], w = st.shape[2];
            const std::size_t plane = static_cast<std::size_t>(h) * w;
            parallel_for(static_cast<std::size_t>(C), num_jobs(), [&](std::size_t u) {
                std::vector<float> up(static_cast<std::size_t>(R) * R);
                for (int i = 0; i < n; ++i) {
                    auto src = act.item(i).subspan(u * plane, plane);
                    for (float v : src) {
                        st.lo[u] = std::min(st.lo[u], v);
                        st.hi[u] = std::max(st.hi[u], v);
                    }
                    bool ready = false;
                    st.reservoirs[u].add_stream(up.size(), [&](std::uint64_t p) {
                        if (!ready) {
                            bilinear_resize(src, h, w, up, R, R);
                            ready = true;
                        }
                        return up[static_cast<std::size_t>(p)];
                    });
                }
            });
        }
    }

    ThresholdTable table;
    table.q = config.q;
    for (auto& [name, st] : state) {
        LayerThresholds lt;
        for (std::size_t u = 0; u < st.reservoirs.size(); ++u) {
            const bool constant = st.lo[u] == st.hi[u];
            lt.constant.push_back(constant);
            lt.t.push_back(constant ? st.lo[u] : st.reservoirs[u].threshold(config.q));
            lt.samples_seen.push_back(st.reservoirs[u].seen());
        }
        table.layers[name] = std::move(lt);
    }
    return table;
}

IoUAccumulator::IoUAccumulator(int units, int concepts)
    : units_(units), concepts_(concepts), inter_(static_cast<std::size_t>(units) * concepts, 0),
      unit_count_(units, 0), concept_count_(concepts, 0)
{
}

namespace {

template <typename F>
void for_each_label(const SegmentationMap& seg, std::size_t p, int concepts, F&& f)
{
    for (const auto* grid : {&seg.object, &seg.part_vertical, &seg.part_horizontal, &seg.color}) {
        if (grid->empty()) continue;
        const int l = (*grid)[p];
        if (l == 0) continue;
        if (l > concepts) throw std::out_of_range("segmentation label " + std::to_string(l - 1) + " outside catalog");
        f(l - 1);
    }
}

} // namespace

void IoUAccumulator::add(std::span<const float> activation, int h, int w, std::span<const float> thresholds,
                         const SegmentationMap& seg)
{
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (activation.size() != plane * units_ || thresholds.size() != static_cast<std::size_t>(units_))
        throw std::invalid_argument("IoUAccumulator::add: activation or threshold size mismatch");
    const std::size_t pixels = static_cast<std::size_t>(seg.height) * seg.width;
    for (std::size_t p = 0; p < pixels; ++p) for_each_label(seg, p, concepts_, [&](int c) { ++concept_count_[c]; });
    std::vector<float> up(pixels);
    for (int u = 0; u < units_; ++u) {
        bilinear_resize(activation.subspan(u * plane, plane), h, w, up, seg.height, seg.width);
        const float t = thresholds[u];
        std::uint64_t* row = inter_.data() + idx(u, 0);
        for (std::size_t p = 0; p < pixels; ++p) {
            if (!(up[p] > t)) continue;
            ++unit_count_[u];
            for_each_label(seg, p, concepts_, [&](int c) { ++row[c]; });
        }
    }
}

void IoUAccumulator::add_masks(const std::vector<std::vector<std::uint8_t>>& unit_masks, const SegmentationMap& seg)
{
    if (unit_masks.size() != static_cast<std::size_t>(units_))
        throw std::invalid_argument("IoUAccumulator::add_masks: wrong number of unit masks");
    const std::size_t pixels = static_cast<std::size_t>(seg.height) * seg.width;
    for (std::size_t p = 0; p < pixels; ++p) for_each_label(seg, p, concepts_, [&](int c) { ++concept_count_[c]; });
    for (int u = 0; u < units_; ++u) {
        const auto& m = unit_masks[u];
        if (m.size() != pixels) throw std::invalid_argument("IoUAccumulator::add_masks: mask size mismatch");
        for (std::size_t p = 0; p < pixels; ++p) {
            if (!m[p]) continue;
            ++unit_count_[u];
            for_each_label(seg, p, concepts_, [&](int c) { ++inter_[idx(u, c)]; });
        }
    }
}

void IoUAccumulator::merge(const IoUAccumulator& other)
{
    if (units_ == 0 && concepts_ == 0) {
        *this = other;
        return;
    }
    if (other.units_ != units_ || other.concepts_ != concepts_)
        throw std::invalid_argument("IoUAccumulator::merge: shape mismatch");
    for (std::size_t i = 0; i < inter_.size(); ++i) inter_[i] += other.inter_[i];
    for (std::size_t i = 0; i < unit_count_.size(); ++i) unit_count_[i] += other.unit_count_[i];
    for (std::size_t i = 0; i < concept_count_.size(); ++i) concept_count_[i] += other.concept_count_[i];
}

double IoUAccumulator::iou(int u, int c) const
{
    const std::uint64_t uni = union_count(u, c);
    if (uni == 0) return 0.0;
    return static_cast<double>(intersection(u, c)) / static_cast<double>(uni);
}

IoUTable IoUTable::from(const IoUAccumulator& acc, std::string layer)
{
    IoUTable t;
    t.layer = std::move(layer);
    t.catalog_hash = ConceptCatalog::standard().hash();
    t.units = acc.units();
    t.concepts = acc.concepts();
    t.values.resize(static_cast<std::size_t>(t.units) * t.concepts);
    for (int u = 0; u < t.units; ++u)
        for (int c = 0; c < t.concepts; ++c) t.values[static_cast<std::size_t>(u) * t.concepts + c] = acc.iou(u, c);
    return t;
}

nlohmann::json IoUTable::to_json() const
{
    nlohmann::json rows = nlohmann::json::array();
    for (int u = 0; u < units; ++u)
        rows.push_back(std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(u) * concepts,
                                           values.begin() + static_cast<std::ptrdiff_t>(u + 1) * concepts));
    return {{"layer", layer}, {"catalog_hash", catalog_hash}, {"units", units}, {"concepts", concepts}, {"iou", rows}};
}

IoUTable IoUTable::from_json(const nlohmann::json& j)
{
    IoUTable t;
    t.layer = j.at("layer").get<std::string>();
    t.catalog_hash = j.at("catalog_hash").get<std::string>();
    t.units = j.at("units").get<int>();
    t.concepts = j.at("concepts").get<int>();
    for (const auto& row : j.at("iou")) {
        auto r = row.get<std::vector<double>>();
        if (static_cast<int>(r.size()) != t.concepts) throw std::runtime_error("IoU table row has the wrong length");
        t.values.insert(t.values.end(), r.begin(), r.end());
    }
    if (static_cast<int>(t.values.size()) != t.units * t.concepts) throw std::runtime_error("IoU table has the wrong number of rows");
    return t;
}

std::string IoUTable::to_csv() const
{
    const auto& cat = ConceptCatalog::standard();
    std::ostringstream os;
    os.precision(9);
    os << "unit";
    for (int c = 0; c < concepts; ++c) os << ',' << (c < cat.size() ? cat.at(c).name : "c" + std::to_string(c));
    os << '\n';
    for (int u = 0; u < units; ++u) {
        os << u;
        for (int c = 0; c < concepts; ++c) os << ',' << at(u, c);
        os << '\n';
    }
    return os.str();
}

std::vector<int> IoUTable::rank_units(int concept_id) const
{
    std::vector<int> order(units);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return at(a, concept_id) > at(b, concept_id); });
    return order;
}

IoUAccumulator accumulate_iou(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                              const ThresholdTable& thresholds, const InputSource& inputs, const SegProvider& seg,
                              const DissectConfig& config, int begin, int end)
{
    if (end < 0) end = inputs.size;
    const Shape s = spatial_tap_shape(model, layer);
    const int C = s[0], h = s[1], w = s[2];
    const auto& t = thresholds.at(layer).t;
    if (static_cast<int>(t.size()) != C) throw std::invalid_argument("thresholds do not match layer '" + layer + "'");
    const int concepts = ConceptCatalog::standard().size();
    const int shards = std::max(1, num_jobs());
    std::vector<IoUAccumulator> acc(shards, IoUAccumulator(C, concepts));

    ForwardOptions opts;
    opts.record = {layer};
    for (int b = begin; b < end; b += config.batch_size) {
        const int e = std::min(end, b + config.batch_size);
        const ForwardResult fwd = forward(model, params, inputs.batch(b, e), opts);
        const Tensor& act = fwd.activations.at(layer);
        const auto segs = seg(b, fwd.output);
        if (static_cast<int>(segs.size()) != e - b) throw std::runtime_error("segmentation provider returned the wrong count");
        parallel_for(static_cast<std::size_t>(shards), shards, [&](std::size_t sh) {
            for (int i = static_cast<int>(sh); i < e - b; i += shards) acc[sh].add(act.item(i), h, w, t, segs[i]);
        });
    }
    for (int sh = 1; sh < shards; ++sh) acc[0].merge(acc[sh]);
    return acc[0];
}

IoUTable compute_iou_table(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                           const ThresholdTable& thresholds, const SceneSet& scenes, const DissectConfig& config)
{
    SegProvider seg = [&scenes](int begin, const Tensor& outputs) {
        std::vector<SegmentationMap> out;
        for (int i = 0; i < outputs.dim(0); ++i) out.push_back(scenes.seg(begin + i));
        return out;
    };
    return IoUTable::from(accumulate_iou(model, params, layer, thresholds, inputs_of(scenes), seg, config), layer);
}

std::vector<UnitLabel> label_units(const IoUTable& iou, double min_iou, const ConceptCatalog& catalog)
{
    std::vector<UnitLabel> out;
    for (int u = 0; u < iou.units; ++u) {
        UnitLabel l;
        l.unit = u;
        int best = 0;
        for (int c = 1; c < iou.concepts; ++c)
            if (iou.at(u, c) > iou.at(u, best)) best = c;
        l.score = iou.concepts > 0 ? iou.at(u, best) : 0.0;
        if (iou.concepts > 0 && l.score >= min_iou) {
            l.concept_id = best;
            l.category = catalog.at(best).category;
        }
        out.push_back(l);
    }
    return out;
}

LayerSummary summarize_layer(const std::string& layer, const std::vector<UnitLabel>& labels,
                             const ConceptCatalog& catalog)
{
    LayerSummary s;
    s.layer = layer;
    s.units = static_cast<int>(labels.size());
    for (const auto& l : labels) {
        if (!l.matched()) continue;
        ++s.matched;
        ++s.concept_counts[l.concept_id];
        ++s.category_counts[*l.category];
    }
    for (const auto& [c, n] : s.concept_counts) ++s.distinct_concepts[catalog.at(c).category];
    return s;
}

nlohmann::json LayerSummary::to_json() const
{
    nlohmann::json cats = nlohmann::json::object(), distinct = nlohmann::json::object(), concepts = nlohmann::json::object();
    const auto& catalog = ConceptCatalog::standard();
    for (const auto& [c, n] : category_counts) cats[to_string(c)] = n;
    for (const auto& [c, n] : distinct_concepts) distinct[to_string(c)] = n;
    for (const auto& [c, n] : concept_counts) concepts[catalog.at(c).name] = n;
    return {{"layer", layer}, {"units", units}, {"matched", matched}, {"units_per_category", cats},
            {"distinct_concepts", distinct}, {"units_per_concept", concepts}};
}

Tensor peak_activations(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                        const InputSource& inputs, int batch_size)
{
    const Shape s = spatial_tap_shape(model, layer);
    const int C = s[0];
    const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
    Tensor peaks({inputs.size, C});
    ForwardOptions opts;
    opts.stop_after = layer;
    for (int b = 0; b < inputs.size; b += batch_size) {
        const int e = std::min(inputs.size, b + batch_size);
        const Tensor act = forward(model, params, inputs.batch(b, e), opts).output;
        for (int i = 0; i < e - b; ++i) {
            auto v = act.item(i);
            for (int u = 0; u < C; ++u) {
                auto p = v.subspan(u * plane, plane);
                peaks[static_cast<std::size_t>(b + i) * C + u] = *std::max_element(p.begin(), p.end());
            }
        }
    }
    return peaks;
}

std::vector<int> top_k_by_peak(std::span<const float> peaks, int k)
{
    std::vector<int> order(peaks.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return peaks[a] > peaks[b]; });
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(0, k))));
    return order;
}

std::vector<Exemplar> top_activating(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                                     int unit, float threshold, const InputSource& inputs, int k, int resolution)
{
    const Shape s = spatial_tap_shape(model, layer);
    if (unit < 0 || unit >= s[0]) throw std::out_of_range("unit " + std::to_string(unit) + " out of range for '" + layer + "'");
    const Tensor peaks = peak_activations(model, params, layer, inputs);
    std::vector<float> col(inputs.size);
    for (int i = 0; i < inputs.size; ++i) col[i] = peaks[static_cast<std::size_t>(i) * s[0] + unit];
    ForwardOptions opts;
    opts.stop_after = layer;
    const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
    std::vector<Exemplar> out;
    for (int i : top_k_by_peak(col, k)) {
        const Tensor act = forward(model, params, inputs.batch(i, i + 1), opts).output;
        std::vector<float> up(static_cast<std::size_t>(resolution) * resolution);
        bilinear_resize(act.item(0).subspan(unit * plane, plane), s[1], s[2], up, resolution, resolution);
        Exemplar ex;
        ex.image = i;
        ex.peak = col[i];
        ex.mask.resize(up.size());
        for (std::size_t p = 0; p < up.size(); ++p) ex.mask[p] = up[p] > threshold ? 1 : 0;
        out.push_back(std::move(ex));
    }
    return out;
}

nlohmann::json UnitClassifierResult::to_json() const
{
    return {{"balanced_accuracy", balanced_accuracy}, {"true_positive_rate", true_positive_rate},
            {"true_negative_rate", true_negative_rate}, {"threshold", threshold},
            {"positive_peaks", positive_peaks}, {"negative_peaks", negative_peaks}};
}

UnitClassifierResult evaluate_unit_classifier(std::span<const float> positive_peaks,
                                              std::span<const float> negative_peaks, float threshold)
{
    if (positive_peaks.empty() || negative_peaks.empty())
        throw std::invalid_argument("evaluate_unit_classifier needs positives and negatives");
    UnitClassifierResult r;
    r.threshold = threshold;
    r.positive_peaks.assign(positive_peaks.begin(), positive_peaks.end());
    r.negative_peaks.assign(negative_peaks.begin(), negative_peaks.end());
    const auto tp = std::count_if(positive_peaks.begin(), positive_peaks.end(), [&](float v) { return v > threshold; });
    const auto tn = std::count_if(negative_peaks.begin(), negative_peaks.end(), [&](float v) { return !(v > threshold); });
    r.true_positive_rate = static_cast<double>(tp) / static_cast<double>(positive_peaks.size());
    r.true_negative_rate = static_cast<double>(tn) / static_cast<double>(negative_peaks.size());
    r.balanced_accuracy = 0.5 * (r.true_positive_rate + r.true_negative_rate);
    return r;
}

nlohmann::json SegmenterQuality::to_json() const
{
    nlohmann::json objects = nlohmann::json::object();
    const auto& catalog = ConceptCatalog::standard();
    for (const auto& [c, v] : object_iou) objects[catalog.at(c).name] = v;
    return {{"object_iou", objects}, {"background_iou", background_iou}, {"mean_object_iou", mean_object_iou},
            {"floor", kSegmenterQualityFloor}};
}

namespace {

class ConcatDataset final : public Dataset {
public:
    ConcatDataset(const Dataset& a, const Dataset& b) : a_(a), b_(b) {}
    std::size_t size() const override { return a_.size() + b_.size(); }
    Shape input_shape() const override { return a_.input_shape(); }
    Shape target_shape() const override { return a_.target_shape(); }
    void fill(std::size_t index, std::span<float> input, std::span<float> target) const override
    {
        if (index < a_.size()) a_.fill(index, input, target);
        else b_.fill(index - a_.size(), input, target);
    }

private:
    const Dataset& a_;
    const Dataset& b_;
};

} // namespace

TrainResult train_reference_segmenter(const SceneSet& train_scenes, const SegmenterConfig& config,
                                      const EpochCallback& on_epoch)
{
    SceneSet background(config.background_scenes);
    const std::uint64_t bg_seed = derive_seed(config.optimizer.seed, "background");
    for (int i = 0; i < config.background_scenes; ++i)
        background.set(i, render_scene(background_scene(derive_seed(bg_seed, static_cast<std::uint64_t>(i)))), -1);
    SceneDataset scenes(train_scenes, SceneTarget::object_labels);
    SceneDataset empty(background, SceneTarget::object_labels);
    ConcatDataset data(scenes, empty);
    return train(segmenter_spec(), data, LossKind::cross_entropy, config.optimizer, std::nullopt, on_epoch);
}

std::vector<SegmentationMap> segment_images(const ModelSpec& segmenter, const ParameterStore& params,
                                            const Tensor& images, int batch_size)
{
    const auto labels = predict_labels(segmenter, params, images, batch_size);
    std::vector<SegmentationMap> out;
    out.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        SegmentationMap seg;
        seg.height = images.dim(2);
        seg.width = images.dim(3);
        seg.object = labels[i];
        const Tensor img = images.slice(static_cast<int>(i), static_cast<int>(i) + 1).reshaped(images.item_shape());
        complete_segmentation(seg, img);
        out.push_back(std::move(seg));
    }
    return out;
}

SegmenterQuality evaluate_segmenter(const ModelSpec& segmenter, const ParameterStore& params, const SceneSet& scenes)
{
    constexpr int K = kSegmenterClasses;
    std::vector<std::uint64_t> inter(K, 0), uni(K, 0);
    constexpr int chunk = 256;
    for (int b = 0; b < scenes.size(); b += chunk) {
        const int e = std::min(scenes.size(), b + chunk);
        const auto pred = predict_labels(segmenter, params, scenes.images(b, e));
        for (int i = b; i < e; ++i) {
            const auto truth = scenes.seg(i).object;
            const auto& p = pred[i - b];
            for (std::size_t px = 0; px < truth.size(); ++px) {
                const int t = truth[px], q = p[px];
                if (t == q) {
                    ++inter[t];
                    ++uni[t];
                } else {
                    ++uni[t];
                    ++uni[q];
                }
            }
        }
    }
    SegmenterQuality r;
    r.background_iou = uni[0] ? static_cast<double>(inter[0]) / static_cast<double>(uni[0]) : 0.0;
    double sum = 0.0;
    int present = 0;
    for (int k = 1; k < K; ++k) {
        if (uni[k] == 0) continue;
        const double v = static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
        r.object_iou[k - 1] = v;
        sum += v;
        ++present;
    }
    r.mean_object_iou = present ? sum / present : 0.0;
    return r;
}

void require_segmenter_quality(const SegmenterQuality& q, bool override_floor)
{
    if (q.mean_object_iou >= kSegmenterQualityFloor || override_floor) return;
    std::ostringstream os;
    os << "reference segmenter mean object IoU " << q.mean_object_iou << " is below the " << kSegmenterQualityFloor
       << " floor; generated-image dissection refused (override to proceed)";
    throw std::runtime_error(os.str());
}

} // namespace unitscope
