#include "unitscope/intervene.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "unitscope/seed.hpp"

namespace unitscope {

std::string to_string(InterventionMode m)
{
    switch (m) {
    case InterventionMode::zero: return "zero";
    case InterventionMode::force: return "force";
    case InterventionMode::force_masked: return "force_masked";
    }
    return "?";
}

InterventionMode intervention_mode_from_string(const std::string& s)
{
    if (s == "zero") return InterventionMode::zero;
    if (s == "force") return InterventionMode::force;
    if (s == "force_masked") return InterventionMode::force_masked;
    throw std::invalid_argument("unknown intervention mode '" + s + "'");
}

void InterventionSpec::validate(const ModelSpec& model) const
{
    std::set<std::pair<std::string, int>> seen;
    for (const auto& t : targets) {
        if (!model.index_of(t.layer)) throw std::invalid_argument("intervention layer '" + t.layer + "' not in model");
        const Shape s = model.tap_shape(t.layer);
        const int C = s.at(0);
        if (t.unit < 0 || t.unit >= C)
            throw std::invalid_argument("unit " + std::to_string(t.unit) + " out of range for layer '" + t.layer +
                                        "' (" + std::to_string(C) + " units)");
        if (!seen.insert({t.layer, t.unit}).second)
            throw std::invalid_argument("duplicate intervention on " + t.layer + ":" + std::to_string(t.unit));
        const std::size_t cells = shape_numel(s) / static_cast<std::size_t>(C);
        if (t.mode == InterventionMode::force_masked && t.mask.size() != cells)
            throw std::invalid_argument("mask for " + t.layer + ":" + std::to_string(t.unit) + " has " +
                                        std::to_string(t.mask.size()) + " cells, layer has " + std::to_string(cells));
        if (t.mode != InterventionMode::force_masked && (!t.mask.empty() || !t.cell_values.empty()))
            throw std::invalid_argument("mask given for a " + to_string(t.mode) + " intervention");
        if (!t.cell_values.empty() && t.cell_values.size() != cells)
            throw std::invalid_argument("cell values for " + t.layer + ":" + std::to_string(t.unit) + " have " +
                                        std::to_string(t.cell_values.size()) + " cells, layer has " +
                                        std::to_string(cells));
    }
}

InterventionSpec InterventionSpec::zero(const std::string& layer, std::span<const int> units)
{
    InterventionSpec s;
    for (int u : units) s.targets.push_back({layer, u, InterventionMode::zero, 0.0f, {}, {}});
    return s;
}

InterventionSpec InterventionSpec::force(const std::string& layer, std::span<const int> units, float value)
{
    InterventionSpec s;
    for (int u : units) s.targets.push_back({layer, u, InterventionMode::force, value, {}, {}});
    return s;
}

InterventionSpec InterventionSpec::force_masked(const std::string& layer, std::span<const int> units,
                                                std::span<const float> values, std::vector<std::uint8_t> mask)
{
    if (values.size() != units.size()) throw std::invalid_argument("force_masked: one value per unit expected");
    InterventionSpec s;
    for (std::size_t i = 0; i < units.size(); ++i)
        s.targets.push_back({layer, units[i], InterventionMode::force_masked, values[i], mask, {}});
    return s;
}

InterventionSpec InterventionSpec::operator+(const InterventionSpec& other) const
{
    InterventionSpec s = *this;
    s.targets.insert(s.targets.end(), other.targets.begin(), other.targets.end());
    return s;
}

nlohmann::json InterventionSpec::to_json() const
{
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : targets) {
        nlohmann::json j = {{"layer", t.layer}, {"unit", t.unit}, {"mode", to_string(t.mode)}};
        if (t.mode != InterventionMode::zero) j["value"] = t.value;
        if (t.mode == InterventionMode::force_masked) j["mask"] = t.mask;
        if (!t.cell_values.empty()) j["cell_values"] = t.cell_values;
        arr.push_back(j);
    }
    return {{"targets", arr}};
}

InterventionSpec InterventionSpec::from_json(const nlohmann::json& j)
{
    InterventionSpec s;
    for (const auto& t : j.at("targets")) {
        InterventionTarget x;
        x.layer = t.at("layer").get<std::string>();
        x.unit = t.at("unit").get<int>();
        x.mode = intervention_mode_from_string(t.at("mode").get<std::string>());
        x.value = t.value("value", 0.0f);
        if (t.contains("mask")) x.mask = t.at("mask").get<std::vector<std::uint8_t>>();
        if (t.contains("cell_values")) x.cell_values = t.at("cell_values").get<std::vector<float>>();
        s.targets.push_back(std::move(x));
    }
    return s;
}

void apply_intervention(const InterventionSpec& spec, const std::string& layer, std::span<float> activation,
                        int channels)
{
    const std::size_t cells = activation.size() / static_cast<std::size_t>(channels);
    for (const auto& t : spec.targets) {
        if (t.layer != layer) continue;
        auto plane = activation.subspan(static_cast<std::size_t>(t.unit) * cells, cells);
        switch (t.mode) {
        case InterventionMode::zero: std::fill(plane.begin(), plane.end(), 0.0f); break;
        case InterventionMode::force: std::fill(plane.begin(), plane.end(), t.value); break;
        case InterventionMode::force_masked:
            for (std::size_t p = 0; p < cells; ++p)
                if (t.mask[p]) plane[p] = t.cell_values.empty() ? t.value : t.cell_values[p];
            break;
        }
    }
}

ForwardResult run_with_intervention(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                                    const InterventionSpec& spec, const std::set<std::string>& record_layers)
{
    ForwardOptions base;
    base.record = record_layers;
    return run_with_intervention(model, params, input, spec, base);
}

ForwardResult run_with_intervention(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                                    const InterventionSpec& spec, const ForwardOptions& base)
{
    spec.validate(model);
    if (spec.empty()) return forward(model, params, input, base);

    ForwardOptions opts = base;
    std::map<std::string, int> channels;
    for (const auto& t : spec.targets) channels[t.layer] = model.tap_shape(t.layer).at(0);

    const std::size_t first = base.resume_after ? model.tap_index(*base.resume_after) + 1 : 0;
    const Tensor* in = &input;
    Tensor edited;
    for (const auto& [layer, C] : channels) {
        const std::size_t tap = model.tap_index(layer);
        if (base.resume_after && tap + 1 == first) {
            if (in == &input) {
                edited = input;
                in = &edited;
            }
            for (int i = 0; i < edited.dim(0); ++i) apply_intervention(spec, layer, edited.item(i), C);
        } else if (tap < first) {
            throw std::invalid_argument("intervention on '" + layer + "' lies before the resume point");
        } else {
            opts.hook_layers.insert(layer);
        }
    }
    if (!opts.hook_layers.empty()) {
        const ActivationHook outer = base.hook;
        std::set<std::string> outer_layers = base.hook_layers;
        opts.hook = [&, outer, outer_layers](const std::string& layer, int example, std::span<float> act) {
            if (channels.count(layer)) apply_intervention(spec, layer, act, channels.at(layer));
            if (outer && outer_layers.count(layer)) outer(layer, example, act);
        };
    }
    return forward(model, params, *in, opts);
}

LabeledSplit labeled(const SceneSet& scenes, std::string name)
{
    return {inputs_of(scenes), scenes.classes(), std::move(name)};
}

std::vector<int> predict_with_intervention(const ModelSpec& model, const ParameterStore& params,
                                           const InputSource& inputs, const InterventionSpec& spec,
                                           const ForwardOptions& base, int batch_size)
{
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(inputs.size));
    for (int b = 0; b < inputs.size; b += batch_size) {
        const int e = std::min(inputs.size, b + batch_size);
        const Tensor logits = run_with_intervention(model, params, inputs.batch(b, e), spec, base).output;
        const std::size_t K = logits.item_size();
        for (int i = 0; i < e - b; ++i) {
            auto v = logits.item(i);
            out.push_back(static_cast<int>(std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(K)) -
                                           v.begin()));
        }
    }
    return out;
}

std::vector<int> balanced_indices(std::span<const int> labels, int class_id, std::uint64_t seed)
{
    std::vector<int> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == class_id ? pos : neg).push_back(static_cast<int>(i));
    if (pos.empty() || neg.empty())
        throw std::invalid_argument("class " + std::to_string(class_id) + " needs at least one positive and one negative");
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(class_id)));
    const std::size_t take = std::min(pos.size(), neg.size());
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (neg.size() - i));
        std::swap(neg[i], neg[j]);
    }
    neg.resize(take);
    std::vector<int> out = pos;
    out.insert(out.end(), neg.begin(), neg.end());
    std::sort(out.begin(), out.end());
    return out;
}

double balanced_single_class_accuracy(std::span<const int> predictions, std::span<const int> labels, int class_id,
                                      std::uint64_t seed)
{
    if (predictions.size() != labels.size()) throw std::invalid_argument("prediction and label counts differ");
    std::size_t pos = 0, neg = 0, pos_ok = 0, neg_ok = 0;
    for (int i : balanced_indices(labels, class_id, seed)) {
        const bool said = predictions[i] == class_id;
        if (labels[i] == class_id) {
            ++pos;
            pos_ok += said;
        } else {
            ++neg;
            neg_ok += !said;
        }
    }
    return 0.5 * (static_cast<double>(pos_ok) / static_cast<double>(pos) +
                  static_cast<double>(neg_ok) / static_cast<double>(neg));
}

double balanced_single_class_accuracy(const ModelSpec& model, const ParameterStore& params, int class_id,
                                      const LabeledSplit& split, const InterventionSpec& spec, std::uint64_t seed)
{
    const std::vector<int> idx = balanced_indices(split.labels, class_id, seed);
    InputSource sub{static_cast<int>(idx.size()), [&](int b, int e) {
                        std::vector<Tensor> items;
                        for (int k = b; k < e; ++k) {
                            Tensor one = split.inputs.batch(idx[k], idx[k] + 1);
                            items.push_back(one.reshaped(one.item_shape()));
                        }
                        return stack(items);
                    }};
    const std::vector<int> pred = predict_with_intervention(model, params, sub, spec);
    std::vector<int> all_pred(split.labels.size(), -1);
    for (std::size_t k = 0; k < idx.size(); ++k) all_pred[idx[k]] = pred[k];
    return balanced_single_class_accuracy(all_pred, split.labels, class_id, seed);
}

double all_class_accuracy(std::span<const int> predictions, std::span<const int> labels)
{
    if (predictions.size() != labels.size() || labels.empty()) throw std::invalid_argument("all_class_accuracy: bad sizes");
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += predictions[i] == labels[i];
    return static_cast<double>(ok) / static_cast<double>(labels.size());
}

std::vector<int> ImportanceTable::ranked(int class_id) const
{
    std::vector<int> order(units);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return at(class_id, a) > at(class_id, b); });
    return order;
}

nlohmann::json ImportanceTable::to_json() const
{
    nlohmann::json rows = nlohmann::json::array();
    for (int c = 0; c < n_classes; ++c)
        rows.push_back(std::vector<double>(delta.begin() + static_cast<std::ptrdiff_t>(c) * units,
                                           delta.begin() + static_cast<std::ptrdiff_t>(c + 1) * units));
    return {{"layer", layer}, {"split", split}, {"seed", seed}, {"n_classes", n_classes},
            {"units", units}, {"baseline", baseline}, {"delta", rows}};
}

ImportanceTable ImportanceTable::from_json(const nlohmann::json& j)
{
    ImportanceTable t;
    t.layer = j.at("layer").get<std::string>();
    t.split = j.at("split").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.n_classes = j.at("n_classes").get<int>();
    t.units = j.at("units").get<int>();
    t.baseline = j.at("baseline").get<std::vector<double>>();
    for (const auto& row : j.at("delta")) {
        auto r = row.get<std::vector<double>>();
        t.delta.insert(t.delta.end(), r.begin(), r.end());
    }
    if (static_cast<int>(t.delta.size()) != t.units * t.n_classes) throw std::runtime_error("importance table size mismatch");
    return t;
}

std::string ImportanceTable::to_csv() const
{
    std::ostringstream os;
    os.precision(9);
    os << "class,baseline";
    for (int u = 0; u < units; ++u) os << ",u" << u;
    os << '\n';
    for (int c = 0; c < n_classes; ++c) {
        os << c << ',' << baseline[c];
        for (int u = 0; u < units; ++u) os << ',' << at(c, u);
        os << '\n';
    }
    return os.str();
}

Tensor layer_activations(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                         const InputSource& inputs, int batch_size)
{
    const Shape s = model.tap_shape(layer);
    Shape full{inputs.size};
    full.insert(full.end(), s.begin(), s.end());
    Tensor out(full);
    ForwardOptions opts;
    opts.stop_after = layer;
    const std::size_t item = shape_numel(s);
    for (int b = 0; b < inputs.size; b += batch_size) {
        const int e = std::min(inputs.size, b + batch_size);
        const Tensor act = forward(model, params, inputs.batch(b, e), opts).output;
        std::copy(act.storage().begin(), act.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(b * item));
    }
    return out;
}

namespace {

struct Evaluator {
    const ModelSpec& model;
    const ParameterStore& params;
    const std::string& layer;
    const LabeledSplit& split;
    const Tensor* cached;

    std::vector<int> predict(const InterventionSpec& spec) const
    {
        if (!cached) return predict_with_intervention(model, params, split.inputs, spec);
        if (cached->dim(0) != split.inputs.size) throw std::invalid_argument("cached activations do not match the split");
        ForwardOptions base;
        base.resume_after = layer;
        const Tensor& c = *cached;
        InputSource src{c.dim(0), [&c](int b, int e) { return c.slice(b, e); }};
        return predict_with_intervention(model, params, src, spec, base);
    }
};

} // namespace

ImportanceTable rank_unit_importance(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                                     const LabeledSplit& split, int n_classes, std::uint64_t seed, const Tensor* cached)
{
    ImportanceTable t;
    t.layer = layer;
    t.split = split.name;
    t.seed = seed;
    t.n_classes = n_classes;
    t.units = model.tap_shape(layer).at(0);
    const Evaluator ev{model, params, layer, split, cached};
    const std::vector<int> base = ev.predict({});
    for (int c = 0; c < n_classes; ++c) t.baseline.push_back(balanced_single_class_accuracy(base, split.labels, c, seed));
    t.delta.assign(static_cast<std::size_t>(n_classes) * t.units, 0.0);
    for (int u = 0; u < t.units; ++u) {
        const int one[] = {u};
        const std::vector<int> pred = ev.predict(InterventionSpec::zero(layer, one));
        for (int c = 0; c < n_classes; ++c)
            t.delta[static_cast<std::size_t>(c) * t.units + u] =
                t.baseline[c] - balanced_single_class_accuracy(pred, split.labels, c, seed);
    }
    return t;
}

std::vector<double> rank_unit_importance(const ModelSpec& model, const ParameterStore& params,
                                         const std::string& layer, int class_id, const LabeledSplit& split,
                                         std::uint64_t seed, const Tensor* cached)
{
    // Only the balanced subset of the class matters.
    const std::vector<int> idx = balanced_indices(split.labels, class_id, seed);
    std::vector<int> sub_labels;
    for (int i : idx) sub_labels.push_back(split.labels[i]);
    Tensor sub_cache;
    if (cached) {
        std::vector<Tensor> items;
        for (int i : idx) items.push_back(cached->slice(i, i + 1).reshaped(cached->item_shape()));
        sub_cache = stack(items);
    }
    LabeledSplit sub{{static_cast<int>(idx.size()),
                      [&](int b, int e) {
                          std::vector<Tensor> items;
                          for (int k = b; k < e; ++k) {
                              Tensor one = split.inputs.batch(idx[k], idx[k] + 1);
                              items.push_back(one.reshaped(one.item_shape()));
                          }
                          return stack(items);
                      }},
                     sub_labels, split.name};
    const Evaluator ev{model, params, layer, sub, cached ? &sub_cache : nullptr};
    // Scatter back so balanced_indices sees the original label layout and seed.
    auto score = [&](const std::vector<int>& pred) {
        std::vector<int> all(split.labels.size(), -1);
        for (std::size_t k = 0; k < idx.size(); ++k) all[idx[k]] = pred[k];
        return balanced_single_class_accuracy(all, split.labels, class_id, seed);
    };
    const double baseline = score(ev.predict({}));
    const int units = model.tap_shape(layer).at(0);
    std::vector<double> out(units);
    for (int u = 0; u < units; ++u) {
        const int one[] = {u};
        out[u] = baseline - score(ev.predict(InterventionSpec::zero(layer, one)));
    }
    return out;
}

nlohmann::json AblationCurve::to_json() const
{
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points)
        pts.push_back({{"k", p.k}, {"accuracy_removed", p.accuracy_removed}, {"accuracy_kept", p.accuracy_kept},
                       {"all_class_removed", p.all_class_removed}, {"all_class_kept", p.all_class_kept}});
    return {{"layer", layer}, {"class_id", class_id}, {"ranked_units", ranked_units}, {"points", pts}};
}

std::string AblationCurve::to_csv() const
{
    std::ostringstream os;
    os.precision(9);
    os << "k,accuracy_removed,accuracy_kept,all_class_removed,all_class_kept\n";
    for (const auto& p : points)
        os << p.k << ',' << p.accuracy_removed << ',' << p.accuracy_kept << ',' << p.all_class_removed << ','
           << p.all_class_kept << '\n';
    return os.str();
}

AblationCurve ablation_curve(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                             int class_id, std::span<const int> ranked_units, std::span<const int> set_sizes,
                             const LabeledSplit& split, std::uint64_t seed, const Tensor* cached)
{
    const int units = model.tap_shape(layer).at(0);
    AblationCurve curve;
    curve.layer = layer;
    curve.class_id = class_id;
    curve.ranked_units.assign(ranked_units.begin(), ranked_units.end());
    const Evaluator ev{model, params, layer, split, cached};
    for (int k : set_sizes) {
        if (k < 0 || k > static_cast<int>(ranked_units.size()))
            throw std::invalid_argument("set size " + std::to_string(k) + " exceeds the ranked list");
        std::vector<int> top(ranked_units.begin(), ranked_units.begin() + k);
        std::vector<bool> in_top(units, false);
        for (int u : top) in_top.at(u) = true;
        std::vector<int> rest;
        for (int u = 0; u < units; ++u)
            if (!in_top[u]) rest.push_back(u);
        const auto removed = ev.predict(InterventionSpec::zero(layer, top));
        const auto kept = ev.predict(InterventionSpec::zero(layer, rest));
        CurvePoint p;
        p.k = k;
        p.accuracy_removed = balanced_single_class_accuracy(removed, split.labels, class_id, seed);
        p.accuracy_kept = balanced_single_class_accuracy(kept, split.labels, class_id, seed);
        p.all_class_removed = all_class_accuracy(removed, split.labels);
        p.all_class_kept = all_class_accuracy(kept, split.labels);
        curve.points.push_back(p);
    }
    return curve;
}

nlohmann::json CorrelationTable::to_json() const
{
    nlohmann::json rows = nlohmann::json::array();
    for (int u = 0; u < units; ++u)
        rows.push_back(std::vector<double>(r.begin() + static_cast<std::ptrdiff_t>(u) * n_classes,
                                           r.begin() + static_cast<std::ptrdiff_t>(u + 1) * n_classes));
    return {{"units", units}, {"n_classes", n_classes}, {"r", rows}, {"constant_units", constant_units}};
}

CorrelationTable unit_class_correlation(const Tensor& peaks, std::span<const int> labels, int n_classes)
{
    const int N = peaks.dim(0), U = peaks.dim(1);
    if (static_cast<int>(labels.size()) != N) throw std::invalid_argument("unit_class_correlation: label count mismatch");
    CorrelationTable t;
    t.units = U;
    t.n_classes = n_classes;
    t.r.assign(static_cast<std::size_t>(U) * n_classes, 0.0);
    std::vector<double> class_mean(n_classes, 0.0), class_ss(n_classes, 0.0);
    for (int c = 0; c < n_classes; ++c) {
        const double m = static_cast<double>(std::count(labels.begin(), labels.end(), c)) / N;
        class_mean[c] = m;
        class_ss[c] = N * m * (1.0 - m);
    }
    for (int u = 0; u < U; ++u) {
        double mean = 0.0;
        for (int i = 0; i < N; ++i) mean += peaks[static_cast<std::size_t>(i) * U + u];
        mean /= N;
        double ss = 0.0;
        std::vector<double> cov(n_classes, 0.0);
        for (int i = 0; i < N; ++i) {
            const double d = peaks[static_cast<std::size_t>(i) * U + u] - mean;
            ss += d * d;
            for (int c = 0; c < n_classes; ++c) cov[c] += d * ((labels[i] == c ? 1.0 : 0.0) - class_mean[c]);
        }
        if (ss == 0.0) {
            t.constant_units.push_back(u);
            continue;
        }
        for (int c = 0; c < n_classes; ++c)
            if (class_ss[c] > 0.0) t.r[static_cast<std::size_t>(u) * n_classes + c] = cov[c] / std::sqrt(ss * class_ss[c]);
    }
    return t;
}

CorrelationTable unit_class_correlation(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                                        const LabeledSplit& split, int n_classes)
{
    return unit_class_correlation(peak_activations(model, params, layer, split.inputs), split.labels, n_classes);
}

LatentGaussian LatentGaussian::fit(const Tensor& codes)
{
    const int N = codes.dim(0);
    const auto d = static_cast<Eigen::Index>(codes.item_size());
    if (N < 2) throw std::invalid_argument("LatentGaussian::fit needs at least two codes");
    Eigen::MatrixXd X(N, d);
    for (int i = 0; i < N; ++i)
        for (Eigen::Index k = 0; k < d; ++k) X(i, k) = codes.item(i)[static_cast<std::size_t>(k)];
    const Eigen::RowVectorXd mean = X.colwise().mean();
    X.rowwise() -= mean;
    Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(N - 1);
    const double ridge = 1e-6 * std::max(cov.trace() / static_cast<double>(d), 1e-12);
    cov.diagonal().array() += ridge;
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw std::runtime_error("latent covariance is not positive definite");
    const Eigen::MatrixXd L = llt.matrixL();
    LatentGaussian g;
    g.shape_ = codes.item_shape();
    g.mean_.assign(mean.data(), mean.data() + d);
    g.chol_.resize(static_cast<std::size_t>(d * d));
    for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index c = 0; c < d; ++c) g.chol_[static_cast<std::size_t>(r * d + c)] = L(r, c);
    return g;
}

Tensor LatentGaussian::sample(int n, std::uint64_t seed) const
{
    const std::size_t d = mean_.size();
    Shape s{n};
    s.insert(s.end(), shape_.begin(), shape_.end());
    Tensor out(s);
    std::vector<double> eps(d);
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        std::normal_distribution<double> nd;
        for (auto& e : eps) e = nd(rng);
        auto dst = out.item(i);
        for (std::size_t r = 0; r < d; ++r) {
            double v = mean_[r];
            for (std::size_t c = 0; c <= r; ++c) v += chol_[r * d + c] * eps[c];
            dst[r] = static_cast<float>(v);
        }
    }
    return out;
}

nlohmann::json LatentGaussian::to_json() const
{
    return {{"shape", shape_}, {"mean", mean_}, {"cholesky", chol_}};
}

LatentGaussian LatentGaussian::from_json(const nlohmann::json& j)
{
    LatentGaussian g;
    g.shape_ = j.at("shape").get<Shape>();
    g.mean_ = j.at("mean").get<std::vector<double>>();
    g.chol_ = j.at("cholesky").get<std::vector<double>>();
    if (g.mean_.size() != shape_numel(g.shape_) || g.chol_.size() != g.mean_.size() * g.mean_.size())
        throw std::runtime_error("latent distribution has inconsistent sizes");
    return g;
}

Tensor generate(const GeneratorModel& gen, const Tensor& latents, const InterventionSpec& spec, int batch_size)
{
    Shape s{latents.dim(0)};
    const Shape o = gen.decoder.output_shape();
    s.insert(s.end(), o.begin(), o.end());
    Tensor out(s);
    const std::size_t item = shape_numel(o);
    for (int b = 0; b < latents.dim(0); b += batch_size) {
        const int e = std::min(latents.dim(0), b + batch_size);
        const Tensor img = run_with_intervention(gen.decoder, gen.params, latents.slice(b, e), spec).output;
        std::transform(img.storage().begin(), img.storage().end(),
                       out.storage().begin() + static_cast<std::ptrdiff_t>(b * item),
                       [](float v) { return std::clamp(v, 0.0f, 1.0f); });
    }
    return out;
}

std::vector<std::uint64_t> concept_pixels(const GeneratorModel& gen, const Segmenter& seg, const Tensor& latents,
                                          int concept_id, const InterventionSpec& spec, int batch_size)
{
    std::vector<std::uint64_t> out;
    const int n = latents.empty() ? 0 : latents.dim(0);
    for (int b = 0; b < n; b += batch_size) {
        const int e = std::min(n, b + batch_size);
        const Tensor img = generate(gen, latents.slice(b, e), spec, batch_size);
        for (const auto& m : segment_images(seg.model, seg.params, img, batch_size)) {
            const auto& grid = m.grid_for(concept_id);
            out.push_back(static_cast<std::uint64_t>(
                std::count(grid.begin(), grid.end(), static_cast<std::uint8_t>(concept_id + 1))));
        }
    }
    return out;
}

std::uint64_t concept_pixel_count(const GeneratorModel& gen, const Segmenter& seg, const Tensor& latents,
                                  int concept_id, const InterventionSpec& spec)
{
    const auto v = concept_pixels(gen, seg, latents, concept_id, spec);
    return std::accumulate(v.begin(), v.end(), std::uint64_t{0});
}

nlohmann::json RemovalResult::to_json() const
{
    return {{"concept_id", concept_id}, {"concept", ConceptCatalog::standard().at(concept_id).name},
            {"layer", layer}, {"units", units}, {"samples", samples}, {"baseline_pixels", baseline_pixels},
            {"ablated_pixels", ablated_pixels}, {"reduction", reduction}, {"zero_baseline", zero_baseline}};
}

RemovalResult measure_unit_removal(const GeneratorModel& gen, const Segmenter& seg, const std::string& layer,
                                   int concept_id, std::span<const int> units, const Tensor& latents, int keep_pairs)
{
    RemovalResult r;
    r.concept_id = concept_id;
    r.layer = layer;
    r.units.assign(units.begin(), units.end());
    r.samples = latents.empty() ? 0 : latents.dim(0);
    const InterventionSpec spec = InterventionSpec::zero(layer, units);
    r.baseline_pixels = concept_pixel_count(gen, seg, latents, concept_id);
    r.ablated_pixels = units.empty() ? r.baseline_pixels : concept_pixel_count(gen, seg, latents, concept_id, spec);
    r.zero_baseline = r.baseline_pixels == 0;
    r.reduction = r.zero_baseline ? 0.0
                                  : 1.0 - static_cast<double>(r.ablated_pixels) / static_cast<double>(r.baseline_pixels);
    const int k = std::min(keep_pairs, r.samples);
    if (k > 0) {
        const Tensor z = latents.slice(0, k);
        const Tensor before = generate(gen, z), after = generate(gen, z, spec);
        for (int i = 0; i < k; ++i)
            r.pairs.emplace_back(before.slice(i, i + 1).reshaped(before.item_shape()),
                                 after.slice(i, i + 1).reshaped(after.item_shape()));
    }
    return r;
}

RemovalResult measure_concept_removal(const GeneratorModel& gen, const Segmenter& seg, const IoUTable& iou,
                                      int concept_id, int n_units, const Tensor& latents, int keep_pairs)
{
    std::vector<int> ranked = iou.rank_units(concept_id);
    ranked.resize(static_cast<std::size_t>(std::clamp(n_units, 0, iou.units)));
    return measure_unit_removal(gen, seg, iou.layer, concept_id, ranked, latents, keep_pairs);
}

ForcedImages force_units_at(const GeneratorModel& gen, const Tensor& latent, const std::string& layer,
                            std::span<const int> units, const std::vector<std::uint8_t>& mask,
                            const LayerThresholds& thresholds)
{
    std::vector<float> values;
    for (int u : units) values.push_back(thresholds.t.at(static_cast<std::size_t>(u)));
    ForcedImages r;
    r.baseline = generate(gen, latent);
    r.edited = generate(gen, latent, InterventionSpec::force_masked(layer, units, values, mask));
    return r;
}

nlohmann::json ContextMap::to_json() const
{
    return {{"layer", layer}, {"concept_id", concept_id}, {"units", units}, {"height", height}, {"width", width},
            {"samples", samples}, {"success_pixels", success_pixels}, {"mean_new_pixels", mean_new_pixels},
            {"success_rate", success_rate}, {"variance", map_variance()}};
}

double ContextMap::map_variance() const
{
    if (mean_new_pixels.empty()) return 0.0;
    const double m = std::accumulate(mean_new_pixels.begin(), mean_new_pixels.end(), 0.0) /
                     static_cast<double>(mean_new_pixels.size());
    double v = 0.0;
    for (double x : mean_new_pixels) v += (x - m) * (x - m);
    return v / static_cast<double>(mean_new_pixels.size());
}

ContextMap context_map(const GeneratorModel& gen, const Segmenter& seg, const std::string& layer,
                       std::span<const int> units, int concept_id, const LayerThresholds& thresholds,
                       const Tensor& latents, const ContextMapConfig& config)
{
    const Shape s = gen.decoder.tap_shape(layer);
    if (s.size() != 3) throw std::invalid_argument("context_map needs a spatial layer");
    ContextMap map;
    map.layer = layer;
    map.concept_id = concept_id;
    map.units.assign(units.begin(), units.end());
    map.height = s[1];
    map.width = s[2];
    map.samples = latents.empty() ? 0 : latents.dim(0);
    map.success_pixels = config.success_pixels;
    const int L = map.height * map.width;
    map.mean_new_pixels.assign(L, 0.0);
    map.success_rate.assign(L, 0.0);
    map.per_sample.assign(static_cast<std::size_t>(map.samples) * L, 0.0);
    if (map.samples == 0) return map;

    std::vector<float> values;
    for (int u : units) values.push_back(thresholds.t.at(static_cast<std::size_t>(u)));
    const auto before = concept_pixels(gen, seg, latents, concept_id, {}, config.batch_size);
    for (int loc = 0; loc < L; ++loc) {
        const int y0 = loc / map.width, x0 = loc % map.width;
        std::vector<std::uint8_t> mask(L, 0);
        for (int y = y0; y < std::min(map.height, y0 + config.patch); ++y)
            for (int x = x0; x < std::min(map.width, x0 + config.patch); ++x) mask[y * map.width + x] = 1;
        const auto after = concept_pixels(gen, seg, latents, concept_id,
                                          InterventionSpec::force_masked(layer, units, values, mask), config.batch_size);
        double sum = 0.0;
        int hits = 0;
        for (int i = 0; i < map.samples; ++i) {
            const double added = std::max(0.0, static_cast<double>(after[i]) - static_cast<double>(before[i]));
            map.per_sample[static_cast<std::size_t>(i) * L + loc] = added;
            sum += added;
            hits += added >= config.success_pixels;
        }
        map.mean_new_pixels[loc] = sum / map.samples;
        map.success_rate[loc] = static_cast<double>(hits) / map.samples;
    }
    return map;
}

std::vector<double> location_permutation_null(const ContextMap& map, int permutations, std::uint64_t seed)
{
    const int L = map.height * map.width;
    std::vector<double> out;
    if (map.samples == 0) return std::vector<double>(permutations, 0.0);
    std::mt19937_64 rng(seed);
    std::vector<int> perm(L);
    for (int p = 0; p < permutations; ++p) {
        ContextMap shuffled;
        shuffled.mean_new_pixels.assign(L, 0.0);
        for (int i = 0; i < map.samples; ++i) {
            std::iota(perm.begin(), perm.end(), 0);
            for (int k = L - 1; k > 0; --k) std::swap(perm[k], perm[static_cast<int>(rng() % (k + 1))]);
            for (int loc = 0; loc < L; ++loc)
                shuffled.mean_new_pixels[loc] += map.per_sample[static_cast<std::size_t>(i) * L + perm[loc]];
        }
        for (auto& v : shuffled.mean_new_pixels) v /= map.samples;
        out.push_back(shuffled.map_variance());
    }
    return out;
}

} // namespace unitscope
