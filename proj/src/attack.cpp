#include "unitscope/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "unitscope/dissect.hpp"
#include "unitscope/nn.hpp"
#include "unitscope/seed.hpp"

namespace unitscope {

void AttackConfig::validate() const
{
    if (!(step > 0.0f)) throw std::invalid_argument("attack step must be positive");
    if (iterations < 1) throw std::invalid_argument("attack needs at least one iteration");
    if (!(linf_bound >= 0.0f)) throw std::invalid_argument("perturbation bound must be non-negative");
    if (!(l2_weight >= 0.0f)) throw std::invalid_argument("L2 weight must be non-negative");
}

nlohmann::json AttackConfig::to_json() const
{
    return {{"target", target}, {"step", step}, {"iterations", iterations}, {"linf_bound", linf_bound},
            {"l2_weight", l2_weight}, {"margin", margin}, {"seed", seed}};
}

nlohmann::json AttackResult::to_json() const
{
    nlohmann::json deltas = nlohmann::json::array();
    for (const auto& d : unit_deltas)
        deltas.push_back({{"unit", d.unit}, {"peak_original", d.peak_original}, {"peak_adversarial", d.peak_adversarial},
                          {"delta_peak", d.delta_peak}, {"max_increase", {d.increase_y, d.increase_x, d.max_increase}},
                          {"max_decrease", {d.decrease_y, d.decrease_x, d.max_decrease}}});
    return {{"success", success}, {"source_correct", source_correct}, {"source", source}, {"target", target},
            {"original_prediction", original_prediction}, {"adversarial_prediction", adversarial_prediction},
            {"target_margin", target_margin}, {"l2", l2}, {"linf", linf}, {"iterations_run", iterations_run},
            {"best_iteration", best_iteration}, {"unit_deltas", deltas}};
}

namespace {

int argmax(std::span<const float> v)
{
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

float margin_of(std::span<const float> logits, int target)
{
    float other = -std::numeric_limits<float>::infinity();
    for (std::size_t k = 0; k < logits.size(); ++k)
        if (static_cast<int>(k) != target) other = std::max(other, logits[k]);
    return logits[static_cast<std::size_t>(target)] - other;
}

} // namespace

AttackResult targeted_attack(const ModelSpec& model, const ParameterStore& params, const Tensor& image, int source,
                             const AttackConfig& config)
{
    config.validate();
    const Shape item = image.ndim() == model.input_shape.size() ? image.shape() : image.item_shape();
    Shape batched{1};
    batched.insert(batched.end(), item.begin(), item.end());
    const Tensor x = image.reshaped(batched);
    const std::size_t n = x.size();
    const int classes = static_cast<int>(shape_numel(model.output_shape()));
    if (config.target < 0 || config.target >= classes) throw std::invalid_argument("attack target out of range");

    AttackResult r;
    r.source = source;
    r.target = config.target;
    const Tensor target = Tensor::from({1}, {static_cast<float>(config.target)});

    Tensor delta(batched);
    Tensor adv(batched);
    bool have_best = false, best_success = false;
    double best_l2 = 0.0;
    float best_margin = 0.0f;
    Tensor best = x;
    int best_pred = 0;
    for (int it = 0; it < config.iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) adv[i] = x[i] + delta[i];
        const BackwardResult br = [&] {
            try {
                return backward(model, params, adv, LossKind::cross_entropy, target, false);
            } catch (const ModelError& e) {
                throw AttackError(it, e.what());
            }
        }();
        if (!br.input_grad.all_finite()) throw AttackError(it, "non-finite input gradient");
        auto logits = br.output.item(0);
        const int pred = argmax(logits);
        const float margin = margin_of(logits, config.target);
        if (it == 0) {
            r.original_prediction = pred;
            r.source_correct = pred == source;
        }
        double l2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) l2 += static_cast<double>(delta[i]) * delta[i];
        l2 = std::sqrt(l2);
        const bool success = pred == config.target;
        const bool better = !have_best || (success && !best_success) ||
                            (success && best_success && l2 < best_l2) ||
                            (!success && !best_success && margin > best_margin);
        if (better) {
            have_best = true;
            best_success = success;
            best_l2 = l2;
            best_margin = margin;
            best = adv;
            best_pred = pred;
            r.best_iteration = it;
        }
        r.iterations_run = it + 1;
        if (success && margin >= config.margin) break;
        const auto g = br.input_grad.data();
        for (std::size_t i = 0; i < n; ++i) {
            const float grad = g[i] + 2.0f * config.l2_weight * delta[i];
            const float s = grad > 0.0f ? 1.0f : (grad < 0.0f ? -1.0f : 0.0f);
            float d = std::clamp(delta[i] - config.step * s, -config.linf_bound, config.linf_bound);
            d = std::clamp(x[i] + d, 0.0f, 1.0f) - x[i];
            delta[i] = d;
        }
    }
    r.success = best_success;
    r.adversarial_prediction = best_pred;
    r.target_margin = best_margin;
    r.adversarial = best.reshaped(item);
    r.perturbation = Tensor(item);
    double l2 = 0.0, linf = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const float d = r.adversarial[i] - x[i];
        r.perturbation[i] = d;
        l2 += static_cast<double>(d) * d;
        linf = std::max(linf, static_cast<double>(std::abs(d)));
    }
    r.l2 = std::sqrt(l2);
    r.linf = linf;
    return r;
}

std::vector<UnitDelta> unit_delta_report(const ModelSpec& model, const ParameterStore& params, const Tensor& original,
                                         const Tensor& adversarial, const std::string& layer,
                                         std::span<const int> units, int resolution)
{
    const Shape item = model.input_shape;
    Shape two{2};
    two.insert(two.end(), item.begin(), item.end());
    Tensor pair(two);
    std::copy(original.storage().begin(), original.storage().end(), pair.storage().begin());
    std::copy(adversarial.storage().begin(), adversarial.storage().end(),
              pair.storage().begin() + static_cast<std::ptrdiff_t>(original.size()));
    ForwardOptions opts;
    opts.stop_after = layer;
    const Tensor act = forward(model, params, pair, opts).output;
    const Shape s = model.tap_shape(layer);
    if (s.size() != 3) throw std::invalid_argument("unit_delta_report needs a spatial layer");
    const int h = s[1], w = s[2];
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<float> up0(static_cast<std::size_t>(resolution) * resolution), up1(up0.size());
    std::vector<UnitDelta> out;
    for (int u : units) {
        if (u < 0 || u >= s[0]) throw std::out_of_range("unit " + std::to_string(u) + " out of range");
        auto a0 = act.item(0).subspan(u * plane, plane);
        auto a1 = act.item(1).subspan(u * plane, plane);
        UnitDelta d;
        d.unit = u;
        d.peak_original = *std::max_element(a0.begin(), a0.end());
        d.peak_adversarial = *std::max_element(a1.begin(), a1.end());
        d.delta_peak = d.peak_adversarial - d.peak_original;
        bilinear_resize(a0, h, w, up0, resolution, resolution);
        bilinear_resize(a1, h, w, up1, resolution, resolution);
        std::size_t inc = 0, dec = 0;
        for (std::size_t p = 1; p < up0.size(); ++p) {
            if (up1[p] - up0[p] > up1[inc] - up0[inc]) inc = p;
            if (up1[p] - up0[p] < up1[dec] - up0[dec]) dec = p;
        }
        d.increase_y = static_cast<int>(inc) / resolution;
        d.increase_x = static_cast<int>(inc) % resolution;
        d.max_increase = up1[inc] - up0[inc];
        d.decrease_y = static_cast<int>(dec) / resolution;
        d.decrease_x = static_cast<int>(dec) % resolution;
        d.max_decrease = up1[dec] - up0[dec];
        out.push_back(d);
    }
    return out;
}

std::vector<int> choose_targets(std::span<const int> sources, int n_classes, std::uint64_t seed)
{
    if (n_classes < 2) throw std::invalid_argument("choose_targets needs at least two classes");
    std::vector<int> out;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        const int offset = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(n_classes - 1));
        out.push_back((sources[i] + offset) % n_classes);
    }
    return out;
}

std::vector<RankBucket> default_rank_buckets()
{
    return {{"top-4", 0, 4}, {"5-20", 4, 20}, {"rest", 20, -1}};
}

nlohmann::json ImportanceDeltaSummary::to_json() const
{
    auto one = [](const BucketDelta& b) {
        return nlohmann::json{{"name", b.name}, {"interval", b.interval.to_json()}, {"attacks", b.per_attack.size()}};
    };
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : buckets) arr.push_back(one(b));
    return {{"buckets", arr}, {"random", one(random)}, {"top_minus_random", one(top_minus_random)}};
}

ImportanceDeltaSummary aggregate_importance_delta(std::span<const AttackResult> attacks,
                                                  const ImportanceTable& importance,
                                                  std::span<const RankBucket> buckets, int random_units,
                                                  double level, std::uint64_t seed)
{
    const int U = importance.units;
    ImportanceDeltaSummary s;
    for (const auto& b : buckets) s.buckets.push_back({b.name, {}, {}});
    s.random.name = "random-" + std::to_string(random_units);
    s.top_minus_random.name = s.buckets.empty() ? "none" : s.buckets.front().name + " minus " + s.random.name;

    for (std::size_t a = 0; a < attacks.size(); ++a) {
        const AttackResult& r = attacks[a];
        std::vector<double> abs_delta(U, std::numeric_limits<double>::quiet_NaN());
        for (const auto& d : r.unit_deltas)
            if (d.unit >= 0 && d.unit < U) abs_delta[d.unit] = std::abs(static_cast<double>(d.delta_peak));
        for (double v : abs_delta)
            if (std::isnan(v)) throw std::invalid_argument("attack lacks unit deltas for every unit of the layer");
        std::vector<int> best_rank(U, U);
        for (int c : {r.source, r.target}) {
            const auto order = importance.ranked(c);
            for (int k = 0; k < U; ++k) best_rank[order[k]] = std::min(best_rank[order[k]], k);
        }
        for (std::size_t b = 0; b < buckets.size(); ++b) {
            double sum = 0.0;
            int count = 0;
            for (int u = 0; u < U; ++u) {
                const int rk = best_rank[u];
                if (rk >= buckets[b].first_rank && (buckets[b].end_rank < 0 || rk < buckets[b].end_rank)) {
                    sum += abs_delta[u];
                    ++count;
                }
            }
            if (count > 0) s.buckets[b].per_attack.push_back(sum / count);
        }
        std::vector<int> all(U);
        std::iota(all.begin(), all.end(), 0);
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(a)));
        const int take = std::min(random_units, U);
        for (int k = 0; k < take; ++k) std::swap(all[k], all[k + static_cast<int>(rng() % static_cast<std::uint64_t>(U - k))]);
        double rs = 0.0;
        for (int k = 0; k < take; ++k) rs += abs_delta[all[k]];
        const double rnd = take > 0 ? rs / take : 0.0;
        s.random.per_attack.push_back(rnd);
        if (!s.buckets.empty() && s.buckets.front().per_attack.size() == a + 1)
            s.top_minus_random.per_attack.push_back(s.buckets.front().per_attack.back() - rnd);
    }
    std::uint64_t k = 0;
    for (auto& b : s.buckets) b.interval = bootstrap_mean_ci(b.per_attack, level, derive_seed(seed, "bucket" + std::to_string(k++)));
    s.random.interval = bootstrap_mean_ci(s.random.per_attack, level, derive_seed(seed, "random"));
    s.top_minus_random.interval = bootstrap_mean_ci(s.top_minus_random.per_attack, level, derive_seed(seed, "difference"));
    return s;
}

} // namespace unitscope
