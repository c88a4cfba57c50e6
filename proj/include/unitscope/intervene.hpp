#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unitscope/dissect.hpp"
#include "unitscope/model.hpp"
#include "unitscope/nn.hpp"
#include "unitscope/tensor.hpp"

namespace unitscope {

enum class InterventionMode { zero, force, force_masked };
std::string to_string(InterventionMode m);
InterventionMode intervention_mode_from_string(const std::string& s);

struct InterventionTarget {
    std::string layer;
    int unit = 0;
    InterventionMode mode = InterventionMode::zero;
    float value = 0.0f;
    /// force_masked only: one byte per featuremap cell, nonzero = forced.
    std::vector<std::uint8_t> mask;
    /// force_masked only, optional: per-cell values overriding `value`, one per featuremap cell.
    std::vector<float> cell_values;
};

struct InterventionSpec {
    std::vector<InterventionTarget> targets;

    bool empty() const noexcept { return targets.empty(); }
    /// Throws std::invalid_argument naming the first invalid target.
    void validate(const ModelSpec& model) const;

    static InterventionSpec zero(const std::string& layer, std::span<const int> units);
    static InterventionSpec force(const std::string& layer, std::span<const int> units, float value);
    /// Every unit forced inside `mask` to its own value.
    static InterventionSpec force_masked(const std::string& layer, std::span<const int> units,
                                         std::span<const float> values, std::vector<std::uint8_t> mask);
    /// Concatenation; the targets must stay disjoint.
    InterventionSpec operator+(const InterventionSpec& other) const;

    nlohmann::json to_json() const;
    static InterventionSpec from_json(const nlohmann::json& j);
};

/// Apply the targets of one layer to a single example's activation (C, ...) in place.
void apply_intervention(const InterventionSpec& spec, const std::string& layer, std::span<float> activation,
                        int channels);

/// Forward options with the spec installed as a hook; `base` may set record / resume_after / stop_after.
/// When resuming after a targeted layer, that layer's targets are applied to the input.
ForwardResult run_with_intervention(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                                    const InterventionSpec& spec, const std::set<std::string>& record_layers = {});
ForwardResult run_with_intervention(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                                    const InterventionSpec& spec, const ForwardOptions& base);

/// Inputs with class labels.
struct LabeledSplit {
    InputSource inputs;
    std::vector<int> labels;
    std::string name;
};
LabeledSplit labeled(const SceneSet& scenes, std::string name);

/// Predicted class per input under an intervention.
std::vector<int> predict_with_intervention(const ModelSpec& model, const ParameterStore& params,
                                           const InputSource& inputs, const InterventionSpec& spec,
                                           const ForwardOptions& base = {}, int batch_size = 64);

/// Positives plus an equal number of seeded negatives (all negatives when there are fewer).
std::vector<int> balanced_indices(std::span<const int> labels, int class_id, std::uint64_t seed);

/// Mean of positive and negative group accuracies, predicting "positive" iff the argmax is class_id.
double balanced_single_class_accuracy(std::span<const int> predictions, std::span<const int> labels, int class_id,
                                      std::uint64_t seed);
double balanced_single_class_accuracy(const ModelSpec& model, const ParameterStore& params, int class_id,
                                      const LabeledSplit& split, const InterventionSpec& spec, std::uint64_t seed);

double all_class_accuracy(std::span<const int> predictions, std::span<const int> labels);

struct ImportanceTable {
    std::string layer;
    std::string split;
    std::uint64_t seed = 0;
    int n_classes = 0;
    int units = 0;
    std::vector<double> baseline;
    /// delta[class * units + unit] = baseline - accuracy with the unit zeroed.
    std::vector<double> delta;

    double at(int class_id, int unit) const { return delta[static_cast<std::size_t>(class_id) * units + unit]; }
    /// Units by descending delta, ties by unit index.
    std::vector<int> ranked(int class_id) const;
    nlohmann::json to_json() const;
    static ImportanceTable from_json(const nlohmann::json& j);
    std::string to_csv() const;
};

/// Layer activations of every input, (N, C, h, w): lets ablations resume after `layer`.
Tensor layer_activations(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                         const InputSource& inputs, int batch_size = 64);

/// Single-unit zero ablation deltas for every class. `cached` (from layer_activations on the same
/// split) skips recomputing everything up to `layer`.
ImportanceTable rank_unit_importance(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                                     const LabeledSplit& split, int n_classes, std::uint64_t seed,
                                     const Tensor* cached = nullptr);
/// One class; equal to the matching row of the full table.
std::vector<double> rank_unit_importance(const ModelSpec& model, const ParameterStore& params,
                                         const std::string& layer, int class_id, const LabeledSplit& split,
                                         std::uint64_t seed, const Tensor* cached = nullptr);

struct CurvePoint {
    int k = 0;
    double accuracy_removed = 0.0;
    double accuracy_kept = 0.0;
    double all_class_removed = 0.0;
    double all_class_kept = 0.0;
};

struct AblationCurve {
    std::string layer;
    int class_id = 0;
    std::vector<int> ranked_units;
    std::vector<CurvePoint> points;

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

/// For each k: zero the top-k ranked units ("removed") and zero all but the top-k ("kept").
AblationCurve ablation_curve(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                             int class_id, std::span<const int> ranked_units, std::span<const int> set_sizes,
                             const LabeledSplit& split, std::uint64_t seed, const Tensor* cached = nullptr);

struct CorrelationTable {
    int units = 0;
    int n_classes = 0;
    std::vector<double> r;
    /// Units whose peak activation has zero variance (their row is 0 by convention).
    std::vector<int> constant_units;

    double at(int unit, int class_id) const { return r[static_cast<std::size_t>(unit) * n_classes + class_id]; }
    nlohmann::json to_json() const;
};

/// Pearson correlation of peak activation (rows of `peaks`, (N, units)) with each class indicator.
CorrelationTable unit_class_correlation(const Tensor& peaks, std::span<const int> labels, int n_classes);
CorrelationTable unit_class_correlation(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                                        const LabeledSplit& split, int n_classes);

// Generator probes.

/// Full-covariance Gaussian over flattened latent codes.
class LatentGaussian {
public:
    LatentGaussian() = default;
    /// codes: (N, ...) encoder outputs.
    static LatentGaussian fit(const Tensor& codes);

    Tensor sample(int n, std::uint64_t seed) const;
    const Shape& code_shape() const noexcept { return shape_; }
    const std::vector<double>& mean() const noexcept { return mean_; }
    nlohmann::json to_json() const;
    static LatentGaussian from_json(const nlohmann::json& j);

private:
    Shape shape_;
    std::vector<double> mean_;
    /// Lower Cholesky factor, row-major d x d.
    std::vector<double> chol_;
};

struct Segmenter {
    ModelSpec model;
    ParameterStore params;
};

struct GeneratorModel {
    ModelSpec decoder;
    ParameterStore params;
};

/// Decoder outputs under `spec`, clamped to [0, 1].
Tensor generate(const GeneratorModel& gen, const Tensor& latents, const InterventionSpec& spec = {},
                int batch_size = 32);

/// Pixels per latent labeled `concept_id` by the segmenter on the generated images.
std::vector<std::uint64_t> concept_pixels(const GeneratorModel& gen, const Segmenter& seg, const Tensor& latents,
                                          int concept_id, const InterventionSpec& spec = {}, int batch_size = 32);
std::uint64_t concept_pixel_count(const GeneratorModel& gen, const Segmenter& seg, const Tensor& latents,
                                  int concept_id, const InterventionSpec& spec = {});

struct RemovalResult {
    int concept_id = 0;
    std::string layer;
    std::vector<int> units;
    int samples = 0;
    std::uint64_t baseline_pixels = 0;
    std::uint64_t ablated_pixels = 0;
    double reduction = 0.0;
    /// No concept pixels in the baseline; reduction reported as 0.
    bool zero_baseline = false;
    /// First few (before, after) images, (3, H, W) each.
    std::vector<std::pair<Tensor, Tensor>> pairs;

    nlohmann::json to_json() const;
};

RemovalResult measure_unit_removal(const GeneratorModel& gen, const Segmenter& seg, const std::string& layer,
                                   int concept_id, std::span<const int> units, const Tensor& latents,
                                   int keep_pairs = 8);
/// Zero the n_units with the highest IoU for the concept.
RemovalResult measure_concept_removal(const GeneratorModel& gen, const Segmenter& seg, const IoUTable& iou,
                                      int concept_id, int n_units, const Tensor& latents, int keep_pairs = 8);

struct ForcedImages {
    Tensor baseline;
    Tensor edited;
};

/// Force every unit to its own threshold inside the featuremap mask.
ForcedImages force_units_at(const GeneratorModel& gen, const Tensor& latent, const std::string& layer,
                            std::span<const int> units, const std::vector<std::uint8_t>& mask,
                            const LayerThresholds& thresholds);

struct ContextMap {
    std::string layer;
    int concept_id = 0;
    std::vector<int> units;
    int height = 0;
    int width = 0;
    int samples = 0;
    double success_pixels = 0.0;
    /// Mean newly synthesized pixels per location.
    std::vector<double> mean_new_pixels;
    /// Fraction of samples with at least success_pixels new pixels.
    std::vector<double> success_rate;
    /// Per sample, per location new pixels (samples x locations).
    std::vector<double> per_sample;

    nlohmann::json to_json() const;
    /// Population variance of mean_new_pixels across locations.
    double map_variance() const;
};

struct ContextMapConfig {
    /// Side of the forced square, in featuremap cells, anchored at each location.
    int patch = 1;
    double success_pixels = 20.0;
    int batch_size = 32;
};

ContextMap context_map(const GeneratorModel& gen, const Segmenter& seg, const std::string& layer,
                       std::span<const int> units, int concept_id, const LayerThresholds& thresholds,
                       const Tensor& latents, const ContextMapConfig& config = {});

/// Map variances with each sample's locations independently permuted.
std::vector<double> location_permutation_null(const ContextMap& map, int permutations, std::uint64_t seed);

} // namespace unitscope
