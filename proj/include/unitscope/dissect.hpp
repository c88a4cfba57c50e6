#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unitscope/model.hpp"
#include "unitscope/scenegen.hpp"
#include "unitscope/tensor.hpp"
#include "unitscope/train.hpp"

namespace unitscope {

/// Fixed-capacity uniform sample of a stream (reservoir sampling with geometric skips, so values
/// that will not be kept need not be computed).
class QuantileReservoir {
public:
    static constexpr std::size_t kDefaultCapacity = 65536;

    explicit QuantileReservoir(std::size_t capacity = kDefaultCapacity, std::uint64_t seed = 0);

    void add(float v);
    /// Offer `count` stream items; value_at(i) is called only for the items that are kept.
    template <typename F>
    void add_stream(std::uint64_t count, F&& value_at);

    /// Replace this reservoir by a uniform sample of the union of both streams.
    void merge(const QuantileReservoir& other);

    /// Largest sample value t with at least ceil(q * n) of the n samples strictly above... when
    /// values are distinct; i.e. sorted[n - 1 - ceil(q * n)].
    float threshold(double q) const;

    std::size_t capacity() const noexcept { return capacity_; }
    std::uint64_t seen() const noexcept { return seen_; }
    const std::vector<float>& samples() const noexcept { return samples_; }

private:
    void advance_skip();

    std::size_t capacity_;
    std::uint64_t seen_ = 0;
    std::uint64_t next_ = 0;
    double w_ = 0.0;
    std::vector<float> samples_;
    std::mt19937_64 rng_;
};

template <typename F>
void QuantileReservoir::add_stream(std::uint64_t count, F&& value_at)
{
    std::uint64_t i = 0;
    while (i < count) {
        if (samples_.size() < capacity_) {
            add(value_at(i));
            ++i;
            continue;
        }
        const std::uint64_t take = next_ - seen_;
        if (take >= count - i) {
            seen_ += count - i;
            return;
        }
        i += take;
        seen_ += take;
        add(value_at(i));
        ++i;
    }
}

/// Source of model inputs addressed by index.
struct InputSource {
    int size = 0;
    std::function<Tensor(int begin, int end)> batch;
};
InputSource inputs_of(const SceneSet& scenes);
InputSource inputs_of(const Tensor& batch);

struct DissectConfig {
    double q = 0.01;
    double min_iou = 0.04;
    std::size_t reservoir_capacity = QuantileReservoir::kDefaultCapacity;
    std::uint64_t seed = 0;
    /// Analysis resolution: activations are bilinearly upsampled to this size.
    int resolution = kImageSize;
    int batch_size = 32;
};

struct LayerThresholds {
    std::vector<float> t;
    std::vector<std::uint64_t> samples_seen;
    std::vector<bool> constant;
};

struct ThresholdTable {
    double q = 0.01;
    std::map<std::string, LayerThresholds> layers;

    const LayerThresholds& at(const std::string& layer) const;
    nlohmann::json to_json() const;
    static ThresholdTable from_json(const nlohmann::json& j);
};

/// Per-unit (1 - q) quantile of upsampled activations over every position of every input.
ThresholdTable fit_thresholds(const ModelSpec& model, const ParameterStore& params,
                              const std::vector<std::string>& layers, const InputSource& inputs,
                              const DissectConfig& config);

/// Corner-aligned bilinear upsampling of a (C, h, w) map to (C, out_h, out_w).
Tensor upsample_activation(const Tensor& map, int out_h, int out_w);

/// Intersection and mask counts for units x concepts; merge by addition.
class IoUAccumulator {
public:
    IoUAccumulator() = default;
    IoUAccumulator(int units, int concepts);

    /// One example: `activation` is (units, h, w) at layer resolution, `seg` is at analysis
    /// resolution. Activations are upsampled to the segmentation size and compared against t.
    void add(std::span<const float> activation, int h, int w, std::span<const float> thresholds,
             const SegmentationMap& seg);
    /// Direct form for pre-thresholded masks: unit_masks is units x pixels, labels as in SegmentationMap.
    void add_masks(const std::vector<std::vector<std::uint8_t>>& unit_masks, const SegmentationMap& seg);
    void merge(const IoUAccumulator& other);

    int units() const noexcept { return units_; }
    int concepts() const noexcept { return concepts_; }
    std::uint64_t intersection(int u, int c) const { return inter_[idx(u, c)]; }
    std::uint64_t unit_count(int u) const { return unit_count_[static_cast<std::size_t>(u)]; }
    std::uint64_t concept_count(int c) const { return concept_count_[static_cast<std::size_t>(c)]; }
    std::uint64_t union_count(int u, int c) const { return unit_count(u) + concept_count(c) - intersection(u, c); }
    /// 0 when the union is empty.
    double iou(int u, int c) const;

    friend bool operator==(const IoUAccumulator&, const IoUAccumulator&) = default;

private:
    std::size_t idx(int u, int c) const { return static_cast<std::size_t>(u) * concepts_ + c; }
    int units_ = 0;
    int concepts_ = 0;
    std::vector<std::uint64_t> inter_;
    std::vector<std::uint64_t> unit_count_;
    std::vector<std::uint64_t> concept_count_;
};

struct IoUTable {
    std::string layer;
    std::string catalog_hash;
    int units = 0;
    int concepts = 0;
    std::vector<double> values;

    double at(int u, int c) const { return values[static_cast<std::size_t>(u) * concepts + c]; }
    static IoUTable from(const IoUAccumulator& acc, std::string layer);
    nlohmann::json to_json() const;
    static IoUTable from_json(const nlohmann::json& j);
    std::string to_csv() const;
    /// Units ordered by descending IoU with a concept; ties by unit index.
    std::vector<int> rank_units(int concept_id) const;
};

/// Segmentations of examples [begin, begin + n) given the model outputs for them, (n, ...).
using SegProvider = std::function<std::vector<SegmentationMap>(int begin, const Tensor& outputs)>;

IoUAccumulator accumulate_iou(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                              const ThresholdTable& thresholds, const InputSource& inputs, const SegProvider& seg,
                              const DissectConfig& config, int begin = 0, int end = -1);

/// Ground-truth segmentations from a SceneSet.
IoUTable compute_iou_table(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                           const ThresholdTable& thresholds, const SceneSet& scenes, const DissectConfig& config);

struct UnitLabel {
    int unit = 0;
    /// -1 when unmatched.
    int concept_id = -1;
    double score = 0.0;
    std::optional<ConceptCategory> category;

    bool matched() const { return concept_id >= 0; }
};

/// Argmax per unit with ties to the lower concept id; units under min_iou are unmatched.
std::vector<UnitLabel> label_units(const IoUTable& iou, double min_iou = 0.04,
                                   const ConceptCatalog& catalog = ConceptCatalog::standard());

struct LayerSummary {
    std::string layer;
    std::map<int, int> concept_counts;
    /// Matched units per category.
    std::map<ConceptCategory, int> category_counts;
    /// Distinct matched concepts per category.
    std::map<ConceptCategory, int> distinct_concepts;
    int units = 0;
    int matched = 0;

    nlohmann::json to_json() const;
};

LayerSummary summarize_layer(const std::string& layer, const std::vector<UnitLabel>& labels,
                             const ConceptCatalog& catalog = ConceptCatalog::standard());

/// Peak (spatial max, layer resolution) activation per input and unit: (n_inputs, units).
Tensor peak_activations(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                        const InputSource& inputs, int batch_size = 32);

struct Exemplar {
    int image = 0;
    float peak = 0.0f;
    /// Upsampled activation > threshold at analysis resolution.
    std::vector<std::uint8_t> mask;
};

/// Top-k inputs by peak activation of one unit; ties by input index.
std::vector<Exemplar> top_activating(const ModelSpec& model, const ParameterStore& params, const std::string& layer,
                                     int unit, float threshold, const InputSource& inputs, int k,
                                     int resolution = kImageSize);
/// Same selection from precomputed peaks (one column of peak_activations).
std::vector<int> top_k_by_peak(std::span<const float> peaks, int k);

struct UnitClassifierResult {
    double balanced_accuracy = 0.0;
    double true_positive_rate = 0.0;
    double true_negative_rate = 0.0;
    float threshold = 0.0f;
    std::vector<float> positive_peaks;
    std::vector<float> negative_peaks;

    nlohmann::json to_json() const;
};

/// Predict positive iff peak > threshold.
UnitClassifierResult evaluate_unit_classifier(std::span<const float> positive_peaks,
                                              std::span<const float> negative_peaks, float threshold);

// Reference segmenter.

struct SegmenterConfig {
    OptimizerConfig optimizer;
    /// Background-only scenes added to the training set.
    int background_scenes = 200;
};

struct SegmenterQuality {
    std::map<int, double> object_iou;
    double background_iou = 0.0;
    double mean_object_iou = 0.0;

    nlohmann::json to_json() const;
};

constexpr double kSegmenterQualityFloor = 0.5;

TrainResult train_reference_segmenter(const SceneSet& train_scenes, const SegmenterConfig& config,
                                      const EpochCallback& on_epoch = {});

/// Object labels by argmax, parts and colors derived from them and the image.
std::vector<SegmentationMap> segment_images(const ModelSpec& segmenter, const ParameterStore& params,
                                            const Tensor& images, int batch_size = 32);

SegmenterQuality evaluate_segmenter(const ModelSpec& segmenter, const ParameterStore& params,
                                    const SceneSet& scenes);

/// Throws std::runtime_error when the segmenter is under the quality floor and no override is given.
void require_segmenter_quality(const SegmenterQuality& q, bool override_floor);

} // namespace unitscope
