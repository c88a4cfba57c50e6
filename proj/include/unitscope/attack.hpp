#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "unitscope/intervene.hpp"
#include "unitscope/model.hpp"
#include "unitscope/stats.hpp"
#include "unitscope/tensor.hpp"

namespace unitscope {

struct AttackConfig {
    int target = 0;
    float step = 1.0f / 255.0f;
    int iterations = 300;
    float linf_bound = 8.0f / 255.0f;
    float l2_weight = 0.1f;
    /// Target logit must beat every other logit by this much to stop early.
    float margin = 0.5f;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
};

class AttackError : public std::runtime_error {
public:
    AttackError(int iteration, const std::string& what)
        : std::runtime_error("attack aborted at iteration " + std::to_string(iteration) + ": " + what),
          iteration_(iteration) {}
    int iteration() const noexcept { return iteration_; }

private:
    int iteration_;
};

struct UnitDelta {
    int unit = 0;
    float peak_original = 0.0f;
    float peak_adversarial = 0.0f;
    float delta_peak = 0.0f;
    /// Pixel (upsampled resolution) of the largest increase and decrease of the activation.
    int increase_y = 0, increase_x = 0;
    float max_increase = 0.0f;
    int decrease_y = 0, decrease_x = 0;
    float max_decrease = 0.0f;
};

struct AttackResult {
    Tensor adversarial;
    Tensor perturbation;
    bool success = false;
    /// The original image was classified as its source class.
    bool source_correct = false;
    int source = 0;
    int target = 0;
    int original_prediction = 0;
    int adversarial_prediction = 0;
    /// Target logit minus the best other logit at the kept iterate.
    float target_margin = 0.0f;
    double l2 = 0.0;
    double linf = 0.0;
    int iterations_run = 0;
    int best_iteration = 0;
    std::vector<UnitDelta> unit_deltas;

    nlohmann::json to_json() const;
};

/// Signed-gradient descent on CE(target) + l2_weight * |delta|^2, projected to the L-inf ball and [0, 1].
/// Keeps the best iterate: successful with the smallest L2, else the largest target margin.
AttackResult targeted_attack(const ModelSpec& model, const ParameterStore& params, const Tensor& image, int source,
                             const AttackConfig& config);

/// Per-unit change of peak activation between two images at `layer`.
std::vector<UnitDelta> unit_delta_report(const ModelSpec& model, const ParameterStore& params, const Tensor& original,
                                         const Tensor& adversarial, const std::string& layer,
                                         std::span<const int> units, int resolution = 64);

/// Seeded target class different from each source.
std::vector<int> choose_targets(std::span<const int> sources, int n_classes, std::uint64_t seed);

struct BucketDelta {
    std::string name;
    Interval interval;
    std::vector<double> per_attack;
};

struct ImportanceDeltaSummary {
    std::vector<BucketDelta> buckets;
    /// Same count of random units as the top bucket has on average, per attack.
    BucketDelta random;
    /// Per attack: top bucket mean |delta| minus random-unit mean |delta|.
    BucketDelta top_minus_random;

    nlohmann::json to_json() const;
};

struct RankBucket {
    std::string name;
    int first_rank = 0;
    /// Exclusive; -1 for no limit.
    int end_rank = -1;
};
std::vector<RankBucket> default_rank_buckets();

/// Units are bucketed by their best rank across the attack's source and target classes; attacks
/// must carry unit deltas for every unit of the importance table's layer.
ImportanceDeltaSummary aggregate_importance_delta(std::span<const AttackResult> attacks,
                                                  const ImportanceTable& importance,
                                                  std::span<const RankBucket> buckets, int random_units,
                                                  double level, std::uint64_t seed);

} // namespace unitscope
