#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

namespace unitscope {

struct Interval {
    double mean = 0.0;
    double lo = 0.0;
    double hi = 0.0;

    bool excludes_zero() const { return lo > 0.0 || hi < 0.0; }
    nlohmann::json to_json() const { return {{"mean", mean}, {"lo", lo}, {"hi", hi}}; }
};

double mean_of(std::span<const double> v);

/// Percentile bootstrap interval for the mean.
Interval bootstrap_mean_ci(std::span<const double> values, double level, std::uint64_t seed, int resamples = 4000);

/// Linear-interpolated quantile of a sample, q in [0, 1].
double quantile(std::vector<double> values, double q);

} // namespace unitscope
