#include "unitscope/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace unitscope {

double mean_of(std::span<const double> v)
{
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double quantile(std::vector<double> values, double q)
{
    if (values.empty()) throw std::invalid_argument("quantile of an empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    if (i + 1 >= values.size()) return values.back();
    return values[i] + (pos - static_cast<double>(i)) * (values[i + 1] - values[i]);
}

Interval bootstrap_mean_ci(std::span<const double> values, double level, std::uint64_t seed, int resamples)
{
    Interval r;
    r.mean = mean_of(values);
    if (values.size() < 2) {
        r.lo = r.hi = r.mean;
        return r;
    }
    std::mt19937_64 rng(seed);
    const std::size_t n = values.size();
    std::vector<double> means(static_cast<std::size_t>(resamples));
    for (auto& m : means) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += values[rng() % n];
        m = s / static_cast<double>(n);
    }
    const double tail = (1.0 - level) / 2.0;
    r.lo = quantile(means, tail);
    r.hi = quantile(std::move(means), 1.0 - tail);
    return r;
}

} // namespace unitscope
