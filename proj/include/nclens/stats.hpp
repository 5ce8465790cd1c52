#pragma once

#include "nclens/lens.hpp"
#include "nclens/parallel.hpp"
#include "nclens/pressure.hpp"
#include "nclens/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace nclens {

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    bool contains(double x) const { return lo <= x && x <= hi; }
};

struct BootstrapParams {
    std::size_t n_resamples = 1000;
    double level = 0.95;
    std::uint64_t seed = 42;
    unsigned workers = 0;
};

// Linear-interpolated quantile of an ascending sample (q in [0, 1]).
double quantile_sorted(std::span<const double> sorted, double q);

// Percentile bootstrap: resample records with replacement, evaluate the
// statistic on each replicate. Replicate r draws from the counter stream
// (seed, r), so intervals are identical regardless of worker count.
// Non-finite replicate values are dropped.
template <class T, class Stat>
Interval bootstrap_ci(std::span<const T> records, Stat&& statistic, const BootstrapParams& p) {
    if (records.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    std::vector<double> stats(p.n_resamples);
    parallel_for(p.n_resamples, p.workers, [&](std::size_t r) {
        CounterRng rng(p.seed, {0xB0075712ULL, r});
        std::vector<T> sample;
        sample.reserve(records.size());
        for (std::size_t i = 0; i < records.size(); ++i) sample.push_back(records[rng.below(records.size())]);
        stats[r] = statistic(std::span<const T>(sample));
    });
    std::erase_if(stats, [](double x) { return !std::isfinite(x); });
    if (stats.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    std::sort(stats.begin(), stats.end());
    const double alpha = (1.0 - p.level) / 2.0;
    return {quantile_sorted(stats, alpha), quantile_sorted(stats, 1.0 - alpha)};
}

// Bins [e0,e1), [e1,e2), ..., [e_{n-1}, e_n]; the last bin is closed.
std::vector<double> default_bin_edges();
void validate_bin_edges(std::span<const double> edges);
std::size_t bin_index(double x, std::span<const double> edges);

double logistic(double z);

struct BinaryObservation {
    double x = 0.0;
    bool y = false;
};

// Binomial counts sharing one predictor value (one prompt's samples).
struct GroupedObservation {
    double x = 0.0;
    std::size_t successes = 0;
    std::size_t trials = 0;
};

struct LogisticFit {
    double beta0 = 0.0;
    double beta1 = 0.0;
    Interval ci_beta0;
    Interval ci_beta1;
    double r2_binned = 0.0;
    std::size_t n = 0; // total trials
    std::size_t iterations = 0;
    bool converged = false;
    double log_likelihood = 0.0;
    std::size_t failed_resamples = 0;
};

struct LogisticOptions {
    std::vector<double> bin_edges = default_bin_edges();
    BootstrapParams bootstrap;
    bool bootstrap_ci = true;
    std::size_t max_iterations = 100;
    double gradient_tolerance = 1e-8;
};

// Maximum likelihood via damped Newton. Convergence is declared when the norm
// of the per-trial mean gradient drops below the tolerance. Bootstrap
// intervals resample groups (prompts).
// Throws DegenerateFitError for single-class data, ConvergenceError on
// separation or when the iteration cap is hit.
LogisticFit fit_logistic(std::span<const GroupedObservation> data, const LogisticOptions& options = {});
LogisticFit fit_logistic(std::span<const BinaryObservation> data, const LogisticOptions& options = {});

// 1 - SSres/SStot of observed vs predicted per-bin rates, weighted by trials.
double binned_r2(std::span<const GroupedObservation> data, double beta0, double beta1,
                 std::span<const double> edges);

enum class FailureMode { success, priming, override_failure, unclassified };

std::string to_string(FailureMode m);

struct FailureEvidence {
    double pi = 0.0;
    double delta_p = 0.0;
    double ffn_window_sum = 0.0;
};

struct FailureLabel {
    FailureMode label = FailureMode::success;
    FailureEvidence evidence;
};

struct ClassifierParams {
    double priming_pi = 0.0;      // PI above this => priming
    double override_delta_p = 0.1; // delta P above this ...
    double tau = 0.2;             // ... and windowed FFN sum above tau => override
};

// Success when not violated; otherwise priming (PI > 0 or delta P < 0) is
// checked before override (delta P > 0.1 and windowed FFN sum > tau); the
// rest are unclassified.
FailureLabel classify_failure(bool violated, const SuppressionRecord& sup, const AttentionMetrics& am,
                              const LayerTrace& lt, LayerRange window, const ClassifierParams& params = {});

// Prompt-level outcome: failure when the sample violation rate reaches the threshold.
bool is_failure(double violation_rate, double threshold);

} // namespace nclens
