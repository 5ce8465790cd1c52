#include "nclens/stats.hpp"

#include "nclens/errors.hpp"

#include <sstream>

namespace nclens {

double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<double> default_bin_edges() { return {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}; }

void validate_bin_edges(std::span<const double> edges) {
    if (edges.size() < 2) throw ArgumentError("need at least two bin edges");
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (!(edges[i] > edges[i - 1])) throw ArgumentError("bin edges must be strictly ascending");
    }
    if (edges.front() > 0.0 || edges.back() < 1.0) throw ArgumentError("bin edges must cover [0, 1]");
}

std::size_t bin_index(double x, std::span<const double> edges) {
    if (x < edges.front() || x > edges.back() || !std::isfinite(x)) {
        throw RangeError("value outside bin range");
    }
    for (std::size_t b = 0; b + 2 < edges.size(); ++b) {
        if (x < edges[b + 1]) return b;
    }
    return edges.size() - 2;
}

double logistic(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double log_likelihood(std::span<const GroupedObservation> data, double b0, double b1) {
    CompensatedSum ll;
    for (const auto& g : data) {
        const double eta = b0 + b1 * g.x;
        const auto k = static_cast<double>(g.successes);
        const auto f = static_cast<double>(g.trials - g.successes);
        ll.add(-k * softplus(-eta) - f * softplus(eta));
    }
    return ll.value();
}

struct NewtonResult {
    double b0 = 0.0;
    double b1 = 0.0;
    double ll = 0.0;
    std::size_t iterations = 0;
};

NewtonResult newton(std::span<const GroupedObservation> data, const LogisticOptions& opt) {
    std::size_t total = 0, successes = 0;
    double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
    double max_x_fail = -std::numeric_limits<double>::infinity(), min_x_fail = std::numeric_limits<double>::infinity();
    double max_x_succ = max_x_fail, min_x_succ = min_x_fail;
    for (const auto& g : data) {
        if (g.successes > g.trials) throw ArgumentError("successes exceed trials");
        if (!std::isfinite(g.x)) throw NumericError("non-finite logistic predictor");
        if (g.trials == 0) continue;
        total += g.trials;
        successes += g.successes;
        x_min = std::min(x_min, g.x);
        x_max = std::max(x_max, g.x);
        if (g.successes > 0) {
            min_x_succ = std::min(min_x_succ, g.x);
            max_x_succ = std::max(max_x_succ, g.x);
        }
        if (g.successes < g.trials) {
            min_x_fail = std::min(min_x_fail, g.x);
            max_x_fail = std::max(max_x_fail, g.x);
        }
    }
    if (total < 2) throw DegenerateFitError("logistic fit needs at least two observations");
    if (successes == 0 || successes == total) {
        throw DegenerateFitError("logistic fit needs both outcome classes (got " + std::to_string(successes) +
                                 " positives of " + std::to_string(total) + ")");
    }
    if (x_min == x_max) throw DegenerateFitError("logistic predictor has no variance");
    if (max_x_fail < min_x_succ || max_x_succ < min_x_fail) {
        std::ostringstream msg;
        msg << "perfect separation: negatives span [" << min_x_fail << ", " << max_x_fail
            << "], positives span [" << min_x_succ << ", " << max_x_succ << "]";
        throw ConvergenceError(msg.str());
    }

    const double n = static_cast<double>(total);
    NewtonResult r;
    r.b0 = std::log(static_cast<double>(successes) / static_cast<double>(total - successes));
    r.ll = log_likelihood(data, r.b0, r.b1);
    for (std::size_t it = 1; it <= opt.max_iterations; ++it) {
        double g0 = 0, g1 = 0, h00 = 0, h01 = 0, h11 = 0;
        for (const auto& g : data) {
            const double p = logistic(r.b0 + r.b1 * g.x);
            const double resid = static_cast<double>(g.successes) - static_cast<double>(g.trials) * p;
            const double w = static_cast<double>(g.trials) * p * (1.0 - p);
            g0 += resid;
            g1 += resid * g.x;
            h00 += w;
            h01 += w * g.x;
            h11 += w * g.x * g.x;
        }
        r.iterations = it;
        if (std::hypot(g0, g1) / n < opt.gradient_tolerance) return r;
        const double det = h00 * h11 - h01 * h01;
        if (!(det > 0.0)) throw ConvergenceError("singular information matrix in logistic fit");
        const double s0 = (h11 * g0 - h01 * g1) / det;
        const double s1 = (h00 * g1 - h01 * g0) / det;
        double t = 1.0;
        for (int halvings = 0; halvings < 60; ++halvings, t *= 0.5) {
            const double ll = log_likelihood(data, r.b0 + t * s0, r.b1 + t * s1);
            if (ll >= r.ll - 1e-12 * std::abs(r.ll)) {
                r.b0 += t * s0;
                r.b1 += t * s1;
                r.ll = ll;
                break;
            }
        }
    }
    std::ostringstream msg;
    msg << "logistic fit did not converge in " << opt.max_iterations << " iterations (beta0=" << r.b0
        << ", beta1=" << r.b1 << ")";
    throw ConvergenceError(msg.str());
}

} // namespace

double binned_r2(std::span<const GroupedObservation> data, double beta0, double beta1,
                 std::span<const double> edges) {
    validate_bin_edges(edges);
    const std::size_t nb = edges.size() - 1;
    std::vector<double> trials(nb, 0.0), observed(nb, 0.0), predicted(nb, 0.0);
    double total_trials = 0.0, total_successes = 0.0;
    for (const auto& g : data) {
        const std::size_t b = bin_index(g.x, edges);
        const auto n = static_cast<double>(g.trials);
        trials[b] += n;
        observed[b] += static_cast<double>(g.successes);
        predicted[b] += n * logistic(beta0 + beta1 * g.x);
        total_trials += n;
        total_successes += static_cast<double>(g.successes);
    }
    const double mean = total_successes / total_trials;
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
        if (trials[b] == 0.0) continue;
        const double obs = observed[b] / trials[b];
        const double pred = predicted[b] / trials[b];
        ss_res += trials[b] * (obs - pred) * (obs - pred);
        ss_tot += trials[b] * (obs - mean) * (obs - mean);
    }
    if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
    return 1.0 - ss_res / ss_tot;
}

LogisticFit fit_logistic(std::span<const GroupedObservation> data, const LogisticOptions& options) {
    const NewtonResult r = newton(data, options);
    LogisticFit fit;
    fit.beta0 = r.b0;
    fit.beta1 = r.b1;
    fit.iterations = r.iterations;
    fit.converged = true;
    fit.log_likelihood = r.ll;
    for (const auto& g : data) fit.n += g.trials;
    fit.r2_binned = binned_r2(data, r.b0, r.b1, options.bin_edges);

    if (options.bootstrap_ci) {
        const BootstrapParams& bp = options.bootstrap;
        std::vector<double> b0s(bp.n_resamples), b1s(bp.n_resamples);
        LogisticOptions inner = options;
        inner.bootstrap_ci = false;
        parallel_for(bp.n_resamples, bp.workers, [&](std::size_t rep) {
            CounterRng rng(bp.seed, {0xB0075712ULL, rep});
            std::vector<GroupedObservation> sample;
            sample.reserve(data.size());
            for (std::size_t i = 0; i < data.size(); ++i) sample.push_back(data[rng.below(data.size())]);
            try {
                const NewtonResult rr = newton(sample, inner);
                b0s[rep] = rr.b0;
                b1s[rep] = rr.b1;
            } catch (const Error&) {
                b0s[rep] = b1s[rep] = std::numeric_limits<double>::quiet_NaN();
            }
        });
        std::vector<double> ok0, ok1;
        for (std::size_t i = 0; i < b0s.size(); ++i) {
            if (std::isfinite(b0s[i]) && std::isfinite(b1s[i])) {
                ok0.push_back(b0s[i]);
                ok1.push_back(b1s[i]);
            } else {
                ++fit.failed_resamples;
            }
        }
        std::sort(ok0.begin(), ok0.end());
        std::sort(ok1.begin(), ok1.end());
        const double alpha = (1.0 - bp.level) / 2.0;
        fit.ci_beta0 = {quantile_sorted(ok0, alpha), quantile_sorted(ok0, 1.0 - alpha)};
        fit.ci_beta1 = {quantile_sorted(ok1, alpha), quantile_sorted(ok1, 1.0 - alpha)};
    } else {
        fit.ci_beta0 = {r.b0, r.b0};
        fit.ci_beta1 = {r.b1, r.b1};
    }
    return fit;
}

LogisticFit fit_logistic(std::span<const BinaryObservation> data, const LogisticOptions& options) {
    std::vector<GroupedObservation> grouped;
    grouped.reserve(data.size());
    for (const auto& o : data) grouped.push_back({o.x, o.y ? 1u : 0u, 1});
    return fit_logistic(std::span<const GroupedObservation>(grouped), options);
}

std::string to_string(FailureMode m) {
    switch (m) {
    case FailureMode::success: return "success";
    case FailureMode::priming: return "priming";
    case FailureMode::override_failure: return "override";
    case FailureMode::unclassified: return "unclassified";
    }
    return "unclassified";
}

FailureLabel classify_failure(bool violated, const SuppressionRecord& sup, const AttentionMetrics& am,
                              const LayerTrace& lt, LayerRange window, const ClassifierParams& params) {
    FailureLabel out;
    out.evidence.pi = am.pi;
    out.evidence.delta_p = sup.delta_p;
    const std::size_t L = lt.n_layers();
    for (std::size_t l = std::max<std::size_t>(window.first, 1); l <= std::min(window.last, L); ++l) {
        out.evidence.ffn_window_sum += lt.ffn_contrib[l];
    }
    if (!violated) {
        out.label = FailureMode::success;
    } else if (am.pi > params.priming_pi || sup.delta_p < 0.0) {
        out.label = FailureMode::priming;
    } else if (sup.delta_p > params.override_delta_p && out.evidence.ffn_window_sum > params.tau) {
        out.label = FailureMode::override_failure;
    } else {
        out.label = FailureMode::unclassified;
    }
    return out;
}

bool is_failure(double violation_rate, double threshold) { return violation_rate >= threshold; }

} // namespace nclens
