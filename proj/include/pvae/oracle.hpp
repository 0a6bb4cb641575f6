#pragma once

// Exact Bayesian posterior for the two-candidate toy problem, plus the
// histogram tools used to compare sampled posteriors against it.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pvae/errors.hpp"
#include "pvae/image.hpp"
#include "pvae/projector.hpp"

namespace pvae {

/// Marginal-histogram binning: 21 bins of width 0.1 centered on -0.5, -0.4, ..., 1.5.
struct HistogramBins {
    double first_center = -0.5;
    double width = 0.1;
    int count = 21;

    int index(double v) const {
        const long i = std::lround((v - first_center) / width);
        return static_cast<int>(std::clamp<long>(i, 0, count - 1));
    }
    double center(int i) const { return first_center + width * i; }
    bool operator==(const HistogramBins&) const = default;
};

/// One normalized histogram per pixel.
struct PixelHistograms {
    HistogramBins bins;
    std::vector<std::vector<double>> pixels;
};

struct ToyPosterior {
    std::vector<double> candidate_probs;
    /// per pixel: candidate pixel value -> probability mass
    std::vector<std::map<double, double>> marginals;

    PixelHistograms histograms(const HistogramBins& bins = {}) const {
        PixelHistograms h{bins, {}};
        for (const auto& m : marginals) {
            std::vector<double> hist(static_cast<std::size_t>(bins.count), 0.0);
            for (const auto& [v, p] : m) hist[static_cast<std::size_t>(bins.index(v))] += p;
            h.pixels.push_back(std::move(hist));
        }
        return h;
    }
};

/**
 * P(O_k | M) proportional to prior_k * P(M | O_k), where the likelihood is
 * the Poisson measurement model on the measurement's own schedule.
 */
inline ToyPosterior exact_toy_posterior(const Sinogram& measurement, std::span<const ImageGrid> candidates,
                                        std::span<const double> prior) {
    if (!measurement.is_counts) throw DataError("exact_toy_posterior: measurement must hold counts");
    if (candidates.size() != prior.size() || candidates.empty()) {
        throw ConfigError("exact_toy_posterior: one prior weight per candidate required");
    }
    std::vector<double> logp(candidates.size());
    for (std::size_t k = 0; k < candidates.size(); ++k) {
        if (prior[k] <= 0.0) {
            logp[k] = -std::numeric_limits<double>::infinity();
            continue;
        }
        const Sinogram line = radon_forward(candidates[k], measurement.schedule);
        std::vector<double> rates(line.values.size());
        for (std::size_t i = 0; i < rates.size(); ++i) {
            rates[i] = poisson_rate(line.values[i], measurement.photon_budget, measurement.normalizer);
        }
        logp[k] = std::log(prior[k]) + poisson_loglik(measurement.values, rates);
    }
    const double top = *std::max_element(logp.begin(), logp.end());
    if (!std::isfinite(top)) throw ConfigError("exact_toy_posterior: prior assigns no mass");
    ToyPosterior post;
    double z = 0.0;
    for (double lp : logp) z += std::exp(lp - top);
    for (double lp : logp) post.candidate_probs.push_back(std::exp(lp - top) / z);

    const std::size_t npix = candidates.front().size();
    post.marginals.resize(npix);
    for (std::size_t k = 0; k < candidates.size(); ++k) {
        for (std::size_t p = 0; p < npix; ++p) post.marginals[p][candidates[k].values[p]] += post.candidate_probs[k];
    }
    return post;
}

/// Total variation distance 1/2 sum |a - b| after normalizing both histograms.
inline double tv_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("tv_distance", "histograms use different binnings");
    double sa = 0.0, sb = 0.0;
    for (double v : a) sa += v;
    for (double v : b) sb += v;
    if (!(sa > 0.0) || !(sb > 0.0)) throw DataError("tv_distance: empty histogram");
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] / sa - b[i] / sb);
    return 0.5 * d;
}

/**
 * Per-pixel histograms of `samples` (each a flattened image with
 * `pixels` values); out-of-range values land in the edge bins.
 */
inline PixelHistograms marginal_histograms(std::span<const double> samples, std::size_t pixels,
                                           const HistogramBins& bins = {}) {
    if (pixels == 0 || samples.size() < pixels || samples.size() % pixels != 0) {
        throw ConfigError("marginal_histograms: need at least one complete sample");
    }
    const std::size_t n = samples.size() / pixels;
    PixelHistograms h{bins, std::vector<std::vector<double>>(pixels, std::vector<double>(bins.count, 0.0))};
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t p = 0; p < pixels; ++p) {
            h.pixels[p][static_cast<std::size_t>(bins.index(samples[s * pixels + p]))] += 1.0;
        }
    }
    for (auto& hist : h.pixels)
        for (double& v : hist) v /= static_cast<double>(n);
    return h;
}

/// Probability mass of `hist` within +-radius of `value`, counted on bin centers.
inline double mass_near(std::span<const double> hist, const HistogramBins& bins, double value, double radius) {
    double m = 0.0;
    for (int i = 0; i < bins.count; ++i) {
        if (std::abs(bins.center(i) - value) <= radius + 1e-9) m += hist[static_cast<std::size_t>(i)];
    }
    return m;
}

/// CSV: measurement_id, p_candidate_k..., pixel{p}_v{value}... with values taken from the candidates.
inline std::string oracle_to_csv(const std::vector<std::string>& ids, const std::vector<ToyPosterior>& posts,
                                 std::span<const ImageGrid> candidates) {
    if (ids.size() != posts.size()) throw ConfigError("oracle_to_csv: one id per posterior");
    std::vector<double> values;
    for (const auto& c : candidates) values.insert(values.end(), c.values.begin(), c.values.end());
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    const std::size_t npix = candidates.empty() ? 0 : candidates.front().size();

    std::ostringstream os;
    char buf[64];
    os << "measurement_id";
    for (std::size_t k = 0; k < candidates.size(); ++k) os << ",p_candidate_" << k;
    for (std::size_t p = 0; p < npix; ++p)
        for (double v : values) {
            std::snprintf(buf, sizeof(buf), ",pixel%zu_v%g", p, v);
            os << buf;
        }
    os << '\n';
    for (std::size_t i = 0; i < posts.size(); ++i) {
        os << ids[i];
        for (double pk : posts[i].candidate_probs) {
            std::snprintf(buf, sizeof(buf), ",%.12g", pk);
            os << buf;
        }
        for (std::size_t p = 0; p < npix; ++p)
            for (double v : values) {
                auto it = posts[i].marginals[p].find(v);
                std::snprintf(buf, sizeof(buf), ",%.12g", it == posts[i].marginals[p].end() ? 0.0 : it->second);
                os << buf;
            }
        os << '\n';
    }
    return os.str();
}

} // namespace pvae
