#pragma once

// Parallel-beam Radon transform with exact ray/pixel intersection lengths,
// its adjoint, angle schedules and the Poisson measurement model.
//
// Geometry: an N x N image with unit pixels centered on the origin and N
// detector bins of unit pitch centered on the rotation axis. The ray for
// angle theta and bin j is { t u + s d }, u = (cos theta, sin theta),
// d = (-sin theta, cos theta), t = j - (N - 1) / 2. At theta = 0 the rays
// run along image columns; at pi/2 they run along rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pvae/errors.hpp"
#include "pvae/image.hpp"
#include "pvae/rng.hpp"
#include "pvae/tensor_io.hpp"

namespace pvae {

/// Lower bound on Poisson rates; keeps log(rate) finite.
inline constexpr double kRateFloor = 1e-6;

enum class ScheduleKind { full, uniform_sparse, random_sparse, toy };

inline std::string to_string(ScheduleKind k) {
    switch (k) {
    case ScheduleKind::full: return "full";
    case ScheduleKind::uniform_sparse: return "uniform-sparse";
    case ScheduleKind::random_sparse: return "random-sparse";
    case ScheduleKind::toy: return "toy";
    }
    return "?";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "full") return ScheduleKind::full;
    if (s == "uniform-sparse" || s == "uniform") return ScheduleKind::uniform_sparse;
    if (s == "random-sparse" || s == "random") return ScheduleKind::random_sparse;
    if (s == "toy") return ScheduleKind::toy;
    throw ConfigError("unknown angle schedule kind '" + s + "'");
}

/**
 * Projection angles in [0, pi), strictly increasing. `indices` are the
 * positions of the angles within the equally spaced source set of
 * `source_count` angles.
 */
struct AngleSchedule {
    ScheduleKind kind = ScheduleKind::full;
    int source_count = 0;
    std::vector<int> indices;
    std::vector<double> angles;

    std::size_t size() const { return angles.size(); }
    bool operator==(const AngleSchedule&) const = default;
};

inline double source_angle(int index, int source_count) {
    return std::numbers::pi * static_cast<double>(index) / static_cast<double>(source_count);
}

inline AngleSchedule schedule_from_indices(ScheduleKind kind, int source_count, std::vector<int> indices) {
    std::sort(indices.begin(), indices.end());
    if (std::adjacent_find(indices.begin(), indices.end()) != indices.end()) {
        throw ConfigError("angle schedule has duplicate indices");
    }
    AngleSchedule s;
    s.kind = kind;
    s.source_count = source_count;
    s.indices = std::move(indices);
    for (int i : s.indices) {
        if (i < 0 || i >= source_count) throw ConfigError("angle index out of range");
        s.angles.push_back(source_angle(i, source_count));
    }
    return s;
}

/**
 * Builds a schedule of `count` angles drawn from `source_count` equally
 * spaced angles over [0, pi). Random schedules (random_sparse, toy) are a
 * function of `seed` only.
 */
inline AngleSchedule make_angle_schedule(ScheduleKind kind, int count, int source_count, std::uint64_t seed = 0) {
    if (source_count < 1 || count < 1) throw ConfigError("angle schedule needs at least one angle");
    if (count > source_count) {
        throw ConfigError("angle schedule: requested " + std::to_string(count) + " of only " +
                          std::to_string(source_count) + " source angles");
    }
    std::vector<int> idx;
    switch (kind) {
    case ScheduleKind::full:
        if (count != source_count) throw ConfigError("full schedule must use every source angle");
        for (int i = 0; i < source_count; ++i) idx.push_back(i);
        break;
    case ScheduleKind::uniform_sparse:
        for (int i = 0; i < count; ++i) idx.push_back(static_cast<int>(static_cast<long>(i) * source_count / count));
        break;
    case ScheduleKind::toy:
        if (source_count != 2) throw ConfigError("toy schedule draws from the two angles {0, pi/2}");
        [[fallthrough]];
    case ScheduleKind::random_sparse: {
        std::vector<int> pool(static_cast<std::size_t>(source_count));
        for (int i = 0; i < source_count; ++i) pool[static_cast<std::size_t>(i)] = i;
        Rng rng(seed);
        // partial Fisher-Yates
        for (int i = 0; i < count; ++i) {
            std::uniform_int_distribution<int> pick(i, source_count - 1);
            std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
        }
        idx.assign(pool.begin(), pool.begin() + count);
        break;
    }
    }
    return schedule_from_indices(kind, source_count, std::move(idx));
}

/// Sub-schedule keeping the source angles listed in `keep` (indices into the source set).
inline AngleSchedule restrict_schedule(const AngleSchedule& full, ScheduleKind kind, const std::vector<int>& keep) {
    return schedule_from_indices(kind, full.source_count, keep);
}

/**
 * Projections per (angle, bin), row-major with angles as rows. `is_counts`
 * marks noisy photon counts; otherwise the values are line integrals.
 */
struct Sinogram {
    AngleSchedule schedule;
    int bins = 0;
    std::vector<double> values;
    bool is_counts = false;
    double photon_budget = 0.0;
    double normalizer = 1.0;
    std::uint64_t seed = 0;

    std::size_t angles() const { return schedule.size(); }
    double& at(std::size_t a, int b) { return values[a * static_cast<std::size_t>(bins) + static_cast<std::size_t>(b)]; }
    double at(std::size_t a, int b) const { return values[a * static_cast<std::size_t>(bins) + static_cast<std::size_t>(b)]; }
};

/**
 * Sparse system matrix of the parallel-beam projector for one image size
 * and angle list. Each row (angle, bin) stores the intersection length of
 * that ray with every pixel it crosses.
 */
class RadonOperator {
public:
    RadonOperator() = default;

    RadonOperator(int size, std::span<const double> angles) : size_(size), angles_(angles.begin(), angles.end()) {
        if (size < 1) throw ShapeError("radon", "image size must be positive");
        row_start_.reserve(angles_.size() * static_cast<std::size_t>(size_) + 1);
        row_start_.push_back(0);
        for (double theta : angles_) {
            for (int j = 0; j < size_; ++j) {
                trace_ray(theta, j - 0.5 * (size_ - 1));
                row_start_.push_back(static_cast<std::uint32_t>(pixel_.size()));
            }
        }
    }

    int size() const { return size_; }
    int bins() const { return size_; }
    std::size_t num_angles() const { return angles_.size(); }
    std::size_t image_size() const { return static_cast<std::size_t>(size_) * size_; }
    std::size_t sino_size() const { return angles_.size() * static_cast<std::size_t>(size_); }
    const std::vector<double>& angles() const { return angles_; }

    template <typename T>
    void forward(std::span<const T> image, std::span<T> sino) const {
        check(image.size(), sino.size(), "radon_forward");
        for (std::size_t row = 0; row + 1 < row_start_.size(); ++row) {
            T acc{};
            for (auto k = row_start_[row]; k < row_start_[row + 1]; ++k) {
                acc += static_cast<T>(length_[k]) * image[pixel_[k]];
            }
            sino[row] = acc;
        }
    }

    /// Accumulates R^T sino into `image` (callers zero it when needed).
    template <typename T>
    void adjoint_accumulate(std::span<const T> sino, std::span<T> image) const {
        check(image.size(), sino.size(), "radon_adjoint");
        for (std::size_t row = 0; row + 1 < row_start_.size(); ++row) {
            const T v = sino[row];
            if (v == T{}) continue;
            for (auto k = row_start_[row]; k < row_start_[row + 1]; ++k) {
                image[pixel_[k]] += static_cast<T>(length_[k]) * v;
            }
        }
    }

    template <typename T>
    void adjoint(std::span<const T> sino, std::span<T> image) const {
        std::fill(image.begin(), image.end(), T{});
        adjoint_accumulate(sino, image);
    }

private:
    void check(std::size_t img, std::size_t sino, const char* op) const {
        if (img != image_size()) throw ShapeError(op, "image has " + std::to_string(img) + " values, expected " +
                                                          std::to_string(image_size()));
        if (sino != sino_size()) throw ShapeError(op, "sinogram has " + std::to_string(sino) + " values, expected " +
                                                          std::to_string(sino_size()));
    }

    // Siddon-style traversal: collect every parameter value where the ray
    // crosses a grid line, then assign each segment to the pixel holding
    // its midpoint.
    void trace_ray(double theta, double t) {
        constexpr double kParallel = 1e-12;
        const double half = 0.5 * size_;
        const double px = t * std::cos(theta), py = t * std::sin(theta);
        const double dx = -std::sin(theta), dy = std::cos(theta);

        double s_lo = -1e300, s_hi = 1e300;
        auto clip = [&](double p, double d) {
            if (std::abs(d) < kParallel) {
                if (p <= -half || p >= half) s_lo = 1.0, s_hi = 0.0;
                return;
            }
            double a = (-half - p) / d, b = (half - p) / d;
            if (a > b) std::swap(a, b);
            s_lo = std::max(s_lo, a);
            s_hi = std::min(s_hi, b);
        };
        clip(px, dx);
        clip(py, dy);
        if (!(s_hi > s_lo)) return;

        crossings_.clear();
        crossings_.push_back(s_lo);
        crossings_.push_back(s_hi);
        auto add_planes = [&](double p, double d) {
            if (std::abs(d) < kParallel) return;
            for (int k = 0; k <= size_; ++k) {
                const double s = (k - half - p) / d;
                if (s > s_lo && s < s_hi) crossings_.push_back(s);
            }
        };
        add_planes(px, dx);
        add_planes(py, dy);
        std::sort(crossings_.begin(), crossings_.end());

        for (std::size_t i = 0; i + 1 < crossings_.size(); ++i) {
            const double len = crossings_[i + 1] - crossings_[i];
            if (len <= 1e-12) continue;
            const double sm = 0.5 * (crossings_[i] + crossings_[i + 1]);
            const int c = std::clamp(static_cast<int>(std::floor(px + sm * dx + half)), 0, size_ - 1);
            const int r = std::clamp(static_cast<int>(std::floor(half - (py + sm * dy))), 0, size_ - 1);
            pixel_.push_back(static_cast<std::uint32_t>(r * size_ + c));
            length_.push_back(len);
        }
    }

    int size_ = 0;
    std::vector<double> angles_;
    std::vector<std::uint32_t> row_start_;
    std::vector<std::uint32_t> pixel_;
    std::vector<double> length_;
    std::vector<double> crossings_;
};

/// Noiseless line integrals of `image` on `schedule`.
inline Sinogram radon_forward(const ImageGrid& image, const AngleSchedule& schedule) {
    if (image.width != image.height) throw ShapeError("radon_forward", "image must be square");
    const RadonOperator op(image.width, schedule.angles);
    Sinogram s;
    s.schedule = schedule;
    s.bins = image.width;
    s.values.assign(op.sino_size(), 0.0);
    op.forward<double>(image.values, s.values);
    return s;
}

/// Exact adjoint of radon_forward; the image side equals the bin count.
inline ImageGrid radon_adjoint(const Sinogram& sino) {
    const RadonOperator op(sino.bins, sino.schedule.angles);
    ImageGrid img = ImageGrid::square(sino.bins);
    op.adjoint<double>(sino.values, img.values);
    return img;
}

/// Poisson rate for a noiseless line integral.
inline double poisson_rate(double line_integral, double photon_budget, double normalizer) {
    return std::max(photon_budget * line_integral / normalizer + kRateFloor, kRateFloor);
}

/**
 * Draws counts ~ Poisson(budget * s / normalizer + eps) for every bin.
 * `normalizer` is the dataset-wide maximum noiseless line integral.
 */
inline Sinogram simulate_measurement(const Sinogram& noiseless, double photon_budget, double normalizer,
                                     std::uint64_t seed) {
    if (!(photon_budget > 0.0)) throw ConfigError("photon budget must be positive");
    if (!(normalizer > 0.0)) throw ConfigError("measurement normalizer must be positive");
    Sinogram out = noiseless;
    out.is_counts = true;
    out.photon_budget = photon_budget;
    out.normalizer = normalizer;
    out.seed = seed;
    Rng rng(seed);
    for (double& v : out.values) {
        std::poisson_distribution<std::int64_t> draw(poisson_rate(v, photon_budget, normalizer));
        v = static_cast<double>(draw(rng));
    }
    return out;
}

/// Sum over bins of k ln(rate) - rate - ln k!, with rates floored at eps.
inline double poisson_loglik(std::span<const double> counts, std::span<const double> rates) {
    if (counts.size() != rates.size()) throw ShapeError("poisson_loglik", "counts and rates differ in size");
    double total = 0.0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double k = counts[i];
        const double lam = std::max(rates[i], kRateFloor);
        total += k * std::log(lam) - lam - std::lgamma(k + 1.0);
    }
    return total;
}

/// Inverts the measurement normalization: (counts - eps) * normalizer / budget, clamped at 0.
inline Sinogram counts_to_line_integrals(const Sinogram& counts) {
    if (!counts.is_counts) return counts;
    Sinogram s = counts;
    s.is_counts = false;
    for (double& v : s.values) v = std::max(0.0, (v - kRateFloor) * counts.normalizer / counts.photon_budget);
    return s;
}

/// Keeps the rows of `sino` whose source index appears in `keep`.
inline Sinogram select_angles(const Sinogram& sino, ScheduleKind kind, const std::vector<int>& keep) {
    Sinogram out = sino;
    out.schedule = restrict_schedule(sino.schedule, kind, keep);
    out.values.clear();
    for (int idx : out.schedule.indices) {
        auto it = std::find(sino.schedule.indices.begin(), sino.schedule.indices.end(), idx);
        if (it == sino.schedule.indices.end()) throw DataError("select_angles: angle index not in source sinogram");
        const auto row = static_cast<std::size_t>(it - sino.schedule.indices.begin());
        out.values.insert(out.values.end(), sino.values.begin() + static_cast<std::ptrdiff_t>(row * sino.bins),
                          sino.values.begin() + static_cast<std::ptrdiff_t>((row + 1) * sino.bins));
    }
    return out;
}

inline Json schedule_to_json(const AngleSchedule& s) {
    return Json{{"kind", to_string(s.kind)}, {"source_count", s.source_count}, {"indices", s.indices},
                {"angles", s.angles}};
}

inline AngleSchedule schedule_from_json(const Json& j) {
    return schedule_from_indices(schedule_kind_from_string(j.at("kind").get<std::string>()),
                                 j.at("source_count").get<int>(), j.at("indices").get<std::vector<int>>());
}

/// Writes `<stem>.pvt` with the values and `<stem>.json` with the acquisition sidecar.
inline void save_sinogram(const fs::path& stem, const Sinogram& s) {
    StoredTensor t;
    t.shape = {static_cast<std::int64_t>(s.angles()), s.bins};
    t.data.assign(s.values.begin(), s.values.end());
    fs::path pvt = stem, side = stem;
    pvt += ".pvt";
    side += ".json";
    save_tensor(pvt, t);
    save_json(side, Json{{"schedule", schedule_to_json(s.schedule)},
                         {"is_counts", s.is_counts},
                         {"photon_budget", s.photon_budget},
                         {"normalizer", s.normalizer},
                         {"rate_floor", kRateFloor},
                         {"seed", s.seed}});
}

inline Sinogram load_sinogram(const fs::path& stem) {
    fs::path pvt = stem, side = stem;
    pvt += ".pvt";
    side += ".json";
    const StoredTensor t = load_tensor(pvt);
    const Json j = load_json(side);
    Sinogram s;
    s.schedule = schedule_from_json(j.at("schedule"));
    if (t.shape.size() != 2 || static_cast<std::size_t>(t.shape[0]) != s.schedule.size()) {
        throw DataError("sinogram shape disagrees with its schedule: " + pvt.string());
    }
    s.bins = static_cast<int>(t.shape[1]);
    s.values.assign(t.data.begin(), t.data.end());
    s.is_counts = j.at("is_counts").get<bool>();
    s.photon_budget = j.at("photon_budget").get<double>();
    s.normalizer = j.at("normalizer").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

} // namespace pvae
