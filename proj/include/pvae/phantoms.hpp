#pragma once

// Toy two-object dataset, synthetic foam phantoms and dataset persistence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pvae/errors.hpp"
#include "pvae/image.hpp"
#include "pvae/projector.hpp"
#include "pvae/rng.hpp"
#include "pvae/tensor_io.hpp"

namespace pvae {

// ---------------------------------------------------------------------------
// Toy problem

/// The two 2x2 candidates: identical row sums, different column sums.
inline std::pair<ImageGrid, ImageGrid> make_toy_objects() {
    ImageGrid o1 = ImageGrid::square(2), o2 = ImageGrid::square(2);
    o1.values = {1.0, 0.0, 1.0, 0.0};
    o2.values = {0.0, 1.0, 0.0, 1.0};
    return {o1, o2};
}

struct DatasetMeta {
    std::string mode = "foam"; // "toy" | "foam"
    int object_count = 1;      // m
    int measurements = 1;      // n, angles per object
    std::string schedule_kind = "uniform-sparse";
    int source_angles = 180;
    int image_size = 64;
    double photon_budget = 1e4;
    double normalizer = 1.0; // dataset-wide max noiseless line integral
    double rate_floor = kRateFloor;
    std::uint64_t seed = 0;

    void validate() const {
        if (object_count < 1) throw ConfigError("object_count (m) must be >= 1");
        if (measurements < 1) throw ConfigError("measurements (n) must be >= 1");
        if (!(photon_budget > 0.0)) throw ConfigError("photon_budget must be > 0");
    }
};

inline Json to_json(const DatasetMeta& m) {
    return Json{{"mode", m.mode},
                {"object_count", m.object_count},
                {"measurements", m.measurements},
                {"schedule_kind", m.schedule_kind},
                {"source_angles", m.source_angles},
                {"image_size", m.image_size},
                {"photon_budget", m.photon_budget},
                {"normalizer", m.normalizer},
                {"rate_floor", m.rate_floor},
                {"seed", m.seed}};
}

inline DatasetMeta meta_from_json(const Json& j) {
    DatasetMeta m;
    m.mode = j.at("mode").get<std::string>();
    m.object_count = j.at("object_count").get<int>();
    m.measurements = j.at("measurements").get<int>();
    m.schedule_kind = j.at("schedule_kind").get<std::string>();
    m.source_angles = j.at("source_angles").get<int>();
    m.image_size = j.at("image_size").get<int>();
    m.photon_budget = j.at("photon_budget").get<double>();
    m.normalizer = j.at("normalizer").get<double>();
    m.rate_floor = j.value("rate_floor", kRateFloor);
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
}

struct ToyDraw {
    int object = 0; // 0 -> O1, 1 -> O2
    int angle = 0;  // 0 -> 0 rad, 1 -> pi/2
    bool operator==(const ToyDraw&) const = default;
};

struct ToyDataset {
    std::vector<ImageGrid> objects;
    std::vector<double> prior;
    std::vector<ToyDraw> draws;
};

/// m independent (object, angle) draws; object ~ prior, angle uniform over {0, pi/2}.
inline ToyDataset sample_toy_dataset(const DatasetMeta& meta, std::uint64_t rng_seed,
                                     std::vector<double> prior = {0.5, 0.5}) {
    meta.validate();
    if (meta.measurements != 1) throw ConfigError("toy mode takes exactly one measurement per object (n = 1)");
    if (meta.schedule_kind != "toy") throw ConfigError("toy dataset requires the 'toy' angle schedule");
    if (prior.size() != 2 || std::abs(prior[0] + prior[1] - 1.0) > 1e-12 || prior[0] < 0 || prior[1] < 0) {
        throw ConfigError("toy prior must be two probabilities summing to 1");
    }
    ToyDataset ds;
    auto [o1, o2] = make_toy_objects();
    ds.objects = {o1, o2};
    ds.prior = std::move(prior);
    Rng rng(rng_seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    ds.draws.reserve(static_cast<std::size_t>(meta.object_count));
    for (int i = 0; i < meta.object_count; ++i) {
        ToyDraw d;
        d.object = u01(rng) < ds.prior[0] ? 0 : 1;
        d.angle = u01(rng) < 0.5 ? 0 : 1;
        ds.draws.push_back(d);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Foam phantoms

/**
 * Parameters of the foam generator. Lengths are fractions of the image
 * half-width; the target void fraction is relative to the disk area.
 */
struct FoamSpec {
    int size = 64;
    double disk_radius = 0.9;
    int min_voids = 1;
    int max_voids = 400;
    double min_void_radius = 0.05;
    double max_void_radius = 0.2;
    double void_fraction = 0.3;
    std::uint64_t seed = 0;
    int max_attempts = 20000;

    void validate() const {
        if (size < 2) throw ConfigError("foam size must be >= 2");
        if (!(disk_radius > 0.0 && disk_radius <= 1.0)) throw ConfigError("foam disk_radius must lie in (0, 1]");
        if (min_voids < 0 || max_voids < min_voids) throw ConfigError("foam void count range is empty");
        if (!(min_void_radius > 0.0 && max_void_radius >= min_void_radius)) {
            throw ConfigError("foam void radius range is empty");
        }
        if (!(void_fraction >= 0.0 && void_fraction < 1.0)) throw ConfigError("foam void_fraction must lie in [0, 1)");
    }
};

struct Circle {
    double x = 0, y = 0, r = 0;
};

struct FoamLayout {
    double disk_radius = 0; // pixels
    std::vector<Circle> voids;
};

/// Samples void radii (log-uniform, largest first) and places them by rejection sampling
/// with a minimum wall of 3% of the half-width between voids and the rim.
inline FoamLayout make_foam_layout(const FoamSpec& spec) {
    spec.validate();
    const double half = 0.5 * spec.size;
    FoamLayout layout;
    layout.disk_radius = spec.disk_radius * half;
    if (spec.void_fraction == 0.0) return layout;

    Rng rng(spec.seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double lo = std::log(spec.min_void_radius * half), hi = std::log(spec.max_void_radius * half);
    const double target_area = spec.void_fraction * std::numbers::pi * layout.disk_radius * layout.disk_radius;

    std::vector<double> radii;
    double area = 0.0;
    while (static_cast<int>(radii.size()) < spec.max_voids) {
        const double r = std::exp(lo + (hi - lo) * u01(rng));
        const double a = std::numbers::pi * r * r;
        // stop once adding this void would overshoot more than it helps
        if (static_cast<int>(radii.size()) >= spec.min_voids && area + 0.5 * a > target_area) break;
        radii.push_back(r);
        area += a;
    }
    std::sort(radii.begin(), radii.end(), std::greater<>());

    const double gap = 0.03 * half; // wall thickness between neighbours, ~1 px at 64x64
    for (double r : radii) {
        const double reach = layout.disk_radius - r - gap;
        if (reach <= 0.0) throw ConfigError("foam void of radius " + std::to_string(r) + " px does not fit the disk");
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
            const double rho = reach * std::sqrt(u01(rng));
            const double phi = 2.0 * std::numbers::pi * u01(rng);
            const Circle c{rho * std::cos(phi), rho * std::sin(phi), r};
            placed = std::none_of(layout.voids.begin(), layout.voids.end(), [&](const Circle& o) {
                return std::hypot(c.x - o.x, c.y - o.y) < c.r + o.r + gap;
            });
            if (placed) layout.voids.push_back(c);
        }
        if (!placed) {
            throw ConfigError("foam: could not place void " + std::to_string(layout.voids.size() + 1) + " of " +
                              std::to_string(radii.size()) + " after " + std::to_string(spec.max_attempts) +
                              " attempts");
        }
    }
    return layout;
}

/// Pixel-center rasterization: 1 inside the disk and outside every void, else 0.
inline ImageGrid rasterize_foam(const FoamLayout& layout, int size) {
    ImageGrid img = ImageGrid::square(size);
    const double half = 0.5 * size;
    for (int r = 0; r < size; ++r) {
        const double y = half - r - 0.5;
        for (int c = 0; c < size; ++c) {
            const double x = c + 0.5 - half;
            if (x * x + y * y > layout.disk_radius * layout.disk_radius) continue;
            const bool in_void = std::any_of(layout.voids.begin(), layout.voids.end(), [&](const Circle& v) {
                return (x - v.x) * (x - v.x) + (y - v.y) * (y - v.y) <= v.r * v.r;
            });
            img.at(r, c) = in_void ? 0.0 : 1.0;
        }
    }
    return img;
}

inline ImageGrid make_foam_phantom(const FoamSpec& spec) { return rasterize_foam(make_foam_layout(spec), spec.size); }

inline std::uint64_t phantom_seed(std::uint64_t master, std::uint64_t index) { return master ^ index; }

inline std::string object_file_stem(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "obj_%05d", index);
    return buf;
}

inline Json to_json(const FoamSpec& s) {
    return Json{{"size", s.size},
                {"disk_radius", s.disk_radius},
                {"min_voids", s.min_voids},
                {"max_voids", s.max_voids},
                {"min_void_radius", s.min_void_radius},
                {"max_void_radius", s.max_void_radius},
                {"void_fraction", s.void_fraction},
                {"seed", s.seed},
                {"max_attempts", s.max_attempts}};
}

/**
 * Writes `count` phantoms as `<dir>/obj_XXXXX.pvt` plus `<dir>/meta.json`.
 * Phantom i uses seed `spec.seed ^ i`. On failure every file written by
 * this call is removed before the exception propagates.
 */
inline std::vector<fs::path> generate_dataset(const FoamSpec& spec, int count, const fs::path& dir,
                                              DatasetMeta meta = {}) {
    spec.validate();
    if (count < 0) throw ConfigError("phantom count must be >= 0");
    std::vector<fs::path> written;
    try {
        fs::create_directories(dir);
        for (int i = 0; i < count; ++i) {
            FoamSpec s = spec;
            s.seed = phantom_seed(spec.seed, static_cast<std::uint64_t>(i));
            const fs::path p = dir / (object_file_stem(i) + ".pvt");
            written.push_back(p);
            save_image(p, make_foam_phantom(s));
        }
        meta.mode = "foam";
        meta.object_count = std::max(count, 1);
        meta.image_size = spec.size;
        meta.seed = spec.seed;
        Json j = to_json(meta);
        j["phantom_count"] = count;
        j["foam"] = to_json(spec);
        const fs::path mp = dir / "meta.json";
        written.push_back(mp);
        save_json(mp, j);
    } catch (...) {
        std::error_code ec;
        for (const auto& p : written) {
            fs::remove(p, ec);
            fs::path tmp = p;
            tmp += ".tmp";
            fs::remove(tmp, ec);
        }
        throw;
    }
    return written;
}

} // namespace pvae
