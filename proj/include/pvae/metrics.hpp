#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pvae/errors.hpp"
#include "pvae/image.hpp"

namespace pvae {

inline double mse(const ImageGrid& a, const ImageGrid& b) {
    if (!a.same_shape(b)) throw ShapeError("mse", "images differ in shape");
    if (a.size() == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.values[i] - b.values[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

/// Peak signal-to-noise ratio in dB; identical images give +infinity.
inline double psnr(const ImageGrid& a, const ImageGrid& b, double data_range) {
    if (!(data_range > 0.0)) throw ConfigError("psnr: data_range must be positive");
    const double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / m);
}

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/**
 * Mean structural similarity over every full 11x11 Gaussian window
 * (sigma 1.5, K1 = 0.01, K2 = 0.03); windows never extend past the border.
 */
inline double ssim(const ImageGrid& a, const ImageGrid& b, double data_range) {
    if (!a.same_shape(b)) throw ShapeError("ssim", "images differ in shape");
    if (a.width < kSsimWindow || a.height < kSsimWindow) {
        throw ShapeError("ssim", "image smaller than the 11x11 window");
    }
    if (!(data_range > 0.0)) throw ConfigError("ssim: data_range must be positive");

    double kernel[kSsimWindow];
    double ksum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - kSsimWindow / 2;
        kernel[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        ksum += kernel[i];
    }
    for (double& k : kernel) k /= ksum;

    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);
    const int oh = a.height - kSsimWindow + 1, ow = a.width - kSsimWindow + 1;
    double total = 0.0;
    for (int r0 = 0; r0 < oh; ++r0) {
        for (int c0 = 0; c0 < ow; ++c0) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < kSsimWindow; ++i) {
                for (int j = 0; j < kSsimWindow; ++j) {
                    const double w = kernel[i] * kernel[j];
                    const double x = a.at(r0 + i, c0 + j), y = b.at(r0 + i, c0 + j);
                    ma += w * x;
                    mb += w * y;
                    saa += w * x * x;
                    sbb += w * y * y;
                    sab += w * x * y;
                }
            }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    return total / (static_cast<double>(oh) * ow);
}

struct MetricsRecord {
    std::string object_id;
    std::string algorithm;
    int trial = 0;
    double ssim = 0;
    double psnr = 0;
    double mse = 0;
    std::string config_hash;
};

/// Phantom-anchored comparison: data range is the reference's max - min.
inline MetricsRecord evaluate_image(const ImageGrid& reference, const ImageGrid& estimate, std::string object_id,
                                    std::string algorithm, int trial, std::string config_hash) {
    double range = reference.max() - reference.min();
    if (!(range > 0.0)) range = 1.0;
    MetricsRecord r;
    r.object_id = std::move(object_id);
    r.algorithm = std::move(algorithm);
    r.trial = trial;
    r.ssim = ssim(reference, estimate, range);
    r.psnr = psnr(reference, estimate, range);
    r.mse = mse(reference, estimate);
    r.config_hash = std::move(config_hash);
    return r;
}

struct Summary {
    double mean = 0;
    double std = 0; // sample standard deviation, 0 for a single value
    std::size_t count = 0;
};

inline Summary summarize(const std::vector<double>& v) {
    Summary s;
    s.count = v.size();
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

struct AlgorithmSummary {
    Summary ssim, psnr, mse;
};

/// Per-algorithm mean, sample std and count of each metric over the given records.
inline std::map<std::string, AlgorithmSummary> aggregate_trials(const std::vector<MetricsRecord>& records) {
    if (records.empty()) throw DataError("aggregate_trials: no records");
    std::map<std::string, std::vector<const MetricsRecord*>> groups;
    for (const auto& r : records) groups[r.algorithm].push_back(&r);
    std::map<std::string, AlgorithmSummary> out;
    for (const auto& [alg, rs] : groups) {
        if (rs.empty()) throw DataError("aggregate_trials: empty group " + alg);
        std::vector<double> s, p, m;
        for (const auto* r : rs) {
            s.push_back(r->ssim);
            p.push_back(r->psnr);
            m.push_back(r->mse);
        }
        out[alg] = {summarize(s), summarize(p), summarize(m)};
    }
    return out;
}

/// Collapses object-level records to one dataset-mean record per (algorithm, trial).
inline std::vector<MetricsRecord> dataset_means(const std::vector<MetricsRecord>& records) {
    std::map<std::pair<std::string, int>, std::vector<const MetricsRecord*>> groups;
    for (const auto& r : records) groups[{r.algorithm, r.trial}].push_back(&r);
    std::vector<MetricsRecord> out;
    for (const auto& [key, rs] : groups) {
        MetricsRecord m;
        m.object_id = "mean";
        m.algorithm = key.first;
        m.trial = key.second;
        m.config_hash = rs.front()->config_hash;
        for (const auto* r : rs) {
            m.ssim += r->ssim;
            m.psnr += r->psnr;
            m.mse += r->mse;
        }
        const double n = static_cast<double>(rs.size());
        m.ssim /= n;
        m.psnr /= n;
        m.mse /= n;
        out.push_back(m);
    }
    return out;
}

inline constexpr const char* kMetricsCsvHeader = "object_id,algorithm,trial,ssim,psnr_db,mse,config_hash";

inline std::string format_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline std::string metrics_to_csv(const std::vector<MetricsRecord>& records) {
    std::ostringstream os;
    os << kMetricsCsvHeader << '\n';
    for (const auto& r : records) {
        os << r.object_id << ',' << r.algorithm << ',' << r.trial << ',' << format_number(r.ssim) << ','
           << format_number(r.psnr) << ',' << format_number(r.mse) << ',' << r.config_hash << '\n';
    }
    return os.str();
}

inline std::vector<MetricsRecord> metrics_from_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kMetricsCsvHeader) throw DataError("metrics csv: unexpected header");
    std::vector<MetricsRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() == 6) f.emplace_back();
        if (f.size() != 7) throw DataError("metrics csv: malformed row '" + line + "'");
        MetricsRecord r;
        r.object_id = f[0];
        r.algorithm = f[1];
        r.trial = std::stoi(f[2]);
        r.ssim = std::stod(f[3]);
        r.psnr = std::stod(f[4]);
        r.mse = std::stod(f[5]);
        r.config_hash = f[6];
        out.push_back(r);
    }
    return out;
}

inline std::vector<MetricsRecord> load_metrics_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("missing metrics csv " + path.string());
    return metrics_from_csv(is);
}

} // namespace pvae
