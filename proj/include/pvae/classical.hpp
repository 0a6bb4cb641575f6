#pragma once

// Baseline reconstructions: filtered backprojection, SIRT and
// total-variation regularized least squares (Chambolle-Pock).

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include <fftw3.h>

#include "pvae/errors.hpp"
#include "pvae/image.hpp"
#include "pvae/projector.hpp"
#include "pvae/tensor_io.hpp"

namespace pvae {

enum class ReconAlgorithm { fbp, sirt, tv };
enum class FbpFilter { ramp, hann };

struct ReconConfig {
    ReconAlgorithm algorithm = ReconAlgorithm::fbp;
    FbpFilter filter = FbpFilter::ramp;
    int iterations = 200;     // sirt
    double relaxation = 1.0;  // sirt
    double tv_lambda = 0.05;  // tv
    int tv_iterations = 300;  // tv
    double tv_sigma = 0.0;    // tv dual step; 0 selects 0.99 / ||K||
    double tv_tau = 0.0;      // tv primal step; 0 selects 0.99 / ||K||
    bool nonnegativity = true;

    void validate() const {
        if (iterations < 1 || tv_iterations < 1) throw ConfigError("reconstruction iterations must be >= 1");
        if (!(relaxation > 0.0 && relaxation < 2.0)) throw ConfigError("sirt relaxation must lie in (0, 2)");
        if (!(tv_lambda >= 0.0)) throw ConfigError("tv_lambda must be >= 0");
        if (tv_sigma < 0.0 || tv_tau < 0.0) throw ConfigError("tv step sizes must be >= 0");
    }
};

inline std::string to_string(ReconAlgorithm a) {
    switch (a) {
    case ReconAlgorithm::fbp: return "fbp";
    case ReconAlgorithm::sirt: return "sirt";
    case ReconAlgorithm::tv: return "tv";
    }
    return "?";
}

inline std::string to_string(FbpFilter f) { return f == FbpFilter::ramp ? "ramp" : "hann"; }

inline FbpFilter fbp_filter_from_string(const std::string& s) {
    if (s == "ramp") return FbpFilter::ramp;
    if (s == "hann") return FbpFilter::hann;
    throw ConfigError("unknown fbp filter '" + s + "'");
}

inline Json to_json(const ReconConfig& c) {
    return Json{{"algorithm", to_string(c.algorithm)}, {"filter", to_string(c.filter)},
                {"iterations", c.iterations},         {"relaxation", c.relaxation},
                {"tv_lambda", c.tv_lambda},           {"tv_iterations", c.tv_iterations},
                {"tv_sigma", c.tv_sigma},             {"tv_tau", c.tv_tau},
                {"nonnegativity", c.nonnegativity}};
}

struct ReconResult {
    ImageGrid image;
    std::vector<double> residuals; // per iteration, iterative methods only
};

namespace detail {

inline std::mutex& fftw_plan_mutex() {
    static std::mutex m;
    return m;
}

inline int fbp_padded_length(int bins) {
    int p = 64;
    while (p < 2 * bins) p *= 2;
    return p;
}

// Plans are created with FFTW_UNALIGNED so the chosen codelets, and hence
// the rounding, do not depend on where the heap placed the buffers.

// Frequency response of the band-limited ramp: twice the DFT of the
// spatial Ram-Lak kernel, optionally apodized.
inline std::vector<double> fbp_frequency_filter(int padded, FbpFilter filter) {
    std::vector<double> kernel(static_cast<std::size_t>(padded), 0.0);
    kernel[0] = 0.25;
    for (int n = 1; n <= padded / 2; ++n) {
        if (n % 2 == 0) continue;
        const double v = -1.0 / (std::numbers::pi * std::numbers::pi * n * n);
        kernel[static_cast<std::size_t>(n)] = v;
        kernel[static_cast<std::size_t>(padded - n)] = v;
    }
    const int half = padded / 2 + 1;
    std::vector<std::complex<double>> spec(static_cast<std::size_t>(half));
    {
        std::lock_guard lock(fftw_plan_mutex());
        fftw_plan plan = fftw_plan_dft_r2c_1d(padded, kernel.data(), reinterpret_cast<fftw_complex*>(spec.data()),
                                              FFTW_ESTIMATE | FFTW_UNALIGNED);
        fftw_execute(plan);
        fftw_destroy_plan(plan);
    }
    std::vector<double> response(static_cast<std::size_t>(half));
    for (int k = 0; k < half; ++k) {
        double h = 2.0 * spec[static_cast<std::size_t>(k)].real();
        if (filter == FbpFilter::hann) h *= 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * k / padded));
        response[static_cast<std::size_t>(k)] = h;
    }
    return response;
}

inline std::vector<double> inverse_diag(std::vector<double> v) {
    for (double& x : v) x = x > 1e-12 ? 1.0 / x : 0.0;
    return v;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace detail

/**
 * Filtered backprojection. Counts are first mapped back to line integrals,
 * each projection is ramp filtered in the frequency domain and the result
 * is backprojected with linear interpolation and scaled by pi / (2 K).
 */
inline ImageGrid fbp_reconstruct(const Sinogram& input, const ReconConfig& cfg = {}) {
    if (input.angles() < 1) throw ConfigError("fbp needs at least one projection angle");
    const Sinogram sino = counts_to_line_integrals(input);
    const int n = sino.bins;
    const int padded = detail::fbp_padded_length(n);
    const int half = padded / 2 + 1;
    const std::vector<double> response = detail::fbp_frequency_filter(padded, cfg.filter);

    std::vector<double> line(static_cast<std::size_t>(padded));
    std::vector<std::complex<double>> spec(static_cast<std::size_t>(half));
    fftw_plan fwd, inv;
    {
        std::lock_guard lock(detail::fftw_plan_mutex());
        fwd = fftw_plan_dft_r2c_1d(padded, line.data(), reinterpret_cast<fftw_complex*>(spec.data()), FFTW_ESTIMATE | FFTW_UNALIGNED);
        inv = fftw_plan_dft_c2r_1d(padded, reinterpret_cast<fftw_complex*>(spec.data()), line.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    }

    ImageGrid img = ImageGrid::square(n);
    const double center = 0.5 * (n - 1);
    std::vector<double> filtered(static_cast<std::size_t>(n));
    for (std::size_t a = 0; a < sino.angles(); ++a) {
        std::fill(line.begin(), line.end(), 0.0);
        for (int b = 0; b < n; ++b) line[static_cast<std::size_t>(b)] = sino.at(a, b);
        fftw_execute(fwd);
        for (int k = 0; k < half; ++k) spec[static_cast<std::size_t>(k)] *= response[static_cast<std::size_t>(k)];
        fftw_execute(inv);
        for (int b = 0; b < n; ++b) filtered[static_cast<std::size_t>(b)] = line[static_cast<std::size_t>(b)] / padded;

        const double theta = sino.schedule.angles[a];
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int r = 0; r < n; ++r) {
            const double y = center - r;
            for (int c = 0; c < n; ++c) {
                const double u = (c - center) * ct + y * st + center;
                const double fl = std::floor(u);
                const int i0 = static_cast<int>(fl);
                const double w = u - fl;
                double v = 0.0;
                if (i0 >= 0 && i0 < n) v += (1.0 - w) * filtered[static_cast<std::size_t>(i0)];
                if (i0 + 1 >= 0 && i0 + 1 < n) v += w * filtered[static_cast<std::size_t>(i0 + 1)];
                img.at(r, c) += v;
            }
        }
    }
    {
        std::lock_guard lock(detail::fftw_plan_mutex());
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(inv);
    }

    const double scale = std::numbers::pi / (2.0 * static_cast<double>(sino.angles()));
    for (double& v : img.values) {
        v *= scale;
        if (cfg.nonnegativity) v = std::max(v, 0.0);
    }
    return img;
}

/**
 * SIRT: x <- clamp(x + relaxation * C R^T W (m - R x)) with W, C the inverse
 * row and column sums of R. The recorded residual is ||m - R x||_W, the
 * quantity the iteration decreases. Ten consecutive increases abort.
 */
inline ReconResult sirt_solve(const Sinogram& input, const ReconConfig& cfg, const ImageGrid* initial = nullptr) {
    cfg.validate();
    if (input.angles() < 1) throw ConfigError("sirt needs at least one projection angle");
    const Sinogram sino = counts_to_line_integrals(input);
    const RadonOperator op(sino.bins, sino.schedule.angles);
    const std::size_t np = op.image_size(), nr = op.sino_size();

    std::vector<double> ones_img(np, 1.0), ones_sino(nr, 1.0), w(nr), c(np);
    op.forward<double>(ones_img, w);
    op.adjoint<double>(ones_sino, c);
    w = detail::inverse_diag(std::move(w));
    c = detail::inverse_diag(std::move(c));

    ReconResult res;
    res.image = initial ? *initial : ImageGrid::square(sino.bins);
    if (res.image.size() != np) throw ShapeError("sirt", "initial image does not match the sinogram bins");
    std::vector<double>& x = res.image.values;
    std::vector<double> r(nr), g(np);

    int increases = 0;
    for (int it = 0; it <= cfg.iterations; ++it) {
        op.forward<double>(x, r);
        double norm = 0.0;
        for (std::size_t i = 0; i < nr; ++i) {
            r[i] = sino.values[i] - r[i];
            norm += w[i] * r[i] * r[i];
            r[i] *= w[i];
        }
        norm = std::sqrt(norm);
        if (!std::isfinite(norm)) throw NumericalError("sirt: non-finite residual at iteration " + std::to_string(it));
        if (!res.residuals.empty() && norm > res.residuals.back()) {
            if (++increases >= 10) {
                std::string trace;
                for (double v : res.residuals) trace += std::to_string(v) + " ";
                throw NumericalError("sirt: residual increased for 10 consecutive iterations; trace: " + trace);
            }
        } else {
            increases = 0;
        }
        res.residuals.push_back(norm);
        if (it == cfg.iterations) break;

        op.adjoint<double>(r, g);
        for (std::size_t j = 0; j < np; ++j) {
            x[j] += cfg.relaxation * c[j] * g[j];
            if (cfg.nonnegativity) x[j] = std::max(x[j], 0.0);
        }
    }
    return res;
}

inline ImageGrid sirt_reconstruct(const Sinogram& sino, const ReconConfig& cfg) {
    return sirt_solve(sino, cfg).image;
}

namespace detail {

// Forward differences with a zero last difference (Neumann boundary).
inline void grad2d(std::span<const double> x, int n, std::span<double> gh, std::span<double> gv) {
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * n + c;
            gh[i] = c + 1 < n ? x[i + 1] - x[i] : 0.0;
            gv[i] = r + 1 < n ? x[i + static_cast<std::size_t>(n)] - x[i] : 0.0;
        }
    }
}

// Adjoint of grad2d (negative divergence).
inline void grad2d_adjoint(std::span<const double> gh, std::span<const double> gv, int n, std::span<double> out) {
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * n + c;
            double v = 0.0;
            if (c + 1 < n) v -= gh[i];
            if (c > 0) v += gh[i - 1];
            if (r + 1 < n) v -= gv[i];
            if (r > 0) v += gv[i - static_cast<std::size_t>(n)];
            out[i] = v;
        }
    }
}

} // namespace detail

/// Largest singular value of K = [R; mu D] by power iteration.
inline double tv_operator_norm(const RadonOperator& op, double mu, int iterations = 60) {
    const int n = op.size();
    const std::size_t np = op.image_size();
    std::vector<double> x(np), y(op.sino_size()), gh(np), gv(np), t(np);
    for (std::size_t i = 0; i < np; ++i) x[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
    double lambda = 0.0;
    for (int it = 0; it < iterations; ++it) {
        const double nx = std::sqrt(detail::dot(x, x));
        for (double& v : x) v /= nx;
        op.forward<double>(x, y);
        detail::grad2d(x, n, gh, gv);
        op.adjoint<double>(y, t);
        detail::grad2d_adjoint(gh, gv, n, x);
        for (std::size_t i = 0; i < np; ++i) x[i] = t[i] + mu * mu * x[i];
        lambda = std::sqrt(detail::dot(x, x));
    }
    return std::sqrt(lambda);
}

/**
 * min_x 1/2 ||R x - m||^2 + lambda (||D_h x||_1 + ||D_v x||_1), x >= 0, by
 * the Chambolle-Pock primal-dual method. The difference operator is scaled
 * by mu = ||R|| / sqrt(8) to balance the two blocks of K; the dual bound
 * becomes lambda / mu accordingly.
 */
inline ReconResult tv_solve(const Sinogram& input, const ReconConfig& cfg) {
    cfg.validate();
    if (input.angles() < 1) throw ConfigError("tv needs at least one projection angle");
    const Sinogram sino = counts_to_line_integrals(input);
    const RadonOperator op(sino.bins, sino.schedule.angles);
    const int n = sino.bins;
    const std::size_t np = op.image_size(), nr = op.sino_size();

    const double r_norm = tv_operator_norm(op, 0.0);
    const double mu = std::max(r_norm / std::sqrt(8.0), 1e-12);
    const double k_norm = 1.01 * tv_operator_norm(op, mu);
    const double sigma = cfg.tv_sigma > 0.0 ? cfg.tv_sigma : 0.99 / k_norm;
    const double tau = cfg.tv_tau > 0.0 ? cfg.tv_tau : 0.99 / k_norm;
    if (sigma * tau * k_norm * k_norm >= 1.0) {
        throw ConfigError("tv: step sizes violate sigma * tau * ||K||^2 < 1 (||K|| = " + std::to_string(k_norm) + ")");
    }
    const double bound = cfg.tv_lambda / mu;

    std::vector<double> x(np, 0.0), xbar(np, 0.0), xold(np), p(nr, 0.0), qh(np, 0.0), qv(np, 0.0);
    std::vector<double> rx(nr), gh(np), gv(np), t1(np), t2(np);
    ReconResult res;
    for (int it = 0; it < cfg.tv_iterations; ++it) {
        op.forward<double>(xbar, rx);
        for (std::size_t i = 0; i < nr; ++i) p[i] = (p[i] + sigma * (rx[i] - sino.values[i])) / (1.0 + sigma);
        detail::grad2d(xbar, n, gh, gv);
        for (std::size_t i = 0; i < np; ++i) {
            qh[i] = std::clamp(qh[i] + sigma * mu * gh[i], -bound, bound);
            qv[i] = std::clamp(qv[i] + sigma * mu * gv[i], -bound, bound);
        }
        op.adjoint<double>(p, t1);
        detail::grad2d_adjoint(qh, qv, n, t2);
        xold = x;
        for (std::size_t i = 0; i < np; ++i) {
            x[i] -= tau * (t1[i] + mu * t2[i]);
            if (cfg.nonnegativity) x[i] = std::max(x[i], 0.0);
            xbar[i] = 2.0 * x[i] - xold[i];
        }
        op.forward<double>(x, rx);
        double norm = 0.0;
        for (std::size_t i = 0; i < nr; ++i) norm += (rx[i] - sino.values[i]) * (rx[i] - sino.values[i]);
        res.residuals.push_back(std::sqrt(norm));
        if (!std::isfinite(res.residuals.back())) throw NumericalError("tv: non-finite iterate");
    }
    res.image = ImageGrid::square(n);
    res.image.values = std::move(x);
    return res;
}

inline ImageGrid tv_reconstruct(const Sinogram& sino, const ReconConfig& cfg) { return tv_solve(sino, cfg).image; }

inline ImageGrid reconstruct(const Sinogram& sino, const ReconConfig& cfg) {
    switch (cfg.algorithm) {
    case ReconAlgorithm::fbp: return fbp_reconstruct(sino, cfg);
    case ReconAlgorithm::sirt: return sirt_reconstruct(sino, cfg);
    case ReconAlgorithm::tv: return tv_reconstruct(sino, cfg);
    }
    throw ConfigError("unknown reconstruction algorithm");
}

} // namespace pvae
