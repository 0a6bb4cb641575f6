#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "pvae/classical.hpp"
#include "pvae/metrics.hpp"
#include "pvae/phantoms.hpp"
#include "test_util.hpp"

using namespace pvae;

namespace {

ImageGrid foam(int size, std::uint64_t seed) {
    FoamSpec spec;
    spec.size = size;
    spec.seed = seed;
    return make_foam_phantom(spec);
}

ImageGrid disk(int n, double radius) {
    ImageGrid img = ImageGrid::square(n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            const double x = c + 0.5 - n / 2.0, y = n / 2.0 - r - 0.5;
            img.at(r, c) = x * x + y * y <= radius * radius ? 1.0 : 0.0;
        }
    return img;
}

} // namespace

TEST(Fbp, FilterIsRampShapedUpToNyquist) {
    const int p = 128;
    const auto ramp = detail::fbp_frequency_filter(p, FbpFilter::ramp);
    const auto hann = detail::fbp_frequency_filter(p, FbpFilter::hann);
    EXPECT_NEAR(ramp[0], 0.0, 0.01);
    for (int k = 4; k <= p / 2; k += 4) EXPECT_NEAR(ramp[static_cast<std::size_t>(k)], 2.0 * k / p, 0.01) << k;
    EXPECT_NEAR(hann[p / 2], 0.0, 1e-12);
    for (int k = 1; k < p / 2; ++k) EXPECT_LT(hann[static_cast<std::size_t>(k)], ramp[static_cast<std::size_t>(k)]);
}

TEST(Fbp, PaddedLengthIsPowerOfTwoAtLeastTwiceBins) {
    EXPECT_EQ(detail::fbp_padded_length(2), 64);
    EXPECT_EQ(detail::fbp_padded_length(64), 128);
    EXPECT_EQ(detail::fbp_padded_length(65), 256);
}

TEST(Fbp, RecoversDiskInterior) {
    const ImageGrid truth = disk(64, 20);
    const auto s = radon_forward(truth, make_angle_schedule(ScheduleKind::full, 180, 180));
    const ImageGrid rec = fbp_reconstruct(s);
    for (int r = 28; r < 36; ++r)
        for (int c = 28; c < 36; ++c) EXPECT_NEAR(rec.at(r, c), 1.0, 0.05);
    EXPECT_NEAR(rec.at(32, 5), 0.0, 0.05); // outside the disk, inside the field of view
}

TEST(Fbp, NoiselessFullViewFoamHasHighSsim) {
    const ImageGrid truth = foam(64, 1);
    const auto s = radon_forward(truth, make_angle_schedule(ScheduleKind::full, 180, 180));
    EXPECT_GE(ssim(truth, fbp_reconstruct(s), 1.0), 0.8);
}

TEST(Fbp, CountsAreConvertedBeforeFiltering) {
    const ImageGrid truth = disk(32, 10);
    const auto s = radon_forward(truth, make_angle_schedule(ScheduleKind::full, 90, 90));
    Sinogram counts = s;
    counts.is_counts = true;
    counts.photon_budget = 1e6;
    counts.normalizer = 20.0;
    for (double& v : counts.values) v = poisson_rate(v, 1e6, 20.0);
    const auto a = fbp_reconstruct(s), b = fbp_reconstruct(counts);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-6);
}

TEST(Fbp, NonnegativityClampsOutput) {
    const auto s = radon_forward(foam(32, 2), make_angle_schedule(ScheduleKind::uniform_sparse, 8, 180));
    ReconConfig cfg;
    EXPECT_GE(fbp_reconstruct(s, cfg).min(), 0.0);
    cfg.nonnegativity = false;
    EXPECT_LT(fbp_reconstruct(s, cfg).min(), 0.0);
}

TEST(Sirt, ResidualNonIncreasingOnNoiselessData) {
    const auto s = radon_forward(foam(64, 3), make_angle_schedule(ScheduleKind::uniform_sparse, 20, 180));
    ReconConfig cfg;
    cfg.iterations = 50;
    const auto res = sirt_solve(s, cfg);
    ASSERT_EQ(res.residuals.size(), 51u);
    for (std::size_t i = 1; i < res.residuals.size(); ++i) EXPECT_LE(res.residuals[i], res.residuals[i - 1] * (1 + 1e-12));
}

TEST(Sirt, ReportedResidualIsRowWeightedNorm) {
    const auto s = radon_forward(foam(16, 4), make_angle_schedule(ScheduleKind::uniform_sparse, 6, 60));
    ReconConfig cfg;
    cfg.iterations = 7;
    const auto res = sirt_solve(s, cfg);
    const RadonOperator op(16, s.schedule.angles);
    std::vector<double> ones(op.image_size(), 1.0), rows(op.sino_size()), rx(op.sino_size());
    op.forward<double>(ones, rows);
    op.forward<double>(res.image.values, rx);
    double n2 = 0;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i] > 1e-12) n2 += (s.values[i] - rx[i]) * (s.values[i] - rx[i]) / rows[i];
    EXPECT_NEAR(res.residuals.back(), std::sqrt(n2), 1e-9);
}

TEST(Sirt, TruthIsAFixedPoint) {
    const ImageGrid truth = foam(16, 5);
    const auto s = radon_forward(truth, make_angle_schedule(ScheduleKind::full, 30, 30));
    ReconConfig cfg;
    cfg.iterations = 5;
    const auto res = sirt_solve(s, cfg, &truth);
    for (double r : res.residuals) EXPECT_LT(r, 1e-10);
    EXPECT_LT(mse(res.image, truth), 1e-20);
}

TEST(Sirt, ErrorShrinksWithIterations) {
    const ImageGrid truth = foam(32, 6);
    const auto s = radon_forward(truth, make_angle_schedule(ScheduleKind::full, 60, 60));
    ReconConfig few, many;
    few.iterations = 5;
    many.iterations = 200;
    EXPECT_LT(mse(sirt_reconstruct(s, many), truth), 0.5 * mse(sirt_reconstruct(s, few), truth));
}

TEST(Sirt, RejectsBadRelaxation) {
    ReconConfig cfg;
    cfg.relaxation = 2.5;
    const auto s = radon_forward(foam(16, 1), make_angle_schedule(ScheduleKind::full, 4, 4));
    EXPECT_THROW(sirt_solve(s, cfg), ConfigError);
}

TEST(Tv, GradientAdjointIdentity) {
    Rng rng(9);
    const int n = 7;
    const ImageGrid x = test::random_image(n, rng, -1, 1);
    const ImageGrid qh = test::random_image(n, rng, -1, 1), qv = test::random_image(n, rng, -1, 1);
    std::vector<double> gh(49), gv(49), back(49);
    detail::grad2d(x.values, n, gh, gv);
    detail::grad2d_adjoint(qh.values, qv.values, n, back);
    double lhs = 0, rhs = 0;
    for (int i = 0; i < 49; ++i) {
        lhs += gh[static_cast<std::size_t>(i)] * qh.values[static_cast<std::size_t>(i)] +
               gv[static_cast<std::size_t>(i)] * qv.values[static_cast<std::size_t>(i)];
        rhs += x.values[static_cast<std::size_t>(i)] * back[static_cast<std::size_t>(i)];
    }
    EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Tv, OperatorNormMatchesDenseSvd) {
    const int n = 6;
    const auto sched = make_angle_schedule(ScheduleKind::full, 9, 9);
    const RadonOperator op(n, sched.angles);
    const double mu = 0.7;
    const int np = n * n, nr = static_cast<int>(op.sino_size());
    Eigen::MatrixXd k = Eigen::MatrixXd::Zero(nr + 2 * np, np);
    std::vector<double> e(static_cast<std::size_t>(np)), col(static_cast<std::size_t>(nr)), gh(static_cast<std::size_t>(np)),
        gv(static_cast<std::size_t>(np));
    for (int j = 0; j < np; ++j) {
        std::fill(e.begin(), e.end(), 0.0);
        e[static_cast<std::size_t>(j)] = 1.0;
        op.forward<double>(e, col);
        detail::grad2d(e, n, gh, gv);
        for (int i = 0; i < nr; ++i) k(i, j) = col[static_cast<std::size_t>(i)];
        for (int i = 0; i < np; ++i) {
            k(nr + i, j) = mu * gh[static_cast<std::size_t>(i)];
            k(nr + np + i, j) = mu * gv[static_cast<std::size_t>(i)];
        }
    }
    const double exact = Eigen::JacobiSVD<Eigen::MatrixXd>(k).singularValues()(0);
    EXPECT_NEAR(tv_operator_norm(op, mu, 300), exact, 1e-3 * exact);
}

TEST(Tv, RejectsStepsViolatingTheBound) {
    const auto s = radon_forward(foam(16, 1), make_angle_schedule(ScheduleKind::full, 8, 8));
    ReconConfig cfg;
    cfg.algorithm = ReconAlgorithm::tv;
    cfg.tv_sigma = 1.0;
    cfg.tv_tau = 1.0;
    EXPECT_THROW(tv_solve(s, cfg), ConfigError);
}

TEST(Tv, BeatsSparseFbpOnPiecewiseConstantFoam) {
    const ImageGrid truth = foam(64, 7);
    const auto s = radon_forward(truth, make_angle_schedule(ScheduleKind::uniform_sparse, 20, 180));
    ReconConfig cfg;
    cfg.algorithm = ReconAlgorithm::tv;
    EXPECT_LT(mse(tv_reconstruct(s, cfg), truth), mse(fbp_reconstruct(s), truth));
}

TEST(Tv, ZeroWeightFitsTheData) {
    const auto s = radon_forward(foam(16, 8), make_angle_schedule(ScheduleKind::full, 24, 24));
    ReconConfig cfg;
    cfg.tv_lambda = 0.0;
    cfg.tv_iterations = 500;
    const auto res = tv_solve(s, cfg);
    EXPECT_LT(res.residuals.back(), 0.05 * res.residuals.front());
    EXPECT_GE(res.image.min(), 0.0);
}

TEST(Reconstruct, DispatchesByAlgorithm) {
    const auto s = radon_forward(foam(16, 9), make_angle_schedule(ScheduleKind::full, 12, 12));
    ReconConfig cfg;
    EXPECT_EQ(reconstruct(s, cfg), fbp_reconstruct(s, cfg));
    cfg.algorithm = ReconAlgorithm::sirt;
    cfg.iterations = 3;
    EXPECT_EQ(reconstruct(s, cfg), sirt_reconstruct(s, cfg));
}
