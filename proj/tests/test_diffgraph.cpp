#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "pvae/adam.hpp"

using namespace pvae;
using namespace pvae::dg;

TEST(GradCheck, EveryPrimitiveMatchesFiniteDifferences) {
    for (const auto& r : gradcheck::primitive_checks()) {
        EXPECT_LT(r.rel_error, 1e-4) << r.name;
        EXPECT_GT(r.checked, 0u) << r.name;
    }
}

TEST(Graph, DenseForwardMatchesHandComputation) {
    Graph<double> g;
    const Var x = g.constant(Tensor<double>({1, 2}, {1.0, 2.0}));
    const Var w = g.constant(Tensor<double>({2, 2}, {1.0, 2.0, 3.0, 4.0}));
    const Var b = g.constant(Tensor<double>({2}, {0.5, -0.5}));
    const auto& y = g.value(dense(g, x, w, b)).data;
    EXPECT_DOUBLE_EQ(y[0], 1 + 6 + 0.5);
    EXPECT_DOUBLE_EQ(y[1], 2 + 8 - 0.5);
}

TEST(Graph, ConvWithIdentityKernelCopiesInput) {
    Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor<double> w({1, 1, 3, 3});
    w.data[4] = 1.0;
    Graph<double> g;
    const auto& y = g.value(conv2d(g, g.constant(x), g.constant(w), g.constant(Tensor<double>({1})))).data;
    EXPECT_EQ(y, x.data);
}

TEST(Graph, ConvZeroPadsBorders) {
    Tensor<double> x({1, 1, 2, 2}, {1, 1, 1, 1});
    Tensor<double> w({1, 1, 3, 3}, 1.0);
    Graph<double> g;
    const auto& y = g.value(conv2d(g, g.constant(x), g.constant(w), g.constant(Tensor<double>({1})))).data;
    for (double v : y) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Graph, PoolingAndUpsamplingShapes) {
    Graph<double> g;
    const Var x = g.constant(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
    EXPECT_DOUBLE_EQ(g.value(downsample(g, x)).item(), 2.5);
    const auto& up = g.value(upsample(g, x));
    EXPECT_EQ(up.shape, (std::vector<int>{1, 1, 4, 4}));
    EXPECT_DOUBLE_EQ(up.data[5], 1.0);
    EXPECT_DOUBLE_EQ(up.data[15], 4.0);
}

TEST(Graph, ShapeMismatchNamesTheOperation) {
    Graph<double> g;
    const Var a = g.constant(Tensor<double>({2, 3})), b = g.constant(Tensor<double>({3, 2}));
    try {
        add(g, a, b);
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.op(), "add");
    }
    EXPECT_THROW(dense(g, a, g.constant(Tensor<double>({2, 2})), g.constant(Tensor<double>({2}))), ShapeError);
    EXPECT_THROW(g.backward(a), ShapeError);
}

TEST(Graph, ParameterGradientsAccumulateAcrossUses) {
    ParameterStore<double> store;
    auto& p = store.add("p", Tensor<double>({2}, {1.0, 3.0}));
    Graph<double> g;
    const Var a = g.parameter(p), b = g.parameter(p);
    g.backward(reduce_sum(g, mul(g, a, b)));
    EXPECT_DOUBLE_EQ(p.grad.data[0], 2.0);
    EXPECT_DOUBLE_EQ(p.grad.data[1], 6.0);
}

TEST(Graph, ConstantsReceiveNoGradient) {
    Graph<double> g;
    const Var c = g.constant(Tensor<double>({2}, 1.0));
    const Var v = g.variable(Tensor<double>({2}, 2.0));
    g.backward(reduce_sum(g, mul(g, c, v)));
    EXPECT_FALSE(g.requires_grad(c));
    for (double d : g.grad(v).data) EXPECT_DOUBLE_EQ(d, 1.0);
}

TEST(Gaussian, KlIsZeroAtPriorAndPositiveElsewhere) {
    Graph<double> g;
    const Var zero = g.constant(Tensor<double>({2, 3}));
    EXPECT_NEAR(g.value(kl_std_normal(g, GaussianParams<double>{zero, zero})).item(), 0.0, 1e-15);
    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        const Var m = g.constant(gradcheck::uniform({1, 4}, rng, -2, 2));
        const Var lv = g.constant(gradcheck::uniform({1, 4}, rng, -5, 5));
        EXPECT_GE(g.value(kl_std_normal(g, GaussianParams<double>{m, lv})).item(), 0.0);
    }
}

TEST(Gaussian, ReparameterizedSamplesHaveRequestedMoments) {
    Graph<double> g;
    const Var m = g.constant(Tensor<double>({20000}, 1.5));
    const Var lv = g.constant(Tensor<double>({20000}, std::log(0.25)));
    Rng rng(3);
    const auto& z = g.value(reparameterize(g, GaussianParams<double>{m, lv}, rng)).data;
    double mean = 0, var = 0;
    for (double v : z) mean += v;
    mean /= 20000;
    for (double v : z) var += (v - mean) * (v - mean);
    var /= 19999;
    EXPECT_NEAR(mean, 1.5, 0.02);
    EXPECT_NEAR(var, 0.25, 0.01);
}

TEST(Gaussian, SoftClampBoundsLogVariance) {
    Graph<double> g;
    const auto& y = g.value(soft_clamp(g, g.constant(Tensor<double>({3}, {-1e6, 0.5, 1e6})), 10.0)).data;
    EXPECT_NEAR(y[0], -10.0, 1e-12);
    EXPECT_NEAR(y[1], 10 * std::tanh(0.05), 1e-12);
    EXPECT_NEAR(y[2], 10.0, 1e-12);
}

TEST(PoissonNll, MatchesLoglikAndIgnoresFlooredRates) {
    Tensor<double> counts({1, 3}, {4.0, 0.0, 2.0});
    Graph<double> g;
    const Var s = g.variable(Tensor<double>({1, 3}, {0.4, 0.1, -0.5}));
    const Var nll = poisson_nll(g, s, counts, 10.0);
    const std::vector<double> rates{4.0 + kRateFloor, 1.0 + kRateFloor, kRateFloor};
    EXPECT_NEAR(g.value(nll).item(), -poisson_loglik(counts.data, rates), 1e-9);
    g.backward(reduce_sum(g, nll));
    EXPECT_DOUBLE_EQ(g.grad(s).data[2], 0.0);
}

TEST(Adam, FirstStepMovesEachParameterByLearningRate) {
    ParameterStore<double> store;
    auto& p = store.add("p", Tensor<double>({2}, {1.0, -1.0}));
    p.grad.data = {0.3, -7.0};
    AdamState<double> state;
    ASSERT_TRUE(adam_step(store, state, AdamConfig{0.01}).applied);
    EXPECT_NEAR(p.value.data[0], 1.0 - 0.01, 1e-9);
    EXPECT_NEAR(p.value.data[1], -1.0 + 0.01, 1e-9);
    EXPECT_EQ(state.step, 1);
}

TEST(Adam, MinimizesAQuadratic) {
    ParameterStore<double> store;
    auto& p = store.add("p", Tensor<double>({3}, {4.0, -2.0, 0.5}));
    AdamState<double> state;
    for (int i = 0; i < 3000; ++i) {
        for (std::size_t k = 0; k < 3; ++k) p.grad.data[k] = 2 * (p.value.data[k] - 1.0);
        adam_step(store, state, AdamConfig{0.01});
    }
    for (double v : p.value.data) EXPECT_NEAR(v, 1.0, 1e-3);
}

TEST(Adam, NonFiniteGradientSkipsTheStep) {
    ParameterStore<double> store;
    auto& p = store.add("p", Tensor<double>({2}, {1.0, 2.0}));
    p.grad.data = {0.1, std::nan("")};
    AdamState<double> state;
    const auto r = adam_step(store, state, AdamConfig{});
    EXPECT_FALSE(r.applied);
    EXPECT_NE(r.skipped_reason.find("p"), std::string::npos);
    EXPECT_EQ(p.value.data, (std::vector<double>{1.0, 2.0}));
    EXPECT_EQ(state.step, 0);
}
