#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "pvae/pvae.hpp"
#include "test_util.hpp"

using namespace pvae;

namespace {

PvaeConfig small_unet() {
    PvaeConfig cfg;
    cfg.arch = "unet";
    cfg.image_size = 8;
    cfg.depth = 2;
    cfg.widths = {4, 6};
    cfg.latent_channels = 2;
    return cfg;
}

TrainConfig quick(int epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 2;
    t.lr = 3e-3;
    t.seed = 12;
    return t;
}

} // namespace

TEST(Config, ValidatesArchitecture) {
    PvaeConfig cfg;
    cfg.arch = "transformer";
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = small_unet();
    cfg.image_size = 6;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = small_unet();
    cfg.widths = {4};
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_EQ(pvae_config_from_json(to_json(small_unet())).widths, small_unet().widths);
}

TEST(Model, LatentAndOutputShapes) {
    PvaeModel<double> model(small_unet());
    const auto ex = gradcheck::foam_examples(8);
    dg::Graph<double> g;
    const auto q = model.encode(g, g.constant(batch_encoder_input<double>({&ex[0], &ex[1]})));
    const auto shapes = model.latent_shapes(2);
    ASSERT_EQ(q.size(), 3u);
    for (std::size_t l = 0; l < q.size(); ++l) {
        EXPECT_EQ(g.value(q[l].mean).shape, shapes[l]);
        EXPECT_EQ(g.value(q[l].logvar).shape, shapes[l]);
    }
    std::vector<dg::Var> z;
    for (const auto& l : q) z.push_back(l.mean);
    const auto obj = model.decode(g, z);
    EXPECT_EQ(g.value(obj.mean).shape, (std::vector<int>{2, 1, 8, 8}));
    for (double v : g.value(obj.mean).data) EXPECT_GE(v, 0.0);
    for (double v : g.value(obj.logvar).data) EXPECT_LE(std::abs(v), dg::kLogVarLimit);
}

TEST(Model, EncoderRejectsWrongInputShape) {
    PvaeModel<double> model(small_unet());
    dg::Graph<double> g;
    EXPECT_THROW(model.encode(g, g.constant(dg::Tensor<double>({1, 2, 4, 4}))), ShapeError);
    EXPECT_THROW(model.decode(g, {g.constant(dg::Tensor<double>({1, 3}))}), ShapeError);
}

TEST(Model, InitializationIsSeeded) {
    PvaeConfig a;
    a.init_seed = 3;
    PvaeModel<float> m1(a), m2(a);
    a.init_seed = 4;
    PvaeModel<float> m3(a);
    EXPECT_EQ(m1.params().get("enc.fc0.w").value.data, m2.params().get("enc.fc0.w").value.data);
    EXPECT_NE(m1.params().get("enc.fc0.w").value.data, m3.params().get("enc.fc0.w").value.data);
}

TEST(EncoderInput, ChannelsAreFbpAndCoverage) {
    const auto ex = gradcheck::toy_examples();
    // O1 at angle 0: left column bright in the FBP channel
    const auto& in = ex[0].encoder_input;
    ASSERT_EQ(in.size(), 8u);
    EXPECT_GT(in[0], in[1]);
    float top = 0;
    for (int i = 4; i < 8; ++i) top = std::max(top, in[static_cast<std::size_t>(i)]);
    EXPECT_FLOAT_EQ(top, 1.0f);
}

TEST(Examples, RejectNonCountData) {
    Sinogram s;
    s.schedule = make_angle_schedule(ScheduleKind::full, 1, 1);
    s.bins = 2;
    s.values = {0.5, 1.0};
    EXPECT_THROW(make_training_example("x", s), DataError);
}

TEST(Elbo, GradientMatchesFiniteDifferences) {
    for (const auto& r : gradcheck::elbo_checks()) EXPECT_LT(r.rel_error, 1e-4) << r.name;
}

TEST(Elbo, LossIsLikelihoodPlusKl) {
    PvaeModel<double> model(PvaeConfig{});
    const auto data = gradcheck::toy_examples();
    std::vector<const TrainingExample*> batch{&data[0], &data[1]};
    Rng rng(1);
    dg::Graph<double> g;
    const auto e = build_elbo(g, model, batch, 3, rng);
    EXPECT_NEAR(g.value(e.loss).item(), e.nll + e.kl, 1e-9 * std::abs(e.nll));
    EXPECT_GE(e.kl, 0.0);
    ASSERT_EQ(e.per_example.size(), 2u);
    EXPECT_NEAR((e.per_example[0] + e.per_example[1]) / 2, e.nll + e.kl, 1e-6 * std::abs(e.nll));
}

TEST(Training, ToyLossDecreases) {
    PvaeModel<float> model(PvaeConfig{});
    auto data = gradcheck::toy_examples();
    TrainState<float> state;
    train(model, data, quick(150), state);
    ASSERT_EQ(state.history.size(), 150u);
    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
        first += state.history[static_cast<std::size_t>(i)].loss;
        last += state.history[state.history.size() - 1 - static_cast<std::size_t>(i)].loss;
    }
    EXPECT_LT(last, 0.7 * first);
}

TEST(Training, ResumeReproducesUninterruptedRun) {
    test::TempDir dir;
    const auto data = gradcheck::toy_examples();
    PvaeModel<float> full(PvaeConfig{});
    TrainState<float> full_state;
    train(full, data, quick(6), full_state);

    PvaeModel<float> part(PvaeConfig{});
    TrainState<float> part_state;
    auto cfg = quick(6);
    cfg.checkpoint_every = 3;
    bool saved = false;
    train(part, data, cfg, part_state, [](const EpochStats& s) { return s.epoch < 3; },
          [&](const PvaeModel<float>& m, const TrainState<float>& st) {
              save_checkpoint(dir.path(), m, st);
              saved = true;
          });
    ASSERT_TRUE(saved);
    auto ck = load_checkpoint<float>(dir.path());
    EXPECT_EQ(ck.state.epoch, 3);
    train(ck.model, data, quick(6), ck.state);

    for (std::size_t i = 0; i < full.params().all().size(); ++i) {
        EXPECT_EQ(full.params().all()[i].value.data, ck.model.params().all()[i].value.data) << full.params().all()[i].name;
    }
    ASSERT_EQ(ck.state.history.size(), full_state.history.size());
    for (std::size_t i = 0; i < full_state.history.size(); ++i) EXPECT_EQ(ck.state.history[i].loss, full_state.history[i].loss);
}

TEST(Training, RejectsEmptyDataAndBadConfig) {
    PvaeModel<float> model(PvaeConfig{});
    TrainState<float> st;
    EXPECT_THROW(train(model, {}, quick(1), st), DataError);
    auto cfg = quick(1);
    cfg.lr = 0;
    EXPECT_THROW(train(model, gradcheck::toy_examples(), cfg, st), ConfigError);
}

TEST(Training, BatchesGroupEqualAngleCounts) {
    auto data = gradcheck::foam_examples(8);
    auto toy_like = data[0];
    toy_like.counts = select_angles(data[0].counts, ScheduleKind::uniform_sparse, {data[0].counts.schedule.indices[0]});
    data.push_back(toy_like);
    const auto batches = make_batches(data, 8, 1);
    for (const auto& b : batches) {
        for (std::size_t i : b) EXPECT_EQ(data[i].counts.angles(), data[b.front()].counts.angles());
    }
}

TEST(Posterior, SamplesHaveRequestedCountAndAreSeeded) {
    PvaeModel<float> model(small_unet());
    const auto ex = gradcheck::foam_examples(8);
    const auto a = sample_posterior(model, ex[0], 10, 3);
    EXPECT_EQ(a.size(), 640u);
    EXPECT_EQ(a, sample_posterior(model, ex[0], 10, 3));
    EXPECT_EQ(a, sample_posterior(model, ex[0], 10, 3, 3)); // chunking does not change the stream
    const auto img = reconstruct_point(model, ex[0], 10, 3);
    double m0 = 0;
    for (int i = 0; i < 10; ++i) m0 += a[static_cast<std::size_t>(i) * 64];
    EXPECT_NEAR(img.values[0], m0 / 10, 1e-9);
}

TEST(Checkpoint, RoundTripsParametersAndOptimizer) {
    test::TempDir dir;
    PvaeModel<float> model(small_unet());
    TrainState<float> st;
    train(model, gradcheck::foam_examples(8), quick(2), st);
    save_checkpoint(dir.path(), model, st, Json{{"note", "x"}});
    const auto ck = load_checkpoint<float>(dir.path());
    EXPECT_EQ(ck.model.config().widths, model.config().widths);
    EXPECT_EQ(ck.state.optimizer.step, st.optimizer.step);
    EXPECT_EQ(ck.state.optimizer.v, st.optimizer.v);
    EXPECT_EQ(ck.run.at("note"), "x");
    for (std::size_t i = 0; i < model.params().all().size(); ++i)
        EXPECT_EQ(ck.model.params().all()[i].value.data, model.params().all()[i].value.data);
}
