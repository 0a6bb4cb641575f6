#include <gtest/gtest.h>

#include <set>

#include "pvae/harness.hpp"
#include "test_util.hpp"

using namespace pvae;

namespace {

RunContext context(const fs::path& out, std::vector<std::string> sets, std::uint64_t seed = 7, int threads = 1) {
    RunContext ctx;
    ctx.settings = resolve_settings("", sets, seed, {});
    ctx.out = out;
    ctx.threads = threads;
    return ctx;
}

std::vector<OutputFile> outputs_of(const fs::path& dir) { return inventory(dir); }

bool same_outputs(const fs::path& a, const fs::path& b) {
    const auto x = outputs_of(a), y = outputs_of(b);
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i].path != y[i].path || x[i].sha256 != y[i].sha256) return false;
    }
    return true;
}

std::vector<std::string> small_foam() {
    return {"mode=foam", "object_count=3", "image_size=16", "source_angles=24", "sparse_angles=6"};
}

std::vector<std::string> with(std::vector<std::string> base, std::initializer_list<std::string> more) {
    base.insert(base.end(), more.begin(), more.end());
    return base;
}

} // namespace

TEST(Config, DefaultsDependOnMode) {
    const Settings toy = settings_from_json(Json::object());
    EXPECT_EQ(toy.mode, "toy");
    EXPECT_EQ(toy.object_count, 1024);
    EXPECT_EQ(toy.image_size, 2);
    EXPECT_EQ(toy.arch, "mlp");
    const Settings foam = settings_from_json(Json{{"mode", "foam"}});
    EXPECT_EQ(foam.object_count, 100);
    EXPECT_EQ(foam.image_size, 64);
    EXPECT_EQ(foam.source_angles, 180);
    EXPECT_EQ(foam.sparse_angles, 20);
    EXPECT_EQ(foam.arch, "unet");
    EXPECT_DOUBLE_EQ(foam.photon_budget, 1e4);
}

TEST(Config, RejectsUnknownKeysAndWrongTypesByName) {
    try {
        settings_from_json(Json{{"epochz", 3}});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("epochz"), std::string::npos);
    }
    try {
        settings_from_json(Json{{"epochs", 2.5}});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("epochs"), std::string::npos);
    }
    EXPECT_THROW(settings_from_json(Json{{"mode", "cube"}}), ConfigError);
    EXPECT_THROW(settings_from_json(Json{{"seed", -1}}), ConfigError);
    EXPECT_THROW(settings_from_json(Json::array()), ConfigError);
}

TEST(Config, OverridesParseJsonOrFallBackToString) {
    Json cfg = Json::object();
    apply_override(cfg, "epochs=12");
    apply_override(cfg, "lr=0.5e-3");
    apply_override(cfg, "schedule=random");
    apply_override(cfg, "resume=false");
    apply_override(cfg, "unet_widths=[4,8]");
    const Settings s = settings_from_json(cfg);
    EXPECT_EQ(s.epochs, 12);
    EXPECT_DOUBLE_EQ(s.lr, 5e-4);
    EXPECT_EQ(s.schedule, "random");
    EXPECT_FALSE(s.resume);
    EXPECT_EQ(s.unet_widths, (std::vector<int>{4, 8}));
    EXPECT_THROW(apply_override(cfg, "noequals"), ConfigError);
    EXPECT_THROW(apply_override(cfg, "=3"), ConfigError);
}

TEST(Config, ValidationNamesTheKey) {
    Settings s = settings_from_json(Json{{"mode", "foam"}, {"sparse_angles", 200}});
    try {
        validate(s);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("sparse_angles"), std::string::npos);
    }
    s = settings_from_json(Json{{"image_size", 4}});
    EXPECT_THROW(validate(s), ConfigError);
    s = settings_from_json(Json{{"lr_final", 1.0}});
    EXPECT_THROW(validate(s), ConfigError);
}

TEST(Config, LayeringOrder) {
    test::TempDir dir;
    const fs::path file = dir.path() / "cfg.json";
    save_json(file, Json{{"epochs", 5}, {"seed", 1}, {"metrics", "a.csv"}});
    const Settings s = resolve_settings(file.string(), {"epochs=9"}, 4, {"b.csv"});
    EXPECT_EQ(s.epochs, 9);
    EXPECT_EQ(s.seed, 4u);
    EXPECT_EQ(s.metrics, (std::vector<std::string>{"a.csv", "b.csv"}));
    EXPECT_THROW(resolve_settings((dir.path() / "missing.json").string(), {}, std::nullopt, {}), ConfigError);
    save_text(dir.path() / "bad.json", "{oops");
    EXPECT_THROW(resolve_settings((dir.path() / "bad.json").string(), {}, std::nullopt, {}), ConfigError);
}

TEST(Config, HashIgnoresPathsButNotSettings) {
    Settings a = settings_from_json(Json::object());
    Settings b = a;
    b.dataset = "/somewhere/else";
    b.checkpoint = "x";
    b.metrics = {"m.csv"};
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.lr = 2e-3;
    EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Harness, ParallelForVisitsEveryIndexOnceAndRethrows) {
    std::vector<int> hits(50, 0);
    parallel_for(50, 4, [&](int i, int) { ++hits[static_cast<std::size_t>(i)]; });
    for (int h : hits) EXPECT_EQ(h, 1);
    EXPECT_THROW(parallel_for(10, 3,
                              [](int i, int) {
                                  if (i == 6) throw DataError("boom");
                              }),
                 DataError);
}

TEST(Harness, ExitCodes) {
    EXPECT_EQ(exit_code_for(ConfigError("x")), 2);
    EXPECT_EQ(exit_code_for(DataError("x")), 3);
    EXPECT_EQ(exit_code_for(NumericalError("x")), 4);
    EXPECT_EQ(exit_code_for(std::runtime_error("x")), 1);
}

TEST(Generate, ToyLayoutAndManifestInventory) {
    test::TempDir dir;
    const auto ctx = context(dir.path() / "ds", {"object_count=40"});
    run_command("generate", ctx);
    const Json meta = load_json(dir.path() / "ds" / "meta.json");
    EXPECT_EQ(meta.at("object_count"), 40);
    EXPECT_DOUBLE_EQ(meta.at("normalizer").get<double>(), 2.0);
    EXPECT_TRUE(fs::exists(dir.path() / "ds" / "phantoms" / "candidates.pvt"));
    for (int i = 0; i < 40; ++i) {
        const Sinogram m = load_sinogram(dir.path() / "ds" / "measurements" / object_file_stem(i));
        EXPECT_TRUE(m.is_counts);
        EXPECT_EQ(m.angles(), 1u);
    }

    const Json man = load_json(dir.path() / "ds" / "manifest.json");
    EXPECT_EQ(man.at("command"), "generate");
    EXPECT_EQ(man.at("seed"), 7);
    std::set<std::string> listed;
    for (const auto& o : man.at("outputs")) {
        listed.insert(o.at("path").get<std::string>());
        EXPECT_EQ(o.at("sha256").get<std::string>(), sha256_file(dir.path() / "ds" / o.at("path").get<std::string>()));
    }
    std::set<std::string> on_disk;
    for (const auto& e : fs::recursive_directory_iterator(dir.path() / "ds"))
        if (e.is_regular_file()) on_disk.insert(fs::relative(e.path(), dir.path() / "ds").generic_string());
    on_disk.erase("manifest.json");
    EXPECT_EQ(listed, on_disk);
}

TEST(Generate, DeterministicAndThreadIndependent) {
    test::TempDir dir;
    run_command("generate", context(dir.path() / "a", small_foam(), 11, 1));
    run_command("generate", context(dir.path() / "b", small_foam(), 11, 3));
    EXPECT_TRUE(same_outputs(dir.path() / "a", dir.path() / "b"));
    run_command("generate", context(dir.path() / "c", small_foam(), 12, 1));
    EXPECT_FALSE(same_outputs(dir.path() / "a", dir.path() / "c"));

    const Json sched = load_json(dir.path() / "a" / "schedules.json");
    EXPECT_EQ(sched.at("uniform").at("indices").size(), 6u);
    EXPECT_EQ(sched.at("random").size(), 3u);
    const Sinogram full = load_sinogram(dir.path() / "a" / "measurements" / "obj_00000");
    EXPECT_EQ(full.angles(), 24u);
}

TEST(Baselines, WritesEveryAlgorithmAndRejectsToyData) {
    test::TempDir dir;
    run_command("generate", context(dir.path() / "ds", small_foam()));
    const auto sets = with(small_foam(), {"dataset=" + (dir.path() / "ds").string(), "sirt_iterations=10",
                                          "tv_iterations=10"});
    run_command("baselines", context(dir.path() / "bl", sets));
    const auto rows = load_metrics_csv(dir.path() / "bl" / "metrics.csv");
    EXPECT_EQ(rows.size(), 3u * baseline_algorithms().size());
    for (const auto& a : baseline_algorithms()) EXPECT_TRUE(fs::exists(dir.path() / "bl" / "recon" / a / "obj_00002.pvt"));

    run_command("generate", context(dir.path() / "toy", {"object_count=4"}));
    EXPECT_THROW(run_command("baselines", context(dir.path() / "x", {"dataset=" + (dir.path() / "toy").string()})),
                 ConfigError);
    EXPECT_THROW(run_command("baselines", context(dir.path() / "x", {"dataset=" + (dir.path() / "nope").string()})),
                 DataError);
}

TEST(Train, IgnoresPhantomFiles) {
    test::TempDir dir;
    run_command("generate", context(dir.path() / "ds", {"object_count=32"}));
    const auto sets = std::vector<std::string>{"dataset=" + (dir.path() / "ds").string(), "epochs=4"};
    run_command("train", context(dir.path() / "t1", sets));
    fs::remove_all(dir.path() / "ds" / "phantoms");
    fs::remove_all(dir.path() / "ds" / "noiseless");
    run_command("train", context(dir.path() / "t2", sets));
    EXPECT_TRUE(same_outputs(dir.path() / "t1", dir.path() / "t2"));
}

TEST(Train, InterruptedRunResumesBitExactly) {
    test::TempDir dir;
    run_command("generate", context(dir.path() / "ds", small_foam()));
    const auto base = with(small_foam(), {"dataset=" + (dir.path() / "ds").string(), "epochs=5", "batch_size=2",
                                          "unet_depth=2", "unet_widths=[4,8]", "latent_channels=2"});
    run_command("train", context(dir.path() / "full", base));
    for (int k = 0; k < 3; ++k) run_command("train", context(dir.path() / "parts", with(base, {"epoch_limit=2"})));
    for (const char* f : {"train_log.csv", "checkpoint/params.pvt", "checkpoint/optimizer.pvt", "checkpoint/state.json"}) {
        EXPECT_EQ(sha256_file(dir.path() / "full" / f), sha256_file(dir.path() / "parts" / f)) << f;
    }
    const Json man = load_json(dir.path() / "parts" / "manifest.json");
    EXPECT_EQ(man.at("epoch_wall_seconds").size(), 5u);

    EXPECT_THROW(run_command("train", context(dir.path() / "parts", with(base, {"lr=0.01"}))), ConfigError);
    run_command("train", context(dir.path() / "parts", with(base, {"lr=0.01", "resume=false"})));
}

TEST(Evaluate, ToyCasesAndArchitectureMismatch) {
    test::TempDir dir;
    run_command("generate", context(dir.path() / "ds", {"object_count=64"}));
    const std::string ds = "dataset=" + (dir.path() / "ds").string();
    run_command("train", context(dir.path() / "tr", {ds, "epochs=2"}));
    const std::string ck = "checkpoint=" + (dir.path() / "tr" / "checkpoint").string();
    run_command("evaluate", context(dir.path() / "ev", {ds, ck, "toy_samples=500"}));
    std::ifstream is(dir.path() / "ev" / "toy_cases.csv");
    std::string line;
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, 1 + 4 * 4);
    EXPECT_EQ(load_tensor(dir.path() / "ev" / "samples" / "o2_a90.pvt").shape, (std::vector<std::int64_t>{500, 4}));

    run_command("generate", context(dir.path() / "foam", small_foam()));
    EXPECT_THROW(run_command("evaluate", context(dir.path() / "ev2", with(small_foam(), {"dataset=" + (dir.path() / "foam").string(), ck}))),
                 ConfigError);
    EXPECT_THROW(run_command("evaluate", context(dir.path() / "ev3", {ds})), ConfigError);
}

TEST(Report, SummaryComparisonRowAndCharts) {
    test::TempDir dir;
    std::vector<MetricsRecord> recs;
    for (int t = 0; t < 3; ++t) {
        for (int i = 0; i < 4; ++i) {
            recs.push_back({object_file_stem(i), "pvae-uniform", t, 0.7 + 0.01 * t, 20.0, 0.01, "h"});
            recs.push_back({object_file_stem(i), "pvae-random", t, 0.72 + 0.01 * t, 21.0, 0.009, "h"});
        }
    }
    for (int i = 0; i < 4; ++i) recs.push_back({object_file_stem(i), "fbp-full", 0, 0.8, 22.0, 0.005, "h"});
    save_text(dir.path() / "m.csv", metrics_to_csv(recs));
    run_command("report", context(dir.path() / "rep", {"metrics=" + (dir.path() / "m.csv").string()}));

    std::ifstream is(dir.path() / "rep" / "summary.csv");
    std::stringstream ss;
    ss << is.rdbuf();
    const std::string csv = ss.str();
    EXPECT_NE(csv.find("pvae-uniform,3,0.71,0.01,"), std::string::npos) << csv;
    EXPECT_NE(csv.find("fbp-full,1,0.8,0,"), std::string::npos) << csv;
    EXPECT_NE(csv.find("pvae random-uniform,-,0.02,"), std::string::npos) << csv;
    for (const char* f : {"ssim.svg", "psnr.svg", "mse.svg", "summary.md", "trial_means.csv"}) {
        EXPECT_TRUE(fs::exists(dir.path() / "rep" / f)) << f;
    }

    run_command("report", context(dir.path() / "rep2", {"metrics=" + (dir.path() / "m.csv").string()}));
    EXPECT_EQ(sha256_file(dir.path() / "rep" / "ssim.svg"), sha256_file(dir.path() / "rep2" / "ssim.svg"));

    save_text(dir.path() / "empty.csv", std::string(kMetricsCsvHeader) + "\n");
    EXPECT_THROW(run_command("report", context(dir.path() / "r3", {"metrics=" + (dir.path() / "empty.csv").string()})),
                 DataError);
    EXPECT_THROW(run_command("report", context(dir.path() / "r4", {"metrics=" + (dir.path() / "none.csv").string()})),
                 DataError);
    EXPECT_THROW(run_command("report", context(dir.path() / "r5", {})), ConfigError);
}

TEST(Report, SingleTrialDrawsZeroHeightErrorBars) {
    const std::string svg = bar_chart_svg("t", "SSIM", {{"uniform", "fbp", 0.5, 0.0}});
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    // the whisker collapses onto the bar top
    EXPECT_NE(svg.find("<line x1=\"300.00\" x2=\"300.00\" y1=\"69.09\" y2=\"69.09\" stroke=\"black\"/>"),
              std::string::npos)
        << svg;
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    EXPECT_EQ(split_algorithm("pvae-random"), (std::pair<std::string, std::string>{"pvae", "random"}));
    EXPECT_EQ(split_algorithm("oracle").second, "other");
}
