#pragma once

// Pipeline stages behind the command line: generate, baselines, train,
// evaluate and report. Each stage writes into its own output directory
// and finishes with manifest.json listing every file it left there.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <fstream>
#include <cmath>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pvae/classical.hpp"
#include "pvae/config.hpp"
#include "pvae/metrics.hpp"
#include "pvae/oracle.hpp"
#include "pvae/phantoms.hpp"
#include "pvae/projector.hpp"
#include "pvae/pvae.hpp"

namespace pvae {

struct RunContext {
    Settings settings;
    fs::path out;
    int threads = 1;
};

// ---------------------------------------------------------------------------
// Utilities

/// Runs fn(i, worker) for i in [0, n) on up to `threads` workers; the first exception wins.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
    const int workers = std::max(1, std::min(threads, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i, 0);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (int i = next++; i < n; i = next++) {
                try {
                    fn(i, w);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

class StageTimer {
public:
    double lap() {
        const auto now = std::chrono::steady_clock::now();
        const double s = std::chrono::duration<double>(now - last_).count();
        last_ = now;
        return s;
    }

private:
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

struct OutputFile {
    std::string path; // relative, '/'-separated
    std::string sha256;
    std::uintmax_t bytes = 0;
};

/// Every regular file under `dir` except the manifest itself, sorted by path.
inline std::vector<OutputFile> inventory(const fs::path& dir) {
    std::vector<OutputFile> files;
    if (!fs::exists(dir)) return files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), dir).generic_string();
        if (rel == "manifest.json") continue;
        files.push_back({rel, sha256_file(e.path()), e.file_size()});
    }
    std::sort(files.begin(), files.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
    return files;
}

class RunManifest {
public:
    RunManifest(std::string command, const RunContext& ctx) : command_(std::move(command)), ctx_(ctx) {}

    void stage(const std::string& name, double seconds) { stages_.push_back({name, seconds}); }
    Json& extra() { return extra_; }

    void write() const {
        Json stages = Json::array();
        for (const auto& [n, s] : stages_) stages.push_back(Json{{"stage", n}, {"wall_seconds", s}});
        Json outputs = Json::array();
        for (const auto& f : inventory(ctx_.out)) {
            outputs.push_back(Json{{"path", f.path}, {"sha256", f.sha256}, {"bytes", f.bytes}});
        }
        Json j{{"command", command_},
               {"version", kVersion},
               {"seed", ctx_.settings.seed},
               {"config_hash", config_hash(ctx_.settings)},
               {"config", to_json(ctx_.settings)},
               {"threads", ctx_.threads},
               {"stages", stages},
               {"outputs", outputs}};
        for (auto it = extra_.begin(); it != extra_.end(); ++it) j[it.key()] = it.value();
        save_json(ctx_.out / "manifest.json", j);
    }

private:
    std::string command_;
    const RunContext& ctx_;
    std::vector<std::pair<std::string, double>> stages_;
    Json extra_ = Json::object();
};

inline std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

// ---------------------------------------------------------------------------
// Dataset layout

struct Dataset {
    fs::path root;
    DatasetMeta meta;
    Json raw;

    std::string id(int i) const { return object_file_stem(i); }
    int size() const { return meta.object_count; }
};

inline Dataset open_dataset(const std::string& path) {
    if (path.empty()) throw ConfigError("config key 'dataset' must name a generated dataset directory");
    Dataset d;
    d.root = path;
    if (!fs::exists(d.root / "meta.json")) throw DataError("no dataset at " + path + " (meta.json missing)");
    d.raw = load_json(d.root / "meta.json");
    try {
        d.meta = meta_from_json(d.raw);
    } catch (const Json::exception& e) {
        throw DataError("malformed dataset meta.json: " + std::string(e.what()));
    }
    return d;
}

/// The measurement object i was acquired with, restricted to the training schedule for foam data.
inline Sinogram load_training_measurement(const Dataset& d, int i, const std::string& schedule) {
    Sinogram full = load_sinogram(d.root / "measurements" / d.id(i));
    if (d.meta.mode == "toy") return full;
    static thread_local std::pair<fs::path, Json> cache;
    if (cache.first != d.root) cache = {d.root, load_json(d.root / "schedules.json")};
    const Json& sched = cache.second;
    Json entry;
    try {
        entry = schedule == "uniform" ? sched.at("uniform") : sched.at("random").at(d.id(i));
    } catch (const Json::exception&) {
        throw DataError("schedules.json has no " + schedule + " schedule for " + d.id(i));
    }
    const AngleSchedule s = schedule_from_json(entry);
    return select_angles(full, s.kind, s.indices);
}

inline std::vector<TrainingExample> load_training_set(const Dataset& d, const std::string& schedule, int threads) {
    std::vector<TrainingExample> data(static_cast<std::size_t>(d.size()));
    parallel_for(d.size(), threads, [&](int i, int) {
        data[static_cast<std::size_t>(i)] = make_training_example(d.id(i), load_training_measurement(d, i, schedule));
    });
    return data;
}

// ---------------------------------------------------------------------------
// generate

inline void cmd_generate(const RunContext& ctx) {
    const Settings& s = ctx.settings;
    RunManifest manifest("generate", ctx);
    StageTimer timer;
    fs::create_directories(ctx.out);

    DatasetMeta meta;
    meta.mode = s.mode;
    meta.object_count = s.object_count;
    meta.source_angles = s.source_angles;
    meta.image_size = s.image_size;
    meta.photon_budget = s.photon_budget;
    meta.seed = s.seed;
    const int m = s.object_count;

    std::vector<Sinogram> noiseless(static_cast<std::size_t>(m));
    Json extra{{"sparse_angles", s.sparse_angles}};

    if (s.mode == "toy") {
        meta.measurements = 1;
        meta.schedule_kind = "toy";
        const ToyDataset toy = sample_toy_dataset(meta, derive_seed(s.seed, 1), {s.toy_prior, 1.0 - s.toy_prior});
        fs::create_directories(ctx.out / "phantoms");
        std::vector<StoredTensor> cands{to_stored(toy.objects[0], "O1"), to_stored(toy.objects[1], "O2")};
        save_tensors(ctx.out / "phantoms" / "candidates.pvt", cands);
        Json draws = Json::array();
        for (int i = 0; i < m; ++i) {
            const auto& d = toy.draws[static_cast<std::size_t>(i)];
            draws.push_back(Json{{"id", object_file_stem(i)}, {"object", d.object}, {"angle", d.angle}});
            noiseless[static_cast<std::size_t>(i)] =
                radon_forward(toy.objects[static_cast<std::size_t>(d.object)],
                              schedule_from_indices(ScheduleKind::toy, 2, {d.angle}));
        }
        save_json(ctx.out / "phantoms" / "draws.json", Json{{"prior", toy.prior}, {"draws", draws}});
        extra["toy_prior"] = toy.prior;
    } else {
        meta.measurements = s.source_angles;
        meta.schedule_kind = "full";
        FoamSpec spec = foam_spec(s);
        generate_dataset(spec, m, ctx.out / "phantoms", meta);
        manifest.stage("phantoms", timer.lap());
        const AngleSchedule full = make_angle_schedule(ScheduleKind::full, s.source_angles, s.source_angles);
        parallel_for(m, ctx.threads, [&](int i, int) {
            noiseless[static_cast<std::size_t>(i)] =
                radon_forward(load_image(ctx.out / "phantoms" / (object_file_stem(i) + ".pvt")), full);
        });
        Json random = Json::object();
        for (int i = 0; i < m; ++i) {
            random[object_file_stem(i)] = schedule_to_json(make_angle_schedule(
                ScheduleKind::random_sparse, s.sparse_angles, s.source_angles, derive_seed(s.seed, 4, i)));
        }
        const AngleSchedule uniform = make_angle_schedule(ScheduleKind::uniform_sparse, s.sparse_angles, s.source_angles);
        save_json(ctx.out / "schedules.json", Json{{"uniform", schedule_to_json(uniform)}, {"random", random}});
        extra["foam"] = to_json(spec);
    }
    manifest.stage("phantoms+projection", timer.lap());

    double normalizer = 0.0;
    for (const auto& n : noiseless)
        for (double v : n.values) normalizer = std::max(normalizer, v);
    if (!(normalizer > 0.0)) throw DataError("every noiseless projection is zero; cannot normalize the photon budget");
    meta.normalizer = normalizer;

    fs::create_directories(ctx.out / "noiseless");
    fs::create_directories(ctx.out / "measurements");
    parallel_for(m, ctx.threads, [&](int i, int) {
        const auto& clean = noiseless[static_cast<std::size_t>(i)];
        save_sinogram(ctx.out / "noiseless" / object_file_stem(i), clean);
        save_sinogram(ctx.out / "measurements" / object_file_stem(i),
                      simulate_measurement(clean, s.photon_budget, normalizer, derive_seed(s.seed, 2, i)));
    });
    manifest.stage("measurements", timer.lap());

    Json mj = to_json(meta);
    for (auto it = extra.begin(); it != extra.end(); ++it) mj[it.key()] = it.value();
    save_json(ctx.out / "meta.json", mj);
    manifest.write();
}

// ---------------------------------------------------------------------------
// baselines

inline const std::vector<std::string>& baseline_algorithms() {
    static const std::vector<std::string> a{"fbp-full", "fbp-uniform", "fbp-random", "sirt-uniform", "tv-uniform"};
    return a;
}

inline void cmd_baselines(const RunContext& ctx) {
    const Settings& s = ctx.settings;
    RunManifest manifest("baselines", ctx);
    StageTimer timer;
    const Dataset d = open_dataset(s.dataset);
    if (d.meta.mode != "foam") throw ConfigError("baselines need a foam dataset; " + s.dataset + " is " + d.meta.mode);
    const std::string hash = config_hash(s);

    ReconConfig fbp;
    fbp.filter = fbp_filter_from_string(s.fbp_filter);
    ReconConfig sirt;
    sirt.algorithm = ReconAlgorithm::sirt;
    sirt.iterations = s.sirt_iterations;
    sirt.relaxation = s.sirt_relaxation;
    ReconConfig tv;
    tv.algorithm = ReconAlgorithm::tv;
    tv.tv_lambda = s.tv_lambda;
    tv.tv_iterations = s.tv_iterations;

    const auto& algs = baseline_algorithms();
    for (const auto& a : algs) fs::create_directories(ctx.out / "recon" / a);
    std::vector<std::vector<MetricsRecord>> rows(algs.size(), std::vector<MetricsRecord>(static_cast<std::size_t>(d.size())));
    parallel_for(d.size(), ctx.threads, [&](int i, int) {
        const ImageGrid truth = load_image(d.root / "phantoms" / (d.id(i) + ".pvt"));
        const Sinogram full = load_sinogram(d.root / "measurements" / d.id(i));
        const Sinogram uni = load_training_measurement(d, i, "uniform");
        const Sinogram rnd = load_training_measurement(d, i, "random");
        const ImageGrid recs[] = {fbp_reconstruct(full, fbp), fbp_reconstruct(uni, fbp), fbp_reconstruct(rnd, fbp),
                                  sirt_reconstruct(uni, sirt), tv_reconstruct(uni, tv)};
        for (std::size_t a = 0; a < algs.size(); ++a) {
            save_image(ctx.out / "recon" / algs[a] / (d.id(i) + ".pvt"), recs[a]);
            rows[a][static_cast<std::size_t>(i)] = evaluate_image(truth, recs[a], d.id(i), algs[a], s.trial, hash);
        }
    });
    std::vector<MetricsRecord> all;
    for (const auto& r : rows) all.insert(all.end(), r.begin(), r.end());
    save_text(ctx.out / "metrics.csv", metrics_to_csv(all));
    manifest.stage("reconstruct", timer.lap());
    manifest.extra()["reconstruction"] = Json{{"fbp", to_json(fbp)}, {"sirt", to_json(sirt)}, {"tv", to_json(tv)}};
    manifest.write();
}

// ---------------------------------------------------------------------------
// train

inline std::string training_log_csv(const std::vector<EpochStats>& history) {
    std::string s = "epoch,loss,kl,nll,skipped_steps\n";
    for (const auto& h : history) {
        s += std::to_string(h.epoch) + "," + format_number(h.loss) + "," + format_number(h.kl) + "," +
             format_number(h.nll) + "," + std::to_string(h.skipped_steps) + "\n";
    }
    return s;
}

/// Hash of the settings a resumed run must share with the one that wrote the checkpoint.
inline std::string resume_hash(const Settings& s) {
    Json j = to_json(s);
    for (const char* k : {"dataset", "checkpoint", "metrics", "resume", "epoch_limit", "checkpoint_every", "epochs",
                          "posterior_samples", "toy_samples", "mass_radius"})
        j.erase(k);
    return sha256_hex(j.dump()).substr(0, 16);
}

template <typename T>
void write_checkpoint_dir(const fs::path& dir, const PvaeModel<T>& model, const TrainState<T>& state, const Json& run) {
    fs::path staging = dir;
    staging += ".new";
    fs::remove_all(staging);
    save_checkpoint(staging, model, state, run);
    fs::remove_all(dir);
    fs::rename(staging, dir);
}

inline void cmd_train(const RunContext& ctx) {
    const Settings& s = ctx.settings;
    RunManifest manifest("train", ctx);
    StageTimer timer;
    const Dataset d = open_dataset(s.dataset);
    if (d.meta.mode != s.mode) {
        throw ConfigError("config mode '" + s.mode + "' does not match the dataset mode '" + d.meta.mode + "'");
    }
    const std::vector<TrainingExample> data = load_training_set(d, s.schedule, ctx.threads);
    manifest.stage("load", timer.lap());

    const PvaeConfig mcfg = model_config(s, d.meta.image_size, derive_seed(s.seed, 6, static_cast<std::uint64_t>(s.trial)));
    const TrainConfig tcfg = train_config(s, derive_seed(s.seed, 5, static_cast<std::uint64_t>(s.trial)));
    const Json run{{"resume_hash", resume_hash(s)}, {"schedule", s.schedule}, {"trial", s.trial},
                   {"dataset_normalizer", d.meta.normalizer}};
    const fs::path ckdir = ctx.out / "checkpoint";
    fs::create_directories(ctx.out);

    PvaeModel<float> model(mcfg);
    TrainState<float> state;
    Json epoch_times = Json::object();
    if (s.resume && fs::exists(ckdir / "state.json")) {
        auto ck = load_checkpoint<float>(ckdir);
        if (to_json(ck.model.config()) != to_json(mcfg)) {
            throw ConfigError("checkpoint in " + ckdir.string() + " was written for a different architecture");
        }
        if (ck.run.value("resume_hash", std::string()) != resume_hash(s)) {
            throw ConfigError("checkpoint in " + ckdir.string() + " was written with different settings; "
                              "set resume=false to start over");
        }
        model = std::move(ck.model);
        state = std::move(ck.state);
        if (fs::exists(ctx.out / "manifest.json")) {
            const Json old = load_json(ctx.out / "manifest.json");
            const Json times = old.value("epoch_wall_seconds", Json::object());
            for (const auto& [k, v] : times.items()) {
                if (std::stoi(k) <= state.epoch) epoch_times[k] = v;
            }
        }
    }
    manifest.extra()["resumed_from_epoch"] = state.epoch;

    const int stop_at = s.epoch_limit > 0 ? state.epoch + s.epoch_limit : tcfg.epochs;
    auto on_epoch = [&](const EpochStats& e) {
        epoch_times[std::to_string(e.epoch)] = e.wall_seconds;
        return e.epoch < stop_at;
    };
    auto on_checkpoint = [&](const PvaeModel<float>& m, const TrainState<float>& st) {
        write_checkpoint_dir(ckdir, m, st, run);
        save_text(ctx.out / "train_log.csv", training_log_csv(st.history));
    };
    try {
        train(model, data, tcfg, state, on_epoch, on_checkpoint);
    } catch (const NumericalError&) {
        // the last checkpoint on disk stays as it was
        manifest.stage("train", timer.lap());
        manifest.extra()["aborted"] = true;
        manifest.extra()["epoch_wall_seconds"] = epoch_times;
        manifest.write();
        throw;
    }
    write_checkpoint_dir(ckdir, model, state, run);
    save_text(ctx.out / "train_log.csv", training_log_csv(state.history));
    manifest.stage("train", timer.lap());
    manifest.extra()["epochs_completed"] = state.epoch;
    manifest.extra()["epoch_wall_seconds"] = epoch_times;
    manifest.extra()["parameters"] = model.params().scalar_count();
    manifest.write();
}

// ---------------------------------------------------------------------------
// evaluate

struct ToyCase {
    std::string name;
    int object = 0;
    int angle = 0;
};

inline const std::vector<ToyCase>& toy_cases() {
    static const std::vector<ToyCase> c{{"o1_a0", 0, 0}, {"o1_a90", 0, 1}, {"o2_a0", 1, 0}, {"o2_a90", 1, 1}};
    return c;
}

inline void evaluate_toy(const RunContext& ctx, const Dataset& d, PvaeModel<float>& model, RunManifest& manifest) {
    const Settings& s = ctx.settings;
    const auto cands_t = load_tensors(d.root / "phantoms" / "candidates.pvt");
    if (cands_t.size() != 2) throw DataError("candidates.pvt must hold the two toy objects");
    const std::vector<ImageGrid> cands{image_from_stored(cands_t[0]), image_from_stored(cands_t[1])};
    const Json draws = load_json(d.root / "phantoms" / "draws.json");
    const std::vector<double> prior = draws.at("prior").get<std::vector<double>>();

    const HistogramBins bins;
    std::string hist_csv = "case,pixel,bin_center,pvae,oracle\n";
    std::string case_csv =
        "case,measurement_id,object,angle,pixel,true_value,tv_distance,pvae_near_truth,oracle_near_truth,"
        "pvae_near_0,pvae_near_1,oracle_near_0,oracle_near_1\n";
    std::vector<std::string> ids;
    std::vector<ToyPosterior> posts;
    fs::create_directories(ctx.out / "samples");
    Json missing = Json::array();

    for (std::size_t c = 0; c < toy_cases().size(); ++c) {
        const auto& tc = toy_cases()[c];
        int pick = -1;
        for (const auto& dr : draws.at("draws")) {
            if (dr.at("object").get<int>() == tc.object && dr.at("angle").get<int>() == tc.angle) {
                const std::string id = dr.at("id");
                pick = std::stoi(id.substr(4));
                break;
            }
        }
        if (pick < 0) {
            missing.push_back(tc.name);
            continue;
        }
        const Sinogram meas = load_training_measurement(d, pick, "uniform");
        const TrainingExample ex = make_training_example(d.id(pick), meas);
        const auto samples = sample_posterior(model, ex, s.toy_samples, derive_seed(s.seed, 8, c));
        StoredTensor st{tc.name, {s.toy_samples, 4}, {samples.begin(), samples.end()}};
        save_tensor(ctx.out / "samples" / (tc.name + ".pvt"), st);

        const PixelHistograms ph = marginal_histograms(samples, 4, bins);
        const ToyPosterior post = exact_toy_posterior(meas, cands, prior);
        const PixelHistograms oh = post.histograms(bins);
        ids.push_back(tc.name + ":" + d.id(pick));
        posts.push_back(post);
        for (int p = 0; p < 4; ++p) {
            const auto& a = ph.pixels[static_cast<std::size_t>(p)];
            const auto& b = oh.pixels[static_cast<std::size_t>(p)];
            for (int k = 0; k < bins.count; ++k) {
                hist_csv += tc.name + "," + std::to_string(p) + "," + fmt("%.1f", bins.center(k)) + "," +
                            format_number(a[static_cast<std::size_t>(k)]) + "," + format_number(b[static_cast<std::size_t>(k)]) + "\n";
            }
            const double truth = cands[static_cast<std::size_t>(tc.object)].values[static_cast<std::size_t>(p)];
            const double r = s.mass_radius;
            case_csv += tc.name + "," + d.id(pick) + "," + std::to_string(tc.object) + "," + std::to_string(tc.angle) +
                        "," + std::to_string(p) + "," + format_number(truth) + "," + format_number(tv_distance(a, b)) +
                        "," + format_number(mass_near(a, bins, truth, r)) + "," + format_number(mass_near(b, bins, truth, r)) +
                        "," + format_number(mass_near(a, bins, 0.0, r)) + "," + format_number(mass_near(a, bins, 1.0, r)) +
                        "," + format_number(mass_near(b, bins, 0.0, r)) + "," + format_number(mass_near(b, bins, 1.0, r)) +
                        "\n";
        }
    }
    save_text(ctx.out / "toy_histograms.csv", hist_csv);
    save_text(ctx.out / "toy_cases.csv", case_csv);
    save_text(ctx.out / "oracle.csv", oracle_to_csv(ids, posts, cands));
    if (!missing.empty()) manifest.extra()["cases_missing_from_dataset"] = missing;
}

inline void evaluate_foam(const RunContext& ctx, const Dataset& d, const PvaeModel<float>& model) {
    const Settings& s = ctx.settings;
    const std::string alg = "pvae-" + s.schedule;
    const std::string hash = config_hash(s);
    fs::create_directories(ctx.out / "estimates");
    std::vector<MetricsRecord> rows(static_cast<std::size_t>(d.size()));
    std::vector<PvaeModel<float>> copies(static_cast<std::size_t>(std::max(1, std::min(ctx.threads, d.size()))), model);
    parallel_for(d.size(), ctx.threads, [&](int i, int w) {
        auto& m = copies[static_cast<std::size_t>(w)];
        const TrainingExample ex = make_training_example(d.id(i), load_training_measurement(d, i, s.schedule));
        const int n = s.posterior_samples;
        const auto samples = sample_posterior(m, ex, n, derive_seed(s.seed, 7, i));
        const int size = model.config().image_size;
        ImageGrid mean = ImageGrid::square(size), sd = ImageGrid::square(size);
        const std::size_t pix = mean.size();
        for (int k = 0; k < n; ++k)
            for (std::size_t p = 0; p < pix; ++p) mean.values[p] += samples[static_cast<std::size_t>(k) * pix + p];
        for (double& v : mean.values) v /= n;
        for (int k = 0; k < n; ++k)
            for (std::size_t p = 0; p < pix; ++p) {
                const double e = samples[static_cast<std::size_t>(k) * pix + p] - mean.values[p];
                sd.values[p] += e * e;
            }
        for (double& v : sd.values) v = n > 1 ? std::sqrt(v / (n - 1)) : 0.0;
        save_image(ctx.out / "estimates" / (d.id(i) + ".pvt"), mean);
        save_image(ctx.out / "estimates" / (d.id(i) + "_std.pvt"), sd);
        const ImageGrid truth = load_image(d.root / "phantoms" / (d.id(i) + ".pvt"));
        rows[static_cast<std::size_t>(i)] = evaluate_image(truth, mean, d.id(i), alg, s.trial, hash);
    });
    save_text(ctx.out / "metrics.csv", metrics_to_csv(rows));
}

inline void cmd_evaluate(const RunContext& ctx) {
    const Settings& s = ctx.settings;
    RunManifest manifest("evaluate", ctx);
    StageTimer timer;
    const Dataset d = open_dataset(s.dataset);
    if (s.checkpoint.empty()) throw ConfigError("config key 'checkpoint' must name a checkpoint directory");
    if (!fs::exists(fs::path(s.checkpoint) / "arch.json")) throw DataError("no checkpoint at " + s.checkpoint);
    auto ck = load_checkpoint<float>(s.checkpoint);
    const int want = ck.model.config().image_size;
    if (want != d.meta.image_size) {
        throw ConfigError("checkpoint expects " + std::to_string(want) + "x" + std::to_string(want) +
                          " images but the dataset holds " + std::to_string(d.meta.image_size) + "x" +
                          std::to_string(d.meta.image_size));
    }
    fs::create_directories(ctx.out);
    manifest.stage("load", timer.lap());
    if (d.meta.mode == "toy") {
        evaluate_toy(ctx, d, ck.model, manifest);
    } else {
        evaluate_foam(ctx, d, ck.model);
    }
    manifest.stage("evaluate", timer.lap());
    manifest.extra()["checkpoint_epoch"] = ck.state.epoch;
    manifest.write();
}

// ---------------------------------------------------------------------------
// report

struct ChartBar {
    std::string group, series;
    double mean = 0, std = 0;
};

/// Grouped bar chart: one group per schedule, one bar per method, error bars at +-1 std.
inline std::string bar_chart_svg(const std::string& title, const std::string& ylabel, const std::vector<ChartBar>& bars) {
    std::vector<std::string> groups, series;
    for (const auto& b : bars) {
        if (std::find(groups.begin(), groups.end(), b.group) == groups.end()) groups.push_back(b.group);
        if (std::find(series.begin(), series.end(), b.series) == series.end()) series.push_back(b.series);
    }
    double top = 0.0;
    for (const auto& b : bars)
        if (std::isfinite(b.mean + b.std)) top = std::max(top, b.mean + b.std);
    if (!(top > 0.0)) top = 1.0;
    top *= 1.1;

    const double w = 720, h = 420, left = 70, right = 150, tp = 40, bottom = 60;
    const double pw = w - left - right, ph = h - tp - bottom;
    const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};
    auto y = [&](double v) { return tp + ph * (1.0 - std::clamp(v, 0.0, top) / top); };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    for (int t = 0; t <= 5; ++t) {
        const double v = top * t / 5.0;
        o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << fmt("%.2f", y(v)) << "\" y2=\""
          << fmt("%.2f", y(v)) << "\" stroke=\"#ddd\"/>\n";
        o << "<text x=\"" << left - 6 << "\" y=\"" << fmt("%.2f", y(v) + 4) << "\" text-anchor=\"end\">"
          << fmt("%.3g", v) << "</text>\n";
    }
    o << "<text transform=\"translate(18," << tp + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << ylabel
      << "</text>\n";
    const double gw = pw / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
    const double bw = gw * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double gx = left + gw * static_cast<double>(g) + gw * 0.1;
        o << "<text x=\"" << fmt("%.2f", gx + gw * 0.4) << "\" y=\"" << tp + ph + 20 << "\" text-anchor=\"middle\">"
          << groups[g] << "</text>\n";
        for (std::size_t k = 0; k < series.size(); ++k) {
            auto it = std::find_if(bars.begin(), bars.end(),
                                   [&](const ChartBar& b) { return b.group == groups[g] && b.series == series[k]; });
            if (it == bars.end()) continue;
            const double x = gx + bw * static_cast<double>(k);
            const double yt = y(std::isfinite(it->mean) ? it->mean : top);
            o << "<rect x=\"" << fmt("%.2f", x) << "\" y=\"" << fmt("%.2f", yt) << "\" width=\"" << fmt("%.2f", bw * 0.9)
              << "\" height=\"" << fmt("%.2f", tp + ph - yt) << "\" fill=\"" << palette[k % 6] << "\"/>\n";
            const double cx = x + bw * 0.45;
            const double lo = y(it->mean - it->std), hi = y(it->mean + it->std);
            o << "<line x1=\"" << fmt("%.2f", cx) << "\" x2=\"" << fmt("%.2f", cx) << "\" y1=\"" << fmt("%.2f", lo)
              << "\" y2=\"" << fmt("%.2f", hi) << "\" stroke=\"black\"/>\n";
            for (double yy : {lo, hi}) {
                o << "<line x1=\"" << fmt("%.2f", cx - 4) << "\" x2=\"" << fmt("%.2f", cx + 4) << "\" y1=\""
                  << fmt("%.2f", yy) << "\" y2=\"" << fmt("%.2f", yy) << "\" stroke=\"black\"/>\n";
            }
        }
    }
    o << "<line x1=\"" << left << "\" x2=\"" << left << "\" y1=\"" << tp << "\" y2=\"" << tp + ph
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << tp + ph << "\" y2=\"" << tp + ph
      << "\" stroke=\"black\"/>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const double ly = tp + 10 + 20.0 * static_cast<double>(k);
        o << "<rect x=\"" << left + pw + 15 << "\" y=\"" << ly << "\" width=\"12\" height=\"12\" fill=\"" << palette[k % 6]
          << "\"/>\n";
        o << "<text x=\"" << left + pw + 32 << "\" y=\"" << ly + 10 << "\">" << series[k] << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

/// "method-schedule" split at the last dash; tags without one form their own group.
inline std::pair<std::string, std::string> split_algorithm(const std::string& alg) {
    const auto dash = alg.rfind('-');
    if (dash == std::string::npos) return {alg, "other"};
    return {alg.substr(0, dash), alg.substr(dash + 1)};
}

struct ReportResult {
    std::map<std::string, AlgorithmSummary> summary; // over per-trial dataset means
    std::vector<MetricsRecord> trial_means;
};

inline ReportResult build_report(const std::vector<MetricsRecord>& records) {
    if (records.empty()) throw DataError("report: the metrics files hold no rows");
    ReportResult r;
    r.trial_means = dataset_means(records);
    r.summary = aggregate_trials(r.trial_means);
    return r;
}

inline void cmd_report(const RunContext& ctx) {
    const Settings& s = ctx.settings;
    RunManifest manifest("report", ctx);
    StageTimer timer;
    if (s.metrics.empty()) throw ConfigError("report needs at least one metrics CSV (config key 'metrics' or positional)");
    std::vector<MetricsRecord> records;
    for (const auto& p : s.metrics) {
        if (!fs::exists(p)) throw DataError("metrics file not found: " + p);
        auto part = load_metrics_csv(p);
        records.insert(records.end(), part.begin(), part.end());
    }
    const ReportResult rep = build_report(records);
    fs::create_directories(ctx.out);

    std::string csv = "algorithm,trials,ssim_mean,ssim_std,psnr_mean,psnr_std,mse_mean,mse_std\n";
    std::string md = "| algorithm | trials | SSIM | PSNR (dB) | MSE |\n|---|---|---|---|---|\n";
    for (const auto& [alg, a] : rep.summary) {
        csv += alg + "," + std::to_string(a.ssim.count) + "," + format_number(a.ssim.mean) + "," +
               format_number(a.ssim.std) + "," + format_number(a.psnr.mean) + "," + format_number(a.psnr.std) + "," +
               format_number(a.mse.mean) + "," + format_number(a.mse.std) + "\n";
        md += "| " + alg + " | " + std::to_string(a.ssim.count) + " | " + fmt("%.4f", a.ssim.mean) + " ± " +
              fmt("%.4f", a.ssim.std) + " | " + fmt("%.2f", a.psnr.mean) + " ± " + fmt("%.2f", a.psnr.std) + " | " +
              fmt("%.3g", a.mse.mean) + " ± " + fmt("%.2g", a.mse.std) + " |\n";
    }
    // random minus uniform for every method evaluated on both schedules
    std::string cmp_md;
    for (const auto& [alg, a] : rep.summary) {
        const auto [method, sched] = split_algorithm(alg);
        if (sched != "uniform") continue;
        auto it = rep.summary.find(method + "-random");
        if (it == rep.summary.end()) continue;
        const auto& b = it->second;
        const std::string name = method + " random-uniform";
        csv += name + ",-," + format_number(b.ssim.mean - a.ssim.mean) + ",," + format_number(b.psnr.mean - a.psnr.mean) +
               ",," + format_number(b.mse.mean - a.mse.mean) + ",\n";
        cmp_md += "| " + name + " | | " + fmt("%+.4f", b.ssim.mean - a.ssim.mean) + " | " +
                  fmt("%+.2f", b.psnr.mean - a.psnr.mean) + " | " + fmt("%+.3g", b.mse.mean - a.mse.mean) + " |\n";
    }
    save_text(ctx.out / "summary.csv", csv);
    save_text(ctx.out / "summary.md", md + cmp_md);

    std::string per_trial = std::string(kMetricsCsvHeader) + "\n";
    for (const auto& m : rep.trial_means) {
        per_trial += m.object_id + "," + m.algorithm + "," + std::to_string(m.trial) + "," + format_number(m.ssim) +
                     "," + format_number(m.psnr) + "," + format_number(m.mse) + "," + m.config_hash + "\n";
    }
    save_text(ctx.out / "trial_means.csv", per_trial);

    const std::pair<const char*, const char*> charts[] = {{"ssim", "SSIM"}, {"psnr", "PSNR (dB)"}, {"mse", "MSE"}};
    for (const auto& [key, label] : charts) {
        std::vector<ChartBar> bars;
        for (const auto& [alg, a] : rep.summary) {
            const auto [method, sched] = split_algorithm(alg);
            const Summary& v = std::string(key) == "ssim" ? a.ssim : std::string(key) == "psnr" ? a.psnr : a.mse;
            bars.push_back({sched, method, v.mean, v.std});
        }
        std::stable_sort(bars.begin(), bars.end(), [](const ChartBar& x, const ChartBar& y) {
            auto rank = [](const std::string& g) { return g == "full" ? 0 : g == "uniform" ? 1 : g == "random" ? 2 : 3; };
            return rank(x.group) < rank(y.group);
        });
        save_text(ctx.out / (std::string(key) + ".svg"), bar_chart_svg(std::string(label) + " by schedule", label, bars));
    }
    manifest.stage("report", timer.lap());
    manifest.write();
}

// ---------------------------------------------------------------------------

/// Resolves the layered configuration: defaults, config file, overrides, then explicit flags.
inline Settings resolve_settings(const std::string& config_file, const std::vector<std::string>& overrides,
                                 const std::optional<std::uint64_t>& seed, const std::vector<std::string>& inputs) {
    Json cfg = Json::object();
    if (!config_file.empty()) {
        if (!fs::exists(config_file)) throw ConfigError("config file not found: " + config_file);
        std::ifstream is(config_file);
        cfg = Json::parse(is, nullptr, false);
        if (cfg.is_discarded()) throw ConfigError("config file is not valid JSON: " + config_file);
        if (!cfg.is_object()) throw ConfigError("config file must hold a JSON object: " + config_file);
    }
    for (const auto& o : overrides) apply_override(cfg, o);
    if (seed) cfg["seed"] = *seed;
    if (!inputs.empty()) {
        Json list = cfg.value("metrics", Json::array());
        if (list.is_string()) list = Json::array({list});
        for (const auto& i : inputs) list.push_back(i);
        cfg["metrics"] = list;
    }
    Settings s = settings_from_json(cfg);
    validate(s);
    return s;
}

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const ShapeError*>(&e)) return 2;
    if (dynamic_cast<const DataError*>(&e)) return 3;
    if (dynamic_cast<const NumericalError*>(&e)) return 4;
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
    return 1;
}

inline void run_command(const std::string& command, const RunContext& ctx) {
    if (ctx.out.empty()) throw ConfigError("--out is required");
    if (command == "generate") return cmd_generate(ctx);
    if (command == "baselines") return cmd_baselines(ctx);
    if (command == "train") return cmd_train(ctx);
    if (command == "evaluate") return cmd_evaluate(ctx);
    if (command == "report") return cmd_report(ctx);
    throw ConfigError("unknown command '" + command + "'");
}

} // namespace pvae
