#pragma once

// Flat run configuration. Every key has a default that depends only on
// `mode`; a JSON file and `key=value` overrides replace individual keys.

#include <cstdint>
#include <string>
#include <vector>

#include "pvae/classical.hpp"
#include "pvae/errors.hpp"
#include "pvae/phantoms.hpp"
#include "pvae/pvae.hpp"
#include "pvae/tensor_io.hpp"

namespace pvae {

inline constexpr const char* kVersion = "0.1.0";

struct Settings {
    std::string mode = "toy"; // toy | foam
    std::uint64_t seed = 0;

    // dataset
    int object_count = 1024;
    int image_size = 2;
    int source_angles = 2;
    int sparse_angles = 1;
    double photon_budget = 1e4;
    double toy_prior = 0.5; // P(O1)
    double foam_disk_radius = 0.9;
    double foam_void_fraction = 0.3;
    double foam_min_void_radius = 0.05;
    double foam_max_void_radius = 0.2;
    int foam_min_voids = 1;
    int foam_max_voids = 400;
    int foam_max_attempts = 20000;

    // classical baselines
    std::string fbp_filter = "ramp";
    int sirt_iterations = 200;
    double sirt_relaxation = 1.0;
    double tv_lambda = 0.05;
    int tv_iterations = 300;

    // model and training
    std::string schedule = "uniform"; // foam: uniform | random
    std::string arch = "mlp";
    int unet_depth = 3;
    std::vector<int> unet_widths{16, 32, 64};
    int latent_channels = 4;
    int mlp_hidden = 64;
    int mlp_latent = 8;
    int epochs = 20000;
    int batch_size = 32;
    double lr = 1e-3;
    double lr_final = 1e-5;
    double grad_clip = 100.0;
    int mc_samples = 1;
    int checkpoint_every = 1000;
    int epoch_limit = 0; // stop this invocation after this many epochs (0: run to the end)
    bool resume = true;
    int trial = 0;

    // evaluation
    int posterior_samples = 64;
    int toy_samples = 20000;
    double mass_radius = 0.25;

    // paths, never part of the config hash
    std::string dataset;
    std::string checkpoint;
    std::vector<std::string> metrics;
};

inline Settings default_settings(const std::string& mode) {
    Settings s;
    s.mode = mode;
    if (mode == "foam") {
        s.object_count = 100;
        s.image_size = 64;
        s.source_angles = 180;
        s.sparse_angles = 20;
        s.arch = "unet";
        s.epochs = 150;
        s.batch_size = 8;
        s.lr = 1e-3;
        s.lr_final = 1e-5;
        s.grad_clip = 0.0;
        s.checkpoint_every = 25;
    } else if (mode != "toy") {
        throw ConfigError("config key 'mode' must be 'toy' or 'foam', got '" + mode + "'");
    }
    return s;
}

inline Json to_json(const Settings& s) {
    return Json{{"mode", s.mode},
                {"seed", s.seed},
                {"object_count", s.object_count},
                {"image_size", s.image_size},
                {"source_angles", s.source_angles},
                {"sparse_angles", s.sparse_angles},
                {"photon_budget", s.photon_budget},
                {"toy_prior", s.toy_prior},
                {"foam_disk_radius", s.foam_disk_radius},
                {"foam_void_fraction", s.foam_void_fraction},
                {"foam_min_void_radius", s.foam_min_void_radius},
                {"foam_max_void_radius", s.foam_max_void_radius},
                {"foam_min_voids", s.foam_min_voids},
                {"foam_max_voids", s.foam_max_voids},
                {"foam_max_attempts", s.foam_max_attempts},
                {"fbp_filter", s.fbp_filter},
                {"sirt_iterations", s.sirt_iterations},
                {"sirt_relaxation", s.sirt_relaxation},
                {"tv_lambda", s.tv_lambda},
                {"tv_iterations", s.tv_iterations},
                {"schedule", s.schedule},
                {"arch", s.arch},
                {"unet_depth", s.unet_depth},
                {"unet_widths", s.unet_widths},
                {"latent_channels", s.latent_channels},
                {"mlp_hidden", s.mlp_hidden},
                {"mlp_latent", s.mlp_latent},
                {"epochs", s.epochs},
                {"batch_size", s.batch_size},
                {"lr", s.lr},
                {"lr_final", s.lr_final},
                {"grad_clip", s.grad_clip},
                {"mc_samples", s.mc_samples},
                {"checkpoint_every", s.checkpoint_every},
                {"epoch_limit", s.epoch_limit},
                {"resume", s.resume},
                {"trial", s.trial},
                {"posterior_samples", s.posterior_samples},
                {"toy_samples", s.toy_samples},
                {"mass_radius", s.mass_radius},
                {"dataset", s.dataset},
                {"checkpoint", s.checkpoint},
                {"metrics", s.metrics}};
}

namespace detail {

inline bool same_kind(const Json& def, const Json& v) {
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_number()) return v.is_number();
    if (def.is_string()) return v.is_string();
    if (def.is_array()) {
        if (!v.is_array()) return false;
        const bool ints = def.empty() ? false : def.front().is_number_integer();
        for (const auto& e : v)
            if (ints ? !e.is_number_integer() : !e.is_string()) return false;
        return true;
    }
    return false;
}

inline std::string kind_name(const Json& def) {
    if (def.is_boolean()) return "a boolean";
    if (def.is_number_integer()) return "an integer";
    if (def.is_number()) return "a number";
    if (def.is_string()) return "a string";
    if (!def.empty() && def.front().is_number_integer()) return "a list of integers";
    return "a list of strings";
}

} // namespace detail

/**
 * Merges `user` over the defaults for its mode. Unknown keys and values of
 * the wrong type are rejected by name.
 */
inline Settings settings_from_json(const Json& user) {
    if (!user.is_object()) throw ConfigError("config must be a JSON object");
    const std::string mode = user.contains("mode") && user["mode"].is_string() ? user["mode"].get<std::string>() : "toy";
    Json merged = to_json(default_settings(mode));
    for (auto it = user.begin(); it != user.end(); ++it) {
        if (!merged.contains(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
        Json v = it.value();
        const Json& def = merged[it.key()];
        // a bare path is accepted where a list of paths is expected
        if (def.is_array() && v.is_string()) v = Json::array({v});
        if (it.key() == "seed" && v.is_number_integer() && v.get<long long>() < 0) {
            throw ConfigError("config key 'seed' must be a non-negative integer");
        }
        if (!detail::same_kind(def, v)) {
            throw ConfigError("config key '" + it.key() + "' must be " + detail::kind_name(def));
        }
        merged[it.key()] = v;
    }

    Settings s;
    s.mode = merged["mode"];
    s.seed = merged["seed"];
    s.object_count = merged["object_count"];
    s.image_size = merged["image_size"];
    s.source_angles = merged["source_angles"];
    s.sparse_angles = merged["sparse_angles"];
    s.photon_budget = merged["photon_budget"];
    s.toy_prior = merged["toy_prior"];
    s.foam_disk_radius = merged["foam_disk_radius"];
    s.foam_void_fraction = merged["foam_void_fraction"];
    s.foam_min_void_radius = merged["foam_min_void_radius"];
    s.foam_max_void_radius = merged["foam_max_void_radius"];
    s.foam_min_voids = merged["foam_min_voids"];
    s.foam_max_voids = merged["foam_max_voids"];
    s.foam_max_attempts = merged["foam_max_attempts"];
    s.fbp_filter = merged["fbp_filter"];
    s.sirt_iterations = merged["sirt_iterations"];
    s.sirt_relaxation = merged["sirt_relaxation"];
    s.tv_lambda = merged["tv_lambda"];
    s.tv_iterations = merged["tv_iterations"];
    s.schedule = merged["schedule"];
    s.arch = merged["arch"];
    s.unet_depth = merged["unet_depth"];
    s.unet_widths = merged["unet_widths"].get<std::vector<int>>();
    s.latent_channels = merged["latent_channels"];
    s.mlp_hidden = merged["mlp_hidden"];
    s.mlp_latent = merged["mlp_latent"];
    s.epochs = merged["epochs"];
    s.batch_size = merged["batch_size"];
    s.lr = merged["lr"];
    s.lr_final = merged["lr_final"];
    s.grad_clip = merged["grad_clip"];
    s.mc_samples = merged["mc_samples"];
    s.checkpoint_every = merged["checkpoint_every"];
    s.epoch_limit = merged["epoch_limit"];
    s.resume = merged["resume"];
    s.trial = merged["trial"];
    s.posterior_samples = merged["posterior_samples"];
    s.toy_samples = merged["toy_samples"];
    s.mass_radius = merged["mass_radius"];
    s.dataset = merged["dataset"];
    s.checkpoint = merged["checkpoint"];
    s.metrics = merged["metrics"].get<std::vector<std::string>>();
    return s;
}

/// Parses `key=value`; the value is read as JSON when it parses, else as a string.
inline void apply_override(Json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    Json v = Json::parse(text, nullptr, false);
    if (v.is_discarded()) v = text;
    cfg[key] = v;
}

inline void validate(const Settings& s) {
    auto need = [](bool ok, const std::string& key, const std::string& what) {
        if (!ok) throw ConfigError("config key '" + key + "' " + what);
    };
    need(s.object_count >= 1, "object_count", "must be >= 1");
    need(s.photon_budget > 0.0, "photon_budget", "must be > 0");
    need(s.toy_prior > 0.0 && s.toy_prior < 1.0, "toy_prior", "must lie in (0, 1)");
    if (s.mode == "toy") {
        need(s.image_size == 2, "image_size", "must be 2 in toy mode");
        need(s.source_angles == 2, "source_angles", "must be 2 in toy mode (angles 0 and pi/2)");
        need(s.sparse_angles == 1, "sparse_angles", "must be 1 in toy mode (one measurement per object)");
    } else {
        need(s.image_size >= 11, "image_size", "must be >= 11 in foam mode (SSIM window)");
        need(s.source_angles >= 1, "source_angles", "must be >= 1");
        need(s.sparse_angles >= 1 && s.sparse_angles <= s.source_angles, "sparse_angles",
             "must lie in [1, source_angles]");
    }
    need(s.schedule == "uniform" || s.schedule == "random", "schedule", "must be 'uniform' or 'random'");
    need(s.fbp_filter == "ramp" || s.fbp_filter == "hann", "fbp_filter", "must be 'ramp' or 'hann'");
    need(s.sirt_iterations >= 1, "sirt_iterations", "must be >= 1");
    need(s.sirt_relaxation > 0.0 && s.sirt_relaxation < 2.0, "sirt_relaxation", "must lie in (0, 2)");
    need(s.tv_lambda >= 0.0, "tv_lambda", "must be >= 0");
    need(s.tv_iterations >= 1, "tv_iterations", "must be >= 1");
    need(s.arch == "mlp" || s.arch == "unet", "arch", "must be 'mlp' or 'unet'");
    need(s.epochs >= 1, "epochs", "must be >= 1");
    need(s.batch_size >= 1, "batch_size", "must be >= 1");
    need(s.lr > 0.0, "lr", "must be > 0");
    need(s.lr_final >= 0.0 && s.lr_final <= s.lr, "lr_final", "must lie in [0, lr]");
    need(s.grad_clip >= 0.0, "grad_clip", "must be >= 0");
    need(s.mc_samples >= 1, "mc_samples", "must be >= 1");
    need(s.checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
    need(s.epoch_limit >= 0, "epoch_limit", "must be >= 0");
    need(s.trial >= 0, "trial", "must be >= 0");
    need(s.posterior_samples >= 1, "posterior_samples", "must be >= 1");
    need(s.toy_samples >= 1, "toy_samples", "must be >= 1");
    need(s.mass_radius > 0.0, "mass_radius", "must be > 0");
}

/// Short hash of every setting except paths and run-control keys.
inline std::string config_hash(const Settings& s) {
    Json j = to_json(s);
    for (const char* k : {"dataset", "checkpoint", "metrics", "resume", "epoch_limit", "checkpoint_every"}) j.erase(k);
    return sha256_hex(j.dump()).substr(0, 16);
}

inline FoamSpec foam_spec(const Settings& s) {
    FoamSpec f;
    f.size = s.image_size;
    f.disk_radius = s.foam_disk_radius;
    f.void_fraction = s.foam_void_fraction;
    f.min_void_radius = s.foam_min_void_radius;
    f.max_void_radius = s.foam_max_void_radius;
    f.min_voids = s.foam_min_voids;
    f.max_voids = s.foam_max_voids;
    f.max_attempts = s.foam_max_attempts;
    f.seed = s.seed;
    try {
        f.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("foam_*: ") + e.what());
    }
    return f;
}

inline PvaeConfig model_config(const Settings& s, int image_size, std::uint64_t init_seed) {
    PvaeConfig c;
    c.arch = s.arch;
    c.image_size = image_size;
    c.depth = s.unet_depth;
    c.widths = s.unet_widths;
    c.latent_channels = s.latent_channels;
    c.mlp_hidden = s.mlp_hidden;
    c.mlp_latent = s.mlp_latent;
    c.init_seed = init_seed;
    c.validate();
    return c;
}

inline TrainConfig train_config(const Settings& s, std::uint64_t seed) {
    TrainConfig t;
    t.epochs = s.epochs;
    t.batch_size = s.batch_size;
    t.lr = s.lr;
    t.lr_final = s.lr_final;
    t.grad_clip = s.grad_clip;
    t.samples = s.mc_samples;
    t.checkpoint_every = s.checkpoint_every;
    t.seed = seed;
    t.validate();
    return t;
}

} // namespace pvae
