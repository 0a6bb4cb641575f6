#pragma once

// Physics-informed variational autoencoder.
//
// The encoder maps an initial reconstruction plus an angle-coverage map to
// Gaussian latents (one per U-Net skip level plus the bottleneck, or a
// single bottleneck for the MLP variant). The decoder maps latent samples
// to a per-pixel Gaussian over the object. Training maximizes
//   E_q[ log P(M | O) ] - KL( q(z | M) || N(0, I) ),  O ~ P(O | z),
// where P(M | O) is the Poisson model on the parallel-beam projections.
// Nothing in this file touches ground-truth objects.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "pvae/adam.hpp"
#include "pvae/classical.hpp"
#include "pvae/diffgraph.hpp"
#include "pvae/errors.hpp"
#include "pvae/projector.hpp"
#include "pvae/rng.hpp"
#include "pvae/tensor_io.hpp"

namespace pvae {

struct PvaeConfig {
    std::string arch = "mlp"; // "mlp" | "unet"
    int image_size = 2;
    int depth = 3;
    std::vector<int> widths{16, 32, 64};
    int latent_channels = 4;
    int mlp_hidden = 64;
    int mlp_latent = 8;
    double leaky_slope = 0.1;
    std::uint64_t init_seed = 0;

    void validate() const {
        if (arch == "mlp") {
            if (image_size < 1 || image_size > 8) throw ConfigError("mlp architecture supports images up to 8x8");
            if (mlp_hidden < 1 || mlp_latent < 1) throw ConfigError("mlp widths must be positive");
        } else if (arch == "unet") {
            if (depth < 1 || static_cast<int>(widths.size()) != depth) {
                throw ConfigError("unet needs one width per level (depth = " + std::to_string(depth) + ")");
            }
            if (image_size % (1 << depth) != 0) {
                throw ConfigError("unet image size must be divisible by 2^depth");
            }
            if (latent_channels < 1) throw ConfigError("unet latent_channels must be positive");
        } else {
            throw ConfigError("unknown architecture '" + arch + "'");
        }
    }
};

inline Json to_json(const PvaeConfig& c) {
    return Json{{"arch", c.arch},
                {"image_size", c.image_size},
                {"depth", c.depth},
                {"widths", c.widths},
                {"latent_channels", c.latent_channels},
                {"mlp_hidden", c.mlp_hidden},
                {"mlp_latent", c.mlp_latent},
                {"leaky_slope", c.leaky_slope},
                {"init_seed", c.init_seed}};
}

inline PvaeConfig pvae_config_from_json(const Json& j) {
    PvaeConfig c;
    c.arch = j.at("arch").get<std::string>();
    c.image_size = j.at("image_size").get<int>();
    c.depth = j.at("depth").get<int>();
    c.widths = j.at("widths").get<std::vector<int>>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.mlp_hidden = j.at("mlp_hidden").get<int>();
    c.mlp_latent = j.at("mlp_latent").get<int>();
    c.leaky_slope = j.at("leaky_slope").get<double>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    c.validate();
    return c;
}

/**
 * One self-supervised training record: noisy counts on the object's own
 * schedule, the projector for that schedule and the two-channel encoder
 * input derived from the counts alone.
 */
struct TrainingExample {
    std::string id;
    Sinogram counts;
    RadonOperator projector;
    std::vector<float> encoder_input; // [2, S, S]: FBP, normalized coverage

    int size() const { return counts.bins; }
    double rate_scale() const { return counts.photon_budget / counts.normalizer; }
};

/// Channel 0: ramp FBP of the counts. Channel 1: R^T 1 on the same schedule, scaled to max 1.
inline std::vector<float> make_encoder_input(const Sinogram& counts) {
    ReconConfig fbp;
    fbp.nonnegativity = false;
    const ImageGrid recon = fbp_reconstruct(counts, fbp);
    Sinogram ones = counts;
    ones.is_counts = false;
    std::fill(ones.values.begin(), ones.values.end(), 1.0);
    ImageGrid cover = radon_adjoint(ones);
    const double top = cover.max();
    std::vector<float> out;
    out.reserve(2 * recon.size());
    for (double v : recon.values) out.push_back(static_cast<float>(v));
    for (double v : cover.values) out.push_back(static_cast<float>(top > 0 ? v / top : 0.0));
    for (float v : out) {
        if (!std::isfinite(v)) throw NumericalError("encoder input is not finite");
    }
    return out;
}

inline TrainingExample make_training_example(std::string id, Sinogram counts) {
    if (!counts.is_counts) throw DataError("training example " + id + " must hold photon counts");
    for (double k : counts.values) {
        if (k < 0.0 || k != std::floor(k)) throw DataError("training example " + id + " has non-integral counts");
    }
    TrainingExample ex;
    ex.id = std::move(id);
    ex.projector = RadonOperator(counts.bins, counts.schedule.angles);
    ex.encoder_input = make_encoder_input(counts);
    ex.counts = std::move(counts);
    return ex;
}

template <typename T>
struct ObjectDistribution {
    dg::Var mean;   // [N, 1, S, S], softplus so >= 0
    dg::Var logvar; // [N, 1, S, S]
};

template <typename T>
class PvaeModel {
public:
    using Graph = dg::Graph<T>;
    using Var = dg::Var;

    explicit PvaeModel(PvaeConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(cfg_.init_seed, 0x1417));
        if (cfg_.arch == "mlp") {
            const int pix = cfg_.image_size * cfg_.image_size;
            add_dense("enc.fc0", 2 * pix, cfg_.mlp_hidden, 1.0, rng);
            add_dense("enc.fc1", cfg_.mlp_hidden, cfg_.mlp_hidden, 1.0, rng);
            add_dense("enc.head", cfg_.mlp_hidden, 2 * cfg_.mlp_latent, 0.1, rng);
            add_dense("dec.fc0", cfg_.mlp_latent, cfg_.mlp_hidden, 1.0, rng);
            add_dense("dec.fc1", cfg_.mlp_hidden, cfg_.mlp_hidden, 1.0, rng);
            add_dense("dec.out", cfg_.mlp_hidden, 2 * pix, 0.1, rng);
            set_logvar_bias("dec.out.b", pix, pix);
        } else {
            const int lc = cfg_.latent_channels;
            int in = 2;
            for (int l = 0; l < cfg_.depth; ++l) {
                const int w = cfg_.widths[static_cast<std::size_t>(l)];
                add_conv("enc.l" + std::to_string(l) + ".conv", in, w, 1.0, rng);
                add_conv("enc.l" + std::to_string(l) + ".head", w, 2 * lc, 0.1, rng);
                in = w;
            }
            const int wb = cfg_.widths.back();
            add_conv("enc.bottleneck.conv", in, wb, 1.0, rng);
            add_conv("enc.bottleneck.head", wb, 2 * lc, 0.1, rng);
            add_conv("dec.bottleneck.conv", lc, wb, 1.0, rng);
            int prev = wb;
            for (int l = cfg_.depth - 1; l >= 0; --l) {
                const int w = cfg_.widths[static_cast<std::size_t>(l)];
                add_conv("dec.l" + std::to_string(l) + ".conv", prev + lc, w, 1.0, rng);
                prev = w;
            }
            add_conv("dec.out", prev, 2, 0.1, rng);
            set_logvar_bias("dec.out.b", 1, 1);
        }
    }

    const PvaeConfig& config() const { return cfg_; }
    dg::ParameterStore<T>& params() { return params_; }
    const dg::ParameterStore<T>& params() const { return params_; }

    /// Latent shapes for a batch of n, in encode() order.
    std::vector<std::vector<int>> latent_shapes(int n) const {
        if (cfg_.arch == "mlp") return {{n, cfg_.mlp_latent}};
        std::vector<std::vector<int>> s;
        for (int l = 0; l <= cfg_.depth; ++l) {
            const int side = cfg_.image_size >> l;
            s.push_back({n, cfg_.latent_channels, side, side});
        }
        return s;
    }

    /// input [N, 2, S, S] -> one GaussianParams per latent level.
    std::vector<dg::GaussianParams<T>> encode(Graph& g, Var input) {
        const auto& shape = g.value(input).shape;
        const int s = cfg_.image_size;
        if (shape.size() != 4 || shape[1] != 2 || shape[2] != s || shape[3] != s) {
            throw ShapeError("encode", "expected input [N,2," + std::to_string(s) + "," + std::to_string(s) +
                                           "], got " + dg::shape_str(shape));
        }
        const int n = shape[0];
        const T slope = static_cast<T>(cfg_.leaky_slope);
        std::vector<dg::GaussianParams<T>> out;
        if (cfg_.arch == "mlp") {
            Var h = dg::reshape(g, input, {n, 2 * s * s});
            h = dg::leaky_relu(g, dense(g, "enc.fc0", h), slope);
            h = dg::leaky_relu(g, dense(g, "enc.fc1", h), slope);
            out.push_back(split_gaussian(g, dense(g, "enc.head", h), cfg_.mlp_latent));
            return out;
        }
        Var h = input;
        for (int l = 0; l < cfg_.depth; ++l) {
            const std::string p = "enc.l" + std::to_string(l);
            h = dg::leaky_relu(g, conv(g, p + ".conv", h), slope);
            out.push_back(split_gaussian(g, conv(g, p + ".head", h), cfg_.latent_channels));
            h = dg::downsample(g, h);
        }
        h = dg::leaky_relu(g, conv(g, "enc.bottleneck.conv", h), slope);
        out.push_back(split_gaussian(g, conv(g, "enc.bottleneck.head", h), cfg_.latent_channels));
        return out;
    }

    /// Latent samples (encode() order) -> per-pixel Gaussian over the object.
    ObjectDistribution<T> decode(Graph& g, const std::vector<Var>& z) {
        const auto expected = latent_shapes(z.empty() ? 0 : g.value(z.front()).dim(0));
        if (z.size() != expected.size()) throw ShapeError("decode", "wrong number of latent levels");
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (g.value(z[i]).shape != expected[i]) {
                throw ShapeError("decode", "latent level " + std::to_string(i) + " has shape " +
                                               dg::shape_str(g.value(z[i]).shape) + ", expected " +
                                               dg::shape_str(expected[i]));
            }
        }
        const int n = expected.front()[0];
        const int s = cfg_.image_size;
        const T slope = static_cast<T>(cfg_.leaky_slope);
        Var raw;
        if (cfg_.arch == "mlp") {
            Var h = dg::leaky_relu(g, dense(g, "dec.fc0", z[0]), slope);
            h = dg::leaky_relu(g, dense(g, "dec.fc1", h), slope);
            raw = dg::reshape(g, dense(g, "dec.out", h), {n, 2, s, s});
        } else {
            Var h = dg::leaky_relu(g, conv(g, "dec.bottleneck.conv", z.back()), slope);
            for (int l = cfg_.depth - 1; l >= 0; --l) {
                h = dg::upsample(g, h);
                h = dg::concat(g, {h, z[static_cast<std::size_t>(l)]});
                h = dg::leaky_relu(g, conv(g, "dec.l" + std::to_string(l) + ".conv", h), slope);
            }
            raw = conv(g, "dec.out", h);
        }
        ObjectDistribution<T> d;
        d.mean = dg::softplus(g, dg::slice(g, raw, 0, 1));
        d.logvar = dg::soft_clamp(g, dg::slice(g, raw, 1, 1), static_cast<T>(dg::kLogVarLimit));
        return d;
    }

private:
    void add_dense(const std::string& name, int in, int out, double gain, Rng& rng) {
        params_.add(name + ".w", init_tensor({in, out}, in, gain, rng));
        params_.add(name + ".b", dg::Tensor<T>({out}));
    }

    void add_conv(const std::string& name, int in, int out, double gain, Rng& rng) {
        params_.add(name + ".w", init_tensor({out, in, 3, 3}, in * 9, gain, rng));
        params_.add(name + ".b", dg::Tensor<T>({out}));
    }

    // He-uniform for leaky ReLU, scaled by `gain` for output heads.
    dg::Tensor<T> init_tensor(std::vector<int> shape, int fan_in, double gain, Rng& rng) const {
        const double slope = cfg_.leaky_slope;
        const double bound = gain * std::sqrt(2.0 / (1.0 + slope * slope)) * std::sqrt(3.0 / fan_in);
        std::uniform_real_distribution<double> u(-bound, bound);
        dg::Tensor<T> t(std::move(shape));
        for (auto& v : t.data) v = static_cast<T>(u(rng));
        return t;
    }

    // Start the decoder's log-variance channel small so early samples are informative.
    void set_logvar_bias(const std::string& name, int offset, int count) {
        auto& b = params_.get(name).value.data;
        for (int i = 0; i < count; ++i) b[static_cast<std::size_t>(offset + i)] = T(-4);
    }

    Var bind(Graph& g, const std::string& name) { return g.parameter(params_.get(name)); }
    Var dense(Graph& g, const std::string& name, Var x) {
        return dg::dense(g, x, bind(g, name + ".w"), bind(g, name + ".b"));
    }
    Var conv(Graph& g, const std::string& name, Var x) {
        return dg::conv2d(g, x, bind(g, name + ".w"), bind(g, name + ".b"));
    }

    dg::GaussianParams<T> split_gaussian(Graph& g, Var h, int width) {
        return {dg::slice(g, h, 0, width),
                dg::soft_clamp(g, dg::slice(g, h, width, width), static_cast<T>(dg::kLogVarLimit))};
    }

    PvaeConfig cfg_;
    dg::ParameterStore<T> params_;
};

/// Stacks the encoder inputs of a batch into [N, 2, S, S].
template <typename T>
dg::Tensor<T> batch_encoder_input(const std::vector<const TrainingExample*>& batch) {
    const int s = batch.front()->size();
    dg::Tensor<T> t({static_cast<int>(batch.size()), 2, s, s});
    std::size_t off = 0;
    for (const auto* ex : batch) {
        if (ex->size() != s) throw ShapeError("batch", "examples differ in image size");
        for (float v : ex->encoder_input) t.data[off++] = static_cast<T>(v);
    }
    return t;
}

template <typename T>
struct ElboGraph {
    dg::Var loss;        // mean over the batch of (likelihood term + KL)
    double nll = 0.0;    // batch mean of -E[log P(M | O)]
    double kl = 0.0;     // batch mean of KL(q || prior)
    std::vector<double> per_example;
};

/**
 * Builds the negative ELBO for a batch. Noise for z and O is drawn from
 * `rng`, so a fixed seed reproduces the same graph. `samples` Monte-Carlo
 * draws average the likelihood term; the KL term is analytic.
 */
template <typename T>
ElboGraph<T> build_elbo(dg::Graph<T>& g, PvaeModel<T>& model, const std::vector<const TrainingExample*>& batch,
                        int samples, Rng& rng) {
    if (batch.empty()) throw ConfigError("elbo: empty batch");
    if (samples < 1) throw ConfigError("elbo: need at least one Monte-Carlo sample");
    const int n = static_cast<int>(batch.size());
    const double scale = batch.front()->rate_scale();
    std::vector<const RadonOperator*> ops;
    const std::size_t rows = batch.front()->counts.values.size();
    dg::Tensor<T> counts({n, static_cast<int>(rows)});
    for (int i = 0; i < n; ++i) {
        const auto* ex = batch[static_cast<std::size_t>(i)];
        if (ex->counts.values.size() != rows) throw ShapeError("elbo", "batch mixes angle counts");
        if (std::abs(ex->rate_scale() - scale) > 1e-9 * scale) throw DataError("elbo: batch mixes photon budgets");
        for (double k : ex->counts.values) {
            if (k < 0.0) throw DataError("elbo: negative counts in " + ex->id);
        }
        std::copy(ex->counts.values.begin(), ex->counts.values.end(), counts.data.begin() + i * rows);
        ops.push_back(&ex->projector);
    }

    const dg::Var input = g.constant(batch_encoder_input<T>(batch));
    const auto q = model.encode(g, input);

    dg::Var kl = dg::kl_std_normal_per_example(g, q.front());
    for (std::size_t l = 1; l < q.size(); ++l) kl = dg::add(g, kl, dg::kl_std_normal_per_example(g, q[l]));

    dg::Var nll;
    for (int s = 0; s < samples; ++s) {
        std::vector<dg::Var> z;
        for (const auto& level : q) z.push_back(dg::reparameterize(g, level, rng));
        const auto obj = model.decode(g, z);
        const dg::Var o = dg::reparameterize(g, dg::GaussianParams<T>{obj.mean, obj.logvar}, rng);
        const dg::Var term = dg::poisson_nll(g, dg::radon(g, o, ops), counts, scale);
        nll = s == 0 ? term : dg::add(g, nll, term);
    }
    if (samples > 1) nll = dg::affine(g, nll, T(1) / static_cast<T>(samples));

    ElboGraph<T> out;
    const auto& nv = g.value(nll).data;
    const auto& kv = g.value(kl).data;
    for (int i = 0; i < n; ++i) {
        out.nll += static_cast<double>(nv[static_cast<std::size_t>(i)]);
        out.kl += static_cast<double>(kv[static_cast<std::size_t>(i)]);
        out.per_example.push_back(static_cast<double>(nv[static_cast<std::size_t>(i)] + kv[static_cast<std::size_t>(i)]));
    }
    out.nll /= n;
    out.kl /= n;
    if (!std::isfinite(out.nll)) throw NumericalError("elbo: likelihood term is not finite");
    if (!std::isfinite(out.kl)) throw NumericalError("elbo: KL term is not finite");
    out.loss = dg::affine(g, dg::reduce_sum(g, dg::add(g, nll, kl)), T(1) / static_cast<T>(n));
    return out;
}

struct TrainConfig {
    int epochs = 100;
    int batch_size = 32;
    double lr = 1e-3;
    int samples = 1;
    int checkpoint_every = 0; // 0: only at the end
    std::uint64_t seed = 0;
    double grad_clip = 0.0; // global gradient-norm cap, 0 disables
    double lr_final = 0.0;  // > 0: cosine decay from lr to lr_final over the run

    /// Learning rate used throughout epoch `epoch` (0-based).
    double lr_at(int epoch) const {
        if (!(lr_final > 0.0) || epochs <= 1) return lr;
        const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
        return lr_final + 0.5 * (lr - lr_final) * (1.0 + std::cos(std::numbers::pi * t));
    }

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
        if (samples < 1) throw ConfigError("samples must be >= 1");
        if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
        if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
        if (lr_final < 0.0 || lr_final > lr) throw ConfigError("lr_final must lie in [0, lr]");
    }
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double kl = 0.0;
    double nll = 0.0;
    double wall_seconds = 0.0;
    int skipped_steps = 0;
};

template <typename T>
struct TrainState {
    int epoch = 0; // epochs completed
    std::vector<EpochStats> history;
    dg::AdamState<T> optimizer;
};

/// Rescales all gradients so their global L2 norm is at most `limit`.
template <typename T>
void clip_gradients(dg::ParameterStore<T>& store, double limit) {
    double sq = 0.0;
    for (const auto& p : store.all())
        for (T v : p.grad.data) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm) || norm <= limit) return; // non-finite steps are skipped by Adam
    const T f = static_cast<T>(limit / norm);
    for (auto& p : store.all())
        for (T& v : p.grad.data) v *= f;
}

/// Called after every epoch; returning false stops training early.
using EpochCallback = std::function<bool(const EpochStats&)>;
/// Called at checkpoint boundaries with the state after `epoch` epochs.
template <typename T>
using CheckpointCallback = std::function<void(const PvaeModel<T>&, const TrainState<T>&)>;

/// Groups example indices into minibatches of equal angle count, order fixed by `seed`.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<TrainingExample>& data, int batch_size,
                                                          std::uint64_t seed) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    std::map<std::size_t, std::vector<std::size_t>> open; // angle count -> partial batch
    for (std::size_t idx : order) {
        auto& b = open[data[idx].counts.angles()];
        b.push_back(idx);
        if (static_cast<int>(b.size()) == batch_size) {
            batches.push_back(std::move(b));
            b.clear();
        }
    }
    for (auto& [k, b] : open)
        if (!b.empty()) batches.push_back(std::move(b));
    return batches;
}

/**
 * Minibatch Adam on the mean per-example negative ELBO, continuing from
 * `state` (fresh or restored). Per-epoch shuffling and Monte-Carlo noise
 * derive from (seed, epoch, batch), so a resumed run matches an
 * uninterrupted one.
 */
template <typename T>
void train(PvaeModel<T>& model, const std::vector<TrainingExample>& data, const TrainConfig& cfg,
           TrainState<T>& state, const EpochCallback& on_epoch = {},
           const std::type_identity_t<CheckpointCallback<T>>& on_checkpoint = {}) {
    cfg.validate();
    if (data.empty()) throw DataError("train: no measurements");
    if (state.optimizer.m.empty()) state.optimizer.init(model.params());
    for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        const dg::AdamConfig adam{cfg.lr_at(epoch), 0.9, 0.999, 1e-8};
        const auto t0 = std::chrono::steady_clock::now();
        EpochStats stats;
        stats.epoch = epoch + 1;
        std::size_t seen = 0;
        const auto batches = make_batches(data, cfg.batch_size, derive_seed(cfg.seed, 1, static_cast<std::uint64_t>(epoch)));
        for (std::size_t b = 0; b < batches.size(); ++b) {
            std::vector<const TrainingExample*> batch;
            for (std::size_t i : batches[b]) batch.push_back(&data[i]);
            Rng rng(derive_seed(cfg.seed, 2 + static_cast<std::uint64_t>(epoch), b));
            dg::Graph<T> g;
            const auto elbo = build_elbo(g, model, batch, cfg.samples, rng);
            if (elbo.kl < -1e-3 * static_cast<double>(model.params().scalar_count())) {
                throw NumericalError("train: negative KL term " + std::to_string(elbo.kl));
            }
            model.params().zero_grad();
            g.backward(elbo.loss);
            if (cfg.grad_clip > 0.0) clip_gradients(model.params(), cfg.grad_clip);
            if (!dg::adam_step(model.params(), state.optimizer, adam).applied) ++stats.skipped_steps;
            const double nb = static_cast<double>(batch.size());
            stats.loss += (elbo.nll + elbo.kl) * nb;
            stats.nll += elbo.nll * nb;
            stats.kl += elbo.kl * nb;
            seen += batch.size();
        }
        stats.loss /= static_cast<double>(seen);
        stats.nll /= static_cast<double>(seen);
        stats.kl /= static_cast<double>(seen);
        if (!std::isfinite(stats.loss)) throw NumericalError("train: non-finite epoch loss at epoch " + std::to_string(epoch + 1));
        stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        state.history.push_back(stats);
        state.epoch = epoch + 1;
        const bool boundary = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
        if (on_checkpoint && (boundary || state.epoch == cfg.epochs)) on_checkpoint(model, state);
        if (on_epoch && !on_epoch(stats)) break;
    }
}

/// Posterior samples of the object for one measurement, flattened [S, size*size].
template <typename T>
std::vector<double> sample_posterior(PvaeModel<T>& model, const TrainingExample& ex, int count, std::uint64_t seed,
                                     int chunk = 0) {
    if (count < 1) throw ConfigError("sample_posterior: need at least one sample");
    const int s = model.config().image_size;
    const std::size_t pix = static_cast<std::size_t>(s) * s;
    if (chunk <= 0) chunk = model.config().arch == "mlp" ? 2048 : 8;

    std::vector<dg::Tensor<T>> means, logvars;
    {
        dg::Graph<T> g;
        const auto q = model.encode(g, g.constant(batch_encoder_input<T>({&ex})));
        for (const auto& level : q) {
            means.push_back(g.value(level.mean));
            logvars.push_back(g.value(level.logvar));
        }
    }

    // one stream per sample, so chunking never changes the draws
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(count) * pix);
    for (int done = 0; done < count; done += chunk) {
        const int c = std::min(chunk, count - done);
        std::vector<Rng> rngs;
        std::vector<std::normal_distribution<double>> nds(static_cast<std::size_t>(c));
        for (int i = 0; i < c; ++i) rngs.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(done + i)));
        dg::Graph<T> g;
        std::vector<dg::Var> z;
        for (std::size_t l = 0; l < means.size(); ++l) {
            std::vector<int> shape = means[l].shape;
            shape[0] = c;
            dg::Tensor<T> zt(shape);
            const std::size_t per = means[l].numel();
            for (int i = 0; i < c; ++i) {
                for (std::size_t j = 0; j < per; ++j) {
                    const double sd = std::exp(0.5 * static_cast<double>(logvars[l].data[j]));
                    zt.data[static_cast<std::size_t>(i) * per + j] =
                        static_cast<T>(static_cast<double>(means[l].data[j]) + sd * nds[static_cast<std::size_t>(i)](rngs[static_cast<std::size_t>(i)]));
                }
            }
            z.push_back(g.constant(std::move(zt)));
        }
        const auto obj = model.decode(g, z);
        const auto& mv = g.value(obj.mean).data;
        const auto& lv = g.value(obj.logvar).data;
        for (std::size_t k = 0; k < mv.size(); ++k) {
            out.push_back(static_cast<double>(mv[k]) +
                          std::exp(0.5 * static_cast<double>(lv[k])) * nds[k / pix](rngs[k / pix]));
        }
    }
    return out;
}

/// Pixelwise mean of `count` posterior samples.
template <typename T>
ImageGrid reconstruct_point(PvaeModel<T>& model, const TrainingExample& ex, int count = 64, std::uint64_t seed = 0) {
    const auto samples = sample_posterior(model, ex, count, seed);
    const int s = model.config().image_size;
    ImageGrid img = ImageGrid::square(s);
    const std::size_t pix = img.size();
    for (int i = 0; i < count; ++i)
        for (std::size_t p = 0; p < pix; ++p) img.values[p] += samples[static_cast<std::size_t>(i) * pix + p];
    for (double& v : img.values) v /= count;
    return img;
}

// ---------------------------------------------------------------------------
// Checkpoints: params.pvt, optimizer.pvt, arch.json, state.json

template <typename T>
void save_checkpoint(const fs::path& dir, const PvaeModel<T>& model, const TrainState<T>& state, const Json& extra = {}) {
    fs::create_directories(dir);
    std::vector<StoredTensor> params, moments;
    const auto& all = model.params().all();
    for (std::size_t i = 0; i < all.size(); ++i) {
        const auto& p = all[i];
        std::vector<std::int64_t> shape(p.value.shape.begin(), p.value.shape.end());
        params.push_back({p.name, shape, {p.value.data.begin(), p.value.data.end()}});
        if (i < state.optimizer.m.size()) {
            moments.push_back({p.name + ".m", shape, {state.optimizer.m[i].begin(), state.optimizer.m[i].end()}});
            moments.push_back({p.name + ".v", shape, {state.optimizer.v[i].begin(), state.optimizer.v[i].end()}});
        }
    }
    save_tensors(dir / "params.pvt", params);
    save_tensors(dir / "optimizer.pvt", moments);
    save_json(dir / "arch.json", to_json(model.config()));
    Json hist = Json::array();
    for (const auto& h : state.history) {
        hist.push_back(Json{{"epoch", h.epoch}, {"loss", h.loss}, {"kl", h.kl}, {"nll", h.nll},
                            {"skipped_steps", h.skipped_steps}});
    }
    Json st{{"epoch", state.epoch}, {"adam_step", state.optimizer.step}, {"history", hist}};
    if (!extra.is_null()) st["run"] = extra;
    save_json(dir / "state.json", st);
}

template <typename T>
struct Checkpoint {
    PvaeModel<T> model;
    TrainState<T> state;
    Json run;
};

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& dir) {
    Checkpoint<T> ck{PvaeModel<T>(pvae_config_from_json(load_json(dir / "arch.json"))), {}, {}};
    for (const auto& t : load_tensors(dir / "params.pvt")) {
        auto& p = ck.model.params().get(t.name);
        if (p.value.numel() != t.data.size()) throw DataError("checkpoint parameter " + t.name + " has wrong size");
        std::copy(t.data.begin(), t.data.end(), p.value.data.begin());
    }
    const Json st = load_json(dir / "state.json");
    ck.state.epoch = st.at("epoch").get<int>();
    for (const auto& h : st.at("history")) {
        EpochStats e;
        e.epoch = h.at("epoch").get<int>();
        e.loss = h.at("loss").get<double>();
        e.kl = h.at("kl").get<double>();
        e.nll = h.at("nll").get<double>();
        e.skipped_steps = h.value("skipped_steps", 0);
        ck.state.history.push_back(e);
    }
    ck.state.optimizer.init(ck.model.params());
    ck.state.optimizer.step = st.at("adam_step").get<long>();
    const auto moments = load_tensors(dir / "optimizer.pvt");
    const auto& all = ck.model.params().all();
    if (moments.size() != 2 * all.size()) throw DataError("optimizer state does not match parameters");
    for (std::size_t i = 0; i < all.size(); ++i) {
        const auto& m = moments[2 * i];
        const auto& v = moments[2 * i + 1];
        if (m.name != all[i].name + ".m" || v.name != all[i].name + ".v") throw DataError("optimizer state out of order");
        std::copy(m.data.begin(), m.data.end(), ck.state.optimizer.m[i].begin());
        std::copy(v.data.begin(), v.data.end(), ck.state.optimizer.v[i].begin());
    }
    ck.run = st.value("run", Json{});
    return ck;
}

} // namespace pvae
