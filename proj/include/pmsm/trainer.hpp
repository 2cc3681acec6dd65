#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmsm/common.hpp"
#include "pmsm/dataset.hpp"
#include "pmsm/embedding.hpp"
#include "pmsm/loss.hpp"
#include "pmsm/mining.hpp"
#include "pmsm/random.hpp"

namespace pmsm {

/// How a training batch is drawn and which triplets the loss sees.
///  interleaved:            N sampled (a, p, n) triplets used as drawn
///  interleaved_batch_hard: the same 3N images, triplets re-mined batch-hard
///  pk_batch_hard:          P identities x K images, batch-hard triplets
enum class Sampling { interleaved, interleaved_batch_hard, pk_batch_hard };

inline std::string to_string(Sampling s) {
    switch (s) {
        case Sampling::interleaved: return "interleaved";
        case Sampling::interleaved_batch_hard: return "interleaved_batch_hard";
        case Sampling::pk_batch_hard: return "pk_batch_hard";
    }
    return "?";
}

inline Sampling sampling_from_string(const std::string& s) {
    if (s == "interleaved") return Sampling::interleaved;
    if (s == "interleaved_batch_hard") return Sampling::interleaved_batch_hard;
    if (s == "pk_batch_hard") return Sampling::pk_batch_hard;
    throw ConfigError("unknown sampling '" + s + "'");
}

struct TrainConfig {
    double momentum = 0.9;
    double weight_decay = 2e-4;
    Schedules schedules;
    std::size_t batch_triplets = 6;  // N; the batch holds 3N images
    std::uint64_t max_iter = 2000;
    std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
    std::uint64_t rng_seed = 1;
    std::string profile = "desk";
    Sampling sampling = Sampling::interleaved_batch_hard;
    std::size_t pk_identities = 6;  // P for pk_batch_hard; K = 3N / P
    bool mean_reduction = true;     // divide the gradient by the triplet count
    bool squared_distance = false;
    PmsmArch arch;

    void validate() const {
        if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
        if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
        if (max_iter < 1) throw ConfigError("max_iter must be >= 1");
        if (batch_triplets < 1) throw ConfigError("batch_triplets must be >= 1");
        if (sampling == Sampling::pk_batch_hard && (pk_identities < 2 || 3 * batch_triplets < 2 * pk_identities))
            throw ConfigError("pk_batch_hard needs >= 2 identities and >= 2 images per identity");
        if (profile != "desk" && profile != "paper") throw ConfigError("unknown profile '" + profile + "'");
        schedules.validate();
        arch.validate();
    }
};

inline nlohmann::json to_json(const Schedules& s) {
    return {{"base_lr", s.base_lr},
            {"lr_decay", s.lr_decay},
            {"margin_base", s.margin_base},
            {"period", s.period},
            {"constant_margin", s.constant_margin}};
}

inline Schedules schedules_from_json(const nlohmann::json& j, Schedules s = {}) {
    s.base_lr = j.value("base_lr", s.base_lr);
    s.lr_decay = j.value("lr_decay", s.lr_decay);
    s.margin_base = j.value("margin_base", s.margin_base);
    s.period = j.value("period", s.period);
    s.constant_margin = j.value("constant_margin", s.constant_margin);
    return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"schedules", to_json(c.schedules)},
            {"batch_triplets", c.batch_triplets},
            {"batch_images", 3 * c.batch_triplets},
            {"max_iter", c.max_iter},
            {"checkpoint_every", c.checkpoint_every},
            {"rng_seed", c.rng_seed},
            {"profile", c.profile},
            {"sampling", to_string(c.sampling)},
            {"pk_identities", c.pk_identities},
            {"mean_reduction", c.mean_reduction},
            {"squared_distance", c.squared_distance},
            {"architecture", to_json(c.arch)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("schedules")) c.schedules = schedules_from_json(j.at("schedules"), c.schedules);
    c.batch_triplets = j.value("batch_triplets", c.batch_triplets);
    c.max_iter = j.value("max_iter", c.max_iter);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.profile = j.value("profile", c.profile);
    if (j.contains("sampling")) c.sampling = sampling_from_string(j.at("sampling").get<std::string>());
    c.pk_identities = j.value("pk_identities", c.pk_identities);
    c.mean_reduction = j.value("mean_reduction", c.mean_reduction);
    c.squared_distance = j.value("squared_distance", c.squared_distance);
    if (j.contains("architecture")) c.arch = pmsm_arch_from_json(j.at("architecture"));
    return c;
}

// ---------------------------------------------------------------------------

template <typename T>
struct OptimizerState {
    PmsmParams<T> velocity;
    std::uint64_t iteration = 0;
};

template <typename T>
OptimizerState<T> make_optimizer_state(const PmsmParams<T>& params) {
    return {zero_pmsm<T>(params.arch), 0};
}

/// g' = g + wd * w (weights only); v = mu * v - lr * g'; w += v; n += 1.
/// lr comes from the schedule at the current iteration.
template <typename T>
void sgd_step(PmsmParams<T>& params, const PmsmParams<T>& grads, OptimizerState<T>& state, double momentum,
              double weight_decay, double lr) {
    std::vector<Tensor<T>*> w, v;
    std::vector<const Tensor<T>*> g;
    params.for_each_tensor([&](Tensor<T>& t) { w.push_back(&t); });
    state.velocity.for_each_tensor([&](Tensor<T>& t) { v.push_back(&t); });
    grads.for_each_tensor([&](const Tensor<T>& t) { g.push_back(&t); });
    if (w.size() != g.size() || w.size() != v.size()) throw Error("sgd_step: parameter/gradient/state mismatch");
    const T mu = static_cast<T>(momentum), eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < w.size(); ++i) {
        auto& wi = w[i]->value;
        const auto& gi = g[i]->value;
        auto& vi = v[i]->value;
        if (wi.rows() != gi.rows() || wi.cols() != gi.cols() || wi.rows() != vi.rows() || wi.cols() != vi.cols())
            throw Error("sgd_step: shape mismatch in " + w[i]->name);
        if (w[i]->is_weight && weight_decay != 0)
            vi = mu * vi - eta * (gi + static_cast<T>(weight_decay) * wi);
        else
            vi = mu * vi - eta * gi;
        wi += vi;
        if (!wi.allFinite())
            throw Error("non-finite parameter after update of " + w[i]->name + " at iteration " +
                        std::to_string(state.iteration));
    }
    ++state.iteration;
}

template <typename T>
void sgd_step(PmsmParams<T>& params, const PmsmParams<T>& grads, OptimizerState<T>& state, const TrainConfig& cfg) {
    sgd_step(params, grads, state, cfg.momentum, cfg.weight_decay, lr_at(state.iteration, cfg.schedules));
}

/// One forward/backward/update on a fixed batch. Returns the loss before
/// the update.
template <typename T>
double train_step(PmsmParams<T>& params, OptimizerState<T>& state, std::span<const CropSet* const> batch,
                  std::span<const Triplet> triplets, const TrainConfig& cfg) {
    auto lg = loss_and_gradients<T>(params, batch, triplets, margin_at(state.iteration, cfg.schedules),
                                    cfg.squared_distance);
    if (cfg.mean_reduction && !triplets.empty()) {
        const T s = static_cast<T>(1.0 / static_cast<double>(triplets.size()));
        lg.grads.for_each_tensor([&](Tensor<T>& t) { t.value *= s; });
    }
    sgd_step(params, lg.grads, state, cfg);
    return lg.loss;
}

struct TraceRow {
    std::uint64_t iteration = 0;
    double loss = 0;
    double lr = 0;
    double margin = 0;
    std::size_t triplets = 0;
};

struct TrainResult {
    PmsmParams<float> params;
    std::vector<TraceRow> trace;
    nlohmann::json metadata;
    std::vector<std::filesystem::path> checkpoints;
};

struct TrainOptions {
    std::filesystem::path out_dir;  // empty: keep everything in memory
    nlohmann::json extra_meta = nlohmann::json::object();
    std::function<void(const TraceRow&)> on_iteration;
};

/// Draws one batch: the images to embed and the triplets over them. For
/// batch-hard variants the triplets are filled in after the forward pass.
inline TripletBatch sample_batch(std::span<const int> identities, const TrainConfig& cfg, Rng& rng) {
    if (cfg.sampling == Sampling::pk_batch_hard) {
        const std::size_t k = 3 * cfg.batch_triplets / cfg.pk_identities;
        return make_pk_batch(identities, cfg.pk_identities, k, rng);
    }
    return make_batch(identities, cfg.batch_triplets, rng);
}

inline void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    os << "iteration,loss,lr,margin\n";
    os.precision(17);
    for (const auto& r : trace) os << r.iteration << ',' << r.loss << ',' << r.lr << ',' << r.margin << '\n';
    if (!os) throw Error("failed writing " + path.string());
}

/// Runs cfg.max_iter SGD iterations on `ds` with the given canonical parts.
/// Single-threaded and fully determined by cfg.rng_seed.
inline TrainResult train(const Dataset& ds, const PartsFile& parts, const TrainConfig& cfg,
                         const TrainOptions& opt = {}) {
    cfg.validate();
    const auto identities = ds.identity_labels();
    TrainResult res;
    res.params = init_pmsm<float>(cfg.arch, derive_seed(cfg.rng_seed, 0x494e4954ULL));
    auto state = make_optimizer_state(res.params);
    Rng rng(derive_seed(cfg.rng_seed, 0x42415443ULL));
    const int px = cfg.arch.stream.input_px;

    res.metadata = {{"train_config", to_json(cfg)},
                    {"config_hash", hex64(fnv1a(to_json(cfg).dump()))},
                    {"architecture_hash", hex64(arch_hash(cfg.arch))},
                    {"num_parameters", res.params.num_parameters()},
                    {"dataset_images", ds.size()},
                    {"dataset_identities", ds.num_identities()},
                    {"parts", to_json(parts)},
                    {"extra", opt.extra_meta}};
    if (!opt.out_dir.empty()) std::filesystem::create_directories(opt.out_dir);

    auto save = [&](const std::string& name) {
        const auto path = opt.out_dir / name;
        save_checkpoint(path, res.params,
                        {{"iteration", state.iteration}, {"config_hash", res.metadata["config_hash"]}});
        res.checkpoints.push_back(path);
    };

    std::vector<CropSet> crops;
    std::vector<const CropSet*> ptrs;
    std::vector<int> batch_ids;
    for (std::uint64_t it = 0; it < cfg.max_iter; ++it) {
        auto batch = sample_batch(identities, cfg, rng);
        crops.clear();
        ptrs.clear();
        batch_ids.clear();
        for (std::size_t idx : batch.images) {
            crops.push_back(make_crops(ds[idx].pixels, parts, px));
            batch_ids.push_back(ds[idx].identity_id);
        }
        for (const auto& c : crops) ptrs.push_back(&c);

        std::vector<Triplet> triplets = batch.triplets;
        if (cfg.sampling != Sampling::interleaved) {
            const Mat<float> emb = forward_pmsm_batch<float>(res.params, ptrs);
            triplets = batch_hard_mine<float>(emb, batch_ids, cfg.squared_distance).triplets;
        }
        TraceRow row{state.iteration, 0, lr_at(state.iteration, cfg.schedules),
                     margin_at(state.iteration, cfg.schedules), triplets.size()};
        row.loss = train_step<float>(res.params, state, ptrs, triplets, cfg);
        if (!std::isfinite(row.loss)) throw Error("non-finite loss at iteration " + std::to_string(row.iteration));
        res.trace.push_back(row);
        if (opt.on_iteration) opt.on_iteration(row);
        if (!opt.out_dir.empty() && cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 &&
            state.iteration < cfg.max_iter) {
            char name[48];
            std::snprintf(name, sizeof name, "checkpoint_%08llu.ckpt",
                          static_cast<unsigned long long>(state.iteration));
            save(name);
        }
    }
    res.metadata["iterations"] = state.iteration;
    if (!opt.out_dir.empty()) {
        save("model.ckpt");
        write_trace_csv(opt.out_dir / "loss_trace.csv", res.trace);
        std::ofstream os(opt.out_dir / "run_meta.json");
        os << res.metadata.dump(2) << '\n';
        if (!os) throw Error("failed writing run_meta.json");
    }
    return res;
}

}  // namespace pmsm
