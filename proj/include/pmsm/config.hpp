#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmsm/common.hpp"
#include "pmsm/dataset.hpp"
#include "pmsm/features.hpp"
#include "pmsm/mining.hpp"
#include "pmsm/trainer.hpp"

namespace pmsm {

using nlohmann::json;

inline json to_json(const SynthConfig& c) {
    return {{"num_models", c.num_models},
            {"identities_per_model", c.identities_per_model},
            {"images_per_identity", c.images_per_identity},
            {"image_size", c.image_size},
            {"model_cue_region", to_json(c.model_cue_region)},
            {"identity_cue_region", to_json(c.identity_cue_region)},
            {"noise_sigma", c.noise_sigma},
            {"jitter_px", c.jitter_px},
            {"illumination", c.illumination},
            {"rng_seed", c.rng_seed}};
}

inline SynthConfig synth_config_from_json(const json& j, SynthConfig c = {}) {
    c.num_models = j.value("num_models", c.num_models);
    c.identities_per_model = j.value("identities_per_model", c.identities_per_model);
    c.images_per_identity = j.value("images_per_identity", c.images_per_identity);
    c.image_size = j.value("image_size", c.image_size);
    if (j.contains("model_cue_region")) c.model_cue_region = rect_from_json(j.at("model_cue_region"));
    if (j.contains("identity_cue_region")) c.identity_cue_region = rect_from_json(j.at("identity_cue_region"));
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.jitter_px = j.value("jitter_px", c.jitter_px);
    c.illumination = j.value("illumination", c.illumination);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    return c;
}

inline json to_json(const HogConfig& c) {
    return {{"cell_px", c.cell_px},   {"block_cells", c.block_cells}, {"bins", c.bins},
            {"signed", c.signed_orientation}, {"epsilon", c.epsilon}, {"clip", c.clip}};
}

inline HogConfig hog_config_from_json(const json& j, HogConfig c = {}) {
    c.cell_px = j.value("cell_px", c.cell_px);
    c.block_cells = j.value("block_cells", c.block_cells);
    c.bins = j.value("bins", c.bins);
    c.signed_orientation = j.value("signed", c.signed_orientation);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.clip = j.value("clip", c.clip);
    return c;
}

inline json to_json(const PatchGridConfig& c) { return {{"patch_px", c.patch_px}, {"stride_px", c.stride_px}}; }

inline PatchGridConfig grid_config_from_json(const json& j, PatchGridConfig c = {}) {
    c.patch_px = j.value("patch_px", c.patch_px);
    c.stride_px = j.value("stride_px", c.stride_px);
    return c;
}

inline json to_json(const MiningConfig& c) {
    return {{"neighbors_m", c.neighbors_m},
            {"top_n", c.top_n},
            {"epsilon", c.epsilon},
            {"seeds_per_class", c.seeds_per_class},
            {"rng_seed", c.rng_seed}};
}

inline MiningConfig mining_config_from_json(const json& j, MiningConfig c = {}) {
    c.neighbors_m = j.value("neighbors_m", c.neighbors_m);
    c.top_n = j.value("top_n", c.top_n);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.seeds_per_class = j.value("seeds_per_class", c.seeds_per_class);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    return c;
}

// ---------------------------------------------------------------------------

struct DatasetSection {
    std::string source = "synthetic";  // synthetic | manifest
    SynthConfig synthetic;
    std::string manifest;       // training manifest (or the whole dataset)
    std::string test_manifest;  // optional; otherwise held-out identities are split off
    std::size_t num_test_identities = 50;
    int canonical_px = 128;
};

struct EvalSection {
    std::vector<std::size_t> split_sizes{16, 32, 50};
    std::vector<int> ks{1, 5};
    std::size_t repeats = 1;
};

struct RunConfig {
    std::string profile = "desk";
    std::uint64_t seed = 1;
    unsigned threads = 1;
    std::string out = "pmsm_out";
    DatasetSection dataset;
    HogConfig hog;
    PatchGridConfig grid;
    MiningConfig mining;
    TrainConfig train;
    EvalSection eval;
    json merged;  // the effective configuration document

    /// Hash of everything that influences results (not `out` or `threads`).
    std::string hash() const {
        json j = merged;
        j.erase("out");
        j.erase("threads");
        return hex64(fnv1a(j.dump()));
    }
};

/// Default configuration document for a profile.
inline json profile_defaults(const std::string& profile) {
    SynthConfig synth;
    synth.identities_per_model = 10;  // 100 identities: 50 train, 50 held out
    synth.noise_sigma = 0.05;
    synth.jitter_px = 3;
    synth.illumination = 0.25;
    TrainConfig train;
    json eval{{"split_sizes", {16, 32, 50}}, {"ks", {1, 5}}, {"repeats", 1}};
    if (profile == "paper") {
        train.profile = "paper";
        train.momentum = 0.9;
        train.weight_decay = 2e-4;
        train.schedules = {0.05, 0.9, 0.1, 10000, false};
        train.batch_triplets = 60;  // 180 images
        train.max_iter = 100000;
        train.checkpoint_every = 10000;
        train.pk_identities = 30;
        train.arch.stream.out_dim = 2048;
        train.arch.embed_dim = 1024;
        eval["split_sizes"] = {800, 1600, 2400};
    } else if (profile != "desk") {
        throw ConfigError("unknown profile '" + profile + "' (expected desk or paper)");
    }
    return {{"profile", profile},
            {"seed", 1},
            {"threads", 1},
            {"out", "pmsm_out"},
            {"dataset",
             {{"source", "synthetic"},
              {"synthetic", to_json(synth)},
              {"manifest", ""},
              {"test_manifest", ""},
              {"num_test_identities", 50},
              {"canonical_px", 128}}},
            {"mining", {{"hog", to_json(HogConfig{})}, {"grid", to_json(PatchGridConfig{})}, {"parts", to_json(MiningConfig{})}}},
            {"train", to_json(train)},
            {"eval", eval}};
}

/// Parses a merged configuration document into typed sections and checks it.
inline RunConfig run_config_from_json(const json& doc) {
    RunConfig c;
    try {
        c.merged = doc;
        c.profile = doc.at("profile").get<std::string>();
        c.seed = doc.at("seed").get<std::uint64_t>();
        c.threads = doc.at("threads").get<unsigned>();
        c.out = doc.at("out").get<std::string>();
        const auto& d = doc.at("dataset");
        c.dataset.source = d.value("source", c.dataset.source);
        if (d.contains("synthetic")) c.dataset.synthetic = synth_config_from_json(d.at("synthetic"));
        c.dataset.manifest = d.value("manifest", std::string());
        c.dataset.test_manifest = d.value("test_manifest", std::string());
        c.dataset.num_test_identities = d.value("num_test_identities", c.dataset.num_test_identities);
        c.dataset.canonical_px = d.value("canonical_px", c.dataset.canonical_px);
        const auto& m = doc.at("mining");
        c.hog = hog_config_from_json(m.value("hog", json::object()));
        c.grid = grid_config_from_json(m.value("grid", json::object()));
        c.mining = mining_config_from_json(m.value("parts", json::object()));
        c.train = train_config_from_json(doc.at("train"));
        const auto& e = doc.at("eval");
        c.eval.split_sizes = e.value("split_sizes", c.eval.split_sizes);
        c.eval.ks = e.value("ks", c.eval.ks);
        c.eval.repeats = e.value("repeats", c.eval.repeats);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid configuration: ") + e.what());
    }

    if (c.dataset.source == "synthetic") {
        c.dataset.synthetic.validate();
        c.dataset.canonical_px = c.dataset.synthetic.image_size;
    } else if (c.dataset.source == "manifest") {
        if (c.dataset.manifest.empty()) throw ConfigError("dataset.manifest is required for a manifest source");
        if (!std::filesystem::exists(c.dataset.manifest))
            throw ConfigError("manifest not found: " + c.dataset.manifest);
        if (!c.dataset.test_manifest.empty() && !std::filesystem::exists(c.dataset.test_manifest))
            throw ConfigError("test manifest not found: " + c.dataset.test_manifest);
    } else {
        throw ConfigError("dataset.source must be synthetic or manifest");
    }
    c.hog.validate();
    c.grid.validate(c.dataset.canonical_px, c.hog);
    c.mining.validate();
    c.train.validate();
    if (c.eval.repeats < 1) throw ConfigError("eval.repeats must be >= 1");
    for (auto s : c.eval.split_sizes)
        if (s < 1) throw ConfigError("eval split sizes must be >= 1");
    for (int k : c.eval.ks)
        if (k < 1) throw ConfigError("eval ks must be >= 1");
    return c;
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
}

/// Profile defaults, then the config file (JSON merge patch), then flag
/// overrides; later layers win.
inline RunConfig load_run_config(const std::string& profile, const json& file_patch, const json& flag_patch) {
    std::string prof = profile;
    if (flag_patch.contains("profile")) prof = flag_patch.at("profile").get<std::string>();
    else if (file_patch.contains("profile")) prof = file_patch.at("profile").get<std::string>();
    json doc = profile_defaults(prof);
    doc.merge_patch(file_patch);
    doc.merge_patch(flag_patch);
    doc["profile"] = prof;
    doc["train"]["profile"] = prof;
    return run_config_from_json(doc);
}

}  // namespace pmsm
