#pragma once

// Command-line driver: synth, mine, train, eval and pipeline subcommands.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pmsm/config.hpp"
#include "pmsm/dataset.hpp"
#include "pmsm/embedding.hpp"
#include "pmsm/eval.hpp"
#include "pmsm/image_io.hpp"
#include "pmsm/mining.hpp"
#include "pmsm/trainer.hpp"

namespace pmsm::cli {

namespace fs = std::filesystem;

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::optional<std::string> out;
    std::optional<std::string> profile;
    std::optional<std::uint64_t> max_iter;
    std::optional<std::size_t> repeats;
    std::string parts;
    std::string checkpoint;
    bool force = false;
    bool skip_train = false;
    bool baseline = false;
};

/// Builds the effective configuration: profile defaults <- config file <- flags.
inline RunConfig resolve(const Flags& f) {
    json file = f.config.empty() ? json::object() : read_json_file(f.config);
    if (!file.is_object()) throw ConfigError("config must be a JSON object");
    json flags = json::object();
    if (f.profile) flags["profile"] = *f.profile;
    if (f.threads) flags["threads"] = *f.threads;
    if (f.out) flags["out"] = *f.out;
    if (f.max_iter) flags["train"]["max_iter"] = *f.max_iter;
    if (f.repeats) flags["eval"]["repeats"] = *f.repeats;
    if (f.seed) {
        // one flag seeds every stage
        flags["seed"] = *f.seed;
        flags["dataset"]["synthetic"]["rng_seed"] = *f.seed;
        flags["mining"]["parts"]["rng_seed"] = *f.seed;
        flags["train"]["rng_seed"] = *f.seed;
    }
    return load_run_config(f.profile.value_or("desk"), file, flags);
}

struct Datasets {
    Dataset train;
    Dataset test;
};

inline void warn(std::ostream& log, const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) log << "warning: " << w << '\n';
}

/// Training and held-out test sets. Synthetic data is regenerated from the
/// config; manifests are read from disk. Without a test manifest the test
/// identities are split off the training manifest.
inline Datasets load_datasets(const RunConfig& cfg, std::ostream& log) {
    Dataset all;
    Datasets out;
    if (cfg.dataset.source == "synthetic") {
        all = generate_synthetic(cfg.dataset.synthetic, cfg.threads);
    } else {
        std::vector<std::string> warnings;
        all = load_manifest(cfg.dataset.manifest, cfg.dataset.canonical_px, &warnings, cfg.threads);
        warn(log, warnings);
        if (!cfg.dataset.test_manifest.empty()) {
            warnings.clear();
            out.test = load_manifest(cfg.dataset.test_manifest, cfg.dataset.canonical_px, &warnings, cfg.threads);
            warn(log, warnings);
            out.train = std::move(all);
            return out;
        }
    }
    auto [tr, te] = split_by_identity(all, cfg.dataset.num_test_identities, derive_seed(cfg.seed, 0x54455354ULL));
    out.train = std::move(tr);
    out.test = std::move(te);
    return out;
}

inline void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    os << j.dump(2) << '\n';
    if (!os) throw Error("cannot write " + path.string());
}

inline void write_effective_config(const RunConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    json j = cfg.merged;
    j["config_hash"] = cfg.hash();
    write_json(dir / "config.json", j);
}

// ---------------------------------------------------------------------------
// Visualisation helpers

/// Blue-to-yellow ramp for t in [0, 1].
inline Rgb ramp(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return {static_cast<float>(std::min(1.0, 1.6 * t)), static_cast<float>(t * t),
            static_cast<float>(0.5 * (1.0 - t) + 0.1)};
}

/// Score map rendered at image resolution: every pixel takes the mean score
/// of the patches covering it, min-max scaled.
inline Image heatmap(const ScoreMap& map, const PatchGridConfig& grid, int image_px) {
    std::vector<double> acc(static_cast<std::size_t>(image_px) * image_px, 0), cnt(acc.size(), 0);
    for (int py = 0; py < map.positions_y; ++py)
        for (int px = 0; px < map.positions_x; ++px) {
            const double s = map.at({px, py});
            for (int y = py * grid.stride_px; y < py * grid.stride_px + grid.patch_px; ++y)
                for (int x = px * grid.stride_px; x < px * grid.stride_px + grid.patch_px; ++x) {
                    acc[static_cast<std::size_t>(y) * image_px + x] += s;
                    cnt[static_cast<std::size_t>(y) * image_px + x] += 1;
                }
        }
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < acc.size(); ++i)
        if (cnt[i] > 0) {
            acc[i] /= cnt[i];
            lo = std::min(lo, acc[i]);
            hi = std::max(hi, acc[i]);
        }
    Image img(image_px, image_px);
    for (int y = 0; y < image_px; ++y)
        for (int x = 0; x < image_px; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * image_px + x;
            const Rgb c = cnt[i] > 0 && hi > lo ? ramp((acc[i] - lo) / (hi - lo)) : Rgb{0, 0, 0};
            img.at(y, x, 0) = c.r;
            img.at(y, x, 1) = c.g;
            img.at(y, x, 2) = c.b;
        }
    return img;
}

inline void draw_rect(Image& img, const NormRect& r, Rgb c) {
    const int x0 = std::clamp(static_cast<int>(std::lround(r.x0 * img.width)), 0, img.width - 1);
    const int x1 = std::clamp(static_cast<int>(std::lround(r.x1 * img.width)) - 1, 0, img.width - 1);
    const int y0 = std::clamp(static_cast<int>(std::lround(r.y0 * img.height)), 0, img.height - 1);
    const int y1 = std::clamp(static_cast<int>(std::lround(r.y1 * img.height)) - 1, 0, img.height - 1);
    auto put = [&](int y, int x) {
        img.at(y, x, 0) = c.r;
        img.at(y, x, 1) = c.g;
        img.at(y, x, 2) = c.b;
    };
    for (int x = x0; x <= x1; ++x) {
        put(y0, x);
        put(y1, x);
    }
    for (int y = y0; y <= y1; ++y) {
        put(y, x0);
        put(y, x1);
    }
}

// ---------------------------------------------------------------------------
// Commands

inline fs::path parts_path(const RunConfig& cfg, const Flags& f) {
    return f.parts.empty() ? fs::path(cfg.out) / "parts.json" : fs::path(f.parts);
}

inline fs::path checkpoint_path(const RunConfig& cfg, const Flags& f, const std::string& run = "train") {
    return f.checkpoint.empty() ? fs::path(cfg.out) / run / "model.ckpt" : fs::path(f.checkpoint);
}

inline int cmd_synth(const RunConfig& cfg, std::ostream& log) {
    if (cfg.dataset.source != "synthetic") throw ConfigError("synth needs dataset.source = synthetic");
    const fs::path dir = fs::path(cfg.out) / "dataset";
    const auto ds = generate_synthetic(cfg.dataset.synthetic, cfg.threads);
    export_dataset(ds, dir, &cfg.dataset.synthetic, cfg.threads);
    write_json(dir / "synth_meta.json", {{"config_hash", cfg.hash()}, {"synthetic", to_json(cfg.dataset.synthetic)}});
    log << "synth: " << ds.size() << " images, " << ds.num_identities() << " identities -> " << dir.string() << '\n';
    return 0;
}

inline int cmd_mine(const RunConfig& cfg, const Flags& f, std::ostream& log) {
    const auto data = load_datasets(cfg, log);
    MiningContext ctx(data.train, cfg.hog, cfg.grid, cfg.threads);
    const auto cp = canonical_parts(ctx, cfg.mining);
    for (const auto& msg : cp.failures) log << "warning: skipped seed: " << msg << '\n';

    PartsFile parts{cp.part_m, cp.part_i, {}};
    parts.provenance = {{"config_hash", cfg.hash()},
                        {"hog", cfg.hog.canonical()},
                        {"grid", to_json(cfg.grid)},
                        {"mining", to_json(cfg.mining)},
                        {"train_images", data.train.size()},
                        {"skipped_seeds", cp.failures.size()}};
    const fs::path out = parts_path(cfg, f);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_parts_file(out, parts);

    const fs::path vis = fs::path(cfg.out) / "mining";
    fs::create_directories(vis);
    auto emit = [&](const std::vector<MinedPart>& mined, const PartRegion& canonical, const char* tag) {
        for (const auto& m : mined) {
            const int sid = data.train[m.map.seed].source_id;
            const std::string stem = std::string(tag) + "_seed" + std::to_string(sid);
            io::write_png((vis / (stem + "_heatmap.png")).string(), heatmap(m.map, ctx.grid(), ctx.image_px()));
            Image overlay = data.train[m.map.seed].pixels;
            draw_rect(overlay, m.region.rect, {1, 0.2f, 0.2f});
            draw_rect(overlay, canonical.rect, {0.2f, 1, 0.2f});
            io::write_png((vis / (stem + "_overlay.png")).string(), overlay);
        }
    };
    emit(cp.mined_m, cp.part_m, "part_m");
    emit(cp.mined_i, cp.part_i, "part_i");
    log << "mine: part_m " << to_string(parts.part_m.rect) << " part_i " << to_string(parts.part_i.rect) << " -> "
        << out.string() << '\n';
    return 0;
}

inline TrainConfig with_layout(TrainConfig t, StreamLayout layout) {
    t.arch.layout = layout;
    return t;
}

inline int cmd_train(const RunConfig& cfg, const Flags& f, std::ostream& log, const std::string& run = "train",
                     StreamLayout layout = StreamLayout::three_stream) {
    const fs::path pp = parts_path(cfg, f);
    if (!fs::exists(pp)) throw ConfigError("parts file not found: " + pp.string() + " (run mine first)");
    const auto parts = read_parts_file(pp);
    const auto data = load_datasets(cfg, log);
    const TrainConfig tc = with_layout(cfg.train, layout);
    TrainOptions opt;
    opt.out_dir = fs::path(cfg.out) / run;
    opt.extra_meta = {{"config_hash", cfg.hash()}, {"parts_file", pp.string()}};
    const auto every = std::max<std::uint64_t>(1, tc.max_iter / 20);
    double window = 0;
    opt.on_iteration = [&](const TraceRow& r) {
        window += r.loss;
        if ((r.iteration + 1) % every == 0) {
            log << "train[" << run << "] iter " << r.iteration + 1 << "/" << tc.max_iter << " loss "
                << window / static_cast<double>(every) << " lr " << r.lr << " margin " << r.margin << '\n';
            window = 0;
        }
    };
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = train(data.train, parts, tc, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << "train[" << run << "]: " << tc.max_iter << " iterations in " << secs << " s -> "
        << (opt.out_dir / "model.ckpt").string() << '\n';
    return 0;
}

inline int cmd_eval(const RunConfig& cfg, const Flags& f, std::ostream& log, const std::string& run = "train",
                    StreamLayout layout = StreamLayout::three_stream) {
    const fs::path pp = parts_path(cfg, f);
    if (!fs::exists(pp)) throw ConfigError("parts file not found: " + pp.string());
    const auto parts = read_parts_file(pp);
    const fs::path cp = checkpoint_path(cfg, f, run);
    if (!fs::exists(cp)) throw ConfigError("checkpoint not found: " + cp.string());
    const auto ck = load_checkpoint<float>(cp);
    const PmsmArch expected = with_layout(cfg.train, layout).arch;
    if (!(ck.params.arch == expected)) {
        if (!f.force)
            throw ConfigError("checkpoint architecture hash " + ck.architecture_hash +
                              " does not match the configured architecture " + hex64(arch_hash(expected)) +
                              " (use --force to evaluate anyway)");
        log << "warning: evaluating a checkpoint whose architecture differs from the config\n";
    }
    const auto data = load_datasets(cfg, log);

    std::vector<EvalReport> reports;
    for (std::size_t size : cfg.eval.split_sizes)
        for (std::size_t rep = 0; rep < cfg.eval.repeats; ++rep) {
            const std::uint64_t seed = derive_seed(cfg.seed, size, rep);
            std::vector<std::string> warnings;
            auto split = build_retrieval_split(data.test, size, seed, &warnings);
            warn(log, warnings);
            split.name = "test" + std::to_string(size);
            for (int task = 0; task < 2; ++task) {
                auto r = task == 0 ? evaluate_retrieval(ck.params, data.test, split, parts, cfg.eval.ks, cfg.threads)
                                   : evaluate_reid(ck.params, data.test, exchange(split), parts, cfg.eval.ks,
                                                   cfg.threads);
                r.seed = cfg.seed;
                r.repeat = rep;
                r.config_hash = cfg.hash();
                reports.push_back(std::move(r));
            }
        }

    const fs::path dir = fs::path(cfg.out) / (run == "train" ? std::string("eval") : "eval_" + run);
    fs::create_directories(dir);
    json all = json::array();
    for (const auto& r : reports) all.push_back(to_json(r));
    write_json(dir / "reports.json", {{"config_hash", cfg.hash()},
                                      {"checkpoint", cp.string()},
                                      {"architecture_hash", ck.architecture_hash},
                                      {"reports", all},
                                      {"summary", summarize_repeats(reports)}});
    std::ofstream csv(dir / "summary.csv");
    csv << csv_header() << '\n';
    for (const auto& r : reports) csv << csv_row(r) << '\n';
    if (!csv) throw Error("cannot write summary.csv");
    for (const auto& r : reports)
        log << "eval[" << run << "] " << r.split << " " << r.task << " repeat " << r.repeat << ": mAP "
            << fmt_double(r.map) << " cmc@1 " << fmt_double(r.cmc.count(1) ? r.cmc.at(1) : NAN) << '\n';
    return 0;
}

inline int cmd_pipeline(const RunConfig& cfg, const Flags& f, std::ostream& log) {
    if (cfg.dataset.source == "synthetic") cmd_synth(cfg, log);
    cmd_mine(cfg, f, log);
    if (f.skip_train) {
        if (!fs::exists(checkpoint_path(cfg, f)))
            throw ConfigError("--skip-train needs an existing checkpoint at " + checkpoint_path(cfg, f).string());
        log << "pipeline: reusing " << checkpoint_path(cfg, f).string() << '\n';
    } else {
        cmd_train(cfg, f, log);
    }
    cmd_eval(cfg, f, log);
    if (f.baseline) {
        Flags bf = f;
        bf.checkpoint.clear();
        cmd_train(cfg, bf, log, "train_whole", StreamLayout::whole_only);
        cmd_eval(cfg, bf, log, "train_whole", StreamLayout::whole_only);
    }
    return 0;
}

/// Parses argv and runs one subcommand; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& log = std::cerr) {
    CLI::App app{"Part-based multi-stream vehicle search: synth, mine, train, eval, pipeline"};
    app.require_subcommand(1);
    Flags f;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", f.config, "JSON config (merged over the profile defaults)");
        sub->add_option("--seed", f.seed, "seed for every stage");
        sub->add_option("--threads", f.threads, "worker threads");
        sub->add_option("--out", f.out, "output directory");
        sub->add_option("--profile", f.profile, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
    };
    auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
    auto* mine = app.add_subcommand("mine", "mine Part_M and Part_I");
    auto* trn = app.add_subcommand("train", "train the embedding network");
    auto* evl = app.add_subcommand("eval", "retrieval and re-identification reports");
    auto* pipe = app.add_subcommand("pipeline", "synth, mine, train and eval in sequence");
    for (auto* s : {synth, mine, trn, evl, pipe}) common(s);
    for (auto* s : {mine, trn, evl, pipe}) s->add_option("--parts", f.parts, "parts file (default <out>/parts.json)");
    for (auto* s : {trn, pipe}) s->add_option("--max-iter", f.max_iter, "training iterations");
    for (auto* s : {evl, pipe}) {
        s->add_option("--checkpoint", f.checkpoint, "checkpoint (default <out>/train/model.ckpt)");
        s->add_flag("--force", f.force, "evaluate even if the architecture hash differs");
        s->add_option("--repeats", f.repeats, "random probe selections per split");
    }
    pipe->add_flag("--skip-train", f.skip_train, "reuse an existing checkpoint");
    pipe->add_flag("--baseline", f.baseline, "also train and evaluate the whole-image single-stream model");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, log, log);
        return code == 0 ? 0 : 1;
    }
    try {
        const RunConfig cfg = resolve(f);
        fs::create_directories(cfg.out);
        write_effective_config(cfg, cfg.out);
        if (synth->parsed()) return cmd_synth(cfg, log);
        if (mine->parsed()) return cmd_mine(cfg, f, log);
        if (trn->parsed()) return cmd_train(cfg, f, log);
        if (evl->parsed()) return cmd_eval(cfg, f, log);
        return cmd_pipeline(cfg, f, log);
    } catch (const ConfigError& e) {
        log << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        log << "error: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace pmsm::cli
