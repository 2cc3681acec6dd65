#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmsm/common.hpp"
#include "pmsm/image.hpp"
#include "pmsm/image_io.hpp"
#include "pmsm/random.hpp"

namespace pmsm {

struct LabeledImage {
    Image pixels;
    int model_id = 0;     // vehicle model label c
    int identity_id = 0;  // vehicle identity label s
    int source_id = 0;    // unique per image; manifest row or generation index

    bool operator==(const LabeledImage&) const = default;
};

/// Immutable after construction. Image ids used throughout the library are
/// positions in `images`.
struct Dataset {
    std::vector<LabeledImage> images;

    std::size_t size() const { return images.size(); }
    const LabeledImage& operator[](std::size_t i) const { return images[i]; }

    std::vector<int> identity_labels() const {
        std::vector<int> out;
        out.reserve(images.size());
        for (const auto& im : images) out.push_back(im.identity_id);
        return out;
    }

    std::vector<int> model_labels() const {
        std::vector<int> out;
        out.reserve(images.size());
        for (const auto& im : images) out.push_back(im.model_id);
        return out;
    }

    std::map<int, std::vector<std::size_t>> images_by_identity() const {
        std::map<int, std::vector<std::size_t>> out;
        for (std::size_t i = 0; i < images.size(); ++i) out[images[i].identity_id].push_back(i);
        return out;
    }

    std::size_t num_identities() const { return images_by_identity().size(); }

    std::set<int> models() const {
        std::set<int> out;
        for (const auto& im : images) out.insert(im.model_id);
        return out;
    }

    bool operator==(const Dataset&) const = default;
};

/// Identity -> model map. Throws when an identity is listed under two models.
inline std::map<int, int> identity_to_model(const std::vector<std::pair<int, int>>& identity_model_pairs) {
    std::map<int, int> out;
    for (const auto& [identity, model] : identity_model_pairs) {
        auto [it, inserted] = out.emplace(identity, model);
        if (!inserted && it->second != model)
            throw Error("inconsistent hierarchy for identity " + std::to_string(identity));
    }
    return out;
}

inline std::map<int, int> identity_to_model(const Dataset& ds) {
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(ds.size());
    for (const auto& im : ds.images) pairs.emplace_back(im.identity_id, im.model_id);
    return identity_to_model(pairs);
}

/// Returns the subset of `ds` whose images satisfy pred, preserving order.
template <typename Pred>
Dataset filter(const Dataset& ds, Pred&& pred) {
    Dataset out;
    for (const auto& im : ds.images)
        if (pred(im)) out.images.push_back(im);
    return out;
}

/// Partitions identities into a training and a held-out set. `num_test`
/// identities are drawn uniformly at random.
inline std::pair<Dataset, Dataset> split_by_identity(const Dataset& ds, std::size_t num_test, std::uint64_t seed) {
    auto groups = ds.images_by_identity();
    if (num_test > groups.size()) throw Error("cannot hold out more identities than the dataset has");
    std::vector<int> ids;
    for (const auto& [id, _] : groups) ids.push_back(id);
    Rng rng(derive_seed(seed, 0x5350u));
    shuffle_in_place(ids, rng);
    const std::set<int> test(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(num_test));
    return {filter(ds, [&](const LabeledImage& im) { return !test.contains(im.identity_id); }),
            filter(ds, [&](const LabeledImage& im) { return test.contains(im.identity_id); })};
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthConfig {
    int num_models = 10;
    int identities_per_model = 5;
    int images_per_identity = 6;
    int image_size = 128;
    // "lower face" band carries the model cue, windshield area the identity cue
    NormRect model_cue_region{0.15, 0.62, 0.85, 0.86};
    NormRect identity_cue_region{0.3125, 0.1875, 0.6875, 0.4375};
    double noise_sigma = 0.02;
    int jitter_px = 0;
    double illumination = 0.0;  // per-image gain drawn from 1 +- illumination
    std::uint64_t rng_seed = 1;

    void validate() const {
        if (num_models < 1 || identities_per_model < 1 || images_per_identity < 1)
            throw ConfigError("synthetic counts must be >= 1");
        if (image_size < 16) throw ConfigError("synthetic image_size must be >= 16");
        if (!model_cue_region.valid() || !identity_cue_region.valid())
            throw ConfigError("synthetic cue regions must lie within [0,1]^2 with positive extent");
        if (overlaps(model_cue_region, identity_cue_region))
            throw ConfigError("model_cue_region and identity_cue_region must not overlap");
        if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
        if (jitter_px < 0) throw ConfigError("jitter_px must be >= 0");
        if (!(illumination >= 0 && illumination < 1)) throw ConfigError("illumination must be in [0, 1)");
    }
};

struct Rgb {
    float r = 0, g = 0, b = 0;
};

/// Striped grille texture planted in the model cue region.
struct ModelCue {
    double angle_deg = 0;
    double period_px = 8;  // in units of a 128-px frame
    Rgb base, stripe;
};

/// Block decal planted in the identity cue region: 4 x 3 cells, bit i set
/// means cell (i % 4, i / 4) is painted.
struct IdentityCue {
    static constexpr int cols = 4;
    static constexpr int rows = 3;
    std::uint32_t pattern = 0;
    Rgb color;
};

namespace detail {

inline Rgb random_color(Rng& rng, float lo, float hi) {
    auto u = [&] { return static_cast<float>(lo + (hi - lo) * rand_unit(rng)); };
    Rgb c;
    c.r = u();
    c.g = u();
    c.b = u();
    return c;
}

inline void fill_rect(Image& img, const NormRect& r, const Rgb& c) {
    const int s = img.width;
    const int x0 = static_cast<int>(std::lround(r.x0 * s)), x1 = static_cast<int>(std::lround(r.x1 * s));
    const int y0 = static_cast<int>(std::lround(r.y0 * img.height)), y1 = static_cast<int>(std::lround(r.y1 * img.height));
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            img.at(y, x, 0) = c.r;
            img.at(y, x, 1) = c.g;
            img.at(y, x, 2) = c.b;
        }
}

}  // namespace detail

inline std::vector<ModelCue> synth_model_cues(const SynthConfig& cfg) {
    std::vector<ModelCue> out;
    for (int m = 0; m < cfg.num_models; ++m) {
        Rng rng(derive_seed(cfg.rng_seed, 0x4d4f44454cULL, static_cast<std::uint64_t>(m)));
        ModelCue cue;
        // spread orientations over models so neighbouring ids differ visibly
        cue.angle_deg = 180.0 * ((m * 0.381966) - std::floor(m * 0.381966)) + 10.0 * (rand_unit(rng) - 0.5);
        cue.period_px = 5.0 + 6.0 * rand_unit(rng);
        cue.base = detail::random_color(rng, 0.05f, 0.45f);
        cue.stripe = detail::random_color(rng, 0.55f, 0.95f);
        out.push_back(cue);
    }
    return out;
}

/// One cue per identity, index = model * identities_per_model + k. Patterns
/// are unique across the whole dataset; the decal colour is shared by all
/// identities of a model, so only the pattern separates them.
inline std::vector<IdentityCue> synth_identity_cues(const SynthConfig& cfg) {
    std::vector<IdentityCue> out;
    std::set<std::uint32_t> used;
    const int total = cfg.num_models * cfg.identities_per_model;
    constexpr std::uint32_t cells = IdentityCue::cols * IdentityCue::rows;
    if (total > (1 << cells) - 64) throw ConfigError("too many identities for distinct synthetic decals");
    for (int s = 0; s < total; ++s) {
        Rng rng(derive_seed(cfg.rng_seed, 0x4944454eULL, static_cast<std::uint64_t>(s)));
        IdentityCue cue;
        do {
            cue.pattern = static_cast<std::uint32_t>(rand_below(rng, 1u << cells));
        } while (std::popcount(cue.pattern) < 3 || std::popcount(cue.pattern) > 9 || used.contains(cue.pattern));
        used.insert(cue.pattern);
        Rng crng(derive_seed(cfg.rng_seed, 0x4445434fULL, static_cast<std::uint64_t>(s / cfg.identities_per_model)));
        cue.color = detail::random_color(crng, 0.6f, 1.0f);
        out.push_back(cue);
    }
    return out;
}

/// Noise- and jitter-free rendering of one identity.
inline Image render_vehicle(const SynthConfig& cfg, const ModelCue& model, const IdentityCue& ident) {
    const int n = cfg.image_size;
    Image img(n, n);
    detail::fill_rect(img, NormRect{0, 0, 1, 1}, Rgb{0.62f, 0.64f, 0.60f});
    detail::fill_rect(img, NormRect{0.06, 0.08, 0.94, 0.94}, Rgb{0.32f, 0.34f, 0.38f});
    detail::fill_rect(img, NormRect{0.18, 0.14, 0.82, 0.48}, Rgb{0.14f, 0.17f, 0.21f});
    detail::fill_rect(img, NormRect{0.08, 0.52, 0.22, 0.58}, Rgb{0.92f, 0.92f, 0.82f});
    detail::fill_rect(img, NormRect{0.78, 0.52, 0.92, 0.58}, Rgb{0.92f, 0.92f, 0.82f});

    // model grille
    const NormRect& mr = cfg.model_cue_region;
    const double scale = n / 128.0;
    const double th = model.angle_deg * 3.141592653589793 / 180.0;
    const double period = model.period_px * scale;
    const int mx0 = static_cast<int>(std::lround(mr.x0 * n)), mx1 = static_cast<int>(std::lround(mr.x1 * n));
    const int my0 = static_cast<int>(std::lround(mr.y0 * n)), my1 = static_cast<int>(std::lround(mr.y1 * n));
    for (int y = my0; y < my1; ++y)
        for (int x = mx0; x < mx1; ++x) {
            const double phase = (x * std::cos(th) + y * std::sin(th)) / period;
            const Rgb& c = (phase - std::floor(phase)) < 0.5 ? model.base : model.stripe;
            img.at(y, x, 0) = c.r;
            img.at(y, x, 1) = c.g;
            img.at(y, x, 2) = c.b;
        }

    // identity decal
    const NormRect& ir = cfg.identity_cue_region;
    const double cw = (ir.x1 - ir.x0) / IdentityCue::cols, ch = (ir.y1 - ir.y0) / IdentityCue::rows;
    detail::fill_rect(img, ir, Rgb{0.10f, 0.12f, 0.16f});
    for (int cell = 0; cell < IdentityCue::cols * IdentityCue::rows; ++cell) {
        if (!((ident.pattern >> cell) & 1u)) continue;
        const int cx = cell % IdentityCue::cols, cy = cell / IdentityCue::cols;
        const double gap = 1.0 / n;
        NormRect r{ir.x0 + cx * cw + gap, ir.y0 + cy * ch + gap, ir.x0 + (cx + 1) * cw - gap, ir.y0 + (cy + 1) * ch - gap};
        detail::fill_rect(img, r, ident.color);
    }
    return img;
}

inline Image translate_replicate(const Image& src, int dx, int dy) {
    if (dx == 0 && dy == 0) return src;
    Image out(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        const int sy = std::clamp(y - dy, 0, src.height - 1);
        for (int x = 0; x < src.width; ++x) {
            const int sx = std::clamp(x - dx, 0, src.width - 1);
            for (int c = 0; c < Image::channels; ++c) out.at(y, x, c) = src.at(sy, sx, c);
        }
    }
    return out;
}

/// Images are ordered model-major, then identity, then instance. Every image
/// draws from its own RNG stream so the result does not depend on threading.
inline Dataset generate_synthetic(const SynthConfig& cfg, unsigned threads = 1) {
    cfg.validate();
    const auto models = synth_model_cues(cfg);
    const auto idents = synth_identity_cues(cfg);
    const int per_id = cfg.images_per_identity;
    const std::size_t total = idents.size() * static_cast<std::size_t>(per_id);

    std::vector<Image> clean(idents.size());
    parallel_for(idents.size(), threads, [&](std::size_t s) {
        clean[s] = render_vehicle(cfg, models[s / static_cast<std::size_t>(cfg.identities_per_model)], idents[s]);
    });

    Dataset ds;
    ds.images.resize(total);
    parallel_for(total, threads, [&](std::size_t i) {
        const std::size_t s = i / static_cast<std::size_t>(per_id);
        Rng rng(derive_seed(cfg.rng_seed, 0x494d47ULL, i));
        const int span = 2 * cfg.jitter_px + 1;
        const int dx = static_cast<int>(rand_below(rng, static_cast<std::uint64_t>(span))) - cfg.jitter_px;
        const int dy = static_cast<int>(rand_below(rng, static_cast<std::uint64_t>(span))) - cfg.jitter_px;
        Image img = translate_replicate(clean[s], dx, dy);
        const double gain = 1.0 + cfg.illumination * (2.0 * rand_unit(rng) - 1.0);
        for (float& v : img.pixels) {
            double x = gain * v;
            if (cfg.noise_sigma > 0) x += cfg.noise_sigma * rand_normal(rng);
            v = std::clamp(static_cast<float>(x), 0.0f, 1.0f);
        }
        auto& out = ds.images[i];
        out.pixels = std::move(img);
        out.model_id = static_cast<int>(s) / cfg.identities_per_model;
        out.identity_id = static_cast<int>(s);
        out.source_id = static_cast<int>(i);
    });
    return ds;
}

inline nlohmann::json to_json(const NormRect& r) { return nlohmann::json::array({r.x0, r.y0, r.x1, r.y1}); }

inline NormRect rect_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 4) throw ConfigError("rectangle must be a 4-element array");
    NormRect r{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
    if (!r.valid()) throw ConfigError("rectangle outside [0,1]^2 or empty: " + to_string(r));
    return r;
}

inline nlohmann::json synth_ground_truth(const SynthConfig& cfg) {
    using nlohmann::json;
    json models = json::array(), idents = json::array();
    const auto mc = synth_model_cues(cfg);
    const auto ic = synth_identity_cues(cfg);
    auto color = [](const Rgb& c) { return json::array({c.r, c.g, c.b}); };
    for (std::size_t m = 0; m < mc.size(); ++m)
        models.push_back({{"model_id", m},
                          {"cue_region", to_json(cfg.model_cue_region)},
                          {"stripe_angle_deg", mc[m].angle_deg},
                          {"stripe_period_px", mc[m].period_px},
                          {"base_color", color(mc[m].base)},
                          {"stripe_color", color(mc[m].stripe)}});
    for (std::size_t s = 0; s < ic.size(); ++s)
        idents.push_back({{"identity_id", s},
                          {"model_id", s / static_cast<std::size_t>(cfg.identities_per_model)},
                          {"cue_region", to_json(cfg.identity_cue_region)},
                          {"pattern_bits", ic[s].pattern},
                          {"color", color(ic[s].color)}});
    return json{{"image_size", cfg.image_size},
                {"model_cue_region", to_json(cfg.model_cue_region)},
                {"identity_cue_region", to_json(cfg.identity_cue_region)},
                {"rng_seed", cfg.rng_seed},
                {"models", models},
                {"identities", idents}};
}

// ---------------------------------------------------------------------------
// Manifest ingestion

struct ManifestRow {
    std::string path;  // as written in the manifest
    int model_id = 0;
    int identity_id = 0;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
        } else if (c == ',' && !quoted) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

inline int parse_int(const std::string& s, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error("manifest line " + std::to_string(line_no) + ": not an integer: '" + s + "'");
    }
}

}  // namespace detail

/// Parses `path,model_id,identity_id` rows (header required) and checks the
/// identity -> model hierarchy. No images are decoded.
inline std::vector<ManifestRow> read_manifest_rows(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest " + path.string());
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    std::vector<ManifestRow> rows;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
        if (detail::trim(line).empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (!header_seen) {
            if (fields.size() != 3 || fields[0] != "path" || fields[1] != "model_id" || fields[2] != "identity_id")
                throw Error("manifest header must be 'path,model_id,identity_id'");
            header_seen = true;
            continue;
        }
        if (fields.size() != 3)
            throw Error("manifest line " + std::to_string(line_no) + ": expected 3 fields");
        rows.push_back({fields[0], detail::parse_int(fields[1], line_no), detail::parse_int(fields[2], line_no)});
    }
    if (rows.empty()) throw Error("empty manifest " + path.string());
    std::vector<std::pair<int, int>> pairs;
    for (const auto& r : rows) pairs.emplace_back(r.identity_id, r.model_id);
    identity_to_model(pairs);
    return rows;
}

/// Decodes the images of a manifest and resizes them to canonical_px square.
/// Unreadable rows are skipped and reported through `warnings`.
inline Dataset load_manifest(const std::filesystem::path& path, int canonical_px = 128,
                             std::vector<std::string>* warnings = nullptr, unsigned threads = 1) {
    const auto rows = read_manifest_rows(path);
    const auto base = path.parent_path();
    std::vector<std::optional<Image>> decoded(rows.size());
    parallel_for(rows.size(), threads, [&](std::size_t i) {
        std::filesystem::path p(rows[i].path);
        if (p.is_relative()) p = base / p;
        if (auto img = io::read_image(p.string())) decoded[i] = resize(*img, canonical_px, canonical_px);
    });
    Dataset ds;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!decoded[i]) {
            if (warnings) warnings->push_back("skipping unreadable image '" + rows[i].path + "'");
            continue;
        }
        ds.images.push_back({std::move(*decoded[i]), rows[i].model_id, rows[i].identity_id, static_cast<int>(i)});
    }
    if (ds.images.empty()) throw Error("no readable images in manifest " + path.string());
    return ds;
}

/// Writes images/<source_id>.png, manifest.csv and (when cfg is given)
/// ground_truth.json under dir.
inline void export_dataset(const Dataset& ds, const std::filesystem::path& dir,
                           const SynthConfig* cfg = nullptr, unsigned threads = 1) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    std::vector<std::string> names(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "img_%06d.png", ds[i].source_id);
        names[i] = std::string("images/") + buf;
    }
    parallel_for(ds.size(), threads, [&](std::size_t i) { io::write_png((dir / names[i]).string(), ds[i].pixels); });
    std::ofstream man(dir / "manifest.csv");
    man << "path,model_id,identity_id\n";
    for (std::size_t i = 0; i < ds.size(); ++i)
        man << names[i] << ',' << ds[i].model_id << ',' << ds[i].identity_id << '\n';
    if (!man) throw Error("cannot write manifest in " + dir.string());
    if (cfg) {
        std::ofstream gt(dir / "ground_truth.json");
        gt << synth_ground_truth(*cfg).dump(2) << '\n';
        if (!gt) throw Error("cannot write ground truth in " + dir.string());
    }
}

// ---------------------------------------------------------------------------
// Evaluation splits

enum class SplitMode { retrieval, reid };

struct EvalSplit {
    std::string name;
    SplitMode mode = SplitMode::retrieval;
    std::vector<std::size_t> probe;    // image ids (dataset positions)
    std::vector<std::size_t> gallery;
    std::vector<int> identities;       // ascending

    bool operator==(const EvalSplit&) const = default;
};

/// Swaps probe and gallery, turning a retrieval split into the matching
/// re-identification split and back.
inline EvalSplit exchange(EvalSplit s) {
    std::swap(s.probe, s.gallery);
    s.mode = s.mode == SplitMode::retrieval ? SplitMode::reid : SplitMode::retrieval;
    return s;
}

/// One randomly chosen probe image per selected identity; every other image
/// of those identities goes to the gallery. Identities with fewer than two
/// images are excluded up front.
inline EvalSplit build_retrieval_split(const Dataset& ds, std::size_t num_identities, std::uint64_t seed,
                                       std::vector<std::string>* warnings = nullptr) {
    const auto groups = ds.images_by_identity();
    std::vector<int> eligible;
    std::size_t excluded = 0;
    for (const auto& [id, imgs] : groups) {
        if (imgs.size() >= 2)
            eligible.push_back(id);
        else
            ++excluded;
    }
    if (excluded && warnings)
        warnings->push_back("excluded " + std::to_string(excluded) + " identities with fewer than 2 images");
    if (num_identities == 0) throw Error("split needs at least one identity");
    if (eligible.size() < num_identities)
        throw Error("split needs " + std::to_string(num_identities) + " identities with >= 2 images, dataset has " +
                    std::to_string(eligible.size()));

    Rng rng(derive_seed(seed, 0x53504c4954ULL));
    shuffle_in_place(eligible, rng);
    eligible.resize(num_identities);
    std::sort(eligible.begin(), eligible.end());

    EvalSplit split;
    split.mode = SplitMode::retrieval;
    split.identities = eligible;
    for (int id : eligible) {
        const auto& imgs = groups.at(id);
        const std::size_t pick = rand_below(rng, imgs.size());
        for (std::size_t k = 0; k < imgs.size(); ++k) (k == pick ? split.probe : split.gallery).push_back(imgs[k]);
    }
    return split;
}

/// One gallery image per identity, the rest as probes: the exact exchange of
/// the retrieval split drawn with the same seed.
inline EvalSplit build_reid_split(const Dataset& ds, std::size_t num_identities, std::uint64_t seed,
                                  std::vector<std::string>* warnings = nullptr) {
    return exchange(build_retrieval_split(ds, num_identities, seed, warnings));
}

}  // namespace pmsm
