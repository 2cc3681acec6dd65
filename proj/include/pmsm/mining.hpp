#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmsm/common.hpp"
#include "pmsm/dataset.hpp"
#include "pmsm/features.hpp"
#include "pmsm/image.hpp"
#include "pmsm/random.hpp"

namespace pmsm {

enum class ScoreVariant { eq1, eq2, eq3 };

inline const char* to_string(ScoreVariant v) {
    switch (v) {
        case ScoreVariant::eq1: return "eq1";
        case ScoreVariant::eq2: return "eq2";
        case ScoreVariant::eq3: return "eq3";
    }
    return "?";
}

/// Discriminative score d(x, y) at one position. A denominator below epsilon
/// is replaced by epsilon and the result flagged as saturated.
struct Score {
    double value = 0;
    double numerator = 0;
    double denominator = 0;  // before flooring
    bool saturated = false;
};

using FeatureRef = std::span<const double>;

namespace detail {

inline Score make_score(double num, double den, double eps) {
    Score s;
    s.numerator = num;
    s.denominator = den;
    s.saturated = den < eps;
    s.value = num / std::max(den, eps);
    return s;
}

/// Index permutation sorting samples by (label, feature lexicographic). Scores
/// computed in this order are exactly invariant to the caller's ordering.
inline std::vector<std::size_t> canonical_order(std::span<const FeatureRef> features, std::span<const int> labels) {
    std::vector<std::size_t> idx(features.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (labels[a] != labels[b]) return labels[a] < labels[b];
        return std::lexicographical_compare(features[a].begin(), features[a].end(), features[b].begin(),
                                            features[b].end());
    });
    return idx;
}

/// label -> mean feature over the samples carrying that label.
inline std::map<int, std::vector<double>> class_means(std::span<const FeatureRef> features, std::span<const int> labels,
                                                      std::span<const std::size_t> order) {
    std::map<int, std::vector<double>> sums;
    std::map<int, std::size_t> counts;
    for (std::size_t i : order) {
        auto& s = sums[labels[i]];
        if (s.empty()) s.assign(features[i].size(), 0.0);
        for (std::size_t d = 0; d < s.size(); ++d) s[d] += features[i][d];
        ++counts[labels[i]];
    }
    for (auto& [label, s] : sums)
        for (double& v : s) v /= static_cast<double>(counts[label]);
    return sums;
}

inline void check_dims(std::span<const FeatureRef> features) {
    for (const auto& f : features)
        if (f.size() != features.front().size()) throw Error("patch features of unequal length");
}

}  // namespace detail

/// Ratio of summed class-mean deviations from the global mean to summed
/// within-class deviations, over all labelled samples (seed included).
inline Score score_eq1(std::span<const FeatureRef> features, std::span<const int> labels, double eps = 1e-6) {
    if (features.size() != labels.size()) throw Error("score_eq1: features/labels size mismatch");
    if (features.empty()) throw Error("score_eq1: empty sample set");
    detail::check_dims(features);
    const auto order = detail::canonical_order(features, labels);
    const auto means = detail::class_means(features, labels, order);
    if (means.size() < 2) throw Error("no inter-class contrast");

    std::vector<double> global(features.front().size(), 0.0);
    for (std::size_t i : order)
        for (std::size_t d = 0; d < global.size(); ++d) global[d] += features[i][d];
    for (double& v : global) v /= static_cast<double>(features.size());

    double num = 0;
    for (const auto& [label, mean] : means) num += euclidean(mean, global);
    double den = 0;
    for (std::size_t i : order) den += euclidean(features[i], means.at(labels[i]));
    return detail::make_score(num, den, eps);
}

/// Distance from the seed's class mean to the nearest other class mean, over
/// the largest distance from the seed to a same-class neighbour. The seed
/// counts towards its own class mean.
inline Score score_eq2(FeatureRef seed, int seed_label, std::span<const FeatureRef> neighbors,
                       std::span<const int> neighbor_labels, double eps = 1e-6) {
    if (neighbors.size() != neighbor_labels.size()) throw Error("score_eq2: features/labels size mismatch");
    std::vector<FeatureRef> all{seed};
    std::vector<int> labels{seed_label};
    all.insert(all.end(), neighbors.begin(), neighbors.end());
    labels.insert(labels.end(), neighbor_labels.begin(), neighbor_labels.end());
    detail::check_dims(all);

    bool other = false, same = false;
    for (int l : neighbor_labels) (l == seed_label ? same : other) = true;
    if (!other) throw Error("no inter-class contrast");
    if (!same) throw Error("insufficient intra-class samples");

    const auto order = detail::canonical_order(all, labels);
    const auto means = detail::class_means(all, labels, order);
    const auto& own = means.at(seed_label);
    double num = std::numeric_limits<double>::infinity();
    for (const auto& [label, mean] : means)
        if (label != seed_label) num = std::min(num, euclidean(mean, own));
    double den = 0;
    for (std::size_t i : order)
        if (i != 0 && labels[i] == seed_label) den = std::max(den, euclidean(all[i], seed));
    return detail::make_score(num, den, eps);
}

/// score_eq2 with identities in place of models. Every neighbour must share
/// the seed's model.
inline Score score_eq3(FeatureRef seed, int seed_identity, int seed_model, std::span<const FeatureRef> neighbors,
                       std::span<const int> neighbor_identities, std::span<const int> neighbor_models,
                       double eps = 1e-6) {
    if (neighbor_models.size() != neighbors.size()) throw Error("score_eq3: features/labels size mismatch");
    for (int m : neighbor_models)
        if (m != seed_model) throw Error("score_eq3: neighbour outside the seed's model class");
    std::map<int, bool> ids;
    for (int s : neighbor_identities) ids[s] = true;
    ids[seed_identity] = true;
    if (ids.size() < 2) throw Error("no inter-identity contrast");
    if (std::find(neighbor_identities.begin(), neighbor_identities.end(), seed_identity) == neighbor_identities.end())
        throw Error("insufficient intra-identity samples");
    return score_eq2(seed, seed_identity, neighbors, neighbor_identities, eps);
}

// ---------------------------------------------------------------------------

enum class PartRole { part_m, part_i };

inline const char* to_string(PartRole r) { return r == PartRole::part_m ? "part_m" : "part_i"; }

struct PartRegion {
    NormRect rect;
    PartRole role = PartRole::part_m;
    std::vector<int> provenance;  // source ids of contributing seeds
};

struct MiningConfig {
    std::size_t neighbors_m = 50;
    std::size_t top_n = 6;
    double epsilon = 1e-6;
    std::size_t seeds_per_class = 16;
    std::uint64_t rng_seed = 7;

    void validate() const {
        if (top_n < 1) throw ConfigError("top_n must be >= 1");
        if (!(epsilon > 0)) throw ConfigError("mining epsilon must be > 0");
        if (neighbors_m < 1) throw ConfigError("neighbors_m must be >= 1");
        if (seeds_per_class < 1) throw ConfigError("seeds_per_class must be >= 1");
    }
};

struct ScoreMap {
    ScoreVariant variant = ScoreVariant::eq2;
    int positions_x = 0;
    int positions_y = 0;
    std::vector<double> scores;     // (y, x)
    std::vector<char> saturated;    // (y, x)
    std::size_t seed = 0;
    std::vector<std::size_t> neighbors;

    double at(GridPos p) const { return scores[static_cast<std::size_t>(p.y) * positions_x + p.x]; }
};

/// The top_n positions ordered by (score desc, y asc, x asc).
inline std::vector<GridPos> top_positions(const ScoreMap& map, std::size_t top_n) {
    std::vector<GridPos> all;
    for (int y = 0; y < map.positions_y; ++y)
        for (int x = 0; x < map.positions_x; ++x) all.push_back({x, y});
    const std::size_t n = std::min(top_n, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                      [&](GridPos a, GridPos b) {
                          if (map.at(a) != map.at(b)) return map.at(a) > map.at(b);
                          if (a.y != b.y) return a.y < b.y;
                          return a.x < b.x;
                      });
    all.resize(n);
    return all;
}

/// Minimum bounding rectangle of the patches at `positions`, normalised by
/// the image size.
inline NormRect bounding_rect(std::span<const GridPos> positions, const PatchGridConfig& grid, int image_px) {
    if (positions.empty()) throw Error("bounding_rect of no patches");
    int x0 = std::numeric_limits<int>::max(), y0 = x0, x1 = std::numeric_limits<int>::min(), y1 = x1;
    for (const auto& p : positions) {
        x0 = std::min(x0, p.x * grid.stride_px);
        y0 = std::min(y0, p.y * grid.stride_px);
        x1 = std::max(x1, p.x * grid.stride_px + grid.patch_px);
        y1 = std::max(y1, p.y * grid.stride_px + grid.patch_px);
    }
    const double s = image_px;
    return NormRect{x0 / s, y0 / s, x1 / s, y1 / s};
}

struct MinedPart {
    PartRegion region;
    ScoreMap map;
    std::vector<GridPos> top;
};

/// Dataset plus the HOG and patch-grid machinery needed to evaluate the
/// discriminative scores of any seed.
class MiningContext {
public:
    MiningContext(const Dataset& ds, HogConfig hog_cfg = {}, PatchGridConfig grid = {}, unsigned threads = 1)
        : ds_(ds), hog_cfg_(hog_cfg), grid_(grid), index_(ds, hog_cfg, threads) {
        if (ds.size() == 0) throw Error("mining needs a non-empty dataset");
        image_px_ = ds[0].pixels.width;
        for (const auto& im : ds.images)
            if (im.pixels.width != image_px_ || im.pixels.height != image_px_)
                throw Error("mining needs square images of one canonical size");
        grid_.validate(image_px_, hog_cfg_);
        identity_to_model(ds_);
    }

    const Dataset& dataset() const { return ds_; }
    const HogIndex& index() const { return index_; }
    const HogConfig& hog_config() const { return hog_cfg_; }
    const PatchGridConfig& grid() const { return grid_; }
    int image_px() const { return image_px_; }

    FeatureGrid grid_of(std::size_t image) const { return feature_grid(index_.field(image), hog_cfg_, grid_); }

    std::vector<double> patch(std::size_t image, GridPos pos) const {
        return patch_feature(index_.field(image), hog_cfg_, grid_, pos);
    }

    /// d(x, y) for one seed, neighbour set and position.
    Score score(ScoreVariant variant, std::size_t seed, std::span<const std::size_t> neighbors, GridPos pos,
                double eps = 1e-6) const {
        std::vector<std::vector<double>> feats;
        feats.push_back(patch(seed, pos));
        for (std::size_t n : neighbors) feats.push_back(patch(n, pos));
        std::vector<FeatureRef> refs(feats.begin(), feats.end());
        return score_refs(variant, seed, neighbors, refs, eps);
    }

    ScoreMap score_map(ScoreVariant variant, std::size_t seed, std::span<const std::size_t> neighbors,
                       double eps = 1e-6) const {
        std::vector<FeatureGrid> grids;
        grids.reserve(neighbors.size() + 1);
        grids.push_back(grid_of(seed));
        for (std::size_t n : neighbors) grids.push_back(grid_of(n));
        ScoreMap map;
        map.variant = variant;
        map.positions_x = grids[0].positions_x;
        map.positions_y = grids[0].positions_y;
        map.seed = seed;
        map.neighbors.assign(neighbors.begin(), neighbors.end());
        std::vector<FeatureRef> refs(grids.size());
        for (int y = 0; y < map.positions_y; ++y)
            for (int x = 0; x < map.positions_x; ++x) {
                for (std::size_t i = 0; i < grids.size(); ++i) refs[i] = grids[i].at({x, y});
                const Score s = score_refs(variant, seed, neighbors, refs, eps);
                map.scores.push_back(s.value);
                map.saturated.push_back(s.saturated ? 1 : 0);
            }
        return map;
    }

    /// KNN neighbour set of the seed used by each variant: the whole dataset
    /// for eq1/eq2, the seed's own model class for eq3. k is capped at the
    /// candidate count.
    std::vector<std::size_t> neighbors_for(ScoreVariant variant, std::size_t seed, std::size_t m) const {
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < ds_.size(); ++i)
            if (variant != ScoreVariant::eq3 || ds_[i].model_id == ds_[seed].model_id) candidates.push_back(i);
        const std::size_t k = std::min(m, candidates.size() - 1);
        std::vector<std::size_t> out;
        for (const auto& n : index_.knn_within(seed, candidates, k)) out.push_back(n.index);
        return out;
    }

private:
    Score score_refs(ScoreVariant variant, std::size_t seed, std::span<const std::size_t> neighbors,
                     std::span<const FeatureRef> refs, double eps) const {
        const auto nrefs = refs.subspan(1);
        switch (variant) {
            case ScoreVariant::eq1: {
                std::vector<int> labels{ds_[seed].model_id};
                for (std::size_t n : neighbors) labels.push_back(ds_[n].model_id);
                return score_eq1(refs, labels, eps);
            }
            case ScoreVariant::eq2: {
                std::vector<int> labels;
                for (std::size_t n : neighbors) labels.push_back(ds_[n].model_id);
                return score_eq2(refs[0], ds_[seed].model_id, nrefs, labels, eps);
            }
            case ScoreVariant::eq3: {
                std::vector<int> ids, models;
                for (std::size_t n : neighbors) {
                    ids.push_back(ds_[n].identity_id);
                    models.push_back(ds_[n].model_id);
                }
                return score_eq3(refs[0], ds_[seed].identity_id, ds_[seed].model_id, nrefs, ids, models, eps);
            }
        }
        throw Error("unknown score variant");
    }

    const Dataset& ds_;
    HogConfig hog_cfg_;
    PatchGridConfig grid_;
    HogIndex index_;
    int image_px_ = 0;
};

/// Scores the full patch grid for `seed`, keeps the top_n patches and returns
/// their minimum bounding rectangle. eq2 yields Part_M, eq3 Part_I.
inline MinedPart mine_part(const MiningContext& ctx, std::size_t seed, const MiningConfig& cfg, ScoreVariant variant) {
    cfg.validate();
    if (variant == ScoreVariant::eq1) throw Error("mine_part takes eq2 (part_m) or eq3 (part_i)");
    MinedPart out;
    const auto neighbors = ctx.neighbors_for(variant, seed, cfg.neighbors_m);
    out.map = ctx.score_map(variant, seed, neighbors, cfg.epsilon);
    out.top = top_positions(out.map, cfg.top_n);
    out.region.rect = bounding_rect(out.top, ctx.grid(), ctx.image_px());
    out.region.role = variant == ScoreVariant::eq2 ? PartRole::part_m : PartRole::part_i;
    out.region.provenance = {ctx.dataset()[seed].source_id};
    return out;
}

/// Coordinate-wise median; even counts average the two middle values.
inline NormRect median_rect(std::span<const NormRect> rects) {
    if (rects.empty()) throw Error("median of no rectangles");
    auto med = [&](auto get) {
        std::vector<double> v;
        for (const auto& r : rects) v.push_back(get(r));
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    return NormRect{med([](const NormRect& r) { return r.x0; }), med([](const NormRect& r) { return r.y0; }),
                    med([](const NormRect& r) { return r.x1; }), med([](const NormRect& r) { return r.y1; })};
}

struct CanonicalParts {
    PartRegion part_m;
    PartRegion part_i;
    std::vector<MinedPart> mined_m;  // per successful seed
    std::vector<MinedPart> mined_i;
    std::vector<std::string> failures;
};

/// Samples seeds_per_class seed images, mines both parts for each and takes
/// the coordinate-wise median rectangle. Seeds whose neighbourhood violates a
/// variant's preconditions are skipped; if every seed fails for a variant the
/// last failure is rethrown.
inline CanonicalParts canonical_parts(const MiningContext& ctx, const MiningConfig& cfg) {
    cfg.validate();
    const auto& ds = ctx.dataset();
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.rng_seed, 0x4d494e45ULL));
    shuffle_in_place(order, rng);
    order.resize(std::min(cfg.seeds_per_class, order.size()));
    std::sort(order.begin(), order.end());

    CanonicalParts out;
    auto run = [&](ScoreVariant variant, std::vector<MinedPart>& mined, PartRegion& part) {
        std::string last;
        for (std::size_t seed : order) {
            try {
                mined.push_back(mine_part(ctx, seed, cfg, variant));
            } catch (const Error& e) {
                last = e.what();
                out.failures.push_back(std::string(to_string(variant)) + " seed " +
                                       std::to_string(ds[seed].source_id) + ": " + last);
            }
        }
        if (mined.empty())
            throw Error(std::string(variant == ScoreVariant::eq2 ? "part_m: " : "part_i: ") + last);
        std::vector<NormRect> rects;
        for (const auto& m : mined) {
            rects.push_back(m.region.rect);
            part.provenance.push_back(m.region.provenance.front());
        }
        part.rect = median_rect(rects);
        part.role = variant == ScoreVariant::eq2 ? PartRole::part_m : PartRole::part_i;
    };
    run(ScoreVariant::eq2, out.mined_m, out.part_m);
    run(ScoreVariant::eq3, out.mined_i, out.part_i);
    return out;
}

inline Image crop_part(const Image& image, const PartRegion& region, int out_px) {
    return crop_resize(image, region.rect, out_px, out_px);
}

// ---------------------------------------------------------------------------
// Parts file: {"part_m": [x0,y0,x1,y1], "part_i": [...], "provenance": {...}}

struct PartsFile {
    PartRegion part_m;
    PartRegion part_i;
    nlohmann::json provenance = nlohmann::json::object();
};

inline nlohmann::json to_json(const PartsFile& p) {
    nlohmann::json prov = p.provenance;
    prov["part_m_seeds"] = p.part_m.provenance;
    prov["part_i_seeds"] = p.part_i.provenance;
    return {{"part_m", to_json(p.part_m.rect)}, {"part_i", to_json(p.part_i.rect)}, {"provenance", prov}};
}

inline PartsFile parts_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("part_m") || !j.contains("part_i"))
        throw ConfigError("parts file must contain part_m and part_i");
    PartsFile p;
    p.part_m.rect = rect_from_json(j.at("part_m"));
    p.part_m.role = PartRole::part_m;
    p.part_i.rect = rect_from_json(j.at("part_i"));
    p.part_i.role = PartRole::part_i;
    if (j.contains("provenance")) {
        p.provenance = j.at("provenance");
        if (p.provenance.contains("part_m_seeds")) p.part_m.provenance = p.provenance["part_m_seeds"].get<std::vector<int>>();
        if (p.provenance.contains("part_i_seeds")) p.part_i.provenance = p.provenance["part_i_seeds"].get<std::vector<int>>();
    }
    return p;
}

inline void write_parts_file(const std::filesystem::path& path, const PartsFile& p) {
    std::ofstream os(path);
    os << to_json(p).dump(2) << '\n';
    if (!os) throw Error("cannot write parts file " + path.string());
}

inline PartsFile read_parts_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open parts file " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("parts file " + path.string() + " is not valid JSON: " + e.what());
    }
    return parts_from_json(j);
}

}  // namespace pmsm
