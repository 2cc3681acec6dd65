#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmsm/common.hpp"
#include "pmsm/dataset.hpp"
#include "pmsm/embedding.hpp"

namespace pmsm {

struct Ranking {
    std::size_t probe = 0;
    std::vector<std::size_t> gallery;  // gallery ids, nearest first
    std::vector<double> distances;     // non-decreasing
};

/// Orders the gallery by Euclidean distance to `probe`; equal distances are
/// ordered by gallery id. `gallery` holds one embedding per column.
template <typename Derived, typename GDerived>
Ranking rank(const Eigen::MatrixBase<Derived>& probe, const Eigen::MatrixBase<GDerived>& gallery,
             std::span<const std::size_t> gallery_ids, std::size_t probe_id = 0) {
    if (probe.rows() != gallery.rows()) throw Error("rank: probe and gallery embedding dims differ");
    if (static_cast<std::size_t>(gallery.cols()) != gallery_ids.size())
        throw Error("rank: gallery id count differs from embedding count");
    const std::size_t n = gallery_ids.size();
    std::vector<double> d(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (Eigen::Index r = 0; r < probe.rows(); ++r) {
            const double diff = static_cast<double>(probe(r, 0)) - static_cast<double>(gallery(r, static_cast<Eigen::Index>(j)));
            s += diff * diff;
        }
        d[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (d[a] != d[b]) return d[a] < d[b];
        return gallery_ids[a] < gallery_ids[b];
    });
    Ranking r;
    r.probe = probe_id;
    for (std::size_t j : order) {
        r.gallery.push_back(gallery_ids[j]);
        r.distances.push_back(d[j]);
    }
    return r;
}

/// Mean of precision@k over the ranks k holding a relevant item.
inline double average_precision(const std::vector<bool>& relevant_in_rank_order) {
    std::size_t hits = 0;
    double sum = 0;
    for (std::size_t k = 0; k < relevant_in_rank_order.size(); ++k)
        if (relevant_in_rank_order[k]) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
    if (hits == 0) throw Error("average_precision: no relevant items in the gallery");
    return sum / static_cast<double>(hits);
}

inline double average_precision(const Ranking& r, std::span<const std::size_t> relevant) {
    std::vector<bool> flags(r.gallery.size());
    for (std::size_t k = 0; k < r.gallery.size(); ++k)
        flags[k] = std::find(relevant.begin(), relevant.end(), r.gallery[k]) != relevant.end();
    return average_precision(flags);
}

/// 1-based rank of the first relevant item, or 0 if there is none.
inline std::size_t first_match_rank(const std::vector<bool>& relevant_in_rank_order) {
    for (std::size_t k = 0; k < relevant_in_rank_order.size(); ++k)
        if (relevant_in_rank_order[k]) return k + 1;
    return 0;
}

struct EvalReport {
    std::string split;
    std::string task;  // "retrieval" or "reid"
    double map = 0;
    std::map<int, double> cmc;  // rank -> match rate
    std::vector<double> per_probe_ap;
    std::vector<std::size_t> first_match;  // per probe, 1-based
    std::size_t num_probe = 0;
    std::size_t num_gallery = 0;
    std::uint64_t seed = 0;
    std::size_t repeat = 0;
    std::string config_hash;
};

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json cmc = nlohmann::json::object();
    for (const auto& [k, v] : r.cmc) cmc[std::to_string(k)] = v;
    return {{"split", r.split},           {"task", r.task},
            {"mAP", r.map},               {"cmc", cmc},
            {"per_probe_ap", r.per_probe_ap},
            {"first_match_rank", r.first_match},
            {"num_probe", r.num_probe},   {"num_gallery", r.num_gallery},
            {"seed", r.seed},             {"repeat", r.repeat},
            {"config_hash", r.config_hash}};
}

inline std::string csv_header() { return "split,task,repeat,mAP,cmc@1,cmc@5,seed,config_hash"; }

inline std::string csv_row(const EvalReport& r) {
    auto at = [&](int k) {
        auto it = r.cmc.find(k);
        return it == r.cmc.end() ? std::string() : fmt_double(it->second);
    };
    return r.split + "," + r.task + "," + std::to_string(r.repeat) + "," + fmt_double(r.map) + "," + at(1) + "," +
           at(5) + "," + std::to_string(r.seed) + "," + r.config_hash;
}

/// Scores probe embeddings against gallery embeddings (one per column);
/// relevance is identity equality. Every probe needs at least one gallery
/// match. CMC entries for k larger than the gallery are computed as-is.
template <typename T>
EvalReport evaluate_embeddings(const Mat<T>& probe, std::span<const int> probe_ids, const Mat<T>& gallery,
                               std::span<const int> gallery_ids, std::span<const int> ks, unsigned threads = 1) {
    if (static_cast<std::size_t>(probe.cols()) != probe_ids.size() ||
        static_cast<std::size_t>(gallery.cols()) != gallery_ids.size())
        throw Error("evaluate: label count differs from embedding count");
    if (probe_ids.empty()) throw Error("evaluate: empty probe set");
    if (gallery_ids.empty()) throw Error("evaluate: empty gallery");
    for (int k : ks)
        if (k < 1) throw ConfigError("cmc ranks must be >= 1");
    std::vector<std::size_t> gpos(gallery_ids.size());
    std::iota(gpos.begin(), gpos.end(), std::size_t{0});

    EvalReport rep;
    rep.num_probe = probe_ids.size();
    rep.num_gallery = gallery_ids.size();
    rep.per_probe_ap.assign(probe_ids.size(), 0);
    rep.first_match.assign(probe_ids.size(), 0);
    parallel_for(probe_ids.size(), threads, [&](std::size_t i) {
        const auto r = rank(probe.col(static_cast<Eigen::Index>(i)), gallery, gpos, i);
        std::vector<bool> rel(r.gallery.size());
        for (std::size_t k = 0; k < r.gallery.size(); ++k) rel[k] = gallery_ids[r.gallery[k]] == probe_ids[i];
        if (std::find(rel.begin(), rel.end(), true) == rel.end())
            throw Error("probe identity " + std::to_string(probe_ids[i]) + " has no match in the gallery");
        rep.per_probe_ap[i] = average_precision(rel);
        rep.first_match[i] = first_match_rank(rel);
    });
    rep.map = std::accumulate(rep.per_probe_ap.begin(), rep.per_probe_ap.end(), 0.0) /
              static_cast<double>(rep.per_probe_ap.size());
    for (int k : ks) {
        std::size_t hits = 0;
        for (std::size_t f : rep.first_match) hits += f <= static_cast<std::size_t>(k) ? 1 : 0;
        rep.cmc[k] = static_cast<double>(hits) / static_cast<double>(rep.first_match.size());
    }
    return rep;
}

/// Embeds the images of `ids` (dataset positions) with canonical part crops.
template <typename T>
Mat<T> embed_subset(const PmsmParams<T>& params, const Dataset& ds, std::span<const std::size_t> ids,
                    const PartsFile& parts, unsigned threads = 1) {
    std::vector<const Image*> images;
    images.reserve(ids.size());
    for (std::size_t i : ids) images.push_back(&ds[i].pixels);
    return embed_images<T>(params, images, parts, threads);
}

inline const std::vector<int> kDefaultCmcRanks{1, 5};

/// Retrieval protocol: one probe per identity, the rest in the gallery.
template <typename T>
EvalReport evaluate_retrieval(const PmsmParams<T>& params, const Dataset& ds, const EvalSplit& split,
                              const PartsFile& parts, std::span<const int> ks = kDefaultCmcRanks,
                              unsigned threads = 1) {
    if (split.mode != SplitMode::retrieval) throw Error("evaluate_retrieval needs a retrieval-mode split");
    std::vector<int> pid, gid;
    for (std::size_t i : split.probe) pid.push_back(ds[i].identity_id);
    for (std::size_t i : split.gallery) gid.push_back(ds[i].identity_id);
    auto rep = evaluate_embeddings<T>(embed_subset(params, ds, split.probe, parts, threads), pid,
                                      embed_subset(params, ds, split.gallery, parts, threads), gid, ks, threads);
    rep.split = split.name;
    rep.task = "retrieval";
    return rep;
}

/// Re-identification protocol: the exchanged split, one gallery image per
/// identity; CMC@k is the fraction of probes matched within the top k.
template <typename T>
EvalReport evaluate_reid(const PmsmParams<T>& params, const Dataset& ds, const EvalSplit& split,
                         const PartsFile& parts, std::span<const int> ks = kDefaultCmcRanks, unsigned threads = 1) {
    if (split.mode != SplitMode::reid) throw Error("evaluate_reid needs a re-identification split");
    std::vector<int> pid, gid;
    for (std::size_t i : split.probe) pid.push_back(ds[i].identity_id);
    for (std::size_t i : split.gallery) gid.push_back(ds[i].identity_id);
    auto rep = evaluate_embeddings<T>(embed_subset(params, ds, split.probe, parts, threads), pid,
                                      embed_subset(params, ds, split.gallery, parts, threads), gid, ks, threads);
    rep.split = split.name;
    rep.task = "reid";
    return rep;
}

struct MeanStd {
    double mean = 0;
    double std = 0;  // population standard deviation
};

inline MeanStd mean_std(std::span<const double> xs) {
    if (xs.empty()) return {};
    const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double v = 0;
    for (double x : xs) v += (x - m) * (x - m);
    return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

/// Mean and std of mAP and each CMC rank over the repeats of one
/// (split, task) pair.
inline nlohmann::json summarize_repeats(std::span<const EvalReport> reports) {
    std::map<std::pair<std::string, std::string>, std::vector<const EvalReport*>> groups;
    for (const auto& r : reports) groups[{r.split, r.task}].push_back(&r);
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [key, rs] : groups) {
        std::vector<double> maps;
        std::map<int, std::vector<double>> cmcs;
        for (const auto* r : rs) {
            maps.push_back(r->map);
            for (const auto& [k, v] : r->cmc) cmcs[k].push_back(v);
        }
        const auto m = mean_std(maps);
        nlohmann::json j{{"split", key.first}, {"task", key.second}, {"repeats", rs.size()},
                         {"mAP_mean", m.mean}, {"mAP_std", m.std}};
        for (const auto& [k, v] : cmcs) {
            const auto s = mean_std(v);
            j["cmc@" + std::to_string(k) + "_mean"] = s.mean;
            j["cmc@" + std::to_string(k) + "_std"] = s.std;
        }
        out.push_back(j);
    }
    return out;
}

}  // namespace pmsm
