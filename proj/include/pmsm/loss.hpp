#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pmsm/common.hpp"
#include "pmsm/random.hpp"

namespace pmsm {

/// Indices of anchor, positive and negative samples. identity(anchor) ==
/// identity(positive) != identity(negative), anchor != positive.
struct Triplet {
    std::size_t anchor = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;
    bool operator==(const Triplet&) const = default;
};

inline bool is_valid(const Triplet& t, std::span<const int> identities) {
    return t.anchor != t.positive && t.anchor < identities.size() && t.positive < identities.size() &&
           t.negative < identities.size() && identities[t.anchor] == identities[t.positive] &&
           identities[t.anchor] != identities[t.negative];
}

/// Sum over triplets of [d_ap - d_an + margin]_+.
inline double triplet_loss(std::span<const double> d_ap, std::span<const double> d_an, double margin) {
    if (d_ap.size() != d_an.size()) throw Error("triplet_loss: distance lists differ in length");
    if (d_ap.empty()) throw Error("triplet_loss: no triplets");
    double loss = 0;
    for (std::size_t i = 0; i < d_ap.size(); ++i) {
        if (d_ap[i] < 0 || d_an[i] < 0) throw Error("triplet_loss: negative distance");
        loss += std::max(0.0, d_ap[i] - d_an[i] + margin);
    }
    return loss;
}

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
struct TripletLossGrad {
    double loss = 0;
    std::size_t active = 0;
    Mat<T> d_embeddings;  // same shape as the embeddings
};

/// Loss and its gradient with respect to the embedding columns. Distances are
/// Euclidean (or squared when `squared`). The hinge contributes nothing at
/// its kink, and a distance term below 1e-12 contributes a zero subgradient.
template <typename T>
TripletLossGrad<T> triplet_loss_grad(const Mat<T>& embeddings, std::span<const Triplet> triplets, double margin,
                                     bool squared = false) {
    constexpr double kMinDist = 1e-12;
    TripletLossGrad<T> out;
    out.d_embeddings = Mat<T>::Zero(embeddings.rows(), embeddings.cols());
    for (const auto& t : triplets) {
        const auto a = embeddings.col(static_cast<Eigen::Index>(t.anchor));
        const auto p = embeddings.col(static_cast<Eigen::Index>(t.positive));
        const auto n = embeddings.col(static_cast<Eigen::Index>(t.negative));
        const Eigen::Matrix<T, Eigen::Dynamic, 1> ap = a - p, an = a - n;
        const double sq_ap = static_cast<double>(ap.squaredNorm()), sq_an = static_cast<double>(an.squaredNorm());
        const double d_ap = squared ? sq_ap : std::sqrt(sq_ap);
        const double d_an = squared ? sq_an : std::sqrt(sq_an);
        const double h = d_ap - d_an + margin;
        if (!(h > 0)) continue;
        out.loss += h;
        ++out.active;
        auto ga = out.d_embeddings.col(static_cast<Eigen::Index>(t.anchor));
        auto gp = out.d_embeddings.col(static_cast<Eigen::Index>(t.positive));
        auto gn = out.d_embeddings.col(static_cast<Eigen::Index>(t.negative));
        if (squared) {
            ga += T(2) * (ap - an);
            gp -= T(2) * ap;
            gn += T(2) * an;
        } else {
            if (d_ap > kMinDist) {
                const T s = static_cast<T>(1.0 / d_ap);
                ga += s * ap;
                gp -= s * ap;
            }
            if (d_an > kMinDist) {
                const T s = static_cast<T>(1.0 / d_an);
                ga -= s * an;
                gn += s * an;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch construction

/// 3N sample indices in (anchor, positive, negative, anchor, ...) order and
/// the triplets referring to positions in that list.
struct TripletBatch {
    std::vector<std::size_t> images;  // dataset indices
    std::vector<Triplet> triplets;    // indices into `images`
};

/// N uniformly sampled triplets: anchor identity uniform among identities
/// with at least two images, positive uniform among its other images,
/// negative identity uniform among the remaining identities.
inline TripletBatch make_batch(std::span<const int> identities, std::size_t n, Rng& rng) {
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < identities.size(); ++i) groups[identities[i]].push_back(i);
    std::vector<int> ids, anchor_ids;
    for (const auto& [id, imgs] : groups) {
        ids.push_back(id);
        if (imgs.size() >= 2) anchor_ids.push_back(id);
    }
    if (ids.size() < 2) throw Error("make_batch: need at least two identities");
    if (anchor_ids.empty()) throw Error("make_batch: need an identity with at least two images");

    TripletBatch batch;
    for (std::size_t t = 0; t < n; ++t) {
        const int aid = anchor_ids[rand_below(rng, anchor_ids.size())];
        const auto& own = groups[aid];
        const std::size_t a = rand_below(rng, own.size());
        std::size_t p = rand_below(rng, own.size() - 1);
        if (p >= a) ++p;
        const std::size_t apos = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), aid) - ids.begin());
        std::size_t ni = rand_below(rng, ids.size() - 1);
        if (ni >= apos) ++ni;
        const int nid = ids[ni];
        const auto& other = groups[nid];
        const std::size_t base = batch.images.size();
        batch.images.push_back(own[a]);
        batch.images.push_back(own[p]);
        batch.images.push_back(other[rand_below(rng, other.size())]);
        batch.triplets.push_back({base, base + 1, base + 2});
    }
    return batch;
}

/// P identities x K images (sampled without replacement where possible).
/// Triplets are left empty: PK batches are meant for online mining.
inline TripletBatch make_pk_batch(std::span<const int> identities, std::size_t p, std::size_t k, Rng& rng) {
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < identities.size(); ++i) groups[identities[i]].push_back(i);
    std::vector<int> ids;
    for (const auto& [id, imgs] : groups)
        if (imgs.size() >= 2) ids.push_back(id);
    if (ids.size() < 2 || groups.size() < 2) throw Error("make_pk_batch: need two identities with >= 2 images");
    if (p > ids.size()) p = ids.size();
    shuffle_in_place(ids, rng);
    TripletBatch batch;
    for (std::size_t i = 0; i < p; ++i) {
        auto imgs = groups[ids[i]];
        shuffle_in_place(imgs, rng);
        for (std::size_t j = 0; j < k; ++j) batch.images.push_back(imgs[j % imgs.size()]);
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Online mining

struct MiningResult {
    std::vector<Triplet> triplets;
    std::size_t skipped = 0;  // anchors without a positive or a negative
};

/// Batch-hard mining: for each anchor the farthest same-identity sample and
/// the nearest different-identity sample. Ties go to the lowest index.
template <typename T>
MiningResult batch_hard_mine(const Mat<T>& embeddings, std::span<const int> identities, bool squared = false) {
    const std::size_t n = static_cast<std::size_t>(embeddings.cols());
    if (identities.size() != n) throw Error("batch_hard_mine: label count differs from embedding count");
    Mat<double> dist(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double sq = static_cast<double>(
                (embeddings.col(static_cast<Eigen::Index>(i)) - embeddings.col(static_cast<Eigen::Index>(j)))
                    .squaredNorm());
            dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = squared ? sq : std::sqrt(sq);
        }
    MiningResult out;
    for (std::size_t a = 0; a < n; ++a) {
        std::size_t best_p = n, best_n = n;
        double dp = -1, dn = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == a) continue;
            const double d = dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j));
            if (identities[j] == identities[a]) {
                if (d > dp) {
                    dp = d;
                    best_p = j;
                }
            } else if (d < dn) {
                dn = d;
                best_n = j;
            }
        }
        if (best_p == n || best_n == n) {
            ++out.skipped;
            continue;
        }
        out.triplets.push_back({a, best_p, best_n});
    }
    return out;
}

/// Every valid (anchor, positive, negative) combination in the batch.
inline MiningResult batch_all_mine(std::span<const int> identities) {
    MiningResult out;
    const std::size_t n = identities.size();
    for (std::size_t a = 0; a < n; ++a) {
        bool any = false;
        for (std::size_t p = 0; p < n; ++p) {
            if (p == a || identities[p] != identities[a]) continue;
            for (std::size_t q = 0; q < n; ++q)
                if (identities[q] != identities[a]) {
                    out.triplets.push_back({a, p, q});
                    any = true;
                }
        }
        if (!any) ++out.skipped;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Schedules

struct Schedules {
    double base_lr = 0.05;
    double lr_decay = 0.9;
    double margin_base = 0.1;
    std::uint64_t period = 10000;
    bool constant_margin = false;

    void validate() const {
        if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
        if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("lr_decay must be in (0, 1]");
        if (period < 1) throw ConfigError("schedule period must be >= 1");
        if (margin_base < 0) throw ConfigError("margin_base must be >= 0");
    }
};

namespace detail {

/// Rounds to 15 significant decimal digits. Schedule constants are decimal
/// numbers, so 0.05 * 0.9 comes out as the double nearest 0.045 rather than
/// one ulp above it.
inline double decimal_round(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.15g", x);
    return std::strtod(buf, nullptr);
}

}  // namespace detail

/// base_lr * decay^floor(n / period)
inline double lr_at(std::uint64_t n, const Schedules& s) {
    return detail::decimal_round(s.base_lr * std::pow(s.lr_decay, static_cast<double>(n / s.period)));
}

/// margin_base * ceil(n / period). n = 0 would give a zero margin, so it is
/// clamped to margin_base.
inline double margin_at(std::uint64_t n, const Schedules& s) {
    if (s.constant_margin || n == 0) return s.margin_base;
    return detail::decimal_round(s.margin_base * static_cast<double>((n + s.period - 1) / s.period));
}

}  // namespace pmsm
