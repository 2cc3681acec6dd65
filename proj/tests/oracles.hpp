#pragma once

// Brute-force reference implementations used only by tests. They follow
// the textbook definitions directly and share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <set>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline double dist(const Vec& a, const Vec& b) {
    long double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (static_cast<long double>(a[i]) - b[i]) * (a[i] - b[i]);
    return static_cast<double>(std::sqrt(s));
}

inline Vec mean_of(const std::vector<Vec>& xs) {
    Vec m(xs.front().size(), 0.0);
    for (const auto& x : xs)
        for (std::size_t d = 0; d < m.size(); ++d) m[d] += x[d] / static_cast<double>(xs.size());
    return m;
}

/// Exhaustive between-class over within-class ratio; returns the unfloored numerator and
/// denominator.
inline std::pair<double, double> eq1(const std::vector<Vec>& f, const std::vector<int>& labels) {
    std::set<int> classes(labels.begin(), labels.end());
    const Vec global = mean_of(f);
    double num = 0, den = 0;
    for (int c : classes) {
        std::vector<Vec> members;
        for (std::size_t i = 0; i < f.size(); ++i)
            if (labels[i] == c) members.push_back(f[i]);
        const Vec mc = mean_of(members);
        num += dist(mc, global);
        for (const auto& m : members) den += dist(m, mc);
    }
    return {num, den};
}

/// Seed is f[0] with label labels[0]; neighbours are the rest.
inline std::pair<double, double> eq2(const std::vector<Vec>& f, const std::vector<int>& labels) {
    std::set<int> classes(labels.begin(), labels.end());
    std::vector<Vec> own;
    for (std::size_t i = 0; i < f.size(); ++i)
        if (labels[i] == labels[0]) own.push_back(f[i]);
    const Vec m0 = mean_of(own);
    double num = std::numeric_limits<double>::infinity();
    for (int c : classes) {
        if (c == labels[0]) continue;
        std::vector<Vec> members;
        for (std::size_t i = 0; i < f.size(); ++i)
            if (labels[i] == c) members.push_back(f[i]);
        num = std::min(num, dist(mean_of(members), m0));
    }
    double den = 0;
    for (std::size_t i = 1; i < f.size(); ++i)
        if (labels[i] == labels[0]) den = std::max(den, dist(f[i], f[0]));
    return {num, den};
}

inline double floored(std::pair<double, double> nd, double eps) { return nd.first / std::max(nd.second, eps); }

/// Hardest positive (max distance, lowest index on ties) and hardest
/// negative (min distance, lowest index on ties) by scanning all pairs.
struct Hardest {
    std::size_t anchor, positive, negative;
};

inline std::vector<Hardest> hardest(const std::vector<Vec>& e, const std::vector<int>& ids) {
    std::vector<Hardest> out;
    const std::size_t n = e.size();
    for (std::size_t a = 0; a < n; ++a) {
        std::vector<std::size_t> pos, neg;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == a) continue;
            (ids[j] == ids[a] ? pos : neg).push_back(j);
        }
        if (pos.empty() || neg.empty()) continue;
        double dmax = -1;
        for (std::size_t j : pos) dmax = std::max(dmax, dist(e[a], e[j]));
        double dmin = std::numeric_limits<double>::infinity();
        for (std::size_t j : neg) dmin = std::min(dmin, dist(e[a], e[j]));
        std::size_t p = n, q = n;
        for (std::size_t j : pos)
            if (dist(e[a], e[j]) == dmax) { p = j; break; }
        for (std::size_t j : neg)
            if (dist(e[a], e[j]) == dmin) { q = j; break; }
        out.push_back({a, p, q});
    }
    return out;
}

/// AP from the definition: for every relevant item at rank k, the fraction
/// of the top k that is relevant.
inline double average_precision(const std::vector<double>& distances, const std::vector<int>& gallery_ids,
                                int probe_id) {
    const std::size_t n = distances.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // insertion sort: (distance, index)
    for (std::size_t i = 1; i < n; ++i)
        for (std::size_t j = i; j > 0; --j) {
            const auto a = order[j - 1], b = order[j];
            if (distances[b] < distances[a] || (distances[b] == distances[a] && b < a))
                std::swap(order[j - 1], order[j]);
            else
                break;
        }
    double total = 0;
    int relevant = 0;
    for (std::size_t k = 1; k <= n; ++k) {
        if (gallery_ids[order[k - 1]] != probe_id) continue;
        int hits = 0;
        for (std::size_t t = 0; t < k; ++t) hits += gallery_ids[order[t]] == probe_id;
        total += static_cast<double>(hits) / static_cast<double>(k);
        ++relevant;
    }
    return total / relevant;
}

/// 1-based rank of the first relevant item by counting how many gallery
/// items sort strictly before it.
inline std::size_t first_match(const std::vector<double>& distances, const std::vector<int>& gallery_ids,
                               int probe_id) {
    std::size_t best = distances.size() + 1;
    for (std::size_t j = 0; j < distances.size(); ++j) {
        if (gallery_ids[j] != probe_id) continue;
        std::size_t before = 0;
        for (std::size_t t = 0; t < distances.size(); ++t)
            if (distances[t] < distances[j] || (distances[t] == distances[j] && t < j)) ++before;
        best = std::min(best, before + 1);
    }
    return best;
}

}  // namespace oracle
