#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pmsm/common.hpp"
#include "pmsm/dataset.hpp"
#include "pmsm/image.hpp"

namespace pmsm {

/// Dalal-Triggs style HOG. Defaults: 8 px cells, 2x2 cell blocks, 9 unsigned
/// bins, L2-hys normalisation clipped at 0.2.
struct HogConfig {
    int cell_px = 8;
    int block_cells = 2;
    int bins = 9;
    bool signed_orientation = false;
    double epsilon = 1e-6;
    double clip = 0.2;

    void validate() const {
        if (cell_px < 1) throw ConfigError("hog cell_px must be >= 1");
        if (block_cells < 1) throw ConfigError("hog block_cells must be >= 1");
        if (bins < 2) throw ConfigError("hog bins must be >= 2");
        if (!(epsilon > 0)) throw ConfigError("hog epsilon must be > 0");
        if (!(clip > 0)) throw ConfigError("hog clip must be > 0");
    }

    std::string canonical() const {
        return "hog:" + std::to_string(cell_px) + ":" + std::to_string(block_cells) + ":" + std::to_string(bins) + ":" +
               (signed_orientation ? "s" : "u") + ":" + std::to_string(epsilon) + ":" + std::to_string(clip);
    }
    std::uint64_t hash() const { return fnv1a(canonical()); }
};

/// Per-cell, block-normalised orientation histograms.
struct HogField {
    int cells_y = 0;
    int cells_x = 0;
    int bins = 0;
    std::vector<double> values;  // (cell_y, cell_x, bin), row-major

    std::span<const double> cell(int cy, int cx) const {
        return {values.data() + (static_cast<std::size_t>(cy) * cells_x + cx) * bins, static_cast<std::size_t>(bins)};
    }
    /// The whole-image descriptor used for neighbour search.
    std::span<const double> descriptor() const { return values; }
};

/// Oriented-gradient histogram field of `image`. Gradients are centred
/// differences on the channel-mean grayscale with replicated borders; each
/// pixel votes its magnitude into the two nearest orientation bins (bin
/// centres at multiples of the bin width). Every block of block_cells^2 cells
/// is L2-hys normalised and a cell's output is the mean of its normalised
/// copies across all blocks covering it, so entries stay in [0, 1] and the
/// output length is cells x bins.
inline HogField hog(const Image& image, const HogConfig& cfg) {
    cfg.validate();
    if (image.height % cfg.cell_px != 0 || image.width % cfg.cell_px != 0)
        throw Error("image size " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " not divisible by cell_px " + std::to_string(cfg.cell_px));
    const int h = image.height, w = image.width;
    std::vector<double> gray(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double g = (static_cast<double>(image.at(y, x, 0)) + image.at(y, x, 1) + image.at(y, x, 2)) / 3.0;
            gray[static_cast<std::size_t>(y) * w + x] = g;
        }
    auto g = [&](int y, int x) {
        return gray[static_cast<std::size_t>(std::clamp(y, 0, h - 1)) * w + std::clamp(x, 0, w - 1)];
    };

    HogField f;
    f.cells_y = h / cfg.cell_px;
    f.cells_x = w / cfg.cell_px;
    f.bins = cfg.bins;
    std::vector<double> hist(static_cast<std::size_t>(f.cells_y) * f.cells_x * cfg.bins, 0.0);

    const double range = cfg.signed_orientation ? 2.0 * std::numbers::pi : std::numbers::pi;
    const double bin_width = range / cfg.bins;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double gx = g(y, x + 1) - g(y, x - 1);
            const double gy = g(y + 1, x) - g(y - 1, x);
            const double mag = std::hypot(gx, gy);
            if (mag == 0.0) continue;
            double theta = std::atan2(gy, gx);
            theta = std::fmod(theta, range);
            if (theta < 0) theta += range;
            const double pos = theta / bin_width;
            const double lo = std::floor(pos);
            const double frac = pos - lo;
            const int b0 = static_cast<int>(lo) % cfg.bins;
            const int b1 = (b0 + 1) % cfg.bins;
            double* c = &hist[(static_cast<std::size_t>(y / cfg.cell_px) * f.cells_x + x / cfg.cell_px) * cfg.bins];
            c[b0] += mag * (1.0 - frac);
            c[b1] += mag * frac;
        }
    }

    const int bc = std::min({cfg.block_cells, f.cells_y, f.cells_x});
    const int nby = f.cells_y - bc + 1, nbx = f.cells_x - bc + 1;
    f.values.assign(hist.size(), 0.0);
    std::vector<int> coverage(static_cast<std::size_t>(f.cells_y) * f.cells_x, 0);
    std::vector<double> block(static_cast<std::size_t>(bc) * bc * cfg.bins);
    const double eps2 = cfg.epsilon * cfg.epsilon;
    for (int by = 0; by < nby; ++by) {
        for (int bx = 0; bx < nbx; ++bx) {
            std::size_t k = 0;
            for (int cy = by; cy < by + bc; ++cy)
                for (int cx = bx; cx < bx + bc; ++cx)
                    for (int b = 0; b < cfg.bins; ++b)
                        block[k++] = hist[(static_cast<std::size_t>(cy) * f.cells_x + cx) * cfg.bins + b];
            double ss = 0;
            for (double v : block) ss += v * v;
            double norm = std::sqrt(ss + eps2);
            ss = 0;
            for (double& v : block) {
                v = std::min(v / norm, cfg.clip);
                ss += v * v;
            }
            norm = std::sqrt(ss + eps2);
            k = 0;
            for (int cy = by; cy < by + bc; ++cy)
                for (int cx = bx; cx < bx + bc; ++cx) {
                    const std::size_t cell = static_cast<std::size_t>(cy) * f.cells_x + cx;
                    ++coverage[cell];
                    for (int b = 0; b < cfg.bins; ++b) f.values[cell * cfg.bins + b] += block[k++] / norm;
                }
        }
    }
    for (std::size_t cell = 0; cell < coverage.size(); ++cell)
        for (int b = 0; b < cfg.bins; ++b) f.values[cell * cfg.bins + b] /= coverage[cell];
    return f;
}

inline HogField hog(const LabeledImage& image, const HogConfig& cfg) { return hog(image.pixels, cfg); }

/// Dense grid of square patches over the canonical frame.
struct PatchGridConfig {
    int patch_px = 32;
    int stride_px = 8;

    void validate(int image_px, const HogConfig& hog_cfg) const {
        if (patch_px < 1 || patch_px > image_px) throw ConfigError("patch_px must be in [1, image size]");
        if (stride_px < 1) throw ConfigError("stride_px must be >= 1");
        if (patch_px % hog_cfg.cell_px != 0) throw ConfigError("patch_px must be a multiple of cell_px");
        if (stride_px % hog_cfg.cell_px != 0) throw ConfigError("stride_px must be a multiple of cell_px");
    }

    int positions(int image_px) const { return (image_px - patch_px) / stride_px + 1; }
};

struct GridPos {
    int x = 0;
    int y = 0;
    bool operator==(const GridPos&) const = default;
};

/// Per-position patch descriptors F_I(x, y) of one image.
struct FeatureGrid {
    int positions_x = 0;
    int positions_y = 0;
    int dim = 0;
    std::vector<double> data;  // (y, x, dim)

    std::span<const double> at(GridPos p) const {
        return {data.data() + (static_cast<std::size_t>(p.y) * positions_x + p.x) * dim, static_cast<std::size_t>(dim)};
    }
    std::size_t num_positions() const { return static_cast<std::size_t>(positions_x) * positions_y; }
};

/// Concatenation of the HOG cells covered by the patch at `pos`.
inline std::vector<double> patch_feature(const HogField& field, const HogConfig& hog_cfg, const PatchGridConfig& grid,
                                         GridPos pos) {
    const int image_px_x = field.cells_x * hog_cfg.cell_px;
    const int image_px_y = field.cells_y * hog_cfg.cell_px;
    if (pos.x < 0 || pos.y < 0 || pos.x >= grid.positions(image_px_x) || pos.y >= grid.positions(image_px_y))
        throw Error("grid position (" + std::to_string(pos.x) + ", " + std::to_string(pos.y) + ") off the patch grid");
    const int span = grid.patch_px / hog_cfg.cell_px;
    const int cx0 = pos.x * grid.stride_px / hog_cfg.cell_px;
    const int cy0 = pos.y * grid.stride_px / hog_cfg.cell_px;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(span) * span * field.bins);
    for (int cy = cy0; cy < cy0 + span; ++cy)
        for (int cx = cx0; cx < cx0 + span; ++cx) {
            auto c = field.cell(cy, cx);
            out.insert(out.end(), c.begin(), c.end());
        }
    return out;
}

inline FeatureGrid feature_grid(const HogField& field, const HogConfig& hog_cfg, const PatchGridConfig& grid) {
    const int px = field.cells_x * hog_cfg.cell_px, py = field.cells_y * hog_cfg.cell_px;
    grid.validate(std::min(px, py), hog_cfg);
    FeatureGrid fg;
    fg.positions_x = grid.positions(px);
    fg.positions_y = grid.positions(py);
    const int span = grid.patch_px / hog_cfg.cell_px;
    fg.dim = span * span * field.bins;
    fg.data.reserve(fg.num_positions() * static_cast<std::size_t>(fg.dim));
    for (int y = 0; y < fg.positions_y; ++y)
        for (int x = 0; x < fg.positions_x; ++x) {
            auto v = patch_feature(field, hog_cfg, grid, GridPos{x, y});
            fg.data.insert(fg.data.end(), v.begin(), v.end());
        }
    return fg;
}

inline double euclidean(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw Error("euclidean: length mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

struct Neighbor {
    std::size_t index = 0;
    double distance = 0;
    bool operator==(const Neighbor&) const = default;
};

/// Whole-image HOG descriptors of a dataset, searchable by exhaustive KNN.
class HogIndex {
public:
    HogIndex(const Dataset& ds, const HogConfig& cfg, unsigned threads = 1) : cfg_(cfg) {
        fields_.resize(ds.size());
        parallel_for(ds.size(), threads, [&](std::size_t i) { fields_[i] = hog(ds[i].pixels, cfg); });
        source_ids_.reserve(ds.size());
        for (const auto& im : ds.images) source_ids_.push_back(im.source_id);
    }

    std::size_t size() const { return fields_.size(); }
    const HogField& field(std::size_t i) const { return fields_[i]; }
    const HogConfig& config() const { return cfg_; }

    /// k nearest images to `seed` (seed excluded) in ascending distance,
    /// ties broken by ascending source_id.
    std::vector<Neighbor> knn(std::size_t seed, std::size_t k) const {
        std::vector<std::size_t> all(size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return knn_within(seed, all, k);
    }

    /// KNN restricted to `candidates` (the seed is ignored if present).
    std::vector<Neighbor> knn_within(std::size_t seed, std::span<const std::size_t> candidates, std::size_t k) const {
        if (seed >= size()) throw Error("knn: seed out of range");
        std::vector<Neighbor> pool;
        pool.reserve(candidates.size());
        for (std::size_t i : candidates)
            if (i != seed) pool.push_back({i, euclidean(fields_[seed].descriptor(), fields_[i].descriptor())});
        if (k >= pool.size() + 1)
            throw Error("knn: k=" + std::to_string(k) + " must be smaller than the candidate set size " +
                        std::to_string(pool.size() + 1));
        auto less = [&](const Neighbor& a, const Neighbor& b) {
            if (a.distance != b.distance) return a.distance < b.distance;
            return source_ids_[a.index] < source_ids_[b.index];
        };
        std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end(), less);
        pool.resize(k);
        return pool;
    }

private:
    HogConfig cfg_;
    std::vector<HogField> fields_;
    std::vector<int> source_ids_;
};

// ---------------------------------------------------------------------------
// Feature cache: "PMSMFEAT", u32 version, i32 source_id, u64 config hash,
// u64 length, then float32 values, all little-endian.

inline constexpr char kFeatureMagic[8] = {'P', 'M', 'S', 'M', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::filesystem::path feature_cache_path(const std::filesystem::path& dir, int source_id,
                                                std::uint64_t config_hash) {
    return dir / (std::to_string(source_id) + "_" + hex64(config_hash) + ".feat");
}

inline void write_feature_blob(const std::filesystem::path& path, int source_id, std::uint64_t config_hash,
                               std::span<const double> values) {
    std::ofstream os(path, std::ios::binary);
    os.write(kFeatureMagic, 8);
    le::put_u32(os, kFeatureVersion);
    le::put_u32(os, static_cast<std::uint32_t>(source_id));
    le::put_u64(os, config_hash);
    le::put_u64(os, values.size());
    for (double v : values) le::put_f32(os, static_cast<float>(v));
    if (!os) throw Error("cannot write feature blob " + path.string());
}

/// Returns nullopt when the blob is missing or was written for another
/// image or configuration.
inline std::optional<std::vector<double>> read_feature_blob(const std::filesystem::path& path, int source_id,
                                                            std::uint64_t config_hash) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return std::nullopt;
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kFeatureMagic)) return std::nullopt;
    if (le::get_u32(is) != kFeatureVersion) return std::nullopt;
    if (static_cast<int>(le::get_u32(is)) != source_id) return std::nullopt;
    if (le::get_u64(is) != config_hash) return std::nullopt;
    const std::uint64_t n = le::get_u64(is);
    std::vector<double> out(n);
    for (auto& v : out) v = le::get_f32(is);
    return out;
}

}  // namespace pmsm
