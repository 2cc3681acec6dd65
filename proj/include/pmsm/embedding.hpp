#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "pmsm/common.hpp"
#include "pmsm/image.hpp"
#include "pmsm/loss.hpp"
#include "pmsm/mining.hpp"
#include "pmsm/random.hpp"

namespace pmsm {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Architecture of one stream: a stack of k x k convolutions (stride, zero
/// padding k/2, ReLU), each optionally followed by a residual block
/// x + conv(relu(conv(x))), then global average pooling and a linear layer.
struct StreamArch {
    int input_px = 64;
    int input_channels = 3;
    std::vector<int> conv_channels{8, 16, 32};
    int kernel = 3;
    int stride = 2;
    bool residual = false;
    int out_dim = 64;

    void validate() const {
        if (input_px < 1 || input_channels < 1 || out_dim < 1) throw ConfigError("stream dimensions must be >= 1");
        if (kernel < 1 || kernel % 2 == 0) throw ConfigError("stream kernel must be odd");
        if (stride < 1) throw ConfigError("stream stride must be >= 1");
        for (int c : conv_channels)
            if (c < 1) throw ConfigError("stream conv channels must be >= 1");
    }

    /// Channel count entering global pooling.
    int pooled_channels() const { return conv_channels.empty() ? input_channels : conv_channels.back(); }

    bool operator==(const StreamArch&) const = default;
};

enum class StreamLayout { three_stream, whole_only };

/// Whole-image stream, Part_M stream and Part_I stream (or the whole-image
/// stream alone) feeding a fusion layer that outputs the embedding.
struct PmsmArch {
    StreamArch stream;
    StreamLayout layout = StreamLayout::three_stream;
    int embed_dim = 128;

    int num_streams() const { return layout == StreamLayout::three_stream ? 3 : 1; }

    void validate() const {
        stream.validate();
        if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    }

    bool operator==(const PmsmArch&) const = default;
};

inline nlohmann::json to_json(const StreamArch& a) {
    return {{"input_px", a.input_px}, {"input_channels", a.input_channels}, {"conv_channels", a.conv_channels},
            {"kernel", a.kernel},     {"stride", a.stride},                 {"residual", a.residual},
            {"out_dim", a.out_dim}};
}

inline StreamArch stream_arch_from_json(const nlohmann::json& j) {
    StreamArch a;
    a.input_px = j.value("input_px", a.input_px);
    a.input_channels = j.value("input_channels", a.input_channels);
    a.conv_channels = j.value("conv_channels", a.conv_channels);
    a.kernel = j.value("kernel", a.kernel);
    a.stride = j.value("stride", a.stride);
    a.residual = j.value("residual", a.residual);
    a.out_dim = j.value("out_dim", a.out_dim);
    a.validate();
    return a;
}

inline nlohmann::json to_json(const PmsmArch& a) {
    return {{"stream", to_json(a.stream)},
            {"layout", a.layout == StreamLayout::three_stream ? "three_stream" : "whole_only"},
            {"embed_dim", a.embed_dim}};
}

inline PmsmArch pmsm_arch_from_json(const nlohmann::json& j) {
    PmsmArch a;
    if (j.contains("stream")) a.stream = stream_arch_from_json(j.at("stream"));
    const std::string layout = j.value("layout", std::string("three_stream"));
    if (layout == "three_stream")
        a.layout = StreamLayout::three_stream;
    else if (layout == "whole_only")
        a.layout = StreamLayout::whole_only;
    else
        throw ConfigError("unknown stream layout '" + layout + "'");
    a.embed_dim = j.value("embed_dim", a.embed_dim);
    a.validate();
    return a;
}

inline std::uint64_t arch_hash(const PmsmArch& a) { return fnv1a(to_json(a).dump()); }

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct Tensor {
    std::string name;
    Mat<T> value;            // biases are column vectors
    bool is_weight = true;   // weight decay applies to weights only
};

/// Tensor order per stream: for every conv stage [W, b] (+ [W1, b1, W2, b2]
/// for its residual block), then the output layer [W, b]. Conv weights are
/// laid out as [out_channels x (ky, kx, in_channel)].
template <typename T>
struct StreamParams {
    StreamArch arch;
    std::vector<Tensor<T>> tensors;

    int stage_base(int stage) const { return stage * (arch.residual ? 6 : 2); }
    const Mat<T>& conv_w(int s) const { return tensors[static_cast<std::size_t>(stage_base(s))].value; }
    const Mat<T>& conv_b(int s) const { return tensors[static_cast<std::size_t>(stage_base(s) + 1)].value; }
    const Mat<T>& res_w(int s, int k) const { return tensors[static_cast<std::size_t>(stage_base(s) + 2 + 2 * k)].value; }
    const Mat<T>& res_b(int s, int k) const { return tensors[static_cast<std::size_t>(stage_base(s) + 3 + 2 * k)].value; }
    const Mat<T>& fc_w() const { return tensors[tensors.size() - 2].value; }
    const Mat<T>& fc_b() const { return tensors[tensors.size() - 1].value; }
    Mat<T>& mut(std::size_t i) { return tensors[i].value; }
};

/// Allocates zero-valued parameters with the shapes implied by `arch`.
template <typename T>
StreamParams<T> zero_stream(const StreamArch& arch) {
    arch.validate();
    StreamParams<T> p;
    p.arch = arch;
    int cin = arch.input_channels;
    const int kk = arch.kernel * arch.kernel;
    for (std::size_t s = 0; s < arch.conv_channels.size(); ++s) {
        const int cout = arch.conv_channels[s];
        const std::string tag = "conv" + std::to_string(s);
        p.tensors.push_back({tag + ".w", Mat<T>::Zero(cout, kk * cin), true});
        p.tensors.push_back({tag + ".b", Mat<T>::Zero(cout, 1), false});
        if (arch.residual) {
            p.tensors.push_back({tag + ".res1.w", Mat<T>::Zero(cout, 9 * cout), true});
            p.tensors.push_back({tag + ".res1.b", Mat<T>::Zero(cout, 1), false});
            p.tensors.push_back({tag + ".res2.w", Mat<T>::Zero(cout, 9 * cout), true});
            p.tensors.push_back({tag + ".res2.b", Mat<T>::Zero(cout, 1), false});
        }
        cin = cout;
    }
    p.tensors.push_back({"fc.w", Mat<T>::Zero(arch.out_dim, arch.pooled_channels()), true});
    p.tensors.push_back({"fc.b", Mat<T>::Zero(arch.out_dim, 1), false});
    return p;
}

template <typename T>
struct PmsmParams {
    PmsmArch arch;
    std::vector<StreamParams<T>> streams;  // whole, part_m, part_i (or whole only)
    Tensor<T> fusion_w;
    Tensor<T> fusion_b;

    /// All tensors in declaration order: streams first, then fusion.
    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        for (auto& s : streams)
            for (auto& t : s.tensors) fn(t);
        fn(fusion_w);
        fn(fusion_b);
    }
    template <typename Fn>
    void for_each_tensor(Fn&& fn) const {
        for (const auto& s : streams)
            for (const auto& t : s.tensors) fn(t);
        fn(fusion_w);
        fn(fusion_b);
    }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for_each_tensor([&](const Tensor<T>& t) { n += static_cast<std::size_t>(t.value.size()); });
        return n;
    }

    void set_zero() {
        for_each_tensor([](Tensor<T>& t) { t.value.setZero(); });
    }
};

template <typename T>
PmsmParams<T> zero_pmsm(const PmsmArch& arch) {
    arch.validate();
    PmsmParams<T> p;
    p.arch = arch;
    for (int s = 0; s < arch.num_streams(); ++s) p.streams.push_back(zero_stream<T>(arch.stream));
    const int fused = arch.num_streams() * arch.stream.out_dim;
    p.fusion_w = {"fusion.w", Mat<T>::Zero(arch.embed_dim, fused), true};
    p.fusion_b = {"fusion.b", Mat<T>::Zero(arch.embed_dim, 1), false};
    return p;
}

/// Fan-in scaled Gaussian initialisation: sqrt(2 / fan_in) for layers feeding
/// a ReLU, sqrt(1 / fan_in) for the linear output and fusion layers. Every
/// stream draws from its own RNG stream, so parameters are never shared.
template <typename T>
PmsmParams<T> init_pmsm(const PmsmArch& arch, std::uint64_t seed) {
    auto p = zero_pmsm<T>(arch);
    auto fill = [](Tensor<T>& t, double gain, Rng& rng) {
        if (!t.is_weight) return;
        const double sd = std::sqrt(gain / static_cast<double>(t.value.cols()));
        for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = static_cast<T>(sd * rand_normal(rng));
    };
    for (std::size_t s = 0; s < p.streams.size(); ++s) {
        Rng rng(derive_seed(seed, 0x53545245414dULL, s));
        auto& ts = p.streams[s].tensors;
        for (std::size_t i = 0; i + 2 < ts.size(); ++i) fill(ts[i], 2.0, rng);
        fill(ts[ts.size() - 2], 1.0, rng);
    }
    Rng rng(derive_seed(seed, 0x465553494f4eULL));
    fill(p.fusion_w, 1.0, rng);
    return p;
}

template <typename U, typename T>
PmsmParams<U> cast_params(const PmsmParams<T>& src) {
    PmsmParams<U> out;
    out.arch = src.arch;
    for (const auto& s : src.streams) {
        StreamParams<U> d;
        d.arch = s.arch;
        for (const auto& t : s.tensors) d.tensors.push_back({t.name, t.value.template cast<U>(), t.is_weight});
        out.streams.push_back(std::move(d));
    }
    out.fusion_w = {src.fusion_w.name, src.fusion_w.value.template cast<U>(), true};
    out.fusion_b = {src.fusion_b.name, src.fusion_b.value.template cast<U>(), false};
    return out;
}

// ---------------------------------------------------------------------------
// Layers. Activations are [channels x (batch * H * W)] with pixel-major
// columns, so one GEMM covers the whole batch.

namespace detail {

struct ConvGeom {
    int cin = 0, h = 0, w = 0, k = 3, stride = 1, pad = 1, ho = 0, wo = 0;
};

inline ConvGeom conv_geom(int cin, int h, int w, int k, int stride) {
    ConvGeom g{cin, h, w, k, stride, k / 2, 0, 0};
    g.ho = (h + 2 * g.pad - k) / stride + 1;
    g.wo = (w + 2 * g.pad - k) / stride + 1;
    if (g.ho < 1 || g.wo < 1) throw Error("convolution output would be empty");
    return g;
}

template <typename T>
void im2col(const Mat<T>& x, int batch, const ConvGeom& g, Mat<T>& col) {
    const int rows = g.k * g.k * g.cin;
    col.resize(rows, static_cast<Eigen::Index>(batch) * g.ho * g.wo);
    T* out = col.data();
    const T* in = x.data();
    for (int b = 0; b < batch; ++b)
        for (int oy = 0; oy < g.ho; ++oy)
            for (int ox = 0; ox < g.wo; ++ox) {
                T* dst = out + ((static_cast<std::size_t>(b) * g.ho + oy) * g.wo + ox) * rows;
                for (int ky = 0; ky < g.k; ++ky) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int kx = 0; kx < g.k; ++kx, dst += g.cin) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
                            std::fill(dst, dst + g.cin, T(0));
                        } else {
                            const T* src = in + ((static_cast<std::size_t>(b) * g.h + iy) * g.w + ix) * g.cin;
                            std::copy(src, src + g.cin, dst);
                        }
                    }
                }
            }
}

template <typename T>
void col2im(const Mat<T>& col, int batch, const ConvGeom& g, Mat<T>& dx) {
    const int rows = g.k * g.k * g.cin;
    dx = Mat<T>::Zero(g.cin, static_cast<Eigen::Index>(batch) * g.h * g.w);
    T* out = dx.data();
    const T* in = col.data();
    for (int b = 0; b < batch; ++b)
        for (int oy = 0; oy < g.ho; ++oy)
            for (int ox = 0; ox < g.wo; ++ox) {
                const T* src = in + ((static_cast<std::size_t>(b) * g.ho + oy) * g.wo + ox) * rows;
                for (int ky = 0; ky < g.k; ++ky) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int kx = 0; kx < g.k; ++kx, src += g.cin) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                        T* dst = out + ((static_cast<std::size_t>(b) * g.h + iy) * g.w + ix) * g.cin;
                        for (int c = 0; c < g.cin; ++c) dst[c] += src[c];
                    }
                }
            }
}

template <typename T>
void relu_inplace(Mat<T>& m) {
    m = m.cwiseMax(T(0));
}

template <typename T>
void check_finite(const Mat<T>& m, std::size_t stream, const std::string& layer) {
    if (!m.allFinite())
        throw Error("non-finite activation in stream " + std::to_string(stream) + " at layer " + layer);
}

template <typename T>
double min_abs(const Mat<T>& m) {
    return m.size() ? static_cast<double>(m.cwiseAbs().minCoeff()) : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// Per-layer intermediates of a batched stream forward pass.
template <typename T>
struct StreamCache {
    int batch = 0;
    std::vector<detail::ConvGeom> geoms;
    std::vector<Mat<T>> conv_cols;   // im2col of each stage input
    std::vector<Mat<T>> conv_out;    // post-ReLU stage output
    std::vector<Mat<T>> res_cols1, res_hidden, res_cols2;
    Mat<T> pooled;                   // [C x batch]
    int pooled_hw = 0;
    bool track_kinks = false;
    double min_abs_preactivation = std::numeric_limits<double>::infinity();
};

/// Packs images (H x W x 3 interleaved) into a [3 x (batch*H*W)] matrix.
template <typename T>
Mat<T> pack_images(std::span<const Image* const> images, int px, int channels) {
    const std::size_t per = static_cast<std::size_t>(px) * px;
    Mat<T> x(channels, static_cast<Eigen::Index>(images.size() * per));
    T* dst = x.data();
    for (const Image* im : images) {
        if (im->height != px || im->width != px || Image::channels != channels)
            throw Error("stream input must be " + std::to_string(px) + "x" + std::to_string(px) + "x" +
                        std::to_string(channels) + ", got " + std::to_string(im->height) + "x" +
                        std::to_string(im->width));
        for (float v : im->pixels) *dst++ = static_cast<T>(v);
    }
    return x;
}

/// Forward pass of one stream over a batch; returns [out_dim x batch].
template <typename T>
Mat<T> forward_stream_batch(const StreamParams<T>& p, std::span<const Image* const> images,
                            StreamCache<T>* cache = nullptr, std::size_t stream_index = 0) {
    const auto& a = p.arch;
    const int batch = static_cast<int>(images.size());
    Mat<T> x = pack_images<T>(images, a.input_px, a.input_channels);
    int c = a.input_channels, h = a.input_px, w = a.input_px;
    StreamCache<T> local;
    StreamCache<T>& cc = cache ? *cache : local;
    const bool keep = cache != nullptr;
    cc.batch = batch;
    cc.geoms.clear();
    cc.conv_cols.clear();
    cc.conv_out.clear();
    cc.res_cols1.clear();
    cc.res_hidden.clear();
    cc.res_cols2.clear();
    cc.min_abs_preactivation = std::numeric_limits<double>::infinity();
    Mat<T> col;

    for (std::size_t s = 0; s < a.conv_channels.size(); ++s) {
        const auto g = detail::conv_geom(c, h, w, a.kernel, a.stride);
        detail::im2col(x, batch, g, col);
        Mat<T> y = p.conv_w(static_cast<int>(s)) * col;
        y.colwise() += p.conv_b(static_cast<int>(s)).col(0);
        if (cc.track_kinks) cc.min_abs_preactivation = std::min(cc.min_abs_preactivation, detail::min_abs(y));
        detail::relu_inplace(y);
        detail::check_finite(y, stream_index, "conv" + std::to_string(s));
        if (keep) {
            cc.geoms.push_back(g);
            cc.conv_cols.push_back(col);
        }
        c = a.conv_channels[s];
        h = g.ho;
        w = g.wo;
        if (a.residual) {
            const auto rg = detail::conv_geom(c, h, w, 3, 1);
            Mat<T> col1, col2;
            detail::im2col(y, batch, rg, col1);
            Mat<T> hid = p.res_w(static_cast<int>(s), 0) * col1;
            hid.colwise() += p.res_b(static_cast<int>(s), 0).col(0);
            if (cc.track_kinks) cc.min_abs_preactivation = std::min(cc.min_abs_preactivation, detail::min_abs(hid));
            detail::relu_inplace(hid);
            detail::im2col(hid, batch, rg, col2);
            Mat<T> r = p.res_w(static_cast<int>(s), 1) * col2;
            r.colwise() += p.res_b(static_cast<int>(s), 0 + 1).col(0);
            if (keep) {
                cc.conv_out.push_back(y);
                cc.res_cols1.push_back(std::move(col1));
                cc.res_hidden.push_back(std::move(hid));
                cc.res_cols2.push_back(std::move(col2));
            }
            y += r;
            detail::check_finite(y, stream_index, "conv" + std::to_string(s) + ".res");
        } else if (keep) {
            cc.conv_out.push_back(y);
        }
        x = std::move(y);
    }

    const int hw = h * w;
    Mat<T> pooled(c, batch);
    for (int b = 0; b < batch; ++b)
        pooled.col(b) = x.middleCols(static_cast<Eigen::Index>(b) * hw, hw).rowwise().mean();
    Mat<T> out = p.fc_w() * pooled;
    out.colwise() += p.fc_b().col(0);
    detail::check_finite(out, stream_index, "fc");
    if (keep) {
        cc.pooled = std::move(pooled);
        cc.pooled_hw = hw;
    }
    return out;
}

/// Accumulates parameter gradients of one stream into `grad` given the
/// gradient of its output.
template <typename T>
void backward_stream(const StreamParams<T>& p, const StreamCache<T>& cc, const Mat<T>& d_out, StreamParams<T>& grad) {
    const auto& a = p.arch;
    const int batch = cc.batch;
    const std::size_t n = grad.tensors.size();
    grad.tensors[n - 2].value += d_out * cc.pooled.transpose();
    grad.tensors[n - 1].value += d_out.rowwise().sum();
    const Mat<T> d_pooled = p.fc_w().transpose() * d_out;

    const int hw = cc.pooled_hw;
    Mat<T> dx(d_pooled.rows(), static_cast<Eigen::Index>(batch) * hw);
    for (int b = 0; b < batch; ++b)
        dx.middleCols(static_cast<Eigen::Index>(b) * hw, hw) =
            (d_pooled.col(b) / static_cast<T>(hw)).replicate(1, hw);

    for (int s = static_cast<int>(a.conv_channels.size()) - 1; s >= 0; --s) {
        const auto us = static_cast<std::size_t>(s);
        const auto& g = cc.geoms[us];
        const std::size_t base = static_cast<std::size_t>(p.stage_base(s));
        if (a.residual) {
            const int cch = a.conv_channels[us];
            const auto rg = detail::conv_geom(cch, g.ho, g.wo, 3, 1);
            // branch: r = W2 * im2col(relu(W1 * im2col(x) + b1)) + b2
            grad.tensors[base + 4].value += dx * cc.res_cols2[us].transpose();
            grad.tensors[base + 5].value += dx.rowwise().sum();
            Mat<T> dcol = p.res_w(s, 1).transpose() * dx;
            Mat<T> dh;
            detail::col2im(dcol, batch, rg, dh);
            dh = dh.cwiseProduct((cc.res_hidden[us].array() > T(0)).matrix().template cast<T>());
            grad.tensors[base + 2].value += dh * cc.res_cols1[us].transpose();
            grad.tensors[base + 3].value += dh.rowwise().sum();
            dcol = p.res_w(s, 0).transpose() * dh;
            Mat<T> dxb;
            detail::col2im(dcol, batch, rg, dxb);
            dx += dxb;
        }
        Mat<T> dz = dx.cwiseProduct((cc.conv_out[us].array() > T(0)).matrix().template cast<T>());
        grad.tensors[base].value += dz * cc.conv_cols[us].transpose();
        grad.tensors[base + 1].value += dz.rowwise().sum();
        if (s > 0) {
            const Mat<T> dcol = p.conv_w(s).transpose() * dz;
            detail::col2im(dcol, batch, g, dx);
        }
    }
}

template <typename T>
Vec<T> forward_stream(const StreamParams<T>& p, const Image& image) {
    const Image* ptr = &image;
    return forward_stream_batch<T>(p, std::span<const Image* const>(&ptr, 1)).col(0);
}

// ---------------------------------------------------------------------------
// Three-stream model

/// The three inputs of one sample, each already at the stream input size.
struct CropSet {
    Image whole;
    Image part_m;
    Image part_i;
};

/// Crops (whole frame, Part_M, Part_I) from a canonical image.
inline CropSet make_crops(const Image& image, const NormRect& part_m, const NormRect& part_i, int px) {
    return {resize(image, px, px), crop_resize(image, part_m, px, px), crop_resize(image, part_i, px, px)};
}

inline CropSet make_crops(const Image& image, const PartsFile& parts, int px) {
    return make_crops(image, parts.part_m.rect, parts.part_i.rect, px);
}

template <typename T>
struct PmsmCache {
    std::vector<StreamCache<T>> streams;
    Mat<T> fused;  // concatenated stream outputs [(S*out) x batch]
    bool track_kinks = false;

    double min_abs_preactivation() const {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& s : streams) m = std::min(m, s.min_abs_preactivation);
        return m;
    }
};

/// Embeddings [embed_dim x batch] for a batch of crop sets.
template <typename T>
Mat<T> forward_pmsm_batch(const PmsmParams<T>& p, std::span<const CropSet* const> batch,
                          PmsmCache<T>* cache = nullptr) {
    const int ns = p.arch.num_streams();
    const int od = p.arch.stream.out_dim;
    const auto nb = static_cast<Eigen::Index>(batch.size());
    if (cache) {
        cache->streams.assign(static_cast<std::size_t>(ns), StreamCache<T>{});
        for (auto& s : cache->streams) s.track_kinks = cache->track_kinks;
    }
    Mat<T> fused(ns * od, nb);
    std::vector<const Image*> inputs(batch.size());
    for (int s = 0; s < ns; ++s) {
        for (std::size_t i = 0; i < batch.size(); ++i)
            inputs[i] = s == 0 ? &batch[i]->whole : s == 1 ? &batch[i]->part_m : &batch[i]->part_i;
        fused.middleRows(static_cast<Eigen::Index>(s) * od, od) = forward_stream_batch<T>(
            p.streams[static_cast<std::size_t>(s)], inputs,
            cache ? &cache->streams[static_cast<std::size_t>(s)] : nullptr, static_cast<std::size_t>(s));
    }
    Mat<T> emb = p.fusion_w.value * fused;
    emb.colwise() += p.fusion_b.value.col(0);
    detail::check_finite(emb, static_cast<std::size_t>(ns), "fusion");
    if (cache) cache->fused = std::move(fused);
    return emb;
}

template <typename T>
Vec<T> forward_pmsm(const PmsmParams<T>& p, const Image& whole, const Image& part_m, const Image& part_i) {
    CropSet set{whole, part_m, part_i};
    const CropSet* ptr = &set;
    return forward_pmsm_batch<T>(p, std::span<const CropSet* const>(&ptr, 1)).col(0);
}

/// Accumulates gradients of every parameter into `grad` (same shapes as p).
template <typename T>
void backward_pmsm(const PmsmParams<T>& p, const PmsmCache<T>& cache, const Mat<T>& d_emb, PmsmParams<T>& grad) {
    grad.fusion_w.value += d_emb * cache.fused.transpose();
    grad.fusion_b.value += d_emb.rowwise().sum();
    const Mat<T> d_fused = p.fusion_w.value.transpose() * d_emb;
    const int od = p.arch.stream.out_dim;
    for (std::size_t s = 0; s < p.streams.size(); ++s) {
        const Mat<T> d_out = d_fused.middleRows(static_cast<Eigen::Index>(s) * od, od);
        backward_stream<T>(p.streams[s], cache.streams[s], d_out, grad.streams[s]);
    }
}

template <typename T>
struct LossAndGrad {
    double loss = 0;
    std::size_t active = 0;
    PmsmParams<T> grads;
    Mat<T> embeddings;
    double min_abs_preactivation = std::numeric_limits<double>::infinity();
};

/// Triplet loss over `triplets` (indices into `batch`) and the exact gradient
/// of every parameter for the realised hinge active set.
template <typename T>
LossAndGrad<T> loss_and_gradients(const PmsmParams<T>& p, std::span<const CropSet* const> batch,
                                  std::span<const Triplet> triplets, double margin, bool squared = false,
                                  bool track_kinks = false) {
    PmsmCache<T> cache;
    cache.track_kinks = track_kinks;
    LossAndGrad<T> out;
    out.embeddings = forward_pmsm_batch<T>(p, batch, &cache);
    const auto lg = triplet_loss_grad<T>(out.embeddings, triplets, margin, squared);
    out.loss = lg.loss;
    out.active = lg.active;
    out.grads = zero_pmsm<T>(p.arch);
    if (lg.active > 0) backward_pmsm<T>(p, cache, lg.d_embeddings, out.grads);
    out.min_abs_preactivation = cache.min_abs_preactivation();
    return out;
}

/// Batches in the interleaved (anchor, positive, negative, ...) order.
template <typename T>
LossAndGrad<T> loss_and_gradients(const PmsmParams<T>& p, std::span<const CropSet* const> interleaved, double margin,
                                  bool squared = false) {
    if (interleaved.size() % 3 != 0) throw Error("interleaved triplet batch size must be a multiple of 3");
    std::vector<Triplet> ts;
    for (std::size_t i = 0; i < interleaved.size(); i += 3) ts.push_back({i, i + 1, i + 2});
    return loss_and_gradients<T>(p, interleaved, ts, margin, squared);
}

// ---------------------------------------------------------------------------
// Checkpoints: "PMSMCKPT", u32 version, u32 header length, header JSON
// (architecture + metadata), u32 tensor count, then per tensor u32 rows,
// u32 cols and rows*cols float32 values in column-major order. Little-endian.

inline constexpr char kCheckpointMagic[8] = {'P', 'M', 'S', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_checkpoint(std::ostream& os, const PmsmParams<T>& p, const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header{{"architecture", to_json(p.arch)},
                          {"architecture_hash", hex64(arch_hash(p.arch))},
                          {"meta", meta}};
    const std::string h = header.dump();
    os.write(kCheckpointMagic, 8);
    le::put_u32(os, kCheckpointVersion);
    le::put_u32(os, static_cast<std::uint32_t>(h.size()));
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    std::uint32_t count = 0;
    p.for_each_tensor([&](const Tensor<T>&) { ++count; });
    le::put_u32(os, count);
    p.for_each_tensor([&](const Tensor<T>& t) {
        le::put_u32(os, static_cast<std::uint32_t>(t.value.rows()));
        le::put_u32(os, static_cast<std::uint32_t>(t.value.cols()));
        for (Eigen::Index i = 0; i < t.value.size(); ++i) le::put_f32(os, static_cast<float>(t.value.data()[i]));
    });
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const PmsmParams<T>& p,
                     const nlohmann::json& meta = nlohmann::json::object()) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open checkpoint for writing: " + path.string());
    write_checkpoint(os, p, meta);
    if (!os) throw Error("failed writing checkpoint " + path.string());
}

template <typename T>
struct LoadedCheckpoint {
    PmsmParams<T> params;
    nlohmann::json meta;
    std::string architecture_hash;
};

template <typename T = float>
LoadedCheckpoint<T> read_checkpoint(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) throw Error("not a PMSM checkpoint");
    const std::uint32_t version = le::get_u32(is);
    if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t hlen = le::get_u32(is);
    std::string h(hlen, '\0');
    if (!is.read(h.data(), hlen)) throw Error("truncated checkpoint header");
    const auto header = nlohmann::json::parse(h);
    LoadedCheckpoint<T> out;
    out.params = zero_pmsm<T>(pmsm_arch_from_json(header.at("architecture")));
    out.meta = header.value("meta", nlohmann::json::object());
    out.architecture_hash = header.value("architecture_hash", std::string());
    const std::uint32_t count = le::get_u32(is);
    std::uint32_t expected = 0;
    out.params.for_each_tensor([&](const Tensor<T>&) { ++expected; });
    if (count != expected) throw Error("checkpoint tensor count does not match its architecture");
    out.params.for_each_tensor([&](Tensor<T>& t) {
        const std::uint32_t rows = le::get_u32(is), cols = le::get_u32(is);
        if (rows != t.value.rows() || cols != t.value.cols())
            throw Error("checkpoint tensor " + t.name + " has unexpected shape");
        for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = static_cast<T>(le::get_f32(is));
    });
    return out;
}

template <typename T = float>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open checkpoint " + path.string());
    return read_checkpoint<T>(is);
}

// ---------------------------------------------------------------------------

/// Crops every image of `images` and embeds it; column i is image i.
template <typename T>
Mat<T> embed_images(const PmsmParams<T>& p, std::span<const Image* const> images, const PartsFile& parts,
                    unsigned threads = 1, std::size_t chunk = 64) {
    const int px = p.arch.stream.input_px;
    Mat<T> out(p.arch.embed_dim, static_cast<Eigen::Index>(images.size()));
    const std::size_t chunks = (images.size() + chunk - 1) / chunk;
    parallel_for(chunks, threads, [&](std::size_t c) {
        const std::size_t lo = c * chunk, hi = std::min(images.size(), lo + chunk);
        std::vector<CropSet> crops;
        crops.reserve(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) crops.push_back(make_crops(*images[i], parts, px));
        std::vector<const CropSet*> ptrs;
        for (const auto& cs : crops) ptrs.push_back(&cs);
        out.middleCols(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo)) =
            forward_pmsm_batch<T>(p, ptrs);
    });
    return out;
}

}  // namespace pmsm
