#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dpc/errors.hpp"
#include "dpc/graph.hpp"
#include "dpc/linalg.hpp"
#include "dpc/random.hpp"
#include "dpc/tensor.hpp"

namespace dpc {

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

struct PsnrResult {
    double db = 0.0;
    bool is_infinite = false;
};

inline PsnrResult psnr(const Tensor& x, const Tensor& x_hat, double peak) {
    require_same_shape(x, x_hat, "psnr");
    if (!(peak > 0.0)) throw DataError("psnr: peak must be positive");
    double m = mean_sq_diff(x, x_hat);
    if (m == 0.0) return {0.0, true};
    return {10.0 * std::log10(peak * peak / m), false};
}

// ---------------------------------------------------------------------------
// GMSD
// ---------------------------------------------------------------------------

namespace gmsd_detail {

inline std::vector<double> to_luma(const Tensor& img, int& h, int& w) {
    if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw DataError("gmsd: expected [1,H,W] or [3,H,W], got " + img.shape_str());
    h = img.dim(1);
    w = img.dim(2);
    std::vector<double> y(static_cast<std::size_t>(h) * w);
    std::size_t plane = y.size();
    if (img.dim(0) == 1) {
        std::copy(img.data.begin(), img.data.end(), y.begin());
    } else {
        for (std::size_t i = 0; i < plane; ++i)
            y[i] = 0.299 * img.data[i] + 0.587 * img.data[plane + i] +
                   0.114 * img.data[2 * plane + i];
    }
    return y;
}

// Prewitt gradient magnitude on interior pixels (1/3-normalized taps).
inline std::vector<double> prewitt_mag(const std::vector<double>& y, int h, int w) {
    std::vector<double> m(static_cast<std::size_t>(h - 2) * (w - 2));
    for (int i = 1; i < h - 1; ++i)
        for (int j = 1; j < w - 1; ++j) {
            auto at = [&](int r, int c) { return y[static_cast<std::size_t>(r) * w + c]; };
            double gx = (at(i - 1, j - 1) + at(i, j - 1) + at(i + 1, j - 1) -
                         at(i - 1, j + 1) - at(i, j + 1) - at(i + 1, j + 1)) /
                        3.0;
            double gy = (at(i - 1, j - 1) + at(i - 1, j) + at(i - 1, j + 1) -
                         at(i + 1, j - 1) - at(i + 1, j) - at(i + 1, j + 1)) /
                        3.0;
            m[static_cast<std::size_t>(i - 1) * (w - 2) + (j - 1)] =
                std::sqrt(gx * gx + gy * gy);
        }
    return m;
}

}  // namespace gmsd_detail

/// Gradient-magnitude similarity deviation; 0 means identical structure.
/// c = 0.0026 (the published 170 rescaled from [0,255]^2 to [0,1]^2).
inline double gmsd(const Tensor& x, const Tensor& x_hat) {
    require_same_shape(x, x_hat, "gmsd");
    constexpr double kC = 0.0026;
    int h = 0, w = 0;
    std::vector<double> ya = gmsd_detail::to_luma(x, h, w);
    int h2 = 0, w2 = 0;
    std::vector<double> yb = gmsd_detail::to_luma(x_hat, h2, w2);
    if (h < 3 || w < 3) throw DataError("gmsd: image smaller than 3x3");
    std::vector<double> ma = gmsd_detail::prewitt_mag(ya, h, w);
    std::vector<double> mb = gmsd_detail::prewitt_mag(yb, h, w);
    double mean = 0.0;
    std::vector<double> sim(ma.size());
    for (std::size_t i = 0; i < ma.size(); ++i) {
        // shared rounded subterms keep sim == 1 exactly on identical inputs
        double prod = ma[i] * mb[i];
        double sumsq = ma[i] * ma[i] + mb[i] * mb[i];
        sim[i] = (2.0 * prod + kC) / (sumsq + kC);
        mean += sim[i];
    }
    mean /= static_cast<double>(sim.size());
    double var = 0.0;
    for (double s : sim) var += (s - mean) * (s - mean);
    return std::sqrt(var / static_cast<double>(sim.size()));
}

// ---------------------------------------------------------------------------
// Fixed random feature extractor (the perceptual/FID backbone stand-in)
// ---------------------------------------------------------------------------

struct FeatureExtractor {
    int seed = 0;
    Tensor w1, w2, w3;  // 3 stride-2 conv stacks: 3 -> 16 -> 32 -> 64
    Tensor b1, b2, b3;  // zero biases, kept for the conv interface

    static FeatureExtractor make(int seed) {
        FeatureExtractor e;
        e.seed = seed;
        RandomStream rng(static_cast<std::uint64_t>(seed));
        auto he = [&rng](std::vector<int> shape) {
            Tensor t(std::move(shape));
            double fan_in = static_cast<double>(t.dim(1)) * t.dim(2) * t.dim(3);
            double s = std::sqrt(2.0 / fan_in);
            for (double& v : t.data) v = s * rng.normal();
            return t;
        };
        e.w1 = he({16, 3, 3, 3});
        e.w2 = he({32, 16, 3, 3});
        e.w3 = he({64, 32, 3, 3});
        e.b1 = Tensor({16});
        e.b2 = Tensor({32});
        e.b3 = Tensor({64});
        return e;
    }
};

/// Replicates a grayscale batch to 3 channels so the extractor always sees RGB.
inline Value expand_to_rgb(Graph& g, Value x) {
    if (g.val(x).dim(1) == 3) return x;
    if (g.val(x).dim(1) != 1) throw DataError("feature extractor expects 1 or 3 channels");
    Value c2 = concat_channels(g, x, x);
    return concat_channels(g, c2, x);
}

/// The three relu feature maps of the extractor. x: [B,C,H,W] with C in {1,3}.
inline std::vector<Value> extractor_features(Graph& g, const FeatureExtractor& e, Value x) {
    Value rgb = expand_to_rgb(g, x);
    Value f1 = relu(g, conv2d(g, rgb, g.leaf(e.w1), g.leaf(e.b1), 2, 1));
    Value f2 = relu(g, conv2d(g, f1, g.leaf(e.w2), g.leaf(e.b2), 2, 1));
    Value f3 = relu(g, conv2d(g, f2, g.leaf(e.w3), g.leaf(e.b3), 2, 1));
    return {f1, f2, f3};
}

/// Differentiable perceptual distance: mean squared difference between
/// channel-unit-normalized feature maps, averaged over the three layers.
inline Value build_perceptual_distance(Graph& g, const FeatureExtractor& e, Value a, Value b) {
    std::vector<Value> fa = extractor_features(g, e, a);
    std::vector<Value> fb = extractor_features(g, e, b);
    Value total = Value{-1};
    for (std::size_t l = 0; l < fa.size(); ++l) {
        Value na = channel_unit_normalize(g, fa[l]);
        Value nb = channel_unit_normalize(g, fb[l]);
        Value term = mse(g, na, nb);
        total = l == 0 ? term : add(g, total, term);
    }
    return scale(g, total, 1.0 / static_cast<double>(fa.size()));
}

/// Scalar evaluation of the perceptual proxy on [C,H,W] images.
inline double perceptual_distance(const Tensor& x, const Tensor& x_hat,
                                  const FeatureExtractor& e) {
    require_same_shape(x, x_hat, "perceptual_distance");
    if (x.rank() != 3) throw DataError("perceptual_distance: expected [C,H,W]");
    Graph g;
    Tensor xa({1, x.dim(0), x.dim(1), x.dim(2)}, x.data);
    Tensor xb({1, x.dim(0), x.dim(1), x.dim(2)}, x_hat.data);
    return g.val(build_perceptual_distance(g, e, g.leaf(xa), g.leaf(xb))).data[0];
}

/// 64-dim embedding: global average of the last feature map.
inline std::vector<double> pooled_features(const FeatureExtractor& e, const Tensor& img) {
    if (img.rank() != 3) throw DataError("pooled_features: expected [C,H,W]");
    Graph g;
    Tensor x({1, img.dim(0), img.dim(1), img.dim(2)}, img.data);
    std::vector<Value> f = extractor_features(g, e, g.leaf(x));
    const Tensor& top = g.val(f[2]);
    int c = top.dim(1);
    std::size_t plane = static_cast<std::size_t>(top.dim(2)) * top.dim(3);
    std::vector<double> out(static_cast<std::size_t>(c));
    for (int ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        const double* p = top.ptr() + static_cast<std::size_t>(ci) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        out[static_cast<std::size_t>(ci)] = acc / static_cast<double>(plane);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patches and the Frechet proxy
// ---------------------------------------------------------------------------

/// Non-overlapping patch x patch crops in row-major order; right/bottom
/// remainders are discarded.
inline std::vector<Tensor> patchify(const Tensor& img, int patch) {
    if (img.rank() != 3) throw DataError("patchify: expected [C,H,W]");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (patch < 1 || patch > std::min(h, w))
        throw DataError("patchify: patch " + std::to_string(patch) + " too large for " +
                        img.shape_str());
    std::vector<Tensor> out;
    for (int py = 0; py + patch <= h; py += patch)
        for (int px = 0; px + patch <= w; px += patch) {
            Tensor t({c, patch, patch});
            for (int ci = 0; ci < c; ++ci)
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        t.data[(static_cast<std::size_t>(ci) * patch + y) * patch + x] =
                            img.data[(static_cast<std::size_t>(ci) * h + py + y) * w + px + x];
            out.push_back(std::move(t));
        }
    return out;
}

/// Frechet distance between Gaussian fits of two feature sets:
/// ||mu_a-mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), computed through the
/// symmetric form sqrt(sqrt(Sa) Sb sqrt(Sa)) with negative eigenvalues
/// clipped at zero.
inline double fid_proxy(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b) {
    if (a.size() < 2 || b.size() < 2) throw DataError("fid_proxy: fewer than 2 samples");
    std::size_t d = a[0].size();
    for (const auto& v : a)
        if (v.size() != d) throw DataError("fid_proxy: inconsistent feature dims");
    for (const auto& v : b)
        if (v.size() != d) throw DataError("fid_proxy: inconsistent feature dims");

    auto fit = [d](const std::vector<std::vector<double>>& s, std::vector<double>& mu, Mat& cov) {
        mu.assign(d, 0.0);
        for (const auto& v : s)
            for (std::size_t i = 0; i < d; ++i) mu[i] += v[i];
        for (std::size_t i = 0; i < d; ++i) mu[i] /= static_cast<double>(s.size());
        cov = Mat(static_cast<int>(d));
        for (const auto& v : s)
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    cov.at(static_cast<int>(i), static_cast<int>(j)) +=
                        (v[i] - mu[i]) * (v[j] - mu[j]);
        double denom = static_cast<double>(s.size()) - 1.0;
        for (double& x : cov.a) x /= denom;
    };

    std::vector<double> mu_a, mu_b;
    Mat ca, cb;
    fit(a, mu_a, ca);
    fit(b, mu_b, cb);

    double dist = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double diff = mu_a[i] - mu_b[i];
        dist += diff * diff;
    }
    Mat sa = sqrtm_psd(ca);
    Mat inner = mat_mul(mat_mul(sa, cb), sa);
    std::vector<double> vals;
    Mat vecs;
    jacobi_eigen_sym(inner, vals, vecs);
    double tr_sqrt = 0.0;
    for (double v : vals)
        if (v > 0.0) tr_sqrt += std::sqrt(v);
    dist += trace(ca) + trace(cb) - 2.0 * tr_sqrt;
    return std::max(dist, 0.0);
}

}  // namespace dpc
