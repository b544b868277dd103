#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dpc/codec.hpp"
#include "dpc/diffusion.hpp"
#include "dpc/models.hpp"
#include "dpc/perception.hpp"
#include "dpc/random.hpp"

namespace dpc {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamOptimizer {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int t = 0;

    explicit AdamOptimizer(double learning_rate = 1e-3) : lr(learning_rate) {}

    /// One update over the given parameters; non-trainable entries are
    /// skipped entirely (no moments are kept for them). Gradients are
    /// consumed and reset to zero.
    void step(const std::vector<Parameter*>& params) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (!params[i]->trainable) continue;
                m_[i] = Tensor(params[i]->value.shape);
                v_[i] = Tensor(params[i]->value.shape);
            }
        }
        if (m_.size() != params.size())
            throw InternalError("adam: parameter set changed between steps");
        ++t;
        double c1 = 1.0 - std::pow(beta1, t);
        double c2 = 1.0 - std::pow(beta2, t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Parameter& p = *params[i];
            if (!p.trainable) continue;
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t k = 0; k < p.value.data.size(); ++k) {
                double g = p.grad.data[k];
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * g;
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * g * g;
                double mh = m.data[k] / c1;
                double vh = v.data[k] / c2;
                p.value.data[k] -= lr * mh / (std::sqrt(vh) + eps);
                p.grad.data[k] = 0.0;
            }
        }
    }

private:
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct RdStats {
    double loss = 0.0;
    double mse = 0.0;
    double bpp = 0.0;
};

/// Rate-distortion objective on a batch: MSE(g_s(y_noisy), x) + lambda * bpp
/// with noise-relaxed latents standing in for rounding during training.
inline RdStats rd_loss(CodecModel& m, const Tensor& batch, double lambda, RandomStream& rng,
                       bool with_grad = false) {
    if (batch.rank() != 4) throw DataError("rd_loss: expected [B,C,H,W]");
    Graph g;
    Value x = g.leaf(batch);
    Value y = build_analysis(g, m, x);
    Tensor u_y(g.val(y).shape);
    rng.fill_uniform(u_y, -0.5, 0.5);
    Value y_noisy = add(g, y, g.leaf(std::move(u_y)));
    Value z = build_hyper_analysis(g, m, y);
    Tensor u_z(g.val(z).shape);
    rng.fill_uniform(u_z, -0.5, 0.5);
    Value z_noisy = add(g, z, g.leaf(std::move(u_z)));
    auto [mu, sigma] = build_hyper_synthesis(g, m, z_noisy);
    Value bits_y = gaussian_bits(g, y_noisy, mu, sigma);
    Value bits_z = logistic_bits(g, z_noisy, g.param(m.p("prior.loc")),
                                 g.param(m.p("prior.log_scale")));
    Value x_hat = build_synthesis(g, m, y_noisy);
    Value dist = mse(g, x_hat, x);
    double inv_pixels =
        1.0 / (static_cast<double>(batch.dim(0)) * batch.dim(2) * batch.dim(3));
    Value bpp = scale(g, add(g, bits_y, bits_z), inv_pixels);
    Value loss = add(g, dist, scale(g, bpp, lambda));
    RdStats stats{g.val(loss).data[0], g.val(dist).data[0], g.val(bpp).data[0]};
    if (!std::isfinite(stats.loss))
        throw InternalError("rd_loss: non-finite forward value at " + g.first_non_finite());
    if (with_grad) g.backward(loss);
    return stats;
}

struct DiffusionStats {
    double total = 0.0;
    double l_simple = 0.0;
    double perceptual = 0.0;
};

/// Noise-prediction + perceptual objective of the diffusion decoder. The
/// encoder and prior must be frozen; the latent enters only as round(g_a(x)).
inline DiffusionStats diffusion_loss(CodecModel& m, const Tensor& batch, const NoiseSchedule& s,
                                     const FeatureExtractor& ext, double perceptual_weight,
                                     RandomStream& rng, bool with_grad = false) {
    if (batch.rank() != 4) throw DataError("diffusion_loss: expected [B,C,H,W]");
    if (!m.codec_frozen())
        throw DataError("diffusion_loss: encoder/prior parameters must be frozen");
    int b = batch.dim(0);

    Graph g;
    Value x = g.leaf(batch);
    Tensor y_hat = quantize(g.val(build_analysis(g, m, x)), QuantizeMode::kRound);

    std::vector<int> steps(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) steps[static_cast<std::size_t>(i)] = rng.uniform_int(1, s.n_steps);
    Tensor eps(batch.shape);
    rng.fill_normal(eps);

    std::size_t per = batch.numel() / static_cast<std::size_t>(b);
    Tensor x_n(batch.shape);
    std::vector<double> sb(static_cast<std::size_t>(b)), inv_sa(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
        int n = steps[static_cast<std::size_t>(i)];
        double a = s.sqrt_alpha_bar[static_cast<std::size_t>(n - 1)];
        double bb = s.sqrt_one_minus_alpha_bar[static_cast<std::size_t>(n - 1)];
        sb[static_cast<std::size_t>(i)] = bb;
        inv_sa[static_cast<std::size_t>(i)] = 1.0 / a;
        for (std::size_t k = 0; k < per; ++k) {
            std::size_t idx = static_cast<std::size_t>(i) * per + k;
            x_n.data[idx] = a * batch.data[idx] + bb * eps.data[idx];
        }
    }

    Value cond = build_cond_decoder(g, m, g.leaf(y_hat));
    Value xn_leaf = g.leaf(std::move(x_n));
    Value eps_hat = build_unet(g, m, xn_leaf, cond, steps);
    Value simple = mse(g, eps_hat, g.leaf(std::move(eps)));
    Value x0_hat =
        scale_per_sample(g, sub(g, xn_leaf, scale_per_sample(g, eps_hat, sb)), inv_sa);
    Value perc = build_perceptual_distance(g, ext, x, x0_hat);
    Value total = add(g, simple, scale(g, perc, perceptual_weight));
    DiffusionStats stats{g.val(total).data[0], g.val(simple).data[0], g.val(perc).data[0]};
    if (!std::isfinite(stats.total))
        throw InternalError("diffusion_loss: non-finite forward value at " +
                            g.first_non_finite());
    if (with_grad) g.backward(total);
    return stats;
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

inline Tensor bilinear_resize(const Tensor& img, int out_h, int out_w) {
    if (img.rank() != 3) throw DataError("bilinear_resize: expected [C,H,W]");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor out({c, out_h, out_w});
    double sy = static_cast<double>(h) / out_h;
    double sx = static_cast<double>(w) / out_w;
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < out_h; ++y) {
            double fy = std::min(std::max((y + 0.5) * sy - 0.5, 0.0),
                                 static_cast<double>(h - 1));
            int y0 = static_cast<int>(fy);
            int y1 = std::min(y0 + 1, h - 1);
            double wy = fy - y0;
            for (int x = 0; x < out_w; ++x) {
                double fx = std::min(std::max((x + 0.5) * sx - 0.5, 0.0),
                                     static_cast<double>(w - 1));
                int x0 = static_cast<int>(fx);
                int x1 = std::min(x0 + 1, w - 1);
                double wx = fx - x0;
                auto at = [&](int yy, int xx) {
                    return img.data[(static_cast<std::size_t>(ci) * h + yy) * w + xx];
                };
                out.data[(static_cast<std::size_t>(ci) * out_h + y) * out_w + x] =
                    (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                    wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
            }
        }
    return out;
}

/// Scale uniformly drawn from [1, min_dim/out], bilinear resize by 1/scale,
/// then a uniform random crop to out x out.
inline Tensor random_crop_rescale(const Tensor& img, int out, RandomStream& rng) {
    if (img.rank() != 3) throw DataError("random_crop_rescale: expected [C,H,W]");
    int h = img.dim(1), w = img.dim(2);
    if (h < out || w < out)
        throw DataError("random_crop_rescale: image " + img.shape_str() +
                        " smaller than crop size " + std::to_string(out));
    double smax = static_cast<double>(std::min(h, w)) / out;
    double s = rng.uniform(1.0, smax);
    int h2 = std::max(out, static_cast<int>(std::floor(h / s)));
    int w2 = std::max(out, static_cast<int>(std::floor(w / s)));
    Tensor resized = (h2 == h && w2 == w) ? img : bilinear_resize(img, h2, w2);
    int oy = rng.uniform_int(0, h2 - out);
    int ox = rng.uniform_int(0, w2 - out);
    Tensor crop({img.dim(0), out, out});
    for (int c = 0; c < img.dim(0); ++c)
        for (int y = 0; y < out; ++y)
            for (int x = 0; x < out; ++x)
                crop.data[(static_cast<std::size_t>(c) * out + y) * out + x] =
                    resized.data[(static_cast<std::size_t>(c) * h2 + oy + y) * w2 + ox + x];
    return crop;
}

/// Seeded synthetic image: smooth color gradient + Gaussian blobs + oriented
/// sinusoid textures + a few filled convex polygons.
inline Tensor make_synthetic_image(int size, RandomStream& rng) {
    Tensor img({3, size, size});
    double base[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.25, 0.75);
        gx[c] = rng.uniform(-0.3, 0.3);
        gy[c] = rng.uniform(-0.3, 0.3);
    }
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                img.data[(static_cast<std::size_t>(c) * size + y) * size + x] =
                    base[c] + gx[c] * x / size + gy[c] * y / size;

    int blobs = rng.uniform_int(1, 3);
    for (int bi = 0; bi < blobs; ++bi) {
        double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
        double r = rng.uniform(0.10, 0.30) * size;
        double amp[3];
        for (double& a : amp) a = rng.uniform(-0.35, 0.35);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                double k = std::exp(-d2 / (2.0 * r * r));
                for (int c = 0; c < 3; ++c)
                    img.data[(static_cast<std::size_t>(c) * size + y) * size + x] += amp[c] * k;
            }
    }

    int waves = rng.uniform_int(1, 2);
    for (int wi = 0; wi < waves; ++wi) {
        double theta = rng.uniform(0, 3.14159265358979);
        double freq = rng.uniform(2.0, 8.0);
        double phase = rng.uniform(0, 6.28318530717959);
        double ct = std::cos(theta), st = std::sin(theta);
        double amp[3];
        for (double& a : amp) a = rng.uniform(-0.15, 0.15);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double v = std::sin(6.28318530717959 * freq * (x * ct + y * st) / size + phase);
                for (int c = 0; c < 3; ++c)
                    img.data[(static_cast<std::size_t>(c) * size + y) * size + x] += amp[c] * v;
            }
    }

    int polys = rng.uniform_int(0, 2);
    for (int pi = 0; pi < polys; ++pi) {
        int verts = rng.uniform_int(4, 6);
        double cx = rng.uniform(0.2, 0.8) * size, cy = rng.uniform(0.2, 0.8) * size;
        std::vector<double> ang(static_cast<std::size_t>(verts)), rad(static_cast<std::size_t>(verts));
        for (int v = 0; v < verts; ++v) {
            ang[static_cast<std::size_t>(v)] = rng.uniform(0, 6.28318530717959);
            rad[static_cast<std::size_t>(v)] = rng.uniform(0.10, 0.35) * size;
        }
        std::sort(ang.begin(), ang.end());
        std::vector<double> px(static_cast<std::size_t>(verts)), py(static_cast<std::size_t>(verts));
        for (int v = 0; v < verts; ++v) {
            px[static_cast<std::size_t>(v)] = cx + rad[static_cast<std::size_t>(v)] *
                                                       std::cos(ang[static_cast<std::size_t>(v)]);
            py[static_cast<std::size_t>(v)] = cy + rad[static_cast<std::size_t>(v)] *
                                                       std::sin(ang[static_cast<std::size_t>(v)]);
        }
        double color[3];
        for (double& c : color) c = rng.uniform(0.1, 0.9);
        const double alpha = 0.6;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                bool inside = true;
                for (int v = 0; v < verts && inside; ++v) {
                    int nv = (v + 1) % verts;
                    double ex = px[static_cast<std::size_t>(nv)] - px[static_cast<std::size_t>(v)];
                    double ey = py[static_cast<std::size_t>(nv)] - py[static_cast<std::size_t>(v)];
                    double qx = x - px[static_cast<std::size_t>(v)];
                    double qy = y - py[static_cast<std::size_t>(v)];
                    if (ex * qy - ey * qx < 0.0) inside = false;
                }
                if (!inside) continue;
                for (int c = 0; c < 3; ++c) {
                    double& v = img.data[(static_cast<std::size_t>(c) * size + y) * size + x];
                    v = (1.0 - alpha) * v + alpha * color[c];
                }
            }
    }
    return clamp01(std::move(img));
}

/// Images are a pure function of (seed, index), independent of count.
inline std::vector<Tensor> make_synthetic_dataset(int count, int size, std::uint64_t seed) {
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        RandomStream rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        out.push_back(make_synthetic_image(size, rng));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

enum class TrainPhase { kBase, kDiffusion };

struct TrainConfig {
    TrainPhase phase = TrainPhase::kBase;
    int qp = 2;
    double lambda_override = -1.0;  // > 0 wins over the qp table
    double lr = 1e-3;
    int steps = 5000;  // desk defaults: 5k base, 20k diffusion
    int batch = 16;
    int crop = 32;
    std::uint64_t seed = 0;
    double perceptual_weight = 1.0;
    int perceptual_seed = 77;
    int ckpt_every = 0;  // 0 = only the final save

    double lambda() const { return lambda_override > 0.0 ? lambda_override : qp_lambda(qp); }
};

struct TraceRow {
    int step = 0;
    double total = 0.0;
    double a = 0.0;  // distortion | l_simple
    double b = 0.0;  // rate bpp   | perceptual
};

struct TrainReport {
    std::vector<TraceRow> trace;
};

inline void write_trace_csv(const std::string& path, TrainPhase phase,
                            const std::vector<TraceRow>& trace) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write trace file '" + path + "'");
    f << (phase == TrainPhase::kBase ? "step,total,distortion,rate_bpp\n"
                                     : "step,total,l_simple,perceptual\n");
    char line[160];
    for (const TraceRow& r : trace) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", r.step, r.total, r.a, r.b);
        f << line;
    }
}

namespace train_detail {

inline Tensor adapt_channels(const Tensor& img, int want) {
    if (img.dim(0) == want) return img;
    if (img.dim(0) == 1 && want == 3) {
        Tensor out({3, img.dim(1), img.dim(2)});
        for (int c = 0; c < 3; ++c)
            std::copy(img.data.begin(), img.data.end(),
                      out.data.begin() + static_cast<std::size_t>(c) * img.numel());
        return out;
    }
    throw DataError("dataset image has " + std::to_string(img.dim(0)) +
                    " channels, model expects " + std::to_string(want));
}

}  // namespace train_detail

/// Adam over shuffled random crops; per-step loss trace; checkpoints to
/// ckpt_path at the end and every ckpt_every steps when given. The diffusion
/// phase freezes the codec parameters first and verifies they stay
/// bit-identical.
inline TrainReport train(CodecModel& m, const std::vector<Tensor>& dataset,
                         const TrainConfig& cfg, const std::string& trace_path = "",
                         const std::string& ckpt_path = "") {
    if (dataset.empty()) throw DataError("train: empty dataset");
    int ds = m.cfg.downsample_factor();
    if (cfg.crop % ds != 0)
        throw DataError("train: crop size must be divisible by " + std::to_string(ds));
    if (cfg.phase == TrainPhase::kDiffusion) {
        if (cfg.crop % m.cfg.unet_downsample_factor() != 0)
            throw DataError("train: crop size must be divisible by the UNet factor " +
                            std::to_string(m.cfg.unet_downsample_factor()));
        m.freeze_codec();
    }

    NoiseSchedule sched = m.schedule.make();
    FeatureExtractor ext = FeatureExtractor::make(cfg.perceptual_seed);
    RandomStream rng(cfg.seed);
    AdamOptimizer adam(cfg.lr);
    std::vector<Parameter*> params = m.all_params();
    m.zero_grads();

    TrainReport report;
    report.trace.reserve(static_cast<std::size_t>(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        Tensor batch({cfg.batch, m.cfg.image_channels, cfg.crop, cfg.crop});
        std::size_t per = batch.numel() / static_cast<std::size_t>(cfg.batch);
        for (int bi = 0; bi < cfg.batch; ++bi) {
            int idx = rng.uniform_int(0, static_cast<int>(dataset.size()) - 1);
            Tensor crop = random_crop_rescale(
                train_detail::adapt_channels(dataset[static_cast<std::size_t>(idx)],
                                             m.cfg.image_channels),
                cfg.crop, rng);
            std::copy(crop.data.begin(), crop.data.end(),
                      batch.data.begin() + static_cast<std::size_t>(bi) * per);
        }
        TraceRow row;
        row.step = step;
        try {
            if (cfg.phase == TrainPhase::kBase) {
                RdStats s = rd_loss(m, batch, cfg.lambda(), rng, true);
                row.total = s.loss;
                row.a = s.mse;
                row.b = s.bpp;
            } else {
                DiffusionStats s =
                    diffusion_loss(m, batch, sched, ext, cfg.perceptual_weight, rng, true);
                row.total = s.total;
                row.a = s.l_simple;
                row.b = s.perceptual;
            }
        } catch (const InternalError& e) {
            throw InternalError("train aborted at step " + std::to_string(step) + ": " +
                                e.what());
        }
        adam.step(params);
        report.trace.push_back(row);
        if (!ckpt_path.empty() && cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0)
            m.save(ckpt_path);
    }
    if (!ckpt_path.empty()) m.save(ckpt_path);
    if (!trace_path.empty()) write_trace_csv(trace_path, cfg.phase, report.trace);
    return report;
}

}  // namespace dpc
