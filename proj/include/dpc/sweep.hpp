#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dpc/codec.hpp"
#include "dpc/image_io.hpp"
#include "dpc/perception.hpp"
#include "dpc/samplers.hpp"

namespace dpc {

struct SamplerPoint {
    SamplerKind kind = SamplerKind::kDdim;
    int steps = 10;
};

/// The four reference sampler configurations, scaled from their N=1000
/// step counts to the model's schedule length.
inline std::vector<SamplerPoint> default_sampler_points(int n_steps) {
    auto scaled = [n_steps](int ref) {
        long s = std::lround(static_cast<double>(ref) * n_steps / 1000.0);
        return static_cast<int>(std::min<long>(std::max<long>(s, 1), n_steps));
    };
    return {{SamplerKind::kDdim, scaled(10)},
            {SamplerKind::kDdim, scaled(100)},
            {SamplerKind::kDdpm, scaled(100)},
            {SamplerKind::kDdpm, scaled(1000)}};
}

struct SweepSpec {
    std::vector<int> qps;
    std::vector<SamplerPoint> points;  // empty = defaults for the model schedule
    double eta = 0.0;
    int patch = 32;
    std::uint64_t seed = 0;
    int extractor_seed = 77;
    std::string recon_dir;  // when set, reconstructions are written there
};

/// One evaluation record; the aggregate PSNR is computed from the mean MSE
/// over the image set so that the max-psnr row is exactly the min-MSE row.
struct DPPoint {
    int qp = 0;
    std::string decoder;
    std::string sampler;  // empty for the standard decoder
    int steps = 0;        // 0 for the standard decoder
    double bpp = 0.0;
    double psnr_db = 0.0;
    bool psnr_infinite = false;
    double gmsd_v = 0.0;
    double perceptual = 0.0;
    double fid = 0.0;
    double mean_mse = 0.0;
};

namespace sweep_detail {

struct RowAccum {
    double mse_sum = 0.0;
    double gmsd_sum = 0.0;
    double perc_sum = 0.0;
    std::vector<std::vector<double>> recon_features;
};

inline void accumulate(RowAccum& acc, const Tensor& original, const Tensor& recon,
                       const FeatureExtractor& ext, int patch) {
    acc.mse_sum += mean_sq_diff(original, recon);
    acc.gmsd_sum += gmsd(original, recon);
    acc.perc_sum += perceptual_distance(original, recon, ext);
    for (const Tensor& p : patchify(recon, patch))
        acc.recon_features.push_back(pooled_features(ext, p));
}

inline DPPoint finalize(RowAccum& acc, int images,
                        const std::vector<std::vector<double>>& orig_features) {
    DPPoint p;
    p.mean_mse = acc.mse_sum / images;
    if (p.mean_mse == 0.0) {
        p.psnr_infinite = true;
    } else {
        p.psnr_db = 10.0 * std::log10(1.0 / p.mean_mse);
    }
    p.gmsd_v = acc.gmsd_sum / images;
    p.perceptual = acc.perc_sum / images;
    p.fid = fid_proxy(orig_features, acc.recon_features);
    return p;
}

inline std::string recon_name(const DPPoint& row, int image_idx) {
    char buf[128];
    if (row.sampler.empty())
        std::snprintf(buf, sizeof(buf), "recon_qp%d_standard_img%03d.ppm", row.qp, image_idx);
    else
        std::snprintf(buf, sizeof(buf), "recon_qp%d_%s%d_img%03d.ppm", row.qp,
                      row.sampler.c_str(), row.steps, image_idx);
    return buf;
}

}  // namespace sweep_detail

/// Runs the full sweep: per qp one standard-decoder row plus one row per
/// sampler point, every row decoding the same bitstreams (identical bpp).
inline std::vector<DPPoint> run_sweep(const std::vector<CodecModel*>& models,
                                      const std::vector<Tensor>& images, const SweepSpec& spec) {
    if (images.empty()) throw DataError("sweep: no evaluation images");
    FeatureExtractor ext = FeatureExtractor::make(spec.extractor_seed);

    std::vector<std::vector<double>> orig_features;
    for (const Tensor& img : images)
        for (const Tensor& p : patchify(img, spec.patch))
            orig_features.push_back(pooled_features(ext, p));

    std::vector<DPPoint> rows;
    for (std::size_t qi = 0; qi < spec.qps.size(); ++qi) {
        int qp = spec.qps[qi];
        CodecModel* model = nullptr;
        for (CodecModel* m : models)
            if (m->qp == qp) model = m;
        if (!model) throw DataError("sweep: no model provided for qp " + std::to_string(qp));

        std::vector<SamplerPoint> points =
            spec.points.empty() ? default_sampler_points(model->schedule.n_steps) : spec.points;
        for (const SamplerPoint& pt : points)
            if (pt.steps > model->schedule.n_steps)
                throw DataError("sweep: sampler steps " + std::to_string(pt.steps) +
                                " exceed schedule length " +
                                std::to_string(model->schedule.n_steps));

        std::vector<Bitstream> streams;
        double bpp_sum = 0.0;
        for (const Tensor& img : images) {
            streams.push_back(encode_image(*model, img));
            bpp_sum += bpp_of(streams.back());
        }
        double bpp_mean = bpp_sum / static_cast<double>(images.size());

        auto emit = [&](const std::string& decoder, const std::string& sampler_name_str,
                        int steps, auto decode_fn) {
            sweep_detail::RowAccum acc;
            DPPoint row;
            row.qp = qp;
            row.decoder = decoder;
            row.sampler = sampler_name_str;
            row.steps = steps;
            for (std::size_t i = 0; i < images.size(); ++i) {
                Tensor recon = decode_fn(streams[i], i);
                sweep_detail::accumulate(acc, images[i], recon, ext, spec.patch);
                if (!spec.recon_dir.empty())
                    write_image(spec.recon_dir + "/" +
                                    sweep_detail::recon_name(row, static_cast<int>(i)),
                                recon);
            }
            DPPoint done = sweep_detail::finalize(acc, static_cast<int>(images.size()),
                                                  orig_features);
            done.qp = row.qp;
            done.decoder = row.decoder;
            done.sampler = row.sampler;
            done.steps = row.steps;
            done.bpp = bpp_mean;
            rows.push_back(done);
        };

        emit("standard", "", 0, [&](const Bitstream& bs, std::size_t) {
            return decode_standard(*model, bs);
        });
        for (std::size_t pi = 0; pi < points.size(); ++pi) {
            const SamplerPoint& pt = points[pi];
            emit("diffusion", sampler_name(pt.kind), pt.steps,
                 [&](const Bitstream& bs, std::size_t img_idx) {
                     SamplerConfig cfg;
                     cfg.kind = pt.kind;
                     cfg.steps = pt.steps;
                     cfg.eta = spec.eta;
                     cfg.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(qp),
                                            static_cast<std::uint64_t>(pi),
                                            static_cast<std::uint64_t>(img_idx));
                     return decode_diffusion(*model, bs, cfg);
                 });
        }
    }
    return rows;
}

inline void write_sweep_csv(const std::string& path, const std::vector<DPPoint>& rows) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write sweep csv '" + path + "'");
    f << "qp,decoder,sampler,steps,bpp,psnr_db,gmsd,perceptual_proxy,fid_proxy\n";
    char buf[256];
    for (const DPPoint& r : rows) {
        std::string steps = r.sampler.empty() ? "" : std::to_string(r.steps);
        std::string psnr = r.psnr_infinite ? "inf" : [&] {
            char t[40];
            std::snprintf(t, sizeof(t), "%.6f", r.psnr_db);
            return std::string(t);
        }();
        std::snprintf(buf, sizeof(buf), "%d,%s,%s,%s,%.6f,%s,%.6f,%.6f,%.6f\n", r.qp,
                      r.decoder.c_str(), r.sampler.c_str(), steps.c_str(), r.bpp, psnr.c_str(),
                      r.gmsd_v, r.perceptual, r.fid);
        f << buf;
    }
}

}  // namespace dpc
