#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dpc/entropy.hpp"
#include "dpc/models.hpp"
#include "dpc/samplers.hpp"

namespace dpc {

// ---------------------------------------------------------------------------
// Table construction shared bit-exactly by encode and decode. Symbol order is
// the tensor's own row-major (channel, y, x) order.
// ---------------------------------------------------------------------------

/// Per-element tables for the main latent under the hyper-decoded (mu, sigma).
inline std::vector<CdfTable> main_latent_tables(const Tensor& mu, const Tensor& sigma) {
    int c = mu.dim(0);
    std::size_t plane = static_cast<std::size_t>(mu.dim(1)) * mu.dim(2);
    std::vector<CdfTable> tables;
    tables.reserve(mu.numel());
    for (int ci = 0; ci < c; ++ci) {
        std::size_t base = static_cast<std::size_t>(ci) * plane;
        double mu_min = mu.data[base], mu_max = mu.data[base], smax = sigma.data[base];
        for (std::size_t i = 1; i < plane; ++i) {
            mu_min = std::min(mu_min, mu.data[base + i]);
            mu_max = std::max(mu_max, mu.data[base + i]);
            smax = std::max(smax, sigma.data[base + i]);
        }
        SymbolSupport sup = gaussian_support(mu_min, mu_max, smax);
        for (std::size_t i = 0; i < plane; ++i)
            tables.push_back(build_cdf_table(
                gaussian_pmf_vector(mu.data[base + i], sigma.data[base + i], sup), sup.lo));
    }
    return tables;
}

/// Per-element tables for the hyper-latent under the factorized logistic prior.
inline std::vector<CdfTable> hyper_latent_tables(CodecModel& m, int hz, int wz) {
    const Tensor& loc = m.p("prior.loc").value;
    const Tensor& log_scale = m.p("prior.log_scale").value;
    std::vector<CdfTable> tables;
    tables.reserve(static_cast<std::size_t>(m.cfg.hyper_channels) * hz * wz);
    for (int c = 0; c < m.cfg.hyper_channels; ++c) {
        double lc = loc.data[static_cast<std::size_t>(c)];
        double sc = std::exp(log_scale.data[static_cast<std::size_t>(c)]);
        SymbolSupport sup = logistic_support(lc, sc);
        CdfTable t = build_cdf_table(logistic_pmf_vector(lc, sc, sup), sup.lo);
        for (int i = 0; i < hz * wz; ++i) tables.push_back(t);
    }
    return tables;
}

namespace codec_detail {

inline std::vector<int> clamped_symbols(const Tensor& rounded,
                                        const std::vector<CdfTable>& tables) {
    std::vector<int> syms(rounded.numel());
    for (std::size_t i = 0; i < syms.size(); ++i) {
        int k = static_cast<int>(rounded.data[i]);
        const CdfTable& t = tables[i];
        syms[i] = std::clamp(k, t.sym_min, t.sym_max());
    }
    return syms;
}

inline Tensor tensor_from_symbols(const std::vector<int>& syms, std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < syms.size(); ++i) t.data[i] = static_cast<double>(syms[i]);
    return t;
}

}  // namespace codec_detail

// ---------------------------------------------------------------------------
// Encode
// ---------------------------------------------------------------------------

/// image [C,H,W] in [0,1] -> entropy-coded bitstream. Out-of-support rounded
/// latents are clamped before coding (the decoders see the clamped values).
inline Bitstream encode_image(CodecModel& m, const Tensor& image) {
    if (image.dim(1) > 0xFFFF || image.dim(2) > 0xFFFF)
        throw DataError("encode_image: image dims exceed the header's u16 range");
    Tensor y = analyze(m, image);  // validates channels and divisibility
    int hz = y.dim(1) >> m.cfg.hyper_stages;
    int wz = y.dim(2) >> m.cfg.hyper_stages;

    Graph g;
    Value zv = build_hyper_analysis(g, m, g.leaf(detail::batch_of_one(y)));
    Tensor z_hat = quantize(detail::unbatch(g.val(zv)), QuantizeMode::kRound);
    std::vector<CdfTable> z_tables = hyper_latent_tables(m, hz, wz);
    std::vector<int> z_syms = codec_detail::clamped_symbols(z_hat, z_tables);
    Tensor z_coded = codec_detail::tensor_from_symbols(z_syms, z_hat.shape);

    auto [mu_v, sigma_v] =
        build_hyper_synthesis(g, m, g.leaf(detail::batch_of_one(z_coded)));
    Tensor mu = detail::unbatch(g.val(mu_v));
    Tensor sigma = detail::unbatch(g.val(sigma_v));
    std::vector<CdfTable> y_tables = main_latent_tables(mu, sigma);
    Tensor y_hat = quantize(y, QuantizeMode::kRound);
    std::vector<int> y_syms = codec_detail::clamped_symbols(y_hat, y_tables);

    Bitstream bs;
    bs.header.qp = static_cast<std::uint8_t>(m.qp);
    bs.header.width = static_cast<std::uint16_t>(image.dim(2));
    bs.header.height = static_cast<std::uint16_t>(image.dim(1));
    bs.header.image_channels = static_cast<std::uint8_t>(m.cfg.image_channels);
    bs.header.latent_channels = static_cast<std::uint16_t>(m.cfg.latent_channels);
    bs.header.hyper_channels = static_cast<std::uint16_t>(m.cfg.hyper_channels);
    bs.hyper = range_encode(z_syms, z_tables);
    bs.main = range_encode(y_syms, y_tables);
    return bs;
}

// ---------------------------------------------------------------------------
// Decode
// ---------------------------------------------------------------------------

/// Structural compatibility between a bitstream and a model. The model file
/// carries the full config hash; the bitstream header carries the structural
/// fields checked here.
inline void require_bitstream_matches(CodecModel& m, const Bitstream& bs) {
    if (bs.header.image_channels != m.cfg.image_channels ||
        bs.header.latent_channels != m.cfg.latent_channels ||
        bs.header.hyper_channels != m.cfg.hyper_channels)
        throw DataError("bitstream/model config mismatch (channel layout)");
    if (bs.header.qp != m.qp)
        throw DataError("bitstream qp " + std::to_string(int(bs.header.qp)) +
                        " does not match model qp " + std::to_string(m.qp));
    int ds = m.cfg.downsample_factor();
    if (bs.header.width % ds != 0 || bs.header.height % ds != 0)
        throw DataError("bitstream dims not divisible by the model downsampling factor");
}

struct DecodedLatents {
    Tensor y_hat;
    Tensor z_hat;
};

inline DecodedLatents decode_latents(CodecModel& m, const Bitstream& bs) {
    require_bitstream_matches(m, bs);
    int hy = bs.header.height / m.cfg.downsample_factor();
    int wy = bs.header.width / m.cfg.downsample_factor();
    int hz = hy >> m.cfg.hyper_stages;
    int wz = wy >> m.cfg.hyper_stages;
    std::vector<CdfTable> z_tables = hyper_latent_tables(m, hz, wz);
    std::vector<int> z_syms = range_decode(bs.hyper, z_tables, z_tables.size());
    Tensor z_hat =
        codec_detail::tensor_from_symbols(z_syms, {m.cfg.hyper_channels, hz, wz});

    Graph g;
    auto [mu_v, sigma_v] = build_hyper_synthesis(g, m, g.leaf(detail::batch_of_one(z_hat)));
    Tensor mu = detail::unbatch(g.val(mu_v));
    Tensor sigma = detail::unbatch(g.val(sigma_v));
    std::vector<CdfTable> y_tables = main_latent_tables(mu, sigma);
    std::vector<int> y_syms = range_decode(bs.main, y_tables, y_tables.size());
    Tensor y_hat =
        codec_detail::tensor_from_symbols(y_syms, {m.cfg.latent_channels, hy, wy});
    return {std::move(y_hat), std::move(z_hat)};
}

inline Tensor decode_standard(CodecModel& m, const Bitstream& bs) {
    return synthesize_standard(m, decode_latents(m, bs).y_hat);
}

/// Diffusion decode: the conditioning features are computed once from the
/// decoded latent, then the sampler drives the UNet over its step sequence.
inline Tensor decode_diffusion(CodecModel& m, const Bitstream& bs, const SamplerConfig& cfg) {
    Tensor y_hat = decode_latents(m, bs).y_hat;
    Tensor cond = condition_features(m, y_hat);
    NoiseSchedule sched = m.schedule.make();
    Tensor cond_b = detail::batch_of_one(cond);
    Denoiser den = [&m, &cond_b](const Tensor& xn, const Tensor&, int n) {
        Graph g;
        Value eh = build_unet(g, m, g.leaf(detail::batch_of_one(xn)), g.leaf(cond_b), {n});
        return detail::unbatch(g.val(eh));
    };
    return sample(den, y_hat, cfg, sched,
                  {m.cfg.image_channels, bs.header.height, bs.header.width});
}

}  // namespace dpc
