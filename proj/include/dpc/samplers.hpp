#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dpc/diffusion.hpp"
#include "dpc/errors.hpp"
#include "dpc/random.hpp"
#include "dpc/tensor.hpp"

namespace dpc {

enum class SamplerKind { kDdpm, kDdim };

inline const char* sampler_name(SamplerKind k) {
    return k == SamplerKind::kDdpm ? "ddpm" : "ddim";
}

inline SamplerKind sampler_from_name(const std::string& s) {
    if (s == "ddpm") return SamplerKind::kDdpm;
    if (s == "ddim") return SamplerKind::kDdim;
    throw UsageError("unknown sampler '" + s + "' (expected ddpm or ddim)");
}

struct SamplerConfig {
    SamplerKind kind = SamplerKind::kDdim;
    int steps = 10;
    double eta = 0.0;  // ddim only; 0 = deterministic
    std::uint64_t seed = 0;
};

/// Strictly increasing step indices tau_1..tau_K with tau_K = N,
/// tau_i = round(i*N/K). Spacing N/K >= 1 keeps the rounds distinct.
inline std::vector<int> step_subsequence(int n, int k) {
    if (k < 1 || k > n)
        throw DataError("step_subsequence: need 1 <= K <= N, got K=" + std::to_string(k) +
                        " N=" + std::to_string(n));
    std::vector<int> tau(static_cast<std::size_t>(k));
    for (int i = 1; i <= k; ++i)
        tau[static_cast<std::size_t>(i - 1)] =
            static_cast<int>(std::llround(static_cast<double>(i) * n / k));
    return tau;
}

/// One DDIM update from step n_cur down to n_prev (0 allowed; alpha_bar(0)=1).
/// sigma = eta * sqrt((1-ab_prev)/(1-ab_cur)) * sqrt(1 - ab_cur/ab_prev).
inline Tensor ddim_step(const NoiseSchedule& s, const Tensor& xn, const Tensor& eps_hat,
                        int n_cur, int n_prev, double eta, const Tensor& z) {
    s.require_step(n_cur);
    if (n_prev < 0 || n_prev >= n_cur)
        throw DataError("ddim_step: need 0 <= n_prev < n_cur");
    require_same_shape(xn, eps_hat, "ddim_step");
    require_same_shape(xn, z, "ddim_step noise");
    double ab_cur = s.alpha_bar_at(n_cur);
    double ab_prev = s.alpha_bar_at(n_prev);
    double sigma = 0.0;
    if (eta != 0.0 && n_prev > 0)
        sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_cur)) *
                std::sqrt(1.0 - ab_cur / ab_prev);
    double dir_sq = 1.0 - ab_prev - sigma * sigma;
    if (dir_sq < -1e-12)
        throw InternalError("ddim_step: sigma^2 exceeds 1 - alpha_bar_prev");
    double dir = std::sqrt(std::max(dir_sq, 0.0));
    double sa_cur = std::sqrt(ab_cur);
    double sb_cur = std::sqrt(1.0 - ab_cur);
    double sa_prev = std::sqrt(ab_prev);
    Tensor out(xn.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        double x0 = (xn.data[i] - sb_cur * eps_hat.data[i]) / sa_cur;
        out.data[i] = sa_prev * x0 + dir * eps_hat.data[i] + sigma * z.data[i];
    }
    return out;
}

/// One ancestral DDPM update at step n with posterior variance
/// beta_tilde_n = (1-ab_{n-1})/(1-ab_n) * beta_n; the final step (n=1) is
/// noiseless and rejects a nonzero z.
inline Tensor ddpm_step(const NoiseSchedule& s, const Tensor& xn, const Tensor& eps_hat, int n,
                        const Tensor& z) {
    s.require_step(n);
    require_same_shape(xn, eps_hat, "ddpm_step");
    require_same_shape(xn, z, "ddpm_step noise");
    if (n == 1) {
        for (double v : z.data)
            if (v != 0.0) throw DataError("ddpm_step: z must be zero at n=1 (noiseless step)");
    }
    double beta = s.beta[static_cast<std::size_t>(n - 1)];
    double sb = s.sqrt_one_minus_alpha_bar[static_cast<std::size_t>(n - 1)];
    double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    double noise_scale = std::sqrt(s.posterior_variance[static_cast<std::size_t>(n - 1)]);
    Tensor out(xn.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = inv_sqrt_alpha * (xn.data[i] - beta / sb * eps_hat.data[i]) +
                      noise_scale * z.data[i];
    return out;
}

/// Full reverse pass: x_N ~ N(0,I) from cfg.seed, then the chosen update rule
/// over step_subsequence(N, K) in descending order. DDPM over a strided
/// subsequence takes the eta=1 DDIM form, which is the strided ancestral
/// posterior (identical to ddpm_step for unit strides). Output is clamped
/// to [0,1].
inline Tensor sample(const Denoiser& denoiser, const Tensor& y, const SamplerConfig& cfg,
                     const NoiseSchedule& s, const std::vector<int>& shape) {
    std::vector<int> tau = step_subsequence(s.n_steps, cfg.steps);
    RandomStream rng(cfg.seed);
    Tensor x = rng.normal_tensor(shape);
    Tensor zero(shape);
    for (int i = cfg.steps - 1; i >= 0; --i) {
        int n_cur = tau[static_cast<std::size_t>(i)];
        int n_prev = i > 0 ? tau[static_cast<std::size_t>(i - 1)] : 0;
        Tensor eps_hat = denoiser(x, y, n_cur);
        if (cfg.kind == SamplerKind::kDdim) {
            if (cfg.eta != 0.0 && n_prev > 0)
                x = ddim_step(s, x, eps_hat, n_cur, n_prev, cfg.eta, rng.normal_tensor(shape));
            else
                x = ddim_step(s, x, eps_hat, n_cur, n_prev, cfg.eta, zero);
        } else if (n_prev == n_cur - 1) {
            if (n_cur > 1)
                x = ddpm_step(s, x, eps_hat, n_cur, rng.normal_tensor(shape));
            else
                x = ddpm_step(s, x, eps_hat, n_cur, zero);
        } else {
            if (n_prev > 0)
                x = ddim_step(s, x, eps_hat, n_cur, n_prev, 1.0, rng.normal_tensor(shape));
            else
                x = ddim_step(s, x, eps_hat, n_cur, n_prev, 1.0, zero);
        }
    }
    return clamp01(std::move(x));
}

}  // namespace dpc
