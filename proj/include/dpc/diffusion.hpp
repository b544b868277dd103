#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dpc/errors.hpp"
#include "dpc/tensor.hpp"

namespace dpc {

/// Variance schedule of the forward corruption chain plus the derived
/// coefficients used everywhere else. alpha_bar[n-1] is the cumulative
/// product prod_{i<=n} (1 - beta_i); index 0 of the chain (a clean sample)
/// has alpha_bar == 1 by convention, which also makes the first posterior
/// variance exactly zero.
struct NoiseSchedule {
    int n_steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
    std::vector<double> sqrt_alpha_bar;
    std::vector<double> sqrt_one_minus_alpha_bar;
    std::vector<double> posterior_variance;

    double alpha_bar_at(int n) const {
        if (n < 0 || n > n_steps) throw DataError("alpha_bar_at: step out of range");
        return n == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(n - 1)];
    }

    void require_step(int n) const {
        if (n < 1 || n > n_steps)
            throw DataError("diffusion step " + std::to_string(n) + " outside [1," +
                            std::to_string(n_steps) + "]");
    }
};

inline NoiseSchedule linear_schedule(int n, double beta_start, double beta_end) {
    if (n < 1) throw DataError("linear_schedule: N must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw DataError("linear_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.n_steps = n;
    s.beta.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        s.beta[static_cast<std::size_t>(i)] =
            n == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (n - 1);
    s.alpha_bar.resize(static_cast<std::size_t>(n));
    double prod = 1.0;
    for (int i = 0; i < n; ++i) {
        prod *= 1.0 - s.beta[static_cast<std::size_t>(i)];
        s.alpha_bar[static_cast<std::size_t>(i)] = prod;
    }
    s.sqrt_alpha_bar.resize(static_cast<std::size_t>(n));
    s.sqrt_one_minus_alpha_bar.resize(static_cast<std::size_t>(n));
    s.posterior_variance.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double ab = s.alpha_bar[static_cast<std::size_t>(i)];
        s.sqrt_alpha_bar[static_cast<std::size_t>(i)] = std::sqrt(ab);
        s.sqrt_one_minus_alpha_bar[static_cast<std::size_t>(i)] = std::sqrt(1.0 - ab);
        double ab_prev = i == 0 ? 1.0 : s.alpha_bar[static_cast<std::size_t>(i - 1)];
        s.posterior_variance[static_cast<std::size_t>(i)] =
            (1.0 - ab_prev) / (1.0 - ab) * s.beta[static_cast<std::size_t>(i)];
    }
    return s;
}

/// x_n = sqrt(alpha_bar_n) x0 + sqrt(1 - alpha_bar_n) eps
inline Tensor forward_sample(const NoiseSchedule& s, const Tensor& x0, int n, const Tensor& eps) {
    s.require_step(n);
    require_same_shape(x0, eps, "forward_sample");
    double a = s.sqrt_alpha_bar[static_cast<std::size_t>(n - 1)];
    double b = s.sqrt_one_minus_alpha_bar[static_cast<std::size_t>(n - 1)];
    Tensor out(x0.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

/// Inverts the corruption formula: x0 = (x_n - sqrt(1-alpha_bar) eps) / sqrt(alpha_bar).
inline Tensor predict_x0(const NoiseSchedule& s, const Tensor& xn, const Tensor& eps_hat, int n) {
    s.require_step(n);
    require_same_shape(xn, eps_hat, "predict_x0");
    double a = s.sqrt_alpha_bar[static_cast<std::size_t>(n - 1)];
    double b = s.sqrt_one_minus_alpha_bar[static_cast<std::size_t>(n - 1)];
    Tensor out(xn.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = (xn.data[i] - b * eps_hat.data[i]) / a;
    return out;
}

/// Denoiser signature shared by samplers, losses and the decode path.
using Denoiser = std::function<Tensor(const Tensor& xn, const Tensor& y, int n)>;

/// Mean squared error between the drawn noise and the denoiser's prediction
/// at one (n, eps) draw. Mean over all elements.
inline double l_simple(const NoiseSchedule& s, const Denoiser& denoiser, const Tensor& x0,
                       const Tensor& y, int n, const Tensor& eps) {
    Tensor xn = forward_sample(s, x0, n, eps);
    Tensor eh = denoiser(xn, y, n);
    require_same_shape(eps, eh, "l_simple");
    return mean_sq_diff(eps, eh);
}

}  // namespace dpc
