#pragma once

#include <cmath>
#include <vector>

#include "dpc/errors.hpp"

namespace dpc {

/// Dense square matrix, row-major. Only what the Frechet distance needs.
struct Mat {
    int n = 0;
    std::vector<double> a;

    Mat() = default;
    explicit Mat(int size) : n(size), a(static_cast<std::size_t>(size) * size, 0.0) {}

    double& at(int i, int j) { return a[static_cast<std::size_t>(i) * n + j]; }
    double at(int i, int j) const { return a[static_cast<std::size_t>(i) * n + j]; }
};

inline Mat mat_mul(const Mat& x, const Mat& y) {
    Mat out(x.n);
    for (int i = 0; i < x.n; ++i)
        for (int k = 0; k < x.n; ++k) {
            double v = x.at(i, k);
            if (v == 0.0) continue;
            for (int j = 0; j < x.n; ++j) out.at(i, j) += v * y.at(k, j);
        }
    return out;
}

inline double trace(const Mat& m) {
    double t = 0.0;
    for (int i = 0; i < m.n; ++i) t += m.at(i, i);
    return t;
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: a = V diag(vals) V^T.
/// Columns of V are the eigenvectors.
inline void jacobi_eigen_sym(const Mat& m, std::vector<double>& vals, Mat& vecs) {
    int n = m.n;
    Mat a = m;
    vecs = Mat(n);
    for (int i = 0; i < n; ++i) vecs.at(i, i) = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int i = 0; i < n; ++i) {
                    double aip = a.at(i, p), aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (int j = 0; j < n; ++j) {
                    double apj = a.at(p, j), aqj = a.at(q, j);
                    a.at(p, j) = c * apj - s * aqj;
                    a.at(q, j) = s * apj + c * aqj;
                }
                for (int i = 0; i < n; ++i) {
                    double vip = vecs.at(i, p), viq = vecs.at(i, q);
                    vecs.at(i, p) = c * vip - s * viq;
                    vecs.at(i, q) = s * vip + c * viq;
                }
            }
    }
    vals.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) vals[static_cast<std::size_t>(i)] = a.at(i, i);
}

/// Symmetric PSD square root; negative eigenvalues are clipped at zero.
inline Mat sqrtm_psd(const Mat& m) {
    std::vector<double> vals;
    Mat v;
    jacobi_eigen_sym(m, vals, v);
    Mat out(m.n);
    for (int i = 0; i < m.n; ++i)
        for (int j = 0; j < m.n; ++j) {
            double acc = 0.0;
            for (int k = 0; k < m.n; ++k) {
                double lam = vals[static_cast<std::size_t>(k)];
                if (lam > 0.0) acc += v.at(i, k) * std::sqrt(lam) * v.at(j, k);
            }
            out.at(i, j) = acc;
        }
    return out;
}

}  // namespace dpc
