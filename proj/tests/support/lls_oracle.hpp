#pragma once

// Test-only oracle for the local linear smoother: independent weighted
// normal equations on standardized features, solved by Gauss-Jordan with
// partial pivoting, coefficients mapped back to raw units. Kept apart from
// the library so the production path is never checked against itself.

#include <cmath>
#include <span>
#include <vector>

#include "nls/matrix.hpp"

namespace nls_test {

struct OracleResult {
    nls::Vector theta;
    double prediction = 0.0;
};

inline OracleResult lls_oracle(const nls::Matrix& x, const nls::Vector& y,
                               std::span<const double> query, double sigma, double ridge) {
    using nls::Vector;
    const std::size_t n = y.size(), d = x.cols();
    Vector mean(d, 0.0), sd(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x(i, j) - mean[j];
            sd[j] += c * c;
        }
    for (std::size_t j = 0; j < d; ++j) {
        sd[j] = std::sqrt(sd[j] / static_cast<double>(n));
        if (sd[j] == 0.0) sd[j] = 1.0;
    }

    const std::size_t p = d + 1;
    std::vector<Vector> a(p, Vector(p + 1, 0.0));
    Vector row(p);
    for (std::size_t i = 0; i < n; ++i) {
        double dist2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double u = (x(i, j) - mean[j]) / sd[j];
            const double uq = (query[j] - mean[j]) / sd[j];
            dist2 += (u - uq) * (u - uq);
            row[j + 1] = u;
        }
        row[0] = 1.0;
        const double w = std::exp(-dist2 / (sigma * sigma));
        for (std::size_t r = 0; r < p; ++r) {
            for (std::size_t c = 0; c < p; ++c) a[r][c] += w * row[r] * row[c];
            a[r][p] += w * row[r] * y[i];
        }
    }
    for (std::size_t r = 0; r < p; ++r) a[r][r] += ridge;

    for (std::size_t col = 0; col < p; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < p; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        std::swap(a[col], a[pivot]);
        const double diag = a[col][col];
        for (std::size_t c = col; c <= p; ++c) a[col][c] /= diag;
        for (std::size_t r = 0; r < p; ++r) {
            if (r == col) continue;
            const double f = a[r][col];
            for (std::size_t c = col; c <= p; ++c) a[r][c] -= f * a[col][c];
        }
    }

    OracleResult out;
    out.theta.assign(p, 0.0);
    double intercept = a[0][p];
    for (std::size_t k = 0; k < d; ++k) {
        out.theta[k + 1] = a[k + 1][p] / sd[k];
        intercept -= a[k + 1][p] * mean[k] / sd[k];
    }
    out.theta[0] = intercept;
    out.prediction = out.theta[0];
    for (std::size_t k = 0; k < d; ++k) out.prediction += out.theta[k + 1] * query[k];
    return out;
}

} // namespace nls_test
