#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "nls/errors.hpp"
#include "nls/matrix.hpp"

namespace nls {

inline double mean_squared_error(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw InputError("mean_squared_error: bad input sizes");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred[i] - truth[i];
        acc += r * r;
    }
    return acc / static_cast<double>(pred.size());
}

inline double mean_absolute_error(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw InputError("mean_absolute_error: bad input sizes");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - truth[i]);
    return acc / static_cast<double>(pred.size());
}

namespace detail {

inline double standard_error_of_mean(std::span<const double> values) {
    const std::size_t n = values.size();
    if (n < 2) return 0.0;
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : values) {
        const double c = v - mean;
        ss += c * c;
    }
    return std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
}

} // namespace detail

/// Standard error of the mean of per-instance squared residuals; the
/// uncertainty reported next to an MSE.
inline double mse_standard_error(std::span<const double> pred, std::span<const double> truth) {
    Vector sq(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred[i] - truth[i];
        sq[i] = r * r;
    }
    return detail::standard_error_of_mean(sq);
}

inline double mae_standard_error(std::span<const double> pred, std::span<const double> truth) {
    Vector ab(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) ab[i] = std::abs(pred[i] - truth[i]);
    return detail::standard_error_of_mean(ab);
}

} // namespace nls
