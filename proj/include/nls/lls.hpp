#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "nls/dataset.hpp"
#include "nls/errors.hpp"
#include "nls/matrix.hpp"

namespace nls {

/// exp(-||a - b||^2 / sigma^2); 1 iff a == b, positive everywhere.
inline double gaussian_kernel(std::span<const double> a, std::span<const double> b, double sigma) {
    if (a.size() != b.size()) throw InputError("gaussian_kernel: dimension mismatch");
    if (!(sigma > 0.0)) throw ConfigError("gaussian_kernel: sigma must be > 0");
    return std::exp(-squared_distance(a, b) / (sigma * sigma));
}

namespace detail {

/// Cholesky solve of the symmetric positive definite system A x = b.
/// Returns false when A is not positive definite.
inline bool cholesky_solve(Matrix a, Vector b, Vector& x) {
    const std::size_t n = a.rows();
    for (std::size_t j = 0; j < n; ++j) {
        double diag = a(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= a(j, k) * a(j, k);
        if (!(diag > 0.0)) return false;
        diag = std::sqrt(diag);
        a(j, j) = diag;
        for (std::size_t i = j + 1; i < n; ++i) {
            double v = a(i, j);
            for (std::size_t k = 0; k < j; ++k) v -= a(i, k) * a(j, k);
            a(i, j) = v / diag;
        }
    }
    // forward then backward substitution
    for (std::size_t i = 0; i < n; ++i) {
        double v = b[i];
        for (std::size_t k = 0; k < i; ++k) v -= a(i, k) * b[k];
        b[i] = v / a(i, i);
    }
    x.assign(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
        double v = b[i];
        for (std::size_t k = i + 1; k < n; ++k) v -= a(k, i) * x[k];
        x[i] = v / a(i, i);
    }
    return true;
}

} // namespace detail

/// Classical local linear smoother: for every query, a Gaussian-kernel
/// weighted least squares fit of an intercept plus slopes. Distances are
/// taken on standardized features; reported coefficients are mapped back to
/// raw units.
class LlsModel {
public:
    LlsModel() = default;

    static LlsModel fit(const Dataset& train, double sigma, double ridge = 1e-8) {
        if (!(sigma > 0.0)) throw ConfigError("lls: sigma must be > 0");
        if (ridge < 0.0) throw ConfigError("lls: ridge must be >= 0");
        if (train.size() == 0) throw InputError("lls: empty training data");
        LlsModel m;
        m.sigma_ = sigma;
        m.ridge_ = ridge;
        m.features_raw_ = train.features;
        m.targets_ = train.target;
        std::vector<std::size_t> all(train.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        m.stats_ = Standardizer::fit(train.features, all);
        m.features_std_ = m.stats_.transform(train.features);
        m.feature_names_ = train.feature_names;
        m.target_name_ = train.target_name;
        return m;
    }

    struct Result {
        Vector theta; // length d+1: intercept then raw-unit slopes
        double prediction = 0.0;
    };

    /// Weighted least squares around one query instance (raw units).
    Result fit_predict(std::span<const double> query) const {
        require_fitted();
        const std::size_t n = targets_.size();
        const std::size_t d = features_raw_.cols();
        if (query.size() != d) throw InputError("lls: query dimension mismatch");
        const Vector uq = stats_.transform_row(query);

        // normal equations in standardized coordinates with a leading 1s column
        Matrix a(d + 1, d + 1);
        Vector b(d + 1, 0.0);
        Vector row(d + 1);
        for (std::size_t i = 0; i < n; ++i) {
            const double w = gaussian_kernel(uq, features_std_.row(i), sigma_);
            row[0] = 1.0;
            for (std::size_t j = 0; j < d; ++j) row[j + 1] = features_std_(i, j);
            for (std::size_t p = 0; p <= d; ++p) {
                const double wp = w * row[p];
                for (std::size_t q = p; q <= d; ++q) a(p, q) += wp * row[q];
                b[p] += wp * targets_[i];
            }
        }
        for (std::size_t p = 0; p <= d; ++p)
            for (std::size_t q = 0; q < p; ++q) a(p, q) = a(q, p);
        for (std::size_t p = 0; p <= d; ++p) a(p, p) += ridge_;

        Vector beta;
        if (!detail::cholesky_solve(a, b, beta))
            throw NumericError("lls: weighted normal equations are singular; "
                               "use a ridge > 0 (default 1e-8)");

        // back to raw units: theta_k = beta_k / sd_k, intercept absorbs the means
        Result r;
        r.theta.assign(d + 1, 0.0);
        double intercept = beta[0];
        for (std::size_t k = 0; k < d; ++k) {
            r.theta[k + 1] = beta[k + 1] / stats_.stddev[k];
            intercept -= beta[k + 1] * stats_.mean[k] / stats_.stddev[k];
        }
        r.theta[0] = intercept;
        double pred = r.theta[0];
        for (std::size_t k = 0; k < d; ++k) pred += r.theta[k + 1] * query[k];
        r.prediction = pred;
        return r;
    }

    double predict(std::span<const double> query) const { return fit_predict(query).prediction; }

    Vector predict_batch(const Matrix& queries) const {
        Vector out(queries.rows());
        for (std::size_t i = 0; i < queries.rows(); ++i) out[i] = predict(queries.row(i));
        return out;
    }

    double sigma() const { return sigma_; }
    double ridge() const { return ridge_; }
    const Matrix& training_features() const { return features_raw_; }
    const Vector& training_targets() const { return targets_; }
    const Standardizer& standardizer() const { return stats_; }
    const std::vector<std::string>& feature_names() const { return feature_names_; }
    const std::string& target_name() const { return target_name_; }
    bool fitted() const { return !targets_.empty(); }

private:
    void require_fitted() const {
        if (!fitted()) throw InputError("lls: model is empty");
    }

    Matrix features_raw_, features_std_;
    Vector targets_;
    Standardizer stats_;
    double sigma_ = 1.0;
    double ridge_ = 1e-8;
    std::vector<std::string> feature_names_;
    std::string target_name_;
};

/// Grid element with the smallest validation MSE; ties go to the smallest
/// sigma.
inline double select_sigma(const Dataset& train, std::vector<double> grid,
                           const Dataset& validation, double ridge = 1e-8) {
    if (grid.empty()) throw ConfigError("select_sigma: empty grid");
    if (validation.size() == 0) throw InputError("select_sigma: empty validation set");
    std::sort(grid.begin(), grid.end());
    double best_sigma = grid.front();
    double best_mse = std::numeric_limits<double>::infinity();
    for (double sigma : grid) {
        const LlsModel model = LlsModel::fit(train, sigma, ridge);
        double acc = 0.0;
        for (std::size_t i = 0; i < validation.size(); ++i) {
            const double r = model.predict(validation.features.row(i)) - validation.target[i];
            acc += r * r;
        }
        acc /= static_cast<double>(validation.size());
        if (acc < best_mse) {
            best_mse = acc;
            best_sigma = sigma;
        }
    }
    return best_sigma;
}

} // namespace nls
