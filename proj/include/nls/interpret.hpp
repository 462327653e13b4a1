#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "nls/dataset.hpp"
#include "nls/errors.hpp"
#include "nls/matrix.hpp"
#include "nls/model.hpp"

namespace nls {

/// Everything needed to read one prediction: the instance, the locally
/// linear coefficients in raw units, and each feature's contribution
/// theta_i * x_i.
struct Explanation {
    Vector instance;
    double intercept = 0.0;
    Vector coefficients;
    Vector contributions;
    double prediction = 0.0;
    std::vector<std::string> feature_names;
};

inline Explanation explain(const NlsModel& model, std::span<const double> x) {
    Explanation e;
    const Vector th = model.theta(x);
    e.instance.assign(x.begin(), x.end());
    e.intercept = th[0];
    e.coefficients.assign(th.begin() + 1, th.end());
    e.contributions.resize(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) e.contributions[k] = e.coefficients[k] * x[k];
    e.prediction = model.predict(x);
    e.feature_names = model.feature_names();
    if (e.feature_names.size() != x.size()) {
        e.feature_names.resize(x.size());
        for (std::size_t k = 0; k < x.size(); ++k)
            if (e.feature_names[k].empty()) e.feature_names[k] = "x" + std::to_string(k + 1);
    }
    return e;
}

/// Smoothness metric: mean over instances of the squared Frobenius norm of
/// the coefficient Jacobian. Same code path as the training penalty, so the
/// two agree exactly.
inline double avg_squared_gradient(const NlsModel& model, const Matrix& instances) {
    return model.average_squared_gradient(instances);
}

inline double avg_squared_gradient(const NlsModel& model, const Dataset& data) {
    return model.average_squared_gradient(data.features);
}

/// One extension instance scored by Algorithm "extend interpretations":
/// coefficients are borrowed from the nearest prediction instance.
struct ExtensionReport {
    struct Row {
        std::size_t neighbor_index = 0; // into the prediction set
        double extended_prediction = 0.0;
        double true_prediction = 0.0;
        double gap = 0.0; // |extended - true|
    };
    std::vector<Row> rows;
    double mean_gap = 0.0;
};

/// For every extension instance: find the nearest prediction instance in
/// standardized Euclidean distance (ties to the lowest index), predict with
/// that neighbor's coefficients, and compare against the model's own
/// prediction at the extension instance.
inline ExtensionReport extend_predictions(const NlsModel& model, const Matrix& prediction_set,
                                          const Matrix& extension_set) {
    if (!model.trained()) throw InputError("extend_predictions: model is not trained");
    if (prediction_set.rows() == 0) throw InputError("extend_predictions: empty prediction set");
    if (extension_set.rows() == 0) throw InputError("extend_predictions: empty extension set");
    if (prediction_set.cols() != model.dimension() || extension_set.cols() != model.dimension())
        throw InputError("extend_predictions: dimension mismatch");

    const Standardizer& stats = model.standardizer();
    const Matrix pred_std = stats.transform(prediction_set);
    const Matrix ext_std = stats.transform(extension_set);

    // coefficients at each prediction instance, computed once
    std::vector<Vector> pred_theta(prediction_set.rows());
    for (std::size_t j = 0; j < prediction_set.rows(); ++j)
        pred_theta[j] = model.theta(prediction_set.row(j));

    ExtensionReport report;
    report.rows.reserve(extension_set.rows());
    double total_gap = 0.0;
    for (std::size_t i = 0; i < extension_set.rows(); ++i) {
        std::size_t nearest = 0;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < prediction_set.rows(); ++j) {
            const double dist = squared_distance(ext_std.row(i), pred_std.row(j));
            if (dist < best) {
                best = dist;
                nearest = j;
            }
        }
        const Vector& th = pred_theta[nearest];
        double extended = th[0];
        for (std::size_t k = 0; k < extension_set.cols(); ++k)
            extended += th[k + 1] * extension_set(i, k);
        const double truth = model.predict(extension_set.row(i));
        ExtensionReport::Row row;
        row.neighbor_index = nearest;
        row.extended_prediction = extended;
        row.true_prediction = truth;
        row.gap = std::abs(extended - truth);
        total_gap += row.gap;
        report.rows.push_back(row);
    }
    report.mean_gap = total_gap / static_cast<double>(report.rows.size());
    return report;
}

} // namespace nls
