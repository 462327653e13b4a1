#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "nls/adam.hpp"
#include "nls/autodiff.hpp"
#include "nls/dataset.hpp"
#include "nls/errors.hpp"
#include "nls/matrix.hpp"
#include "nls/network.hpp"

namespace nls {

struct NlsConfig {
    std::vector<std::size_t> hidden_layers{100};
    double lambda = 0.0;
    double learning_rate = 1e-3;
    std::size_t batch_size = 128;
    std::size_t patience = 50;
    double validation_fraction = 0.1;
    std::size_t max_epochs = 2000;
    std::uint64_t seed = 0;
    bool use_batch_norm = false;
    double dropout_rate = 0.0;
    // learning-rate reduction on validation plateaus
    std::size_t lr_patience = 20;
    double lr_factor = 0.5;
    double min_learning_rate = 1e-5;

    void validate() const {
        if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
            throw ConfigError("validation_fraction must be in (0, 1)");
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("dropout_rate must be in [0, 1)");
        if (lr_patience < 1) throw ConfigError("lr_patience must be >= 1");
        if (!(lr_factor > 0.0 && lr_factor <= 1.0))
            throw ConfigError("lr_factor must be in (0, 1]");
        if (min_learning_rate < 0.0) throw ConfigError("min_learning_rate must be >= 0");
        for (std::size_t w : hidden_layers)
            if (w < 1) throw ConfigError("hidden layer widths must be >= 1");
    }
};

/// Epoch-by-epoch record of a fit. Entry 0 describes the initial weights;
/// entry e the state after epoch e. train_loss and penalty are averages of
/// the minibatch objectives seen during the epoch; validation_loss is the
/// penalized objective on the held-out validation part.
struct TrainTrace {
    std::vector<double> train_loss;
    std::vector<double> validation_loss;
    std::vector<double> penalty;
    std::size_t best_epoch = 0;
    std::string stop_reason;
};

namespace detail {

inline std::vector<LayerSpec> nls_layer_specs(std::size_t input_width, std::size_t output_width,
                                              const NlsConfig& config) {
    std::vector<LayerSpec> specs;
    std::size_t in = input_width;
    for (std::size_t w : config.hidden_layers) {
        specs.push_back({in, w, Activation::Elu, config.use_batch_norm, config.dropout_rate});
        in = w;
    }
    specs.push_back({in, output_width, Activation::Identity, false, 0.0});
    return specs;
}

/// combine(i,k) = x_raw(i,k) / stddev_k, so that offset + dot(out, combine)
/// equals the locally linear prediction in raw units.
inline Matrix combine_matrix(const Matrix& x_raw, const Standardizer& stats) {
    Matrix v(x_raw.rows(), x_raw.cols());
    for (std::size_t i = 0; i < x_raw.rows(); ++i)
        for (std::size_t j = 0; j < x_raw.cols(); ++j)
            v(i, j) = x_raw(i, j) / stats.stddev[j];
    return v;
}

/// Objective value for the trainer: skips the Jacobian pass when lambda = 0
/// (the penalty cannot change the total there).
inline LossValue objective_value(const NetworkWeights& net, const Matrix& batch,
                                 const DataTerm& term, double lambda) {
    if (lambda > 0.0) return loss_value(net, batch, term, lambda);
    DualBatch dual = dual_forward(net, batch, nullptr, false);
    validate_term(term, dual.primal, batch.rows());
    LossValue v;
    v.data_part = data_term_value(term, dual.primal, nullptr, nullptr, nullptr);
    v.total = v.data_part;
    return v;
}

enum class Task { NlsRegression, NlsClassification, PlainRegression };

struct TrainSetup {
    Task task = Task::NlsRegression;
    NlsConfig config;
    const Matrix* features = nullptr; // raw, n x d
    const Vector* targets = nullptr;  // regression targets
    std::vector<int> labels;          // classification labels (encoded 0..C-1)
    std::size_t class_count = 0;
    // warm start
    const NetworkWeights* init_net = nullptr;
    const Vector* init_intercepts = nullptr;
};

struct TrainResult {
    NetworkWeights net;
    Vector intercepts; // theta_0 for regression, one per class for classification
    Standardizer stats;
    TrainTrace trace;
};

inline TrainResult train_loop(const TrainSetup& setup) {
    const NlsConfig& config = setup.config;
    config.validate();
    const Matrix& X = *setup.features;
    const std::size_t n = X.rows();
    const std::size_t d = X.cols();
    if (d < 1) throw InputError("training data needs at least one feature");
    if (n < 20) throw InputError("training needs at least 20 instances, got " + std::to_string(n));

    // split into train / validation parts
    SplitPlan plan;
    plan.seed = config.seed;
    plan.fractions = {1.0 - config.validation_fraction, config.validation_fraction};
    const auto roles = make_split(n, plan);
    const auto train_rows = rows_with_role(roles, 0);
    const auto val_rows = rows_with_role(roles, 1);

    TrainResult result;
    result.stats = Standardizer::fit(X, train_rows);

    const Matrix x_train = X.take_rows(train_rows);
    const Matrix x_val = X.take_rows(val_rows);
    const Matrix u_train = result.stats.transform(x_train);
    const Matrix u_val = result.stats.transform(x_val);
    Matrix v_train, v_val;
    if (setup.task != Task::PlainRegression) {
        v_train = combine_matrix(x_train, result.stats);
        v_val = combine_matrix(x_val, result.stats);
    }

    Vector y_train, y_val;
    Matrix y_train_m, y_val_m; // PlainRegression targets as (n x 1)
    std::vector<int> lab_train, lab_val;
    if (setup.task == Task::NlsClassification) {
        for (std::size_t r : train_rows) lab_train.push_back(setup.labels[r]);
        for (std::size_t r : val_rows) lab_val.push_back(setup.labels[r]);
    } else {
        for (std::size_t r : train_rows) y_train.push_back((*setup.targets)[r]);
        for (std::size_t r : val_rows) y_val.push_back((*setup.targets)[r]);
        if (setup.task == Task::PlainRegression) {
            y_train_m = Matrix(y_train.size(), 1);
            for (std::size_t i = 0; i < y_train.size(); ++i) y_train_m(i, 0) = y_train[i];
            y_val_m = Matrix(y_val.size(), 1);
            for (std::size_t i = 0; i < y_val.size(); ++i) y_val_m(i, 0) = y_val[i];
        }
    }

    // network
    std::size_t output_width = d;
    if (setup.task == Task::NlsClassification) output_width = setup.class_count * d;
    if (setup.task == Task::PlainRegression) output_width = 1;
    const auto specs = nls_layer_specs(d, output_width, config);
    if (setup.init_net) {
        result.net = *setup.init_net;
        if (result.net.input_width() != d || result.net.output_width() != output_width)
            throw ConfigError("warm-start weights do not match the data dimensions");
    } else {
        result.net = init_weights(specs, config.seed ^ 0x517cc1b727220a95ULL);
    }

    // intercepts
    if (setup.init_intercepts) {
        result.intercepts = *setup.init_intercepts;
    } else if (setup.task == Task::NlsRegression) {
        double mean = 0.0;
        for (double v : y_train) mean += v;
        result.intercepts.assign(1, mean / static_cast<double>(y_train.size()));
    } else if (setup.task == Task::NlsClassification) {
        result.intercepts.assign(setup.class_count, 0.0);
    }

    auto make_term = [&](const Matrix& v, const Vector& y, const Matrix& y_m,
                         const std::vector<int>& lab) -> DataTerm {
        switch (setup.task) {
            case Task::NlsRegression:
                return SquaredCombined{&v, &y, result.intercepts[0]};
            case Task::NlsClassification:
                return CrossEntropyCombined{&v, &lab, &result.intercepts};
            case Task::PlainRegression:
                return SquaredOnOutputs{&y_m};
        }
        throw ConfigError("unsupported training task");
    };

    AdamState adam(AdamConfig{config.learning_rate});
    Rng epoch_rng = Rng(config.seed).split(2);

    TrainTrace& trace = result.trace;
    auto val_loss = [&]() {
        DataTerm term = make_term(v_val, y_val, y_val_m, lab_val);
        return objective_value(result.net, u_val, term, config.lambda).total;
    };
    {
        DataTerm term0 = make_term(v_train, y_train, y_train_m, lab_train);
        const LossValue lv = objective_value(result.net, u_train, term0, config.lambda);
        trace.train_loss.push_back(lv.total);
        trace.penalty.push_back(lv.penalty_part);
        trace.validation_loss.push_back(val_loss());
    }

    NetworkWeights best_net = result.net;
    Vector best_intercepts = result.intercepts;
    double best_val = trace.validation_loss[0];
    trace.best_epoch = 0;
    std::size_t stale = 0, lr_stale = 0;
    double current_lr = config.learning_rate;
    trace.stop_reason = "max_epochs";

    std::vector<std::size_t> order(train_rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t n_train = order.size();

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        epoch_rng.shuffle(order);
        double epoch_loss = 0.0, epoch_penalty = 0.0;
        for (std::size_t start = 0; start < n_train; start += config.batch_size) {
            const std::size_t stop = std::min(n_train, start + config.batch_size);
            std::vector<std::size_t> batch_rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                order.begin() + static_cast<std::ptrdiff_t>(stop));
            const Matrix u_b = u_train.take_rows(batch_rows);
            Matrix v_b;
            Vector y_b;
            Matrix y_b_m;
            std::vector<int> lab_b;
            if (setup.task != Task::PlainRegression) v_b = v_train.take_rows(batch_rows);
            if (setup.task == Task::NlsClassification)
                for (std::size_t r : batch_rows) lab_b.push_back(lab_train[r]);
            else
                for (std::size_t r : batch_rows) y_b.push_back(y_train[r]);
            if (setup.task == Task::PlainRegression) y_b_m = y_train_m.take_rows(batch_rows);

            DataTerm term = make_term(v_b, y_b, y_b_m, lab_b);
            LossGradientResult g = loss_gradient(result.net, u_b, term, config.lambda,
                                                 Mode::Train, &epoch_rng);

            adam.set_learning_rate(current_lr);
            std::vector<ParamBlock> extra;
            Vector intercept_grad;
            if (setup.task == Task::NlsRegression) {
                intercept_grad.assign(1, g.doffset);
                extra.push_back({result.intercepts, intercept_grad});
            } else if (setup.task == Task::NlsClassification) {
                intercept_grad = g.dintercepts;
                extra.push_back({result.intercepts, intercept_grad});
            }
            adam_step(adam, result.net, g.network, extra);
            update_running_statistics(result.net, g);

            const double w = static_cast<double>(stop - start) / static_cast<double>(n_train);
            epoch_loss += w * g.value.total;
            epoch_penalty += w * g.value.penalty_part;
        }

        trace.train_loss.push_back(epoch_loss);
        trace.penalty.push_back(epoch_penalty);
        const double vl = val_loss();
        trace.validation_loss.push_back(vl);

        if (vl < best_val) {
            best_val = vl;
            best_net = result.net;
            best_intercepts = result.intercepts;
            trace.best_epoch = epoch;
            stale = 0;
            lr_stale = 0;
        } else {
            ++stale;
            ++lr_stale;
            if (lr_stale >= config.lr_patience) {
                current_lr = std::max(config.min_learning_rate, current_lr * config.lr_factor);
                lr_stale = 0;
            }
            if (stale >= config.patience) {
                trace.stop_reason = "patience";
                break;
            }
        }
    }

    result.net = std::move(best_net);
    result.intercepts = std::move(best_intercepts);
    return result;
}

} // namespace detail

/// The Neural Local Smoother: a network mapping an instance to the slope
/// functions theta_1..theta_d, combined with a learned constant intercept
/// theta_0 into the locally linear prediction theta_0 + sum theta_i(x) x_i.
/// Slopes are reported in raw feature units.
class NlsModel {
public:
    NlsModel() = default;
    NlsModel(NetworkWeights net, double intercept, Standardizer stats, NlsConfig config,
             std::vector<std::string> feature_names, std::string target_name)
        : net_(std::move(net)), intercept_(intercept), stats_(std::move(stats)),
          config_(std::move(config)), feature_names_(std::move(feature_names)),
          target_name_(std::move(target_name)) {}

    bool trained() const { return !net_.layers.empty(); }
    std::size_t dimension() const { return net_.input_width(); }

    /// Coefficient vector (theta_0, theta_1(x), ..., theta_d(x)) in raw units.
    Vector theta(std::span<const double> x) const {
        require_instance(x);
        const Vector u = stats_.transform_row(x);
        Matrix batch(1, u.size());
        for (std::size_t j = 0; j < u.size(); ++j) batch(0, j) = u[j];
        const Matrix out = forward(net_, batch, Mode::Eval);
        Vector th(dimension() + 1);
        th[0] = intercept_;
        for (std::size_t k = 0; k < dimension(); ++k) th[k + 1] = out(0, k) / stats_.stddev[k];
        return th;
    }

    double predict(std::span<const double> x) const {
        const Vector th = theta(x);
        double acc = th[0];
        for (std::size_t k = 0; k < x.size(); ++k) acc += th[k + 1] * x[k];
        return acc;
    }

    Vector predict_batch(const Matrix& x) const {
        Vector out(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i) out[i] = predict(x.row(i));
        return out;
    }

    /// (total, data, penalty) of the penalized objective on a batch given in
    /// raw units. The penalty part is always evaluated, also at lambda = 0.
    LossValue penalized_loss(const Matrix& x_raw, const Vector& y, double lambda) const {
        require_trained();
        if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
        if (x_raw.rows() == 0) throw InputError("penalized_loss: empty batch");
        if (x_raw.rows() != y.size()) throw InputError("penalized_loss: target length mismatch");
        if (x_raw.cols() != dimension()) throw InputError("penalized_loss: dimension mismatch");
        const Matrix u = stats_.transform(x_raw);
        DualBatch dual = detail::dual_forward(net_, u);
        LossValue v;
        double acc = 0.0;
        for (std::size_t i = 0; i < x_raw.rows(); ++i) {
            double g = intercept_;
            for (std::size_t k = 0; k < dimension(); ++k)
                g += (dual.primal(i, k) / stats_.stddev[k]) * x_raw(i, k);
            if (!std::isfinite(g))
                throw NumericError("non-finite prediction at instance " + std::to_string(i));
            const double r = g - y[i];
            acc += r * r;
        }
        v.data_part = acc / static_cast<double>(x_raw.rows());
        v.penalty_part = detail::penalty_value(dual.tangents, x_raw.rows());
        v.total = v.data_part + lambda * v.penalty_part;
        return v;
    }

    /// Mean over instances of the squared Frobenius norm of the coefficient
    /// network's input-Jacobian; numerically identical to penalty_part.
    double average_squared_gradient(const Matrix& x_raw) const {
        require_trained();
        if (x_raw.rows() == 0) throw InputError("average_squared_gradient: empty data");
        if (x_raw.cols() != dimension())
            throw InputError("average_squared_gradient: dimension mismatch");
        const Matrix u = stats_.transform(x_raw);
        DualBatch dual = detail::dual_forward(net_, u);
        return detail::penalty_value(dual.tangents, x_raw.rows());
    }

    const NetworkWeights& network() const { return net_; }
    double intercept() const { return intercept_; }
    const Standardizer& standardizer() const { return stats_; }
    const NlsConfig& config() const { return config_; }
    const std::vector<std::string>& feature_names() const { return feature_names_; }
    const std::string& target_name() const { return target_name_; }

private:
    void require_trained() const {
        if (!trained()) throw InputError("model is not trained");
    }
    void require_instance(std::span<const double> x) const {
        require_trained();
        if (x.size() != dimension())
            throw InputError("instance has " + std::to_string(x.size()) +
                             " features, model expects " + std::to_string(dimension()));
    }

    NetworkWeights net_;
    double intercept_ = 0.0;
    Standardizer stats_;
    NlsConfig config_;
    std::vector<std::string> feature_names_;
    std::string target_name_;
};

inline std::pair<NlsModel, TrainTrace> fit(const NlsConfig& config, const Dataset& train) {
    detail::TrainSetup setup;
    setup.task = detail::Task::NlsRegression;
    setup.config = config;
    setup.features = &train.features;
    setup.targets = &train.target;
    detail::TrainResult r = detail::train_loop(setup);
    NlsModel model(std::move(r.net), r.intercepts[0], std::move(r.stats), config,
                   train.feature_names, train.target_name);
    return {std::move(model), std::move(r.trace)};
}

/// Refit at a new penalization strength, starting from the given model's
/// weights instead of a fresh initialization.
inline std::pair<NlsModel, TrainTrace> warm_fit(const NlsModel& model, double new_lambda,
                                                const Dataset& train) {
    if (!model.trained()) throw InputError("warm_fit: model is not trained");
    if (new_lambda < 0.0) throw ConfigError("lambda must be >= 0");
    NlsConfig config = model.config();
    config.lambda = new_lambda;
    detail::TrainSetup setup;
    setup.task = detail::Task::NlsRegression;
    setup.config = config;
    setup.features = &train.features;
    setup.targets = &train.target;
    setup.init_net = &model.network();
    Vector init_intercepts{model.intercept()};
    setup.init_intercepts = &init_intercepts;
    detail::TrainResult r = detail::train_loop(setup);
    NlsModel out(std::move(r.net), r.intercepts[0], std::move(r.stats), config,
                 train.feature_names, train.target_name);
    return {std::move(out), std::move(r.trace)};
}

/// Classifier variant: one coefficient vector per class, class scores
/// theta_0^c + sum_i theta_i^c(x) x_i put through a log-softmax.
class NlsClassifier {
public:
    NlsClassifier() = default;
    NlsClassifier(NetworkWeights net, Vector intercepts, Vector class_values, Standardizer stats,
                  NlsConfig config, std::vector<std::string> feature_names, std::string target_name)
        : net_(std::move(net)), intercepts_(std::move(intercepts)),
          class_values_(std::move(class_values)), stats_(std::move(stats)),
          config_(std::move(config)), feature_names_(std::move(feature_names)),
          target_name_(std::move(target_name)) {}

    bool trained() const { return !net_.layers.empty(); }
    std::size_t dimension() const { return net_.input_width(); }
    std::size_t class_count() const { return class_values_.size(); }

    /// Per-class coefficient matrix (class_count x (d+1)): column 0 holds the
    /// intercepts, the rest raw-unit slopes at x.
    Matrix coefficients(std::span<const double> x) const {
        const Matrix out = raw_outputs(x);
        Matrix th(class_count(), dimension() + 1);
        for (std::size_t c = 0; c < class_count(); ++c) {
            th(c, 0) = intercepts_[c];
            for (std::size_t k = 0; k < dimension(); ++k)
                th(c, k + 1) = out(0, c * dimension() + k) / stats_.stddev[k];
        }
        return th;
    }

    /// P(Y = class_values[c] | x), a proper probability vector.
    Vector class_probabilities(std::span<const double> x) const {
        const Matrix th = coefficients(x);
        Vector scores(class_count());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < class_count(); ++c) {
            double s = th(c, 0);
            for (std::size_t k = 0; k < dimension(); ++k) s += th(c, k + 1) * x[k];
            scores[c] = s;
            mx = std::max(mx, s);
        }
        double lse = 0.0;
        for (double s : scores) lse += std::exp(s - mx);
        lse = mx + std::log(lse);
        Vector probs(class_count());
        for (std::size_t c = 0; c < class_count(); ++c) probs[c] = std::exp(scores[c] - lse);
        return probs;
    }

    /// Class value with the highest probability.
    double predict_label(std::span<const double> x) const {
        const Vector p = class_probabilities(x);
        std::size_t best = 0;
        for (std::size_t c = 1; c < p.size(); ++c)
            if (p[c] > p[best]) best = c;
        return class_values_[best];
    }

    double average_squared_gradient(const Matrix& x_raw) const {
        require_trained();
        if (x_raw.cols() != dimension())
            throw InputError("average_squared_gradient: dimension mismatch");
        const Matrix u = stats_.transform(x_raw);
        DualBatch dual = detail::dual_forward(net_, u);
        return detail::penalty_value(dual.tangents, x_raw.rows());
    }

    const NetworkWeights& network() const { return net_; }
    const Vector& intercepts() const { return intercepts_; }
    const Vector& class_values() const { return class_values_; }
    const Standardizer& standardizer() const { return stats_; }
    const NlsConfig& config() const { return config_; }
    const std::vector<std::string>& feature_names() const { return feature_names_; }
    const std::string& target_name() const { return target_name_; }

private:
    void require_trained() const {
        if (!trained()) throw InputError("classifier is not trained");
    }
    Matrix raw_outputs(std::span<const double> x) const {
        require_trained();
        if (x.size() != dimension())
            throw InputError("instance has " + std::to_string(x.size()) +
                             " features, classifier expects " + std::to_string(dimension()));
        const Vector u = stats_.transform_row(x);
        Matrix batch(1, u.size());
        for (std::size_t j = 0; j < u.size(); ++j) batch(0, j) = u[j];
        return forward(net_, batch, Mode::Eval);
    }

    NetworkWeights net_;
    Vector intercepts_;
    Vector class_values_;
    Standardizer stats_;
    NlsConfig config_;
    std::vector<std::string> feature_names_;
    std::string target_name_;
};

/// Fits the classifier on a dataset whose target holds class labels (any
/// distinct numeric values; they are sorted to fix the class order).
inline std::pair<NlsClassifier, TrainTrace> fit_classifier(const NlsConfig& config,
                                                           const Dataset& train) {
    std::set<double> distinct(train.target.begin(), train.target.end());
    if (distinct.size() < 2)
        throw ConfigError("fit_classifier: target has fewer than 2 distinct classes");
    Vector class_values(distinct.begin(), distinct.end());
    std::vector<int> labels(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto it = std::lower_bound(class_values.begin(), class_values.end(), train.target[i]);
        labels[i] = static_cast<int>(it - class_values.begin());
    }

    detail::TrainSetup setup;
    setup.task = detail::Task::NlsClassification;
    setup.config = config;
    setup.features = &train.features;
    setup.labels = std::move(labels);
    setup.class_count = class_values.size();
    detail::TrainResult r = detail::train_loop(setup);
    NlsClassifier model(std::move(r.net), std::move(r.intercepts), std::move(class_values),
                        std::move(r.stats), config, train.feature_names, train.target_name);
    return {std::move(model), std::move(r.trace)};
}

} // namespace nls
