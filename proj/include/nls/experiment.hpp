#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nls/dataset.hpp"
#include "nls/errors.hpp"
#include "nls/interpret.hpp"
#include "nls/lls.hpp"
#include "nls/metrics.hpp"
#include "nls/model.hpp"
#include "nls/serialize.hpp"

namespace nls {

/// Ordinary least squares with intercept, solved by normal equations.
/// Stands in as the fully global baseline.
struct OlsModel {
    Vector coefficients; // intercept first, then one slope per feature

    static OlsModel fit(const Matrix& x, const Vector& y) {
        if (x.rows() != y.size() || x.rows() == 0) throw InputError("ols: bad training data");
        const std::size_t d = x.cols();
        Matrix a(d + 1, d + 1);
        Vector b(d + 1, 0.0);
        Vector row(d + 1);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            row[0] = 1.0;
            for (std::size_t j = 0; j < d; ++j) row[j + 1] = x(i, j);
            for (std::size_t p = 0; p <= d; ++p) {
                for (std::size_t q = p; q <= d; ++q) a(p, q) += row[p] * row[q];
                b[p] += row[p] * y[i];
            }
        }
        for (std::size_t p = 0; p <= d; ++p) {
            for (std::size_t q = 0; q < p; ++q) a(p, q) = a(q, p);
            a(p, p) += 1e-10; // keep degenerate designs solvable
        }
        OlsModel m;
        if (!detail::cholesky_solve(a, b, m.coefficients))
            throw NumericError("ols: singular normal equations");
        return m;
    }

    double predict(std::span<const double> x) const {
        double acc = coefficients[0];
        for (std::size_t k = 0; k < x.size(); ++k) acc += coefficients[k + 1] * x[k];
        return acc;
    }

    Vector predict_batch(const Matrix& x) const {
        Vector out(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i) out[i] = predict(x.row(i));
        return out;
    }
};

/// Plain feed-forward regressor with the same architecture family as the
/// smoother but a single direct output; the neutral network baseline.
class NnModel {
public:
    NnModel() = default;
    NnModel(NetworkWeights net, Standardizer stats, NlsConfig config)
        : net_(std::move(net)), stats_(std::move(stats)), config_(std::move(config)) {}

    double predict(std::span<const double> x) const {
        if (net_.layers.empty()) throw InputError("nn: model is not trained");
        const Vector u = stats_.transform_row(x);
        Matrix batch(1, u.size());
        for (std::size_t j = 0; j < u.size(); ++j) batch(0, j) = u[j];
        return forward(net_, batch, Mode::Eval)(0, 0);
    }

    Vector predict_batch(const Matrix& x) const {
        Vector out(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i) out[i] = predict(x.row(i));
        return out;
    }

    const NlsConfig& config() const { return config_; }

private:
    NetworkWeights net_;
    Standardizer stats_;
    NlsConfig config_;
};

inline std::pair<NnModel, TrainTrace> fit_nn(const NlsConfig& config, const Dataset& train) {
    detail::TrainSetup setup;
    setup.task = detail::Task::PlainRegression;
    setup.config = config;
    setup.features = &train.features;
    setup.targets = &train.target;
    detail::TrainResult r = detail::train_loop(setup);
    return {NnModel(std::move(r.net), std::move(r.stats), config), std::move(r.trace)};
}

// ---------------------------------------------------------------------------
// grid search and model comparison
// ---------------------------------------------------------------------------

struct GridSpec {
    std::vector<std::size_t> layer_counts{1, 3, 5};
    std::vector<std::size_t> widths{100, 300, 500};
    std::vector<double> sigma_grid{0.1, 1.0, 10.0, 100.0, 1000.0};
    std::vector<double> lambdas{0.0};

    void validate() const {
        if (layer_counts.empty() || widths.empty() || sigma_grid.empty() || lambdas.empty())
            throw ConfigError("grid: every axis needs at least one value");
    }
};

struct ReportRow {
    std::string model;
    std::string chosen_config;
    double validation_mse = 0.0;
    double test_mse = 0.0;
    double test_mae = 0.0;
    double se_mse = 0.0;
    double se_mae = 0.0;
    double fit_seconds = 0.0;
    std::optional<double> avg_squared_gradient;
};

/// Comparison output. grid_log records every evaluated cell with its
/// validation score so no configuration silently disappears.
struct ExperimentReport {
    std::vector<ReportRow> rows;
    struct GridCell {
        std::string model;
        std::string config;
        double validation_mse;
    };
    std::vector<GridCell> grid_log;
    std::string notes =
        "se_mse / se_mae are standard errors of the mean per-instance squared / absolute "
        "residual on the test set (across folds for k-fold runs); fit_seconds includes the "
        "whole grid search for the row";

    json to_json() const {
        json rows_j = json::array();
        for (const auto& r : rows) {
            json jr{{"model", r.model},
                    {"chosen_config", r.chosen_config},
                    {"validation_mse", r.validation_mse},
                    {"test_mse", r.test_mse},
                    {"test_mae", r.test_mae},
                    {"se_mse", r.se_mse},
                    {"se_mae", r.se_mae},
                    {"fit_seconds", r.fit_seconds}};
            if (r.avg_squared_gradient) jr["avg_squared_gradient"] = *r.avg_squared_gradient;
            rows_j.push_back(std::move(jr));
        }
        json grid_j = json::array();
        for (const auto& c : grid_log)
            grid_j.push_back(json{{"model", c.model},
                                  {"config", c.config},
                                  {"validation_mse", c.validation_mse}});
        return json{{"format_version", kFormatVersion},
                    {"rows", std::move(rows_j)},
                    {"grid_log", std::move(grid_j)},
                    {"notes", notes}};
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "model,chosen_config,validation_mse,test_mse,test_mae,se_mse,se_mae,"
               "avg_squared_gradient,fit_seconds\n";
        for (const auto& r : rows) {
            out << r.model << ',' << '"' << r.chosen_config << '"' << ','
                << detail::format_double(r.validation_mse) << ','
                << detail::format_double(r.test_mse) << ',' << detail::format_double(r.test_mae)
                << ',' << detail::format_double(r.se_mse) << ','
                << detail::format_double(r.se_mae) << ',';
            if (r.avg_squared_gradient) out << detail::format_double(*r.avg_squared_gradient);
            out << ',' << detail::format_double(r.fit_seconds) << '\n';
        }
        return out.str();
    }
};

struct CompareOptions {
    std::uint64_t seed = 0;
    double test_fraction = 0.1;    // used when outer_folds < 2
    std::size_t outer_folds = 0;   // >= 2 switches to k-fold evaluation
    std::size_t inner_folds = 0;   // >= 2 uses k-fold validation for the grid search
    double validation_fraction = 0.1;
    NlsConfig base;                // trainer settings shared by nls / nn rows
    bool run_nls = true, run_nn = true, run_lls = true, run_ols = true;
};

namespace detail {

inline std::string describe_arch(std::size_t layers, std::size_t width, double lambda) {
    std::ostringstream out;
    out << layers << " layer" << (layers == 1 ? "" : "s") << " x " << width
        << ", lambda=" << lambda;
    return out.str();
}

struct TimedSection {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

/// Validation splits of a row set: either one holdout split or k folds.
inline std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
validation_splits(std::size_t n, const CompareOptions& opt) {
    std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> splits;
    if (opt.inner_folds >= 2) {
        SplitPlan plan;
        plan.seed = opt.seed ^ 0xabcdef12345ULL;
        plan.folds = opt.inner_folds;
        const auto roles = make_split(n, plan);
        for (std::size_t f = 0; f < opt.inner_folds; ++f) {
            std::vector<std::size_t> tr, va;
            for (std::size_t i = 0; i < n; ++i)
                (roles[i] == f ? va : tr).push_back(i);
            splits.push_back({std::move(tr), std::move(va)});
        }
    } else {
        SplitPlan plan;
        plan.seed = opt.seed ^ 0xabcdef12345ULL;
        plan.fractions = {1.0 - opt.validation_fraction, opt.validation_fraction};
        const auto roles = make_split(n, plan);
        splits.push_back({rows_with_role(roles, 0), rows_with_role(roles, 1)});
    }
    return splits;
}

} // namespace detail

/// Grid search + holdout (or k-fold) comparison of the smoother against the
/// plain network, the kernel smoother and ordinary least squares.
inline ExperimentReport compare(const Dataset& data, const GridSpec& grid,
                                const CompareOptions& opt) {
    grid.validate();
    ExperimentReport report;

    // outer evaluation splits
    std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> outer; // train, test
    if (opt.outer_folds >= 2) {
        SplitPlan plan;
        plan.seed = opt.seed;
        plan.folds = opt.outer_folds;
        const auto roles = make_split(data.size(), plan);
        for (std::size_t f = 0; f < opt.outer_folds; ++f) {
            std::vector<std::size_t> tr, te;
            for (std::size_t i = 0; i < data.size(); ++i)
                (roles[i] == f ? te : tr).push_back(i);
            outer.push_back({std::move(tr), std::move(te)});
        }
    } else {
        SplitPlan plan;
        plan.seed = opt.seed;
        plan.fractions = {1.0 - opt.test_fraction, opt.test_fraction};
        const auto roles = make_split(data.size(), plan);
        outer.push_back({rows_with_role(roles, 0), rows_with_role(roles, 1)});
    }

    struct Pooled {
        Vector pred, truth;
        double validation = 0.0;
        std::string config;
        double seconds = 0.0;
        double asg_sum = 0.0; // instance-weighted avg squared gradient
    };
    Pooled pool_nls, pool_nn, pool_lls, pool_ols;

    std::uint64_t cell_seed = opt.seed;
    for (std::size_t fold = 0; fold < outer.size(); ++fold) {
        const auto& [train_rows, test_rows] = outer[fold];
        const Dataset train = data.take_rows(train_rows);
        const Dataset test = data.take_rows(test_rows);
        const auto inner = detail::validation_splits(train.size(), opt);

        auto eval_on = [&](auto&& fit_fn, const std::vector<std::size_t>& tr,
                           const std::vector<std::size_t>& va) {
            const Dataset t = train.take_rows(tr);
            const Dataset v = train.take_rows(va);
            auto model = fit_fn(t);
            return mean_squared_error(model.predict_batch(v.features), v.target);
        };

        if (opt.run_nls) {
            detail::TimedSection timer;
            double best_score = std::numeric_limits<double>::infinity();
            std::size_t best_layers = grid.layer_counts.front();
            std::size_t best_width = grid.widths.front();
            double best_lambda = grid.lambdas.front();
            for (std::size_t layers : grid.layer_counts)
                for (std::size_t width : grid.widths)
                    for (double lambda : grid.lambdas) {
                        NlsConfig cfg = opt.base;
                        cfg.hidden_layers.assign(layers, width);
                        cfg.lambda = lambda;
                        cfg.seed = cell_seed++;
                        double score = 0.0;
                        for (const auto& [tr, va] : inner)
                            score += eval_on(
                                [&](const Dataset& t) { return fit(cfg, t).first; }, tr, va);
                        score /= static_cast<double>(inner.size());
                        report.grid_log.push_back(
                            {"nls", detail::describe_arch(layers, width, lambda), score});
                        if (score < best_score) {
                            best_score = score;
                            best_layers = layers;
                            best_width = width;
                            best_lambda = lambda;
                        }
                    }
            NlsConfig cfg = opt.base;
            cfg.hidden_layers.assign(best_layers, best_width);
            cfg.lambda = best_lambda;
            cfg.seed = cell_seed++;
            const NlsModel model = fit(cfg, train).first;
            const Vector pred = model.predict_batch(test.features);
            pool_nls.pred.insert(pool_nls.pred.end(), pred.begin(), pred.end());
            pool_nls.truth.insert(pool_nls.truth.end(), test.target.begin(), test.target.end());
            pool_nls.validation += best_score / static_cast<double>(outer.size());
            pool_nls.config = detail::describe_arch(best_layers, best_width, best_lambda);
            pool_nls.seconds += timer.seconds();
            pool_nls.asg_sum += model.average_squared_gradient(test.features) *
                                static_cast<double>(test.size());
        }

        if (opt.run_nn) {
            detail::TimedSection timer;
            double best_score = std::numeric_limits<double>::infinity();
            std::size_t best_layers = grid.layer_counts.front();
            std::size_t best_width = grid.widths.front();
            for (std::size_t layers : grid.layer_counts)
                for (std::size_t width : grid.widths) {
                    NlsConfig cfg = opt.base;
                    cfg.hidden_layers.assign(layers, width);
                    cfg.lambda = 0.0;
                    cfg.seed = cell_seed++;
                    double score = 0.0;
                    for (const auto& [tr, va] : inner)
                        score += eval_on(
                            [&](const Dataset& t) { return fit_nn(cfg, t).first; }, tr, va);
                    score /= static_cast<double>(inner.size());
                    report.grid_log.push_back(
                        {"nn", detail::describe_arch(layers, width, 0.0), score});
                    if (score < best_score) {
                        best_score = score;
                        best_layers = layers;
                        best_width = width;
                    }
                }
            NlsConfig cfg = opt.base;
            cfg.hidden_layers.assign(best_layers, best_width);
            cfg.lambda = 0.0;
            cfg.seed = cell_seed++;
            const NnModel model = fit_nn(cfg, train).first;
            const Vector pred = model.predict_batch(test.features);
            pool_nn.pred.insert(pool_nn.pred.end(), pred.begin(), pred.end());
            pool_nn.truth.insert(pool_nn.truth.end(), test.target.begin(), test.target.end());
            pool_nn.validation += best_score / static_cast<double>(outer.size());
            pool_nn.config = detail::describe_arch(best_layers, best_width, 0.0);
            pool_nn.seconds += timer.seconds();
        }

        if (opt.run_lls) {
            detail::TimedSection timer;
            double best_score = std::numeric_limits<double>::infinity();
            double best_sigma = grid.sigma_grid.front();
            std::vector<double> sigmas = grid.sigma_grid;
            std::sort(sigmas.begin(), sigmas.end());
            for (double sigma : sigmas) {
                double score = 0.0;
                for (const auto& [tr, va] : inner)
                    score += eval_on(
                        [&](const Dataset& t) { return LlsModel::fit(t, sigma); }, tr, va);
                score /= static_cast<double>(inner.size());
                std::ostringstream cfgname;
                cfgname << "sigma=" << sigma;
                report.grid_log.push_back({"lls", cfgname.str(), score});
                if (score < best_score) {
                    best_score = score;
                    best_sigma = sigma;
                }
            }
            const LlsModel model = LlsModel::fit(train, best_sigma);
            const Vector pred = model.predict_batch(test.features);
            pool_lls.pred.insert(pool_lls.pred.end(), pred.begin(), pred.end());
            pool_lls.truth.insert(pool_lls.truth.end(), test.target.begin(), test.target.end());
            pool_lls.validation += best_score / static_cast<double>(outer.size());
            std::ostringstream cfgname;
            cfgname << "sigma=" << best_sigma;
            pool_lls.config = cfgname.str();
            pool_lls.seconds += timer.seconds();
        }

        if (opt.run_ols) {
            detail::TimedSection timer;
            const OlsModel model = OlsModel::fit(train.features, train.target);
            const Vector pred = model.predict_batch(test.features);
            pool_ols.pred.insert(pool_ols.pred.end(), pred.begin(), pred.end());
            pool_ols.truth.insert(pool_ols.truth.end(), test.target.begin(), test.target.end());
            pool_ols.config = "intercept + linear terms";
            pool_ols.seconds += timer.seconds();
        }
    }

    auto push_row = [&](const char* name, const Pooled& pool, bool with_asg) {
        if (pool.pred.empty()) return;
        ReportRow row;
        row.model = name;
        row.chosen_config = pool.config;
        row.validation_mse = pool.validation;
        row.test_mse = mean_squared_error(pool.pred, pool.truth);
        row.test_mae = mean_absolute_error(pool.pred, pool.truth);
        row.se_mse = mse_standard_error(pool.pred, pool.truth);
        row.se_mae = mae_standard_error(pool.pred, pool.truth);
        row.fit_seconds = pool.seconds;
        if (with_asg)
            row.avg_squared_gradient = pool.asg_sum / static_cast<double>(pool.pred.size());
        report.rows.push_back(std::move(row));
    };
    push_row("nls", pool_nls, true);
    push_row("nn", pool_nn, false);
    push_row("lls", pool_lls, false);
    push_row("ols", pool_ols, false);
    return report;
}

// ---------------------------------------------------------------------------
// lambda sweep with warm starts
// ---------------------------------------------------------------------------

struct SweepRow {
    double lambda = 0.0;
    double train_mse = 0.0;
    double test_mse = 0.0;
    double train_avg_squared_gradient = 0.0;
    double test_avg_squared_gradient = 0.0;
    std::size_t epochs = 0;
    double fit_seconds = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::vector<NlsModel> models; // one per lambda, in sweep order

    json to_json() const {
        json rows_j = json::array();
        for (const auto& r : rows)
            rows_j.push_back(json{{"lambda", r.lambda},
                                  {"train_mse", r.train_mse},
                                  {"test_mse", r.test_mse},
                                  {"train_avg_squared_gradient", r.train_avg_squared_gradient},
                                  {"test_avg_squared_gradient", r.test_avg_squared_gradient},
                                  {"epochs", r.epochs},
                                  {"fit_seconds", r.fit_seconds}});
        return json{{"format_version", kFormatVersion}, {"rows", std::move(rows_j)}};
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "lambda,train_mse,test_mse,train_avg_squared_gradient,"
               "test_avg_squared_gradient,epochs,fit_seconds\n";
        for (const auto& r : rows)
            out << detail::format_double(r.lambda) << ',' << detail::format_double(r.train_mse)
                << ',' << detail::format_double(r.test_mse) << ','
                << detail::format_double(r.train_avg_squared_gradient) << ','
                << detail::format_double(r.test_avg_squared_gradient) << ',' << r.epochs << ','
                << detail::format_double(r.fit_seconds) << '\n';
        return out.str();
    }
};

/// Fits at each lambda in ascending order, warm-starting every fit from the
/// previous one; the data behind the penalization-strength figures.
inline SweepResult sweep_lambda(const NlsConfig& base, const std::vector<double>& lambdas,
                                const Dataset& train, const Dataset& test) {
    if (lambdas.empty()) throw ConfigError("sweep: empty lambda list");
    for (std::size_t i = 1; i < lambdas.size(); ++i)
        if (lambdas[i] < lambdas[i - 1])
            throw ConfigError("sweep: lambda list must be sorted ascending");

    SweepResult result;
    std::optional<NlsModel> previous;
    for (double lambda : lambdas) {
        detail::TimedSection timer;
        NlsConfig cfg = base;
        cfg.lambda = lambda;
        auto [model, trace] =
            previous ? warm_fit(*previous, lambda, train) : fit(cfg, train);
        SweepRow row;
        row.lambda = lambda;
        row.fit_seconds = timer.seconds();
        row.epochs = trace.train_loss.size() - 1;
        row.train_mse = mean_squared_error(model.predict_batch(train.features), train.target);
        row.test_mse = mean_squared_error(model.predict_batch(test.features), test.target);
        row.train_avg_squared_gradient = model.average_squared_gradient(train.features);
        row.test_avg_squared_gradient = model.average_squared_gradient(test.features);
        result.rows.push_back(row);
        previous = model;
        result.models.push_back(std::move(model));
    }
    return result;
}

} // namespace nls
