// Command-line surface for the neural local smoother: train models, evaluate
// them, sweep the penalization strength, compare against baselines, and emit
// explanations. Reports are written as JSON and CSV under --out.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "nls/nls.hpp"

namespace fs = std::filesystem;
using nls::json;

namespace {

// ---------------------------------------------------------------------------
// config files: one `key = value` pair per line, '#' starts a comment
// ---------------------------------------------------------------------------

struct CliConfig {
    std::string model_kind = "nls"; // nls | classifier | lls
    std::string target;             // target column; empty = last column
    nls::NlsConfig trainer;
    // lls settings
    std::optional<double> sigma;
    std::vector<double> sigma_grid{0.1, 1.0, 10.0, 100.0, 1000.0};
    double ridge = 1e-8;
    // harness settings
    double test_fraction = 0.1;
};

std::vector<double> parse_double_list(const std::string& text, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw nls::ConfigError(key + ": cannot parse '" + item + "' as a number");
        }
    }
    if (out.empty()) throw nls::ConfigError(key + ": empty list");
    return out;
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& key) {
    std::vector<std::size_t> out;
    for (double v : parse_double_list(text, key)) {
        if (v < 0 || v != std::floor(v))
            throw nls::ConfigError(key + ": expected nonnegative integers");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

bool parse_bool(const std::string& text, const std::string& key) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw nls::ConfigError(key + ": expected true/false, got '" + text + "'");
}

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

CliConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw nls::ConfigError("cannot open config '" + path + "'");
    CliConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw nls::ConfigError(path + ":" + std::to_string(line_no) +
                                   ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "model") cfg.model_kind = value;
            else if (key == "target") cfg.target = value;
            else if (key == "hidden_layers") cfg.trainer.hidden_layers = parse_size_list(value, key);
            else if (key == "lambda") cfg.trainer.lambda = std::stod(value);
            else if (key == "learning_rate") cfg.trainer.learning_rate = std::stod(value);
            else if (key == "batch_size") cfg.trainer.batch_size = std::stoul(value);
            else if (key == "patience") cfg.trainer.patience = std::stoul(value);
            else if (key == "validation_fraction") cfg.trainer.validation_fraction = std::stod(value);
            else if (key == "max_epochs") cfg.trainer.max_epochs = std::stoul(value);
            else if (key == "seed") cfg.trainer.seed = std::stoull(value);
            else if (key == "use_batch_norm") cfg.trainer.use_batch_norm = parse_bool(value, key);
            else if (key == "dropout_rate") cfg.trainer.dropout_rate = std::stod(value);
            else if (key == "lr_patience") cfg.trainer.lr_patience = std::stoul(value);
            else if (key == "lr_factor") cfg.trainer.lr_factor = std::stod(value);
            else if (key == "min_learning_rate") cfg.trainer.min_learning_rate = std::stod(value);
            else if (key == "sigma") cfg.sigma = std::stod(value);
            else if (key == "sigma_grid") cfg.sigma_grid = parse_double_list(value, key);
            else if (key == "ridge") cfg.ridge = std::stod(value);
            else if (key == "test_fraction") cfg.test_fraction = std::stod(value);
            else
                throw nls::ConfigError(path + ":" + std::to_string(line_no) + ": unknown key '" +
                                       key + "'");
        } catch (const nls::ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw nls::ConfigError(path + ":" + std::to_string(line_no) + ": bad value for '" +
                                   key + "'");
        }
    }
    return cfg;
}

void ensure_out_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw nls::InputError("cannot create output directory '" + out + "'");
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

// ---------------------------------------------------------------------------
// subcommand bodies
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_dir, std::optional<std::uint64_t> seed) {
    CliConfig cfg = load_config(config_path);
    if (seed) cfg.trainer.seed = *seed;
    cfg.trainer.validate();
    ensure_out_dir(out_dir);
    const nls::Dataset data = nls::load_csv(data_path, cfg.target);

    if (cfg.model_kind == "nls") {
        auto [model, trace] = nls::fit(cfg.trainer, data);
        nls::write_json_file(nls::to_json(model), join_path(out_dir, "model.json"));
        nls::write_json_file(nls::to_json(trace), join_path(out_dir, "trace.json"));
        std::printf("trained nls model on %zu instances (%zu features)\n", data.size(),
                    data.dimension());
        std::printf("epochs: %zu (stop: %s), best validation loss %.6g at epoch %zu\n",
                    trace.train_loss.size() - 1, trace.stop_reason.c_str(),
                    trace.validation_loss[trace.best_epoch], trace.best_epoch);
        std::printf("model written to %s\n", join_path(out_dir, "model.json").c_str());
        return 0;
    }
    if (cfg.model_kind == "classifier") {
        auto [model, trace] = nls::fit_classifier(cfg.trainer, data);
        nls::write_json_file(nls::to_json(model), join_path(out_dir, "model.json"));
        nls::write_json_file(nls::to_json(trace), join_path(out_dir, "trace.json"));
        std::printf("trained nls classifier: %zu classes, %zu instances\n", model.class_count(),
                    data.size());
        std::printf("epochs: %zu (stop: %s)\n", trace.train_loss.size() - 1,
                    trace.stop_reason.c_str());
        return 0;
    }
    if (cfg.model_kind == "lls") {
        double sigma;
        if (cfg.sigma) {
            sigma = *cfg.sigma;
        } else {
            nls::SplitPlan plan;
            plan.seed = cfg.trainer.seed;
            plan.fractions = {1.0 - cfg.trainer.validation_fraction,
                              cfg.trainer.validation_fraction};
            const auto roles = nls::make_split(data.size(), plan);
            const nls::Dataset tr = data.take_rows(nls::rows_with_role(roles, 0));
            const nls::Dataset va = data.take_rows(nls::rows_with_role(roles, 1));
            sigma = nls::select_sigma(tr, cfg.sigma_grid, va, cfg.ridge);
            std::printf("selected sigma = %g from the grid\n", sigma);
        }
        const nls::LlsModel model = nls::LlsModel::fit(data, sigma, cfg.ridge);
        nls::write_json_file(nls::to_json(model), join_path(out_dir, "model.json"));
        std::printf("stored lls model: sigma=%g, ridge=%g, %zu training instances\n", sigma,
                    cfg.ridge, data.size());
        return 0;
    }
    throw nls::ConfigError("unknown model kind '" + cfg.model_kind + "'");
}

nls::Vector model_predictions(const nls::AnyModel& model, const nls::Matrix& features) {
    if (const auto* m = std::get_if<nls::NlsModel>(&model)) return m->predict_batch(features);
    if (const auto* m = std::get_if<nls::LlsModel>(&model)) return m->predict_batch(features);
    throw nls::ConfigError("this command needs a regression model");
}

std::string model_target_name(const nls::AnyModel& model) {
    if (const auto* m = std::get_if<nls::NlsModel>(&model)) return m->target_name();
    if (const auto* m = std::get_if<nls::NlsClassifier>(&model)) return m->target_name();
    if (const auto* m = std::get_if<nls::LlsModel>(&model)) return m->target_name();
    return "";
}

int cmd_eval(const std::string& model_path, const std::string& data_path,
             const std::string& out_dir) {
    const nls::AnyModel model = nls::load_model(model_path);
    const nls::Dataset data = nls::load_csv(data_path, model_target_name(model));
    ensure_out_dir(out_dir);

    json metrics;
    if (const auto* clf = std::get_if<nls::NlsClassifier>(&model)) {
        std::size_t correct = 0;
        double ce = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const auto x = data.features.row(i);
            if (clf->predict_label(x) == data.target[i]) ++correct;
            const nls::Vector p = clf->class_probabilities(x);
            const auto& values = clf->class_values();
            for (std::size_t c = 0; c < values.size(); ++c)
                if (values[c] == data.target[i]) ce -= std::log(std::max(p[c], 1e-300));
        }
        const double acc = static_cast<double>(correct) / static_cast<double>(data.size());
        ce /= static_cast<double>(data.size());
        metrics = json{{"accuracy", acc}, {"mean_cross_entropy", ce}, {"n", data.size()}};
        std::printf("accuracy: %.4f   mean cross-entropy: %.6g   (n=%zu)\n", acc, ce, data.size());
    } else {
        const nls::Vector pred = model_predictions(model, data.features);
        const double mse = nls::mean_squared_error(pred, data.target);
        const double mae = nls::mean_absolute_error(pred, data.target);
        const double se_mse = nls::mse_standard_error(pred, data.target);
        const double se_mae = nls::mae_standard_error(pred, data.target);
        metrics = json{{"mse", mse}, {"mae", mae},  {"se_mse", se_mse},
                       {"se_mae", se_mae}, {"n", data.size()}};
        if (const auto* m = std::get_if<nls::NlsModel>(&model))
            metrics["avg_squared_gradient"] = m->average_squared_gradient(data.features);
        std::printf("mse: %.6g (se %.3g)   mae: %.6g (se %.3g)   (n=%zu)\n", mse, se_mse, mae,
                    se_mae, data.size());
    }
    nls::write_json_file(metrics, join_path(out_dir, "metrics.json"));
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& data_path,
              const std::string& lambdas_text, const std::string& out_dir,
              std::optional<std::uint64_t> seed) {
    CliConfig cfg = load_config(config_path);
    if (seed) cfg.trainer.seed = *seed;
    cfg.trainer.validate();
    const std::vector<double> lambdas = parse_double_list(lambdas_text, "--lambdas");
    ensure_out_dir(out_dir);

    const nls::Dataset data = nls::load_csv(data_path, cfg.target);
    nls::SplitPlan plan;
    plan.seed = cfg.trainer.seed;
    plan.fractions = {1.0 - cfg.test_fraction, cfg.test_fraction};
    const auto roles = nls::make_split(data.size(), plan);
    const nls::Dataset train = data.take_rows(nls::rows_with_role(roles, 0));
    const nls::Dataset test = data.take_rows(nls::rows_with_role(roles, 1));

    const nls::SweepResult sweep = nls::sweep_lambda(cfg.trainer, lambdas, train, test);
    nls::write_json_file(sweep.to_json(), join_path(out_dir, "sweep.json"));
    std::ofstream csv(join_path(out_dir, "sweep.csv"));
    csv << sweep.to_csv();
    std::printf("lambda    train_mse    test_mse     train_asg\n");
    for (const auto& r : sweep.rows)
        std::printf("%-9g %-12.6g %-12.6g %-12.6g\n", r.lambda, r.train_mse, r.test_mse,
                    r.train_avg_squared_gradient);
    return 0;
}

int cmd_compare(const std::string& config_path, const std::string& data_path,
                const std::string& out_dir, const std::string& layers_text,
                const std::string& widths_text, const std::string& sigmas_text,
                const std::string& lambdas_text, std::size_t outer_folds,
                std::size_t inner_folds, const std::string& models_text,
                std::optional<std::uint64_t> seed) {
    CliConfig cfg = load_config(config_path);
    if (seed) cfg.trainer.seed = *seed;
    cfg.trainer.validate();
    ensure_out_dir(out_dir);
    const nls::Dataset data = nls::load_csv(data_path, cfg.target);

    nls::GridSpec grid;
    if (!layers_text.empty()) grid.layer_counts = parse_size_list(layers_text, "--layers");
    if (!widths_text.empty()) grid.widths = parse_size_list(widths_text, "--widths");
    if (!sigmas_text.empty()) grid.sigma_grid = parse_double_list(sigmas_text, "--sigmas");
    if (!lambdas_text.empty()) grid.lambdas = parse_double_list(lambdas_text, "--lambdas");

    nls::CompareOptions opt;
    opt.seed = cfg.trainer.seed;
    opt.test_fraction = cfg.test_fraction;
    opt.outer_folds = outer_folds;
    opt.inner_folds = inner_folds;
    opt.validation_fraction = cfg.trainer.validation_fraction;
    opt.base = cfg.trainer;
    if (!models_text.empty()) {
        opt.run_nls = models_text.find("nls") != std::string::npos;
        opt.run_nn = models_text.find("nn") != std::string::npos;
        opt.run_lls = models_text.find("lls") != std::string::npos;
        opt.run_ols = models_text.find("ols") != std::string::npos;
    }

    const nls::ExperimentReport report = nls::compare(data, grid, opt);
    nls::write_json_file(report.to_json(), join_path(out_dir, "report.json"));
    std::ofstream csv(join_path(out_dir, "report.csv"));
    csv << report.to_csv();
    std::printf("%-5s %-28s %-12s %-12s %-10s\n", "model", "config", "test_mse", "test_mae",
                "fit_sec");
    for (const auto& r : report.rows)
        std::printf("%-5s %-28s %-12.6g %-12.6g %-10.2f\n", r.model.c_str(),
                    r.chosen_config.c_str(), r.test_mse, r.test_mae, r.fit_seconds);
    return 0;
}

int cmd_explain(const std::string& model_path, const std::string& data_path,
                const std::string& out_dir, bool extend, std::uint64_t seed) {
    const nls::AnyModel any = nls::load_model(model_path);
    const auto* model = std::get_if<nls::NlsModel>(&any);
    if (!model) throw nls::ConfigError("explain needs an nls_regressor model");
    const nls::Dataset data = nls::load_csv(data_path, model->target_name());
    ensure_out_dir(out_dir);

    json explanations = json::array();
    std::ofstream text(join_path(out_dir, "explanations.txt"));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const nls::Explanation e = nls::explain(*model, data.features.row(i));
        explanations.push_back(nls::to_json(e));
        text << "instance " << i << ": prediction = " << e.prediction
             << ", intercept = " << e.intercept << '\n';
        char line[160];
        std::snprintf(line, sizeof(line), "  %-16s %14s %14s %14s\n", "feature", "value",
                      "coefficient", "contribution");
        text << line;
        for (std::size_t k = 0; k < e.coefficients.size(); ++k) {
            std::snprintf(line, sizeof(line), "  %-16s %14.6g %14.6g %14.6g\n",
                          e.feature_names[k].c_str(), e.instance[k], e.coefficients[k],
                          e.contributions[k]);
            text << line;
        }
        text << '\n';
    }
    nls::write_json_file(explanations, join_path(out_dir, "explanations.json"));
    std::printf("wrote %zu explanations\n", data.size());

    if (model->dimension() == 1) {
        // coefficient curve over the observed range; plot fodder
        double lo = data.features(0, 0), hi = lo;
        for (std::size_t i = 0; i < data.size(); ++i) {
            lo = std::min(lo, data.features(i, 0));
            hi = std::max(hi, data.features(i, 0));
        }
        std::ofstream curve(join_path(out_dir, "theta_curve.csv"));
        curve << "x,theta1\n";
        for (int g = 0; g < 200; ++g) {
            const double x = lo + (hi - lo) * g / 199.0;
            const nls::Vector th = model->theta(std::vector<double>{x});
            curve << nls::detail::format_double(x) << ','
                  << nls::detail::format_double(th[1]) << '\n';
        }
    }

    if (extend) {
        nls::SplitPlan plan;
        plan.seed = seed;
        plan.fractions = {0.75, 0.25};
        const auto roles = nls::make_split(data.size(), plan);
        const auto pred_rows = nls::rows_with_role(roles, 0);
        const auto ext_rows = nls::rows_with_role(roles, 1);
        const nls::ExtensionReport report = nls::extend_predictions(
            *model, data.features.take_rows(pred_rows), data.features.take_rows(ext_rows));
        nls::write_json_file(nls::to_json(report), join_path(out_dir, "extension.json"));
        std::printf("extension: %zu prediction / %zu extension instances, mean gap %.6g\n",
                    pred_rows.size(), ext_rows.size(), report.mean_gap);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"neural local smoother toolkit"};
    app.require_subcommand(1);

    std::string config_path, data_path, model_path, out_dir = ".";
    std::string lambdas_text, layers_text, widths_text, sigmas_text, models_text;
    std::size_t outer_folds = 0, inner_folds = 0;
    bool extend = false;
    std::optional<std::uint64_t> seed;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "override the config seed");
    };
    auto add_out = [&](CLI::App* cmd) {
        cmd->add_option("--out", out_dir, "output directory (default .)");
    };

    CLI::App* train = app.add_subcommand("train", "fit a model and persist it");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--data", data_path, "training CSV")->required();
    add_out(train);
    add_seed(train);

    CLI::App* eval = app.add_subcommand("eval", "evaluate a stored model on a dataset");
    eval->add_option("--model", model_path, "model JSON")->required();
    eval->add_option("--data", data_path, "evaluation CSV")->required();
    add_out(eval);

    CLI::App* sweep = app.add_subcommand("sweep-lambda",
                                         "warm-started sweep over penalization strengths");
    sweep->add_option("--config", config_path, "config file")->required();
    sweep->add_option("--data", data_path, "dataset CSV")->required();
    sweep->add_option("--lambdas", lambdas_text, "ascending list, e.g. 0,2,5,10")->required();
    add_out(sweep);
    add_seed(sweep);

    CLI::App* compare = app.add_subcommand("compare", "grid-searched model comparison");
    compare->add_option("--config", config_path, "config file")->required();
    compare->add_option("--data", data_path, "dataset CSV")->required();
    compare->add_option("--layers", layers_text, "layer-count grid (default 1,3,5)");
    compare->add_option("--widths", widths_text, "width grid (default 100,300,500)");
    compare->add_option("--sigmas", sigmas_text, "lls bandwidth grid");
    compare->add_option("--lambdas", lambdas_text, "nls penalization grid (default 0)");
    compare->add_option("--outer-folds", outer_folds, "k-fold outer evaluation (default holdout)");
    compare->add_option("--inner-folds", inner_folds, "k-fold grid validation (default holdout)");
    compare->add_option("--models", models_text, "subset of nls,nn,lls,ols (default all)");
    add_out(compare);
    add_seed(compare);

    CLI::App* explain = app.add_subcommand("explain", "emit per-instance explanations");
    explain->add_option("--model", model_path, "model JSON")->required();
    explain->add_option("--data", data_path, "instances CSV")->required();
    explain->add_flag("--extend", extend, "run the interpretation-extension procedure");
    add_out(explain);
    add_seed(explain);

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(config_path, data_path, out_dir, seed);
        if (eval->parsed()) return cmd_eval(model_path, data_path, out_dir);
        if (sweep->parsed()) return cmd_sweep(config_path, data_path, lambdas_text, out_dir, seed);
        if (compare->parsed())
            return cmd_compare(config_path, data_path, out_dir, layers_text, widths_text,
                               sigmas_text, lambdas_text, outer_folds, inner_folds, models_text,
                               seed);
        if (explain->parsed())
            return cmd_explain(model_path, data_path, out_dir, extend, seed.value_or(0));
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const nls::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
