#include <catch_amalgamated.hpp>

#include <cmath>

#include "nls/experiment.hpp"
#include "nls/model.hpp"

using namespace nls;

namespace {

/// Model whose coefficient network is constant: zero weights, output bias =
/// the wanted slopes, identity standardization.
NlsModel constant_theta_model(const Vector& slopes, double intercept) {
    const std::size_t d = slopes.size();
    std::vector<LayerSpec> specs{{d, d, Activation::Identity, false, 0.0}};
    NetworkWeights net = init_weights(specs, 0);
    for (auto& v : net.layers[0].weight.flat()) v = 0.0;
    net.layers[0].bias = slopes;
    Standardizer stats;
    stats.mean.assign(d, 0.0);
    stats.stddev.assign(d, 1.0);
    std::vector<std::string> names;
    for (std::size_t k = 0; k < d; ++k) names.push_back("x" + std::to_string(k + 1));
    return NlsModel(std::move(net), intercept, std::move(stats), NlsConfig{}, names, "y");
}

Dataset linear_dataset(std::size_t n, std::uint64_t seed, double noise_sd = 0.1) {
    Rng rng(seed);
    Dataset ds;
    ds.features = Matrix(n, 2);
    ds.target.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = rng.uniform(-2.0, 2.0);
        const double b = rng.uniform(-1.0, 3.0);
        ds.features(i, 0) = a;
        ds.features(i, 1) = b;
        ds.target[i] = 0.5 + 1.5 * a - 2.0 * b + noise_sd * rng.gaussian();
    }
    ds.feature_names = {"a", "b"};
    return ds;
}

} // namespace

TEST_CASE("config validation names the offending field") {
    NlsConfig cfg;
    cfg.lambda = -1.0;
    try {
        cfg.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("lambda") != std::string::npos);
    }
    cfg = NlsConfig{};
    cfg.validation_fraction = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = NlsConfig{};
    cfg.patience = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("constant-theta model: coefficients, prediction and intercept meaning") {
    const NlsModel model = constant_theta_model({2.0}, 1.0);
    const Vector th = model.theta(Vector{3.0});
    CHECK(th[0] == 1.0);
    CHECK(th[1] == 2.0);
    CHECK(model.predict(Vector{3.0}) == 7.0); // 1 + 2*3

    // prediction at the origin is the intercept
    CHECK(model.predict(Vector{0.0}) == 1.0);

    // same instance twice -> identical coefficients
    const Vector th2 = model.theta(Vector{3.0});
    CHECK(th == th2);

    // constant coefficients for any instance
    const Vector th3 = model.theta(Vector{-57.0});
    CHECK(th3[1] == 2.0);
}

TEST_CASE("theta rejects dimension mismatches") {
    const NlsModel model = constant_theta_model({1.0, 1.0}, 0.0);
    CHECK_THROWS_AS(model.theta(Vector{1.0}), InputError);
    CHECK_THROWS_AS(NlsModel().predict(Vector{1.0}), InputError);
}

TEST_CASE("penalized_loss parts: constant network, lambda zero, linear slope") {
    const NlsModel constant = constant_theta_model({2.0, -1.0}, 0.5);
    Matrix x(3, 2);
    Rng rng(5);
    for (auto& v : x.flat()) v = rng.gaussian();
    Vector y{1.0, 2.0, 3.0};

    const LossValue v0 = constant.penalized_loss(x, y, 5.0);
    CHECK(v0.penalty_part == 0.0);

    const LossValue v1 = constant.penalized_loss(x, y, 0.0);
    CHECK(v1.total == v1.data_part);

    // theta_1(x) = a x: one linear layer with weight a -> penalty a^2 per instance
    const double a = 1.7;
    std::vector<LayerSpec> specs{{1, 1, Activation::Identity, false, 0.0}};
    NetworkWeights net = init_weights(specs, 0);
    net.layers[0].weight(0, 0) = a;
    net.layers[0].bias = {0.0};
    Standardizer stats;
    stats.mean = {0.0};
    stats.stddev = {1.0};
    const NlsModel linear(std::move(net), 0.0, std::move(stats), NlsConfig{}, {"x"}, "y");
    Matrix x1(4, 1);
    for (std::size_t i = 0; i < 4; ++i) x1(i, 0) = rng.gaussian();
    const LossValue v2 = linear.penalized_loss(x1, Vector(4, 0.0), 1.0);
    CHECK(v2.penalty_part == Catch::Approx(a * a).margin(1e-12));
}

TEST_CASE("fit absorbs a constant target into the intercept") {
    Dataset ds;
    ds.features = Matrix(40, 1);
    Rng rng(3);
    for (auto& v : ds.features.flat()) v = rng.uniform(-1.0, 1.0);
    ds.target.assign(40, 4.2);
    ds.feature_names = {"x"};
    NlsConfig cfg;
    cfg.hidden_layers = {8};
    cfg.batch_size = 8;
    cfg.max_epochs = 400;
    cfg.seed = 1;
    const auto [model, trace] = fit(cfg, ds);
    for (std::size_t i = 0; i < ds.size(); ++i)
        REQUIRE(std::abs(model.predict(ds.features.row(i)) - 4.2) < 0.01);
}

TEST_CASE("fit is deterministic for a fixed seed") {
    const Dataset ds = linear_dataset(60, 8);
    NlsConfig cfg;
    cfg.hidden_layers = {6};
    cfg.batch_size = 16;
    cfg.max_epochs = 30;
    cfg.seed = 9;
    const auto [m1, t1] = fit(cfg, ds);
    const auto [m2, t2] = fit(cfg, ds);
    REQUIRE(m1.network().layers.size() == m2.network().layers.size());
    for (std::size_t l = 0; l < m1.network().layers.size(); ++l) {
        const auto& w1 = m1.network().layers[l].weight.flat();
        const auto& w2 = m2.network().layers[l].weight.flat();
        for (std::size_t i = 0; i < w1.size(); ++i) REQUIRE(w1[i] == w2[i]);
    }
    CHECK(m1.intercept() == m2.intercept());
    CHECK(t1.validation_loss == t2.validation_loss);
}

TEST_CASE("fit requires at least 20 instances") {
    Dataset ds = linear_dataset(10, 1);
    CHECK_THROWS_AS(fit(NlsConfig{}, ds), InputError);
}

TEST_CASE("local-linearity identity holds bit-for-bit on a trained model") {
    const Dataset ds = linear_dataset(80, 12);
    NlsConfig cfg;
    cfg.hidden_layers = {10};
    cfg.batch_size = 16;
    cfg.max_epochs = 60;
    cfg.seed = 2;
    const auto [model, trace] = fit(cfg, ds);
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const Vector x{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
        const Vector th = model.theta(x);
        double manual = th[0];
        for (std::size_t k = 0; k < x.size(); ++k) manual += th[k + 1] * x[k];
        REQUIRE(model.predict(x) == manual);
    }
}

TEST_CASE("early stopping keeps the weights of the best validation epoch") {
    const Dataset ds = linear_dataset(100, 21);
    NlsConfig cfg;
    cfg.hidden_layers = {8};
    cfg.batch_size = 16;
    cfg.max_epochs = 120;
    cfg.patience = 15;
    cfg.seed = 4;
    const auto [model, trace] = fit(cfg, ds);
    const double best = *std::min_element(trace.validation_loss.begin(),
                                          trace.validation_loss.end());
    CHECK(trace.validation_loss[trace.best_epoch] == best);
    CHECK(trace.best_epoch < trace.validation_loss.size());
}

TEST_CASE("large penalization collapses the smoother onto least squares") {
    const Dataset ds = linear_dataset(200, 31, 0.3);
    NlsConfig cfg;
    cfg.hidden_layers = {16};
    cfg.lambda = 1e6;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 64;
    cfg.max_epochs = 1500;
    cfg.patience = 100;
    cfg.seed = 6;
    const auto [model, trace] = fit(cfg, ds);

    // coefficients constant over a probe grid
    Rng rng(55);
    std::vector<Vector> thetas;
    for (int g = 0; g < 100; ++g)
        thetas.push_back(model.theta(Vector{rng.uniform(-2.0, 2.0), rng.uniform(-1.0, 3.0)}));
    for (std::size_t k = 1; k <= 2; ++k) {
        double mean = 0.0;
        for (const auto& th : thetas) mean += th[k];
        mean /= static_cast<double>(thetas.size());
        for (const auto& th : thetas) REQUIRE(std::abs(th[k] - mean) < 1e-3);
    }

    // predictions near the closed-form least squares fit
    const OlsModel ols = OlsModel::fit(ds.features, ds.target);
    double rmse = 0.0;
    for (int g = 0; g < 100; ++g) {
        const Vector x{rng.uniform(-2.0, 2.0), rng.uniform(-1.0, 3.0)};
        const double diff = model.predict(x) - ols.predict(x);
        rmse += diff * diff;
    }
    rmse = std::sqrt(rmse / 100.0);
    CHECK(rmse < 1e-2);
}

TEST_CASE("warm_fit at the same lambda with patience 1 stays near the input weights") {
    const Dataset ds = linear_dataset(80, 41);
    NlsConfig cfg;
    cfg.hidden_layers = {8};
    cfg.batch_size = 16;
    cfg.max_epochs = 200;
    cfg.seed = 3;
    const auto [model, trace] = fit(cfg, ds);

    NlsConfig nearly_frozen = cfg;
    nearly_frozen.patience = 1;
    nearly_frozen.max_epochs = 5;
    nearly_frozen.learning_rate = 1e-12;
    nearly_frozen.min_learning_rate = 0.0;
    // rebuild a model carrying the frozen config, then warm-start from it
    const NlsModel seed_model(model.network(), model.intercept(), model.standardizer(),
                              nearly_frozen, model.feature_names(), model.target_name());
    const auto [warm, wtrace] = warm_fit(seed_model, cfg.lambda, ds);
    for (std::size_t l = 0; l < warm.network().layers.size(); ++l) {
        const auto& w1 = warm.network().layers[l].weight.flat();
        const auto& w2 = model.network().layers[l].weight.flat();
        for (std::size_t i = 0; i < w1.size(); ++i)
            REQUIRE(std::abs(w1[i] - w2[i]) < 1e-6);
    }
}

TEST_CASE("warm sweep: penalty shrinks with lambda and warm fits stop sooner") {
    // three folds of a quadratic problem; compare epochs of warm vs cold fits
    const Dataset ds = gen_quadratic(600, 0, 77);
    NlsConfig cfg;
    cfg.hidden_layers = {16};
    cfg.batch_size = 64;
    cfg.max_epochs = 300;
    cfg.seed = 11;

    std::vector<double> warm_epochs, cold_epochs;
    std::vector<double> penalties;
    for (std::uint64_t fold = 0; fold < 3; ++fold) {
        SplitPlan plan;
        plan.seed = fold;
        plan.fractions = {0.8, 0.2};
        const auto roles = make_split(ds.size(), plan);
        const Dataset train = ds.take_rows(rows_with_role(roles, 0));
        NlsConfig fold_cfg = cfg;
        fold_cfg.seed = 100 + fold;

        const auto [m0, t0] = fit(fold_cfg, train);
        const auto [m5, t5] = warm_fit(m0, 5.0, train);
        const auto [m50, t50] = warm_fit(m5, 50.0, train);
        warm_epochs.push_back(static_cast<double>(t5.train_loss.size() + t50.train_loss.size()));

        NlsConfig cold5 = fold_cfg;
        cold5.lambda = 5.0;
        NlsConfig cold50 = fold_cfg;
        cold50.lambda = 50.0;
        const auto [c5, ct5] = fit(cold5, train);
        const auto [c50, ct50] = fit(cold50, train);
        cold_epochs.push_back(static_cast<double>(ct5.train_loss.size() + ct50.train_loss.size()));

        if (fold == 0) {
            penalties = {m0.average_squared_gradient(train.features),
                         m5.average_squared_gradient(train.features),
                         m50.average_squared_gradient(train.features)};
        }
    }
    std::sort(warm_epochs.begin(), warm_epochs.end());
    std::sort(cold_epochs.begin(), cold_epochs.end());
    CHECK(warm_epochs[1] < cold_epochs[1]); // medians

    // penalty non-increasing along the sweep, 10% slack per step
    CHECK(penalties[1] <= penalties[0] * 1.10);
    CHECK(penalties[2] <= penalties[1] * 1.10);
}

TEST_CASE("classifier probability shapes") {
    // constant network, equal scores -> uniform probabilities
    const std::size_t d = 1, classes = 3;
    std::vector<LayerSpec> specs{{d, classes * d, Activation::Identity, false, 0.0}};
    NetworkWeights net = init_weights(specs, 0);
    for (auto& v : net.layers[0].weight.flat()) v = 0.0;
    Standardizer stats;
    stats.mean = {0.0};
    stats.stddev = {1.0};
    NlsClassifier clf(net, Vector(classes, 0.0), Vector{0.0, 1.0, 2.0}, stats, NlsConfig{},
                      {"x"}, "y");
    const Vector p = clf.class_probabilities(Vector{0.7});
    for (double v : p) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-12));

    // binary score difference s -> 1 / (1 + e^-s)
    NetworkWeights net2 = init_weights(
        std::vector<LayerSpec>{{1, 2, Activation::Identity, false, 0.0}}, 0);
    for (auto& v : net2.layers[0].weight.flat()) v = 0.0;
    const double s = 1.3;
    NlsClassifier binary(net2, Vector{0.0, s}, Vector{0.0, 1.0}, stats, NlsConfig{}, {"x"}, "y");
    const Vector pb = binary.class_probabilities(Vector{0.0});
    CHECK(pb[1] == Catch::Approx(1.0 / (1.0 + std::exp(-s))).margin(1e-12));
    CHECK(pb[0] + pb[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("fit_classifier rejects single-class targets") {
    Dataset ds;
    ds.features = Matrix(30, 1);
    ds.target.assign(30, 1.0);
    ds.feature_names = {"x"};
    CHECK_THROWS_AS(fit_classifier(NlsConfig{}, ds), ConfigError);
}

TEST_CASE("classifier on separable 1-d data orients like a logistic regression") {
    // class 1 sits right of class 0; a convex logistic fit has positive slope
    Dataset ds;
    const std::size_t n = 80;
    ds.features = Matrix(n, 1);
    ds.target.resize(n);
    Rng rng(17);
    for (std::size_t i = 0; i < n; ++i) {
        const bool one = i % 2 == 1;
        ds.features(i, 0) = one ? rng.uniform(0.5, 2.0) : rng.uniform(-2.0, -0.5);
        ds.target[i] = one ? 1.0 : 0.0;
    }
    ds.feature_names = {"x"};

    // independent oracle: gradient descent on the convex logistic loss
    double w = 0.0, b = 0.0;
    for (int it = 0; it < 3000; ++it) {
        double gw = 0.0, gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double z = w * ds.features(i, 0) + b;
            const double p = 1.0 / (1.0 + std::exp(-z));
            gw += (p - ds.target[i]) * ds.features(i, 0);
            gb += (p - ds.target[i]);
        }
        w -= 0.1 * gw / n;
        b -= 0.1 * gb / n;
    }
    REQUIRE(w > 0.0);

    // heavily penalized classifier: constant coefficients, same orientation
    NlsConfig cfg;
    cfg.hidden_layers = {8};
    cfg.lambda = 1e6;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 16;
    cfg.max_epochs = 600;
    cfg.seed = 5;
    const auto [clf, trace] = fit_classifier(cfg, ds);
    const Matrix th_lo = clf.coefficients(Vector{-1.0});
    // slope of the class-1 score minus the class-0 score
    const double slope = th_lo(1, 1) - th_lo(0, 1);
    CHECK((slope > 0.0) == (w > 0.0));
    CHECK(clf.class_probabilities(Vector{1.5})[1] > 0.5);
    CHECK(clf.class_probabilities(Vector{-1.5})[1] < 0.5);

    // probabilities normalize everywhere
    for (double x = -3.0; x <= 3.0; x += 0.5) {
        const Vector p = clf.class_probabilities(Vector{x});
        double sum = 0.0;
        for (double v : p) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            sum += v;
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-12));
    }
}
