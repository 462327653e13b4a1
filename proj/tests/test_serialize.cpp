#include <catch_amalgamated.hpp>

#include <filesystem>

#include "nls/serialize.hpp"

using namespace nls;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("nls model survives a json round trip with bit-exact predictions") {
    Dataset ds = gen_quadratic(80, 1, 21);
    NlsConfig cfg;
    cfg.hidden_layers = {9};
    cfg.batch_size = 16;
    cfg.max_epochs = 60;
    cfg.seed = 2;
    cfg.use_batch_norm = true;
    const auto [model, trace] = fit(cfg, ds);

    const auto path = temp_path("nls_model.json");
    write_json_file(to_json(model), path);
    const AnyModel loaded = load_model(path);
    const auto* back = std::get_if<NlsModel>(&loaded);
    REQUIRE(back != nullptr);

    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const Vector x{rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)};
        REQUIRE(back->predict(x) == model.predict(x));
        REQUIRE(back->theta(x) == model.theta(x));
    }
    CHECK(back->config().lambda == model.config().lambda);
    CHECK(back->network().init_seed == model.network().init_seed);
    CHECK(back->feature_names() == model.feature_names());
}

TEST_CASE("classifier round trip preserves probabilities exactly") {
    Dataset ds;
    ds.features = Matrix(40, 1);
    ds.target.resize(40);
    Rng rng(3);
    for (std::size_t i = 0; i < 40; ++i) {
        ds.features(i, 0) = rng.uniform(-2.0, 2.0);
        ds.target[i] = ds.features(i, 0) > 0 ? 1.0 : 0.0;
    }
    ds.feature_names = {"x"};
    NlsConfig cfg;
    cfg.hidden_layers = {6};
    cfg.batch_size = 8;
    cfg.max_epochs = 40;
    cfg.seed = 4;
    const auto [clf, trace] = fit_classifier(cfg, ds);

    const auto path = temp_path("nls_clf.json");
    write_json_file(to_json(clf), path);
    const AnyModel loaded = load_model(path);
    const auto* back = std::get_if<NlsClassifier>(&loaded);
    REQUIRE(back != nullptr);
    for (double x = -2.0; x <= 2.0; x += 0.25)
        REQUIRE(back->class_probabilities(Vector{x}) == clf.class_probabilities(Vector{x}));
    CHECK(back->class_values() == clf.class_values());
}

TEST_CASE("lls round trip reproduces predictions") {
    Dataset ds = gen_quadratic(40, 0, 8);
    const LlsModel model = LlsModel::fit(ds, 2.0, 1e-8);
    const auto path = temp_path("nls_lls.json");
    write_json_file(to_json(model), path);
    const AnyModel loaded = load_model(path);
    const auto* back = std::get_if<LlsModel>(&loaded);
    REQUIRE(back != nullptr);
    CHECK(back->sigma() == 2.0);
    Rng rng(6);
    for (int i = 0; i < 20; ++i) {
        const Vector q{rng.uniform(-5.0, 5.0)};
        REQUIRE(back->predict(q) == model.predict(q));
    }
}

TEST_CASE("model files are rejected on version or kind mismatch") {
    Dataset ds = gen_quadratic(60, 0, 5);
    NlsConfig cfg;
    cfg.hidden_layers = {4};
    cfg.max_epochs = 10;
    const auto [model, trace] = fit(cfg, ds);
    json j = to_json(model);

    json wrong_version = j;
    wrong_version["format_version"] = 999;
    const auto p1 = temp_path("nls_badver.json");
    write_json_file(wrong_version, p1);
    CHECK_THROWS_AS(load_model(p1), ConfigError);

    json wrong_kind = j;
    wrong_kind["kind"] = "mystery";
    const auto p2 = temp_path("nls_badkind.json");
    write_json_file(wrong_kind, p2);
    CHECK_THROWS_AS(load_model(p2), ConfigError);

    const auto p3 = temp_path("nls_garbage.json");
    {
        std::ofstream out(p3);
        out << "not json";
    }
    CHECK_THROWS_AS(load_model(p3), InputError);
}

TEST_CASE("network json carries specs, seeds and running statistics") {
    std::vector<LayerSpec> specs{{2, 3, Activation::Elu, true, 0.25},
                                 {3, 2, Activation::Identity, false, 0.0}};
    NetworkWeights net = init_weights(specs, 99);
    net.layers[0].norm->running_mean = {0.1, 0.2, 0.3};
    net.layers[0].norm->running_var = {1.1, 1.2, 1.3};
    const json j = to_json(net);
    const NetworkWeights back = network_from_json(j);
    CHECK(back.init_seed == 99);
    CHECK(back.layers[0].spec.dropout_rate == 0.25);
    CHECK(back.layers[0].norm->running_var == Vector{1.1, 1.2, 1.3});
    CHECK(back.layers[1].weight == net.layers[1].weight);

    json corrupted = j;
    corrupted["layers"][0]["batch_norm"]["running_var"] = Vector{0.0, 1.0, 1.0};
    CHECK_THROWS_AS(network_from_json(corrupted), ConfigError);
}
