#pragma once

#include <fstream>
#include <string>
#include <variant>

#include <json.hpp>

#include "nls/dataset.hpp"
#include "nls/errors.hpp"
#include "nls/interpret.hpp"
#include "nls/lls.hpp"
#include "nls/model.hpp"
#include "nls/network.hpp"

namespace nls {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

namespace detail {

inline json matrix_to_json(const Matrix& m) {
    return json{{"rows", m.rows()},
                {"cols", m.cols()},
                {"data", std::vector<double>(m.flat().begin(), m.flat().end())}};
}

inline Matrix matrix_from_json(const json& j) {
    Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
    const auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != m.size()) throw ConfigError("matrix: data length does not match shape");
    for (std::size_t i = 0; i < data.size(); ++i) m.flat()[i] = data[i];
    return m;
}

inline std::string activation_name(Activation a) {
    return a == Activation::Elu ? "elu" : "identity";
}

inline Activation activation_from_name(const std::string& name) {
    if (name == "elu") return Activation::Elu;
    if (name == "identity") return Activation::Identity;
    throw ConfigError("unknown activation '" + name + "'");
}

} // namespace detail

inline json to_json(const LayerSpec& spec) {
    return json{{"input_width", spec.input_width},
                {"output_width", spec.output_width},
                {"activation", detail::activation_name(spec.activation)},
                {"use_batch_norm", spec.use_batch_norm},
                {"dropout_rate", spec.dropout_rate}};
}

inline LayerSpec layer_spec_from_json(const json& j) {
    LayerSpec spec;
    spec.input_width = j.at("input_width").get<std::size_t>();
    spec.output_width = j.at("output_width").get<std::size_t>();
    spec.activation = detail::activation_from_name(j.at("activation").get<std::string>());
    spec.use_batch_norm = j.at("use_batch_norm").get<bool>();
    spec.dropout_rate = j.at("dropout_rate").get<double>();
    return spec;
}

inline json to_json(const NetworkWeights& net) {
    json layers = json::array();
    for (const auto& layer : net.layers) {
        json jl;
        jl["spec"] = to_json(layer.spec);
        jl["weight"] = std::vector<double>(layer.weight.flat().begin(), layer.weight.flat().end());
        jl["bias"] = layer.bias;
        if (layer.norm) {
            jl["batch_norm"] = json{{"gamma", layer.norm->gamma},
                                    {"beta", layer.norm->beta},
                                    {"running_mean", layer.norm->running_mean},
                                    {"running_var", layer.norm->running_var},
                                    {"epsilon", layer.norm->epsilon},
                                    {"momentum", layer.norm->momentum}};
        }
        layers.push_back(std::move(jl));
    }
    return json{{"format_version", kFormatVersion},
                {"init_seed", net.init_seed},
                {"layers", std::move(layers)}};
}

inline NetworkWeights network_from_json(const json& j) {
    if (j.at("format_version").get<int>() != kFormatVersion)
        throw ConfigError("unsupported network format version");
    NetworkWeights net;
    net.init_seed = j.at("init_seed").get<std::uint64_t>();
    for (const auto& jl : j.at("layers")) {
        Layer layer;
        layer.spec = layer_spec_from_json(jl.at("spec"));
        const auto w = jl.at("weight").get<std::vector<double>>();
        layer.weight = Matrix(layer.spec.input_width, layer.spec.output_width);
        if (w.size() != layer.weight.size())
            throw ConfigError("layer weight length does not match its spec");
        for (std::size_t i = 0; i < w.size(); ++i) layer.weight.flat()[i] = w[i];
        layer.bias = jl.at("bias").get<Vector>();
        if (layer.bias.size() != layer.spec.output_width)
            throw ConfigError("layer bias length does not match its spec");
        if (jl.contains("batch_norm")) {
            const auto& jb = jl.at("batch_norm");
            BatchNormState bn;
            bn.gamma = jb.at("gamma").get<Vector>();
            bn.beta = jb.at("beta").get<Vector>();
            bn.running_mean = jb.at("running_mean").get<Vector>();
            bn.running_var = jb.at("running_var").get<Vector>();
            bn.epsilon = jb.at("epsilon").get<double>();
            bn.momentum = jb.at("momentum").get<double>();
            for (double v : bn.running_var)
                if (!(v > 0.0)) throw ConfigError("batch norm running variance must be > 0");
            layer.norm = std::move(bn);
        }
        net.layers.push_back(std::move(layer));
    }
    detail::check_specs([&] {
        std::vector<LayerSpec> specs;
        for (const auto& l : net.layers) specs.push_back(l.spec);
        return specs;
    }());
    return net;
}

inline json to_json(const Standardizer& s) {
    return json{{"mean", s.mean}, {"stddev", s.stddev}};
}

inline Standardizer standardizer_from_json(const json& j) {
    Standardizer s;
    s.mean = j.at("mean").get<Vector>();
    s.stddev = j.at("stddev").get<Vector>();
    if (s.mean.size() != s.stddev.size()) throw ConfigError("standardizer: length mismatch");
    return s;
}

inline json to_json(const NlsConfig& c) {
    return json{{"hidden_layers", c.hidden_layers},
                {"lambda", c.lambda},
                {"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size},
                {"patience", c.patience},
                {"validation_fraction", c.validation_fraction},
                {"max_epochs", c.max_epochs},
                {"seed", c.seed},
                {"use_batch_norm", c.use_batch_norm},
                {"dropout_rate", c.dropout_rate},
                {"lr_patience", c.lr_patience},
                {"lr_factor", c.lr_factor},
                {"min_learning_rate", c.min_learning_rate}};
}

inline NlsConfig nls_config_from_json(const json& j) {
    NlsConfig c;
    c.hidden_layers = j.at("hidden_layers").get<std::vector<std::size_t>>();
    c.lambda = j.at("lambda").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.patience = j.at("patience").get<std::size_t>();
    c.validation_fraction = j.at("validation_fraction").get<double>();
    c.max_epochs = j.at("max_epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.use_batch_norm = j.at("use_batch_norm").get<bool>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.lr_patience = j.at("lr_patience").get<std::size_t>();
    c.lr_factor = j.at("lr_factor").get<double>();
    c.min_learning_rate = j.at("min_learning_rate").get<double>();
    return c;
}

inline json to_json(const NlsModel& m) {
    return json{{"format_version", kFormatVersion},
                {"kind", "nls_regressor"},
                {"network", to_json(m.network())},
                {"intercept", m.intercept()},
                {"standardizer", to_json(m.standardizer())},
                {"lambda", m.config().lambda},
                {"config", to_json(m.config())},
                {"feature_names", m.feature_names()},
                {"target_name", m.target_name()}};
}

inline NlsModel nls_model_from_json(const json& j) {
    if (j.at("format_version").get<int>() != kFormatVersion)
        throw ConfigError("unsupported model format version");
    if (j.at("kind").get<std::string>() != "nls_regressor")
        throw ConfigError("model kind is not nls_regressor");
    return NlsModel(network_from_json(j.at("network")), j.at("intercept").get<double>(),
                    standardizer_from_json(j.at("standardizer")),
                    nls_config_from_json(j.at("config")),
                    j.at("feature_names").get<std::vector<std::string>>(),
                    j.at("target_name").get<std::string>());
}

inline json to_json(const NlsClassifier& m) {
    return json{{"format_version", kFormatVersion},
                {"kind", "nls_classifier"},
                {"network", to_json(m.network())},
                {"intercepts", m.intercepts()},
                {"class_values", m.class_values()},
                {"standardizer", to_json(m.standardizer())},
                {"lambda", m.config().lambda},
                {"config", to_json(m.config())},
                {"feature_names", m.feature_names()},
                {"target_name", m.target_name()}};
}

inline NlsClassifier nls_classifier_from_json(const json& j) {
    if (j.at("format_version").get<int>() != kFormatVersion)
        throw ConfigError("unsupported model format version");
    if (j.at("kind").get<std::string>() != "nls_classifier")
        throw ConfigError("model kind is not nls_classifier");
    return NlsClassifier(network_from_json(j.at("network")), j.at("intercepts").get<Vector>(),
                         j.at("class_values").get<Vector>(),
                         standardizer_from_json(j.at("standardizer")),
                         nls_config_from_json(j.at("config")),
                         j.at("feature_names").get<std::vector<std::string>>(),
                         j.at("target_name").get<std::string>());
}

inline json to_json(const LlsModel& m) {
    return json{{"format_version", kFormatVersion},
                {"kind", "lls"},
                {"sigma", m.sigma()},
                {"ridge", m.ridge()},
                {"features", detail::matrix_to_json(m.training_features())},
                {"targets", m.training_targets()},
                {"feature_names", m.feature_names()},
                {"target_name", m.target_name()}};
}

inline LlsModel lls_model_from_json(const json& j) {
    if (j.at("format_version").get<int>() != kFormatVersion)
        throw ConfigError("unsupported model format version");
    if (j.at("kind").get<std::string>() != "lls")
        throw ConfigError("model kind is not lls");
    Dataset train;
    train.features = detail::matrix_from_json(j.at("features"));
    train.target = j.at("targets").get<Vector>();
    train.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    train.target_name = j.at("target_name").get<std::string>();
    return LlsModel::fit(train, j.at("sigma").get<double>(), j.at("ridge").get<double>());
}

inline json to_json(const TrainTrace& t) {
    return json{{"train_loss", t.train_loss},
                {"validation_loss", t.validation_loss},
                {"penalty", t.penalty},
                {"best_epoch", t.best_epoch},
                {"stop_reason", t.stop_reason}};
}

inline json to_json(const Explanation& e) {
    return json{{"instance", e.instance},
                {"intercept", e.intercept},
                {"coefficients", e.coefficients},
                {"contributions", e.contributions},
                {"prediction", e.prediction},
                {"feature_names", e.feature_names}};
}

inline json to_json(const ExtensionReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows)
        rows.push_back(json{{"neighbor_index", row.neighbor_index},
                            {"extended_prediction", row.extended_prediction},
                            {"true_prediction", row.true_prediction},
                            {"gap", row.gap}});
    return json{{"rows", std::move(rows)}, {"mean_gap", r.mean_gap}};
}

// ---------------------------------------------------------------------------
// file helpers
// ---------------------------------------------------------------------------

inline void write_json_file(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw InputError("'" + path + "': " + e.what());
    }
    return j;
}

using AnyModel = std::variant<NlsModel, NlsClassifier, LlsModel>;

/// Dispatches on the "kind" field.
inline AnyModel load_model(const std::string& path) {
    const json j = read_json_file(path);
    if (!j.contains("kind")) throw ConfigError("'" + path + "': missing model kind");
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "nls_regressor") return nls_model_from_json(j);
    if (kind == "nls_classifier") return nls_classifier_from_json(j);
    if (kind == "lls") return lls_model_from_json(j);
    throw ConfigError("'" + path + "': unknown model kind '" + kind + "'");
}

} // namespace nls
