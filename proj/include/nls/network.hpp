#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nls/errors.hpp"
#include "nls/matrix.hpp"
#include "nls/rng.hpp"

namespace nls {

enum class Activation { Elu, Identity };

enum class Mode { Train, Eval };

/// Shape and behaviour of one fully connected layer.
struct LayerSpec {
    std::size_t input_width = 0;
    std::size_t output_width = 0;
    Activation activation = Activation::Elu;
    bool use_batch_norm = false;
    double dropout_rate = 0.0; // probability of dropping a unit, in [0, 1)
};

/// Learned batch-normalization parameters plus running statistics.
struct BatchNormState {
    Vector gamma, beta;
    Vector running_mean, running_var;
    double epsilon = 1e-5;
    double momentum = 0.1;
};

struct Layer {
    LayerSpec spec;
    Matrix weight; // input_width x output_width
    Vector bias;   // output_width
    std::optional<BatchNormState> norm;
};

struct NetworkWeights {
    std::vector<Layer> layers;
    std::uint64_t init_seed = 0;

    std::size_t input_width() const {
        return layers.empty() ? 0 : layers.front().spec.input_width;
    }
    std::size_t output_width() const {
        return layers.empty() ? 0 : layers.back().spec.output_width;
    }
    bool has_stochastic_layers() const {
        for (const auto& l : layers)
            if (l.spec.use_batch_norm || l.spec.dropout_rate > 0.0) return true;
        return false;
    }
};

namespace detail {

inline void check_specs(const std::vector<LayerSpec>& specs) {
    if (specs.empty()) throw ConfigError("network needs at least one layer");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].input_width < 1 || specs[i].output_width < 1)
            throw ConfigError("layer " + std::to_string(i) + ": widths must be >= 1");
        if (specs[i].dropout_rate < 0.0 || specs[i].dropout_rate >= 1.0)
            throw ConfigError("layer " + std::to_string(i) + ": dropout_rate must be in [0, 1)");
        if (i + 1 < specs.size() && specs[i].output_width != specs[i + 1].input_width)
            throw ConfigError("layer " + std::to_string(i) + " output width " +
                              std::to_string(specs[i].output_width) +
                              " does not match layer " + std::to_string(i + 1) +
                              " input width " + std::to_string(specs[i + 1].input_width));
    }
}

inline double elu(double z) { return z >= 0.0 ? z : std::expm1(z); }
inline double elu_d(double z) { return z >= 0.0 ? 1.0 : std::exp(z); }
inline double elu_dd(double z) { return z >= 0.0 ? 0.0 : std::exp(z); }

} // namespace detail

/// Glorot-style uniform initialization: bound sqrt(6 / (fan_in + fan_out)),
/// biases zero, batch-norm scale 1 / shift 0. Deterministic in the seed.
inline NetworkWeights init_weights(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
    detail::check_specs(specs);
    Rng rng(seed);
    NetworkWeights net;
    net.init_seed = seed;
    net.layers.reserve(specs.size());
    for (const auto& spec : specs) {
        Layer layer;
        layer.spec = spec;
        layer.weight = Matrix(spec.input_width, spec.output_width);
        const double bound = std::sqrt(6.0 / static_cast<double>(spec.input_width + spec.output_width));
        for (double& w : layer.weight.flat()) w = rng.uniform(-bound, bound);
        layer.bias.assign(spec.output_width, 0.0);
        if (spec.use_batch_norm) {
            BatchNormState bn;
            bn.gamma.assign(spec.output_width, 1.0);
            bn.beta.assign(spec.output_width, 0.0);
            bn.running_mean.assign(spec.output_width, 0.0);
            bn.running_var.assign(spec.output_width, 1.0);
            layer.norm = std::move(bn);
        }
        net.layers.push_back(std::move(layer));
    }
    return net;
}

/// Primal outputs of a batch together with the directional derivatives of
/// every output with respect to every input coordinate. tangents[t](i, k) is
/// the derivative of output k at instance i along input direction t.
struct DualBatch {
    Matrix primal;
    std::vector<Matrix> tangents; // one per input dimension
};

/// Per-instance Jacobian (output_width x input_dim) extracted from a DualBatch.
inline Matrix instance_jacobian(const DualBatch& dual, std::size_t instance) {
    Matrix jac(dual.primal.cols(), dual.tangents.size());
    for (std::size_t t = 0; t < dual.tangents.size(); ++t)
        for (std::size_t k = 0; k < dual.primal.cols(); ++k)
            jac(k, t) = dual.tangents[t](instance, k);
    return jac;
}

namespace detail {

/// Caches from the dual (eval-mode) pass, consumed by the reverse pass.
/// Layer l stores its input activation, the affine output Z, the normalized
/// value when batch norm is present, and tangent values at each stage.
struct DualTrace {
    Matrix input;
    std::vector<Matrix> pre;                     // Z_l
    std::vector<Matrix> normed;                  // after batch norm (empty matrix if none)
    std::vector<Matrix> act;                     // A_l
    std::vector<std::vector<Matrix>> tan_in;     // tangents entering layer l
    std::vector<std::vector<Matrix>> tan_affine; // tangents after the affine map, before norm (batch-norm layers only)
    std::vector<std::vector<Matrix>> tan_pre;    // tangents after affine+norm, before activation
};

inline Matrix affine(const Matrix& input, const Layer& layer) {
    Matrix z = matmul(input, layer.weight);
    for (std::size_t i = 0; i < z.rows(); ++i) {
        double* row = z.data() + i * z.cols();
        for (std::size_t j = 0; j < z.cols(); ++j) row[j] += layer.bias[j];
    }
    return z;
}

inline void check_finite(const Matrix& m, std::size_t layer_index) {
    if (!m.all_finite())
        throw NumericError("non-finite value in layer " + std::to_string(layer_index));
}

/// Forward pass carrying d tangent directions, eval-mode semantics: dropout
/// off, batch norm uses running statistics treated as constants. Exact for
/// the smooth ELU network. Fills `trace` when given; with_tangents=false
/// skips all tangent work (cheaper pass for unpenalized losses).
inline DualBatch dual_forward(const NetworkWeights& net, const Matrix& batch,
                              DualTrace* trace = nullptr, bool with_tangents = true) {
    if (net.layers.empty()) throw ConfigError("empty network");
    if (batch.cols() != net.input_width())
        throw InputError("batch has " + std::to_string(batch.cols()) +
                         " columns, network expects " + std::to_string(net.input_width()));
    const std::size_t n = batch.rows();
    const std::size_t d = with_tangents ? batch.cols() : 0;

    Matrix a = batch;
    std::vector<Matrix> tan(d);
    for (std::size_t t = 0; t < d; ++t) {
        tan[t] = Matrix(n, batch.cols());
        for (std::size_t i = 0; i < n; ++i) tan[t](i, t) = 1.0;
    }
    if (trace) trace->input = batch;

    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& layer = net.layers[l];
        Matrix z = affine(a, layer);
        std::vector<Matrix> s(d);
        for (std::size_t t = 0; t < d; ++t) s[t] = matmul(tan[t], layer.weight);

        Matrix normed;
        std::vector<Matrix> s_affine;
        if (layer.norm) {
            const BatchNormState& bn = *layer.norm;
            if (trace) s_affine = s;
            normed = z;
            for (std::size_t j = 0; j < z.cols(); ++j) {
                const double scale = bn.gamma[j] / std::sqrt(bn.running_var[j] + bn.epsilon);
                for (std::size_t i = 0; i < n; ++i)
                    normed(i, j) = (z(i, j) - bn.running_mean[j]) * scale + bn.beta[j];
                for (std::size_t t = 0; t < d; ++t)
                    for (std::size_t i = 0; i < n; ++i) s[t](i, j) *= scale;
            }
        }
        const Matrix& pre_act = layer.norm ? normed : z;

        Matrix out;
        std::vector<Matrix> tan_out(d);
        if (layer.spec.activation == Activation::Elu) {
            out = Matrix(n, z.cols());
            for (std::size_t t = 0; t < d; ++t) tan_out[t] = Matrix(n, z.cols());
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < z.cols(); ++j) {
                    const double v = pre_act(i, j);
                    out(i, j) = elu(v);
                    const double dphi = elu_d(v);
                    for (std::size_t t = 0; t < d; ++t) tan_out[t](i, j) = dphi * s[t](i, j);
                }
            }
        } else {
            out = pre_act;
            tan_out = std::move(s);
        }
        check_finite(out, l);

        if (trace) {
            trace->pre.push_back(z);
            trace->normed.push_back(layer.norm ? normed : Matrix());
            trace->act.push_back(out);
            trace->tan_in.push_back(std::move(tan));
            trace->tan_affine.push_back(std::move(s_affine));
            // The reverse pass reads pre-activation tangents only through the
            // ELU curvature term; identity layers store nothing.
            if (layer.spec.activation == Activation::Elu)
                trace->tan_pre.push_back(std::move(s));
            else
                trace->tan_pre.push_back({});
        }
        a = std::move(out);
        tan = std::move(tan_out);
    }
    return DualBatch{std::move(a), std::move(tan)};
}

} // namespace detail

/// Evaluate the network on a batch, one row per instance. Train mode applies
/// dropout (requires an Rng) and normalizes with batch statistics; eval mode
/// is deterministic.
inline Matrix forward(const NetworkWeights& net, const Matrix& batch, Mode mode,
                      Rng* dropout_rng = nullptr) {
    if (net.layers.empty()) throw ConfigError("empty network");
    if (batch.cols() != net.input_width())
        throw InputError("batch has " + std::to_string(batch.cols()) +
                         " columns, network expects " + std::to_string(net.input_width()));
    const std::size_t n = batch.rows();
    Matrix a = batch;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& layer = net.layers[l];
        Matrix z = detail::affine(a, layer);
        if (layer.norm) {
            const BatchNormState& bn = *layer.norm;
            for (std::size_t j = 0; j < z.cols(); ++j) {
                double mean, var;
                if (mode == Mode::Train) {
                    mean = 0.0;
                    for (std::size_t i = 0; i < n; ++i) mean += z(i, j);
                    mean /= static_cast<double>(n);
                    var = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        const double c = z(i, j) - mean;
                        var += c * c;
                    }
                    var /= static_cast<double>(n);
                } else {
                    mean = bn.running_mean[j];
                    var = bn.running_var[j];
                }
                const double scale = bn.gamma[j] / std::sqrt(var + bn.epsilon);
                for (std::size_t i = 0; i < n; ++i)
                    z(i, j) = (z(i, j) - mean) * scale + bn.beta[j];
            }
        }
        if (layer.spec.activation == Activation::Elu)
            for (double& v : z.flat()) v = detail::elu(v);
        if (mode == Mode::Train && layer.spec.dropout_rate > 0.0) {
            if (!dropout_rng)
                throw ConfigError("train-mode forward with dropout requires a random source");
            const double keep = 1.0 - layer.spec.dropout_rate;
            for (double& v : z.flat())
                v = (dropout_rng->uniform01() < keep) ? v / keep : 0.0;
        }
        detail::check_finite(z, l);
        a = std::move(z);
    }
    return a;
}

/// Eval-mode outputs plus the exact input-Jacobian of every instance.
inline DualBatch forward_with_input_jacobian(const NetworkWeights& net, const Matrix& batch) {
    return detail::dual_forward(net, batch);
}

} // namespace nls
