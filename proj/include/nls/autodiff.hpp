#pragma once

#include <cmath>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "nls/matrix.hpp"
#include "nls/network.hpp"

namespace nls {

/// Gradients shaped like NetworkWeights. gamma/beta entries are empty for
/// layers without batch norm.
struct GradientBlocks {
    std::vector<Matrix> weight;
    std::vector<Vector> bias;
    std::vector<Vector> gamma, beta;

    static GradientBlocks zeros_like(const NetworkWeights& net) {
        GradientBlocks g;
        for (const auto& layer : net.layers) {
            g.weight.emplace_back(layer.weight.rows(), layer.weight.cols());
            g.bias.emplace_back(layer.bias.size(), 0.0);
            g.gamma.emplace_back(layer.norm ? Vector(layer.norm->gamma.size(), 0.0) : Vector{});
            g.beta.emplace_back(layer.norm ? Vector(layer.norm->beta.size(), 0.0) : Vector{});
        }
        return g;
    }

    void accumulate(const GradientBlocks& other) {
        for (std::size_t l = 0; l < weight.size(); ++l) {
            for (std::size_t i = 0; i < weight[l].size(); ++i)
                weight[l].flat()[i] += other.weight[l].flat()[i];
            for (std::size_t i = 0; i < bias[l].size(); ++i) bias[l][i] += other.bias[l][i];
            for (std::size_t i = 0; i < gamma[l].size(); ++i) gamma[l][i] += other.gamma[l][i];
            for (std::size_t i = 0; i < beta[l].size(); ++i) beta[l][i] += other.beta[l][i];
        }
    }

    bool all_finite() const {
        auto vec_ok = [](const Vector& v) {
            for (double x : v)
                if (!std::isfinite(x)) return false;
            return true;
        };
        for (std::size_t l = 0; l < weight.size(); ++l)
            if (!weight[l].all_finite() || !vec_ok(bias[l]) || !vec_ok(gamma[l]) || !vec_ok(beta[l]))
                return false;
        return true;
    }
};

namespace detail {

/// Reverse pass over a dual_forward trace. out_bar holds dL/d(primal output);
/// tan_bar, when non-null, holds dL/d(tangent output) per input direction.
/// Differentiating through the tangent recursion is what makes the gradient
/// of the squared-Jacobian penalty exact: the ELU curvature term
/// phi''(z) * S * T_bar feeds the pre-activation gradient.
inline GradientBlocks backprop_dual(const NetworkWeights& net, const DualTrace& trace,
                                    const Matrix& out_bar,
                                    const std::vector<Matrix>* tan_bar) {
    GradientBlocks grads = GradientBlocks::zeros_like(net);
    const std::size_t L = net.layers.size();
    const std::size_t n = trace.input.rows();
    const std::size_t d = tan_bar ? tan_bar->size() : 0;

    Matrix a_bar = out_bar;
    std::vector<Matrix> t_bar;
    if (tan_bar) t_bar = *tan_bar;

    for (std::size_t l = L; l-- > 0;) {
        const Layer& layer = net.layers[l];
        const std::size_t w = layer.spec.output_width;
        const Matrix& pre_act = layer.norm ? trace.normed[l] : trace.pre[l];

        // activation
        Matrix pre_bar;
        std::vector<Matrix> s_bar(d);
        if (layer.spec.activation == Activation::Elu) {
            pre_bar = Matrix(n, w);
            for (std::size_t t = 0; t < d; ++t) s_bar[t] = Matrix(n, w);
            const auto& s_vals = trace.tan_pre[l];
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    const double v = pre_act(i, j);
                    const double dphi = elu_d(v);
                    double acc = dphi * a_bar(i, j);
                    if (d > 0) {
                        const double ddphi = elu_dd(v);
                        for (std::size_t t = 0; t < d; ++t) {
                            acc += ddphi * s_vals[t](i, j) * t_bar[t](i, j);
                            s_bar[t](i, j) = dphi * t_bar[t](i, j);
                        }
                    }
                    pre_bar(i, j) = acc;
                }
            }
        } else {
            pre_bar = std::move(a_bar);
            s_bar = std::move(t_bar);
        }

        // batch norm (eval semantics: running statistics are constants)
        if (layer.norm) {
            const BatchNormState& bn = *layer.norm;
            const Matrix& z = trace.pre[l];
            const auto& s_aff = trace.tan_affine[l];
            for (std::size_t j = 0; j < w; ++j) {
                const double inv_sd = 1.0 / std::sqrt(bn.running_var[j] + bn.epsilon);
                const double scale = bn.gamma[j] * inv_sd;
                double dgamma = 0.0, dbeta = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    dgamma += pre_bar(i, j) * (z(i, j) - bn.running_mean[j]) * inv_sd;
                    dbeta += pre_bar(i, j);
                    pre_bar(i, j) *= scale;
                }
                for (std::size_t t = 0; t < d; ++t) {
                    for (std::size_t i = 0; i < n; ++i) {
                        dgamma += s_bar[t](i, j) * s_aff[t](i, j) * inv_sd;
                        s_bar[t](i, j) *= scale;
                    }
                }
                grads.gamma[l][j] += dgamma;
                grads.beta[l][j] += dbeta;
            }
        }

        // affine
        const Matrix& a_prev = (l == 0) ? trace.input : trace.act[l - 1];
        accumulate_at_b(grads.weight[l], a_prev, pre_bar);
        {
            Vector bsum = column_sums(pre_bar);
            for (std::size_t j = 0; j < w; ++j) grads.bias[l][j] += bsum[j];
        }
        for (std::size_t t = 0; t < d; ++t)
            accumulate_at_b(grads.weight[l], trace.tan_in[l][t], s_bar[t]);

        if (l > 0) {
            a_bar = matmul_a_bt(pre_bar, layer.weight);
            t_bar.resize(d);
            for (std::size_t t = 0; t < d; ++t)
                t_bar[t] = matmul_a_bt(s_bar[t], layer.weight);
        }
    }
    return grads;
}

/// Caches from a train-mode primal pass (dropout masks, batch statistics).
struct PrimalTrace {
    Matrix input;
    std::vector<Matrix> pre;        // affine output Z_l
    std::vector<Matrix> xhat;       // (Z - mu_B) / sqrt(var_B + eps) for BN layers
    std::vector<Matrix> normed;     // BN output (empty if no BN)
    std::vector<Vector> batch_mean; // batch mean per unit (BN layers)
    std::vector<Vector> batch_var;  // biased batch variance per unit (BN layers)
    std::vector<Matrix> drop_scale; // applied multiplier: 1/keep or 0 (empty if no dropout)
    std::vector<Matrix> act;        // layer output, post-dropout
};

/// Train-mode forward: batch-norm uses batch statistics, dropout applies an
/// inverted mask drawn from rng. Does not touch running statistics; the
/// trainer updates those explicitly from the recorded batch statistics.
inline Matrix primal_forward_train(const NetworkWeights& net, const Matrix& batch,
                                   Rng* rng, PrimalTrace& trace) {
    if (batch.cols() != net.input_width())
        throw InputError("batch width does not match network input width");
    const std::size_t n = batch.rows();
    trace.input = batch;
    Matrix a = batch;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& layer = net.layers[l];
        Matrix z = affine(a, layer);
        trace.pre.push_back(z);

        Matrix pre_act;
        if (layer.norm) {
            const BatchNormState& bn = *layer.norm;
            Matrix xh(n, z.cols());
            Vector vars(z.cols());
            Vector means(z.cols());
            for (std::size_t j = 0; j < z.cols(); ++j) {
                double mean = 0.0;
                for (std::size_t i = 0; i < n; ++i) mean += z(i, j);
                mean /= static_cast<double>(n);
                double var = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double c = z(i, j) - mean;
                    var += c * c;
                }
                var /= static_cast<double>(n);
                const double inv_sd = 1.0 / std::sqrt(var + bn.epsilon);
                for (std::size_t i = 0; i < n; ++i) xh(i, j) = (z(i, j) - mean) * inv_sd;
                vars[j] = var;
                means[j] = mean;
            }
            pre_act = Matrix(n, z.cols());
            for (std::size_t j = 0; j < z.cols(); ++j)
                for (std::size_t i = 0; i < n; ++i)
                    pre_act(i, j) = bn.gamma[j] * xh(i, j) + bn.beta[j];
            trace.xhat.push_back(std::move(xh));
            trace.normed.push_back(pre_act);
            trace.batch_mean.push_back(std::move(means));
            trace.batch_var.push_back(std::move(vars));
        } else {
            pre_act = std::move(z);
            trace.xhat.push_back({});
            trace.normed.push_back({});
            trace.batch_mean.push_back({});
            trace.batch_var.push_back({});
        }

        if (layer.spec.activation == Activation::Elu)
            for (double& v : pre_act.flat()) v = elu(v);

        if (layer.spec.dropout_rate > 0.0) {
            if (!rng) throw ConfigError("dropout requires a random source in train mode");
            const double keep = 1.0 - layer.spec.dropout_rate;
            Matrix scale(n, pre_act.cols());
            for (std::size_t i = 0; i < pre_act.flat().size(); ++i) {
                const double s = (rng->uniform01() < keep) ? 1.0 / keep : 0.0;
                scale.flat()[i] = s;
                pre_act.flat()[i] *= s;
            }
            trace.drop_scale.push_back(std::move(scale));
        } else {
            trace.drop_scale.push_back({});
        }
        check_finite(pre_act, l);
        trace.act.push_back(pre_act);
        a = std::move(pre_act);
    }
    return a;
}

/// Reverse pass over a train-mode primal trace. Batch-norm gradients flow
/// through the batch statistics (the usual whitening backward).
inline GradientBlocks backprop_primal(const NetworkWeights& net, const PrimalTrace& trace,
                                      const Matrix& out_bar) {
    GradientBlocks grads = GradientBlocks::zeros_like(net);
    const std::size_t L = net.layers.size();
    const std::size_t n = trace.input.rows();
    Matrix a_bar = out_bar;

    for (std::size_t l = L; l-- > 0;) {
        const Layer& layer = net.layers[l];
        const std::size_t w = layer.spec.output_width;

        if (!trace.drop_scale[l].empty())
            for (std::size_t i = 0; i < a_bar.flat().size(); ++i)
                a_bar.flat()[i] *= trace.drop_scale[l].flat()[i];

        Matrix pre_bar;
        if (layer.spec.activation == Activation::Elu) {
            const Matrix& pre_act = layer.norm ? trace.normed[l] : trace.pre[l];
            pre_bar = Matrix(n, w);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    pre_bar(i, j) = elu_d(pre_act(i, j)) * a_bar(i, j);
        } else {
            pre_bar = std::move(a_bar);
        }

        if (layer.norm) {
            const BatchNormState& bn = *layer.norm;
            const Matrix& xh = trace.xhat[l];
            for (std::size_t j = 0; j < w; ++j) {
                double dgamma = 0.0, dbeta = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    dgamma += pre_bar(i, j) * xh(i, j);
                    dbeta += pre_bar(i, j);
                }
                grads.gamma[l][j] += dgamma;
                grads.beta[l][j] += dbeta;
                // xhat_bar = pre_bar * gamma; then the whitening backward:
                // z_bar = inv_sd * (xhat_bar - mean(xhat_bar) - xhat * mean(xhat_bar .* xhat))
                const double inv_sd = 1.0 / std::sqrt(trace.batch_var[l][j] + bn.epsilon);
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double xb = pre_bar(i, j) * bn.gamma[j];
                    m1 += xb;
                    m2 += xb * xh(i, j);
                }
                m1 /= static_cast<double>(n);
                m2 /= static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) {
                    const double xb = pre_bar(i, j) * bn.gamma[j];
                    pre_bar(i, j) = inv_sd * (xb - m1 - xh(i, j) * m2);
                }
            }
        }

        const Matrix& a_prev = (l == 0) ? trace.input : trace.act[l - 1];
        accumulate_at_b(grads.weight[l], a_prev, pre_bar);
        Vector bsum = column_sums(pre_bar);
        for (std::size_t j = 0; j < w; ++j) grads.bias[l][j] += bsum[j];
        if (l > 0) a_bar = matmul_a_bt(pre_bar, layer.weight);
    }
    return grads;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Loss shapes. Only the fixed compositions the models need are supported:
// a quadratic on the raw network outputs, the locally-linear combine followed
// by squared error, and the per-class combine followed by log-softmax
// cross-entropy. Each may carry the squared-input-Jacobian penalty.
// ---------------------------------------------------------------------------

/// data = mean_i sum_k (out(i,k) - targets(i,k))^2.
struct SquaredOnOutputs {
    const Matrix* targets = nullptr;
};

/// prediction_i = offset + dot(out_i, combine_i); data = mean_i (pred_i - y_i)^2.
struct SquaredCombined {
    const Matrix* combine = nullptr;
    const Vector* targets = nullptr;
    double offset = 0.0;
};

/// score(i,c) = intercepts[c] + dot(out_i[c*d .. (c+1)*d), combine_i);
/// data = -mean_i log softmax(score_i)[labels_i].
struct CrossEntropyCombined {
    const Matrix* combine = nullptr;
    const std::vector<int>* labels = nullptr;
    const Vector* intercepts = nullptr;
};

using DataTerm = std::variant<SquaredOnOutputs, SquaredCombined, CrossEntropyCombined>;

struct LossValue {
    double total = 0.0;
    double data_part = 0.0;
    double penalty_part = 0.0;
};

struct LossGradientResult {
    LossValue value;
    GradientBlocks network;
    double doffset = 0.0; // gradient of the SquaredCombined offset
    Vector dintercepts;   // gradients of the CrossEntropyCombined intercepts
    // batch statistics observed by a train-mode pass through batch-norm
    // layers (empty vectors elsewhere); the trainer folds these into the
    // running statistics
    std::vector<Vector> batch_mean, batch_var;
};

namespace detail {

inline void validate_term(const DataTerm& term, const Matrix& out, std::size_t batch_rows) {
    if (const auto* sq = std::get_if<SquaredOnOutputs>(&term)) {
        if (!sq->targets) throw ConfigError("SquaredOnOutputs: targets missing");
        if (sq->targets->rows() != batch_rows || sq->targets->cols() != out.cols())
            throw InputError("SquaredOnOutputs: target shape mismatch");
    } else if (const auto* sc = std::get_if<SquaredCombined>(&term)) {
        if (!sc->combine || !sc->targets) throw ConfigError("SquaredCombined: fields missing");
        if (sc->combine->rows() != batch_rows || sc->combine->cols() != out.cols())
            throw InputError("SquaredCombined: combine shape mismatch");
        if (sc->targets->size() != batch_rows)
            throw InputError("SquaredCombined: target length mismatch");
    } else if (const auto* ce = std::get_if<CrossEntropyCombined>(&term)) {
        if (!ce->combine || !ce->labels || !ce->intercepts)
            throw ConfigError("CrossEntropyCombined: fields missing");
        const std::size_t classes = ce->intercepts->size();
        if (classes < 2) throw ConfigError("CrossEntropyCombined: need at least 2 classes");
        if (out.cols() != classes * ce->combine->cols())
            throw ConfigError("CrossEntropyCombined: output width must be classes * combine width");
        if (ce->labels->size() != batch_rows || ce->combine->rows() != batch_rows)
            throw InputError("CrossEntropyCombined: batch size mismatch");
        for (int lab : *ce->labels)
            if (lab < 0 || static_cast<std::size_t>(lab) >= classes)
                throw InputError("CrossEntropyCombined: label out of range");
    } else {
        throw ConfigError("unsupported loss primitive");
    }
}

/// Evaluates the data term and, when grad != nullptr, writes the seed
/// gradient dL/d(out) into *grad and fills offset/intercept gradients.
inline double data_term_value(const DataTerm& term, const Matrix& out, Matrix* grad,
                              double* doffset, Vector* dintercepts) {
    const std::size_t n = out.rows();
    const double inv_n = 1.0 / static_cast<double>(n);
    if (const auto* sq = std::get_if<SquaredOnOutputs>(&term)) {
        double acc = 0.0;
        if (grad) *grad = Matrix(n, out.cols());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < out.cols(); ++k) {
                const double r = out(i, k) - (*sq->targets)(i, k);
                acc += r * r;
                if (grad) (*grad)(i, k) = 2.0 * inv_n * r;
            }
        if (!std::isfinite(acc)) throw NumericError("non-finite squared loss");
        return acc * inv_n;
    }
    if (const auto* sc = std::get_if<SquaredCombined>(&term)) {
        double acc = 0.0, doff = 0.0;
        if (grad) *grad = Matrix(n, out.cols());
        for (std::size_t i = 0; i < n; ++i) {
            double g = sc->offset;
            for (std::size_t k = 0; k < out.cols(); ++k) g += out(i, k) * (*sc->combine)(i, k);
            const double r = g - (*sc->targets)[i];
            if (!std::isfinite(r))
                throw NumericError("non-finite prediction at instance " + std::to_string(i));
            acc += r * r;
            if (grad) {
                const double seed = 2.0 * inv_n * r;
                for (std::size_t k = 0; k < out.cols(); ++k)
                    (*grad)(i, k) = seed * (*sc->combine)(i, k);
                doff += seed;
            }
        }
        if (doffset) *doffset = doff;
        return acc * inv_n;
    }
    const auto& ce = std::get<CrossEntropyCombined>(term);
    const std::size_t classes = ce.intercepts->size();
    const std::size_t dcomb = ce.combine->cols();
    double acc = 0.0;
    if (grad) *grad = Matrix(n, out.cols());
    if (dintercepts) dintercepts->assign(classes, 0.0);
    Vector scores(classes);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (std::size_t c = 0; c < classes; ++c) {
            double s = (*ce.intercepts)[c];
            for (std::size_t k = 0; k < dcomb; ++k)
                s += out(i, c * dcomb + k) * (*ce.combine)(i, k);
            scores[c] = s;
            mx = std::max(mx, s);
        }
        double lse = 0.0;
        for (std::size_t c = 0; c < classes; ++c) lse += std::exp(scores[c] - mx);
        lse = mx + std::log(lse);
        if (!std::isfinite(lse))
            throw NumericError("non-finite class score at instance " + std::to_string(i));
        const int label = (*ce.labels)[i];
        acc -= scores[static_cast<std::size_t>(label)] - lse;
        if (grad) {
            for (std::size_t c = 0; c < classes; ++c) {
                const double p = std::exp(scores[c] - lse);
                const double seed = inv_n * (p - (static_cast<int>(c) == label ? 1.0 : 0.0));
                for (std::size_t k = 0; k < dcomb; ++k)
                    (*grad)(i, c * dcomb + k) = seed * (*ce.combine)(i, k);
                if (dintercepts) (*dintercepts)[c] += seed;
            }
        }
    }
    return acc * inv_n;
}

inline double penalty_value(const std::vector<Matrix>& tangents, std::size_t n) {
    double acc = 0.0;
    for (const Matrix& t : tangents)
        for (double v : t.flat()) acc += v * v;
    return acc / static_cast<double>(n);
}

} // namespace detail

/// Exact weight gradient of  data_term + lambda * mean_i ||J_i||_F^2  where
/// J_i is the input-Jacobian of the network outputs at instance i (eval-mode
/// semantics, normalization statistics frozen). The data term is evaluated
/// with `data_mode` semantics; Train differs from Eval only when the network
/// has batch-norm or dropout layers, in which case a separate train-mode
/// primal pass feeds the data term while the penalty keeps its deterministic
/// per-instance Jacobians.
inline LossGradientResult loss_gradient(const NetworkWeights& net, const Matrix& batch,
                                        const DataTerm& term, double lambda,
                                        Mode data_mode = Mode::Eval, Rng* dropout_rng = nullptr) {
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    const std::size_t n = batch.rows();
    if (n == 0) throw InputError("empty batch");
    const bool want_tangents = lambda > 0.0;
    const bool separate_data_pass =
        data_mode == Mode::Train && net.has_stochastic_layers();

    LossGradientResult result;

    detail::DualTrace dtrace;
    DualBatch dual;
    if (want_tangents || !separate_data_pass)
        dual = detail::dual_forward(net, batch, &dtrace, want_tangents);
    detail::validate_term(term, separate_data_pass ? Matrix(n, net.output_width()) : dual.primal, n);

    std::vector<Matrix> tan_bar;
    if (want_tangents) {
        result.value.penalty_part = detail::penalty_value(dual.tangents, n);
        tan_bar.reserve(dual.tangents.size());
        const double seed = 2.0 * lambda / static_cast<double>(n);
        for (const Matrix& t : dual.tangents) {
            Matrix tb(t.rows(), t.cols());
            for (std::size_t i = 0; i < t.flat().size(); ++i) tb.flat()[i] = seed * t.flat()[i];
            tan_bar.push_back(std::move(tb));
        }
    }

    if (separate_data_pass) {
        detail::PrimalTrace ptrace;
        Matrix out = detail::primal_forward_train(net, batch, dropout_rng, ptrace);
        Matrix out_bar;
        result.value.data_part =
            detail::data_term_value(term, out, &out_bar, &result.doffset, &result.dintercepts);
        result.network = detail::backprop_primal(net, ptrace, out_bar);
        result.batch_mean = std::move(ptrace.batch_mean);
        result.batch_var = std::move(ptrace.batch_var);
        if (want_tangents) {
            Matrix zero_bar(n, net.output_width());
            result.network.accumulate(detail::backprop_dual(net, dtrace, zero_bar, &tan_bar));
        }
    } else {
        Matrix out_bar;
        result.value.data_part = detail::data_term_value(term, dual.primal, &out_bar,
                                                         &result.doffset, &result.dintercepts);
        result.network = detail::backprop_dual(net, dtrace, out_bar,
                                               want_tangents ? &tan_bar : nullptr);
    }

    result.value.total = result.value.data_part + lambda * result.value.penalty_part;
    if (!result.network.all_finite())
        throw NumericError("non-finite gradient");
    return result;
}

/// Folds the batch statistics recorded by a train-mode pass into the batch
/// norm running statistics. No-op for networks without batch norm.
inline void update_running_statistics(NetworkWeights& net, const LossGradientResult& grad) {
    if (grad.batch_mean.empty()) return;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        if (!net.layers[l].norm || grad.batch_mean[l].empty()) continue;
        BatchNormState& bn = *net.layers[l].norm;
        const double m = bn.momentum;
        for (std::size_t j = 0; j < bn.running_mean.size(); ++j) {
            bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * grad.batch_mean[l][j];
            bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * grad.batch_var[l][j];
        }
    }
}

/// Value of the penalized objective without gradients. Always computes the
/// penalty part (eval-mode Jacobians), even at lambda = 0.
inline LossValue loss_value(const NetworkWeights& net, const Matrix& batch,
                            const DataTerm& term, double lambda) {
    DualBatch dual = detail::dual_forward(net, batch);
    detail::validate_term(term, dual.primal, batch.rows());
    LossValue v;
    v.data_part = detail::data_term_value(term, dual.primal, nullptr, nullptr, nullptr);
    v.penalty_part = detail::penalty_value(dual.tangents, batch.rows());
    v.total = v.data_part + lambda * v.penalty_part;
    return v;
}

} // namespace nls

