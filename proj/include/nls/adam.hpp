#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "nls/autodiff.hpp"
#include "nls/errors.hpp"
#include "nls/network.hpp"

namespace nls {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One parameter tensor paired with its gradient.
struct ParamBlock {
    std::span<double> value;
    std::span<const double> grad;
};

/// Adam with bias correction over an ordered list of parameter blocks.
/// The learning rate is mutable so a trainer can shrink it on validation
/// plateaus.
class AdamState {
public:
    explicit AdamState(AdamConfig config = {}) : config_(config) {}

    double learning_rate() const { return config_.learning_rate; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }
    const AdamConfig& config() const { return config_; }
    std::size_t step_count() const { return step_; }

    void step(const std::vector<ParamBlock>& blocks) {
        if (m_.empty()) {
            for (const auto& b : blocks) {
                m_.emplace_back(b.value.size(), 0.0);
                v_.emplace_back(b.value.size(), 0.0);
            }
        }
        if (blocks.size() != m_.size())
            throw ConfigError("adam: block count changed between steps");
        ++step_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            auto value = blocks[b].value;
            auto grad = blocks[b].grad;
            if (value.size() != m_[b].size() || grad.size() != value.size())
                throw ConfigError("adam: block shape changed between steps");
            Vector& m = m_[b];
            Vector& v = v_[b];
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = grad[i];
                if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient");
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
                value[i] -= config_.learning_rate * (m[i] / c1) /
                            (std::sqrt(v[i] / c2) + config_.epsilon);
            }
        }
    }

private:
    AdamConfig config_;
    std::size_t step_ = 0;
    std::vector<Vector> m_, v_;
};

/// Blocks for every network parameter, in a fixed order (per layer: weight,
/// bias, then gamma/beta when batch norm is present). Gradient blocks must
/// come from GradientBlocks::zeros_like(net) so shapes line up.
inline std::vector<ParamBlock> parameter_blocks(NetworkWeights& net, const GradientBlocks& grads) {
    std::vector<ParamBlock> blocks;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        Layer& layer = net.layers[l];
        blocks.push_back({layer.weight.flat(), grads.weight[l].flat()});
        blocks.push_back({layer.bias, grads.bias[l]});
        if (layer.norm) {
            blocks.push_back({layer.norm->gamma, grads.gamma[l]});
            blocks.push_back({layer.norm->beta, grads.beta[l]});
        }
    }
    return blocks;
}

/// Applies one Adam update to a network (plus optional extra scalar blocks,
/// e.g. a learned intercept).
inline void adam_step(AdamState& state, NetworkWeights& net, const GradientBlocks& grads,
                      std::vector<ParamBlock> extra = {}) {
    std::vector<ParamBlock> blocks = parameter_blocks(net, grads);
    for (auto& b : extra) blocks.push_back(b);
    state.step(blocks);
}

} // namespace nls
