#include <catch_amalgamated.hpp>

#include <cmath>

#include "nls/autodiff.hpp"
#include "nls/network.hpp"
#include "nls/rng.hpp"

using namespace nls;

namespace {

struct Problem {
    NetworkWeights net;
    Matrix inputs;   // standardized batch
    Matrix combine;  // locally linear combine coefficients
    Vector targets;
    double offset = 0.3;
};

Problem make_problem(std::uint64_t seed, bool batch_norm = false) {
    Rng rng(seed);
    std::vector<LayerSpec> specs{{3, 6, Activation::Elu, batch_norm, 0.0},
                                 {6, 5, Activation::Elu, batch_norm, 0.0},
                                 {5, 3, Activation::Identity, false, 0.0}};
    Problem p;
    p.net = init_weights(specs, seed ^ 0xbeef);
    p.inputs = Matrix(8, 3);
    p.combine = Matrix(8, 3);
    p.targets.resize(8);
    for (auto& v : p.inputs.flat()) v = rng.gaussian();
    for (auto& v : p.combine.flat()) v = rng.gaussian();
    for (auto& v : p.targets) v = rng.gaussian();
    if (batch_norm) {
        // make running statistics non-trivial so their gradients are exercised
        for (auto& layer : p.net.layers)
            if (layer.norm)
                for (std::size_t j = 0; j < layer.norm->running_var.size(); ++j) {
                    layer.norm->running_mean[j] = 0.1 * static_cast<double>(j);
                    layer.norm->running_var[j] = 1.0 + 0.05 * static_cast<double>(j);
                    layer.norm->gamma[j] = 1.0 + 0.02 * static_cast<double>(j);
                }
    }
    return p;
}

double perturbed_loss(const Problem& p, const DataTerm& term, double lambda, std::size_t layer,
                      std::size_t flat_index, double delta) {
    NetworkWeights net = p.net;
    net.layers[layer].weight.flat()[flat_index] += delta;
    return loss_value(net, p.inputs, term, lambda).total;
}

} // namespace

TEST_CASE("penalized loss gradient matches finite differences in 20 directions") {
    Problem p = make_problem(17);
    const double lambda = 0.7;
    SquaredCombined term{&p.combine, &p.targets, p.offset};
    const LossGradientResult g = loss_gradient(p.net, p.inputs, term, lambda);

    Rng pick(99);
    const double h = 1e-6;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t l = pick.next_u64() % p.net.layers.size();
        const std::size_t i = pick.next_u64() % p.net.layers[l].weight.size();
        const double up = perturbed_loss(p, term, lambda, l, i, h);
        const double dn = perturbed_loss(p, term, lambda, l, i, -h);
        const double numeric = (up - dn) / (2.0 * h);
        const double analytic = g.network.weight[l].flat()[i];
        const double scale = std::max({1e-10, std::abs(numeric), std::abs(analytic)});
        REQUIRE(std::abs(numeric - analytic) / scale < 1e-4);
    }

    // offset (intercept) gradient
    SquaredCombined up_term{&p.combine, &p.targets, p.offset + h};
    SquaredCombined dn_term{&p.combine, &p.targets, p.offset - h};
    const double numeric = (loss_value(p.net, p.inputs, up_term, lambda).total -
                            loss_value(p.net, p.inputs, dn_term, lambda).total) /
                           (2.0 * h);
    CHECK(std::abs(numeric - g.doffset) / std::abs(numeric) < 1e-6);
}

TEST_CASE("directional derivative of the full penalized loss matches finite differences") {
    Problem p = make_problem(23);
    const double lambda = 1.3;
    SquaredCombined term{&p.combine, &p.targets, p.offset};
    const LossGradientResult g = loss_gradient(p.net, p.inputs, term, lambda);

    // random direction over 5 chosen weights
    Rng pick(5);
    std::vector<std::tuple<std::size_t, std::size_t, double>> direction;
    for (int k = 0; k < 5; ++k) {
        const std::size_t l = pick.next_u64() % p.net.layers.size();
        const std::size_t i = pick.next_u64() % p.net.layers[l].weight.size();
        direction.push_back({l, i, pick.gaussian()});
    }
    auto loss_at = [&](double t) {
        NetworkWeights net = p.net;
        for (const auto& [l, i, v] : direction) net.layers[l].weight.flat()[i] += t * v;
        return loss_value(net, p.inputs, term, lambda).total;
    };
    double analytic = 0.0;
    for (const auto& [l, i, v] : direction) analytic += g.network.weight[l].flat()[i] * v;
    const double h = 1e-6;
    const double numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
    CHECK(std::abs(numeric - analytic) / std::max(std::abs(numeric), 1e-10) < 1e-4);
}

TEST_CASE("unpenalized quadratic loss on a linear model gives the closed-form gradient") {
    // out = X w (single linear layer, no bias contribution to the check),
    // loss = mean (out - y)^2  =>  dL/dw = 2 X^T (X w - y) / n
    Rng rng(3);
    const std::size_t n = 12, d = 4;
    std::vector<LayerSpec> specs{{d, 1, Activation::Identity, false, 0.0}};
    NetworkWeights net = init_weights(specs, 1);
    Matrix x(n, d);
    Matrix y(n, 1);
    for (auto& v : x.flat()) v = rng.gaussian();
    for (auto& v : y.flat()) v = rng.gaussian();

    SquaredOnOutputs term{&y};
    const LossGradientResult g = loss_gradient(net, x, term, 0.0);

    // independent closed form
    for (std::size_t j = 0; j < d; ++j) {
        double grad = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double pred = 0.0;
            for (std::size_t k = 0; k < d; ++k) pred += x(i, k) * net.layers[0].weight(k, 0);
            grad += 2.0 * x(i, j) * (pred - y(i, 0));
        }
        grad /= static_cast<double>(n);
        CHECK(g.network.weight[0](j, 0) == Catch::Approx(grad).margin(1e-12));
    }
}

TEST_CASE("loss that is constant in the network weights has zero network gradient") {
    Problem p = make_problem(31);
    Matrix zero_combine(p.inputs.rows(), 3); // combine = 0 kills the outputs' influence
    SquaredCombined term{&zero_combine, &p.targets, 0.5};
    const LossGradientResult g = loss_gradient(p.net, p.inputs, term, 0.0);
    for (const auto& w : g.network.weight)
        for (double v : w.flat()) CHECK(v == 0.0);
    for (const auto& b : g.network.bias)
        for (double v : b) CHECK(v == 0.0);
}

TEST_CASE("cross-entropy gradient matches finite differences") {
    Rng rng(8);
    const std::size_t n = 10, d = 2, classes = 3;
    std::vector<LayerSpec> specs{{d, 7, Activation::Elu, false, 0.0},
                                 {7, classes * d, Activation::Identity, false, 0.0}};
    NetworkWeights net = init_weights(specs, 4);
    Matrix inputs(n, d), combine(n, d);
    for (auto& v : inputs.flat()) v = rng.gaussian();
    for (auto& v : combine.flat()) v = rng.gaussian();
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.next_u64() % classes);
    Vector intercepts{0.1, -0.2, 0.05};

    const double lambda = 0.4;
    CrossEntropyCombined term{&combine, &labels, &intercepts};
    const LossGradientResult g = loss_gradient(net, inputs, term, lambda);

    Rng pick(12);
    const double h = 1e-6;
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t l = pick.next_u64() % net.layers.size();
        const std::size_t i = pick.next_u64() % net.layers[l].weight.size();
        NetworkWeights up = net, dn = net;
        up.layers[l].weight.flat()[i] += h;
        dn.layers[l].weight.flat()[i] -= h;
        const double numeric = (loss_value(up, inputs, term, lambda).total -
                                loss_value(dn, inputs, term, lambda).total) /
                               (2.0 * h);
        const double analytic = g.network.weight[l].flat()[i];
        const double scale = std::max({1e-10, std::abs(numeric), std::abs(analytic)});
        REQUIRE(std::abs(numeric - analytic) / scale < 1e-4);
    }

    // intercept gradients
    for (std::size_t c = 0; c < classes; ++c) {
        Vector up = intercepts, dn = intercepts;
        up[c] += h;
        dn[c] -= h;
        CrossEntropyCombined tu{&combine, &labels, &up};
        CrossEntropyCombined td{&combine, &labels, &dn};
        const double numeric = (loss_value(net, inputs, tu, lambda).total -
                                loss_value(net, inputs, td, lambda).total) /
                               (2.0 * h);
        CHECK(std::abs(numeric - g.dintercepts[c]) /
                  std::max({1e-10, std::abs(numeric)}) < 1e-5);
    }
}

TEST_CASE("gradients stay exact with eval-mode batch norm in the graph") {
    Problem p = make_problem(41, /*batch_norm=*/true);
    const double lambda = 0.9;
    SquaredCombined term{&p.combine, &p.targets, p.offset};
    const LossGradientResult g = loss_gradient(p.net, p.inputs, term, lambda);

    Rng pick(77);
    const double h = 1e-6;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t l = pick.next_u64() % p.net.layers.size();
        const std::size_t i = pick.next_u64() % p.net.layers[l].weight.size();
        const double numeric = (perturbed_loss(p, term, lambda, l, i, h) -
                                perturbed_loss(p, term, lambda, l, i, -h)) /
                               (2.0 * h);
        const double analytic = g.network.weight[l].flat()[i];
        const double scale = std::max({1e-10, std::abs(numeric), std::abs(analytic)});
        REQUIRE(std::abs(numeric - analytic) / scale < 1e-4);
    }

    // gamma gradient through both the primal and the tangent chains
    for (std::size_t j = 0; j < 3; ++j) {
        NetworkWeights up = p.net, dn = p.net;
        up.layers[0].norm->gamma[j] += h;
        dn.layers[0].norm->gamma[j] -= h;
        const double numeric = (loss_value(up, p.inputs, term, lambda).total -
                                loss_value(dn, p.inputs, term, lambda).total) /
                               (2.0 * h);
        const double analytic = g.network.gamma[0][j];
        CHECK(std::abs(numeric - analytic) / std::max(std::abs(numeric), 1e-10) < 1e-4);
    }
}

TEST_CASE("train-mode batch norm gradient flows through the batch statistics") {
    Problem p = make_problem(53, /*batch_norm=*/true);
    SquaredCombined term{&p.combine, &p.targets, p.offset};
    // lambda = 0: the data term alone, train-mode semantics
    const LossGradientResult g = loss_gradient(p.net, p.inputs, term, 0.0, Mode::Train);

    auto train_loss = [&](const NetworkWeights& net) {
        detail::PrimalTrace trace;
        const Matrix out = detail::primal_forward_train(net, p.inputs, nullptr, trace);
        return detail::data_term_value(term, out, nullptr, nullptr, nullptr);
    };
    Rng pick(31);
    const double h = 1e-6;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t l = pick.next_u64() % p.net.layers.size();
        const std::size_t i = pick.next_u64() % p.net.layers[l].weight.size();
        NetworkWeights up = p.net, dn = p.net;
        up.layers[l].weight.flat()[i] += h;
        dn.layers[l].weight.flat()[i] -= h;
        const double numeric = (train_loss(up) - train_loss(dn)) / (2.0 * h);
        const double analytic = g.network.weight[l].flat()[i];
        const double scale = std::max({1e-9, std::abs(numeric), std::abs(analytic)});
        REQUIRE(std::abs(numeric - analytic) / scale < 1e-4);
    }
}

TEST_CASE("malformed loss specs raise configuration errors") {
    Problem p = make_problem(2);
    SquaredOnOutputs missing{nullptr};
    CHECK_THROWS_AS(loss_gradient(p.net, p.inputs, missing, 0.0), ConfigError);

    // classifier spec whose output width cannot host the class blocks
    std::vector<int> labels(p.inputs.rows(), 0);
    Vector intercepts{0.0, 0.0};
    CrossEntropyCombined bad{&p.combine, &labels, &intercepts};
    CHECK_THROWS_AS(loss_gradient(p.net, p.inputs, bad, 0.0), ConfigError);

    CHECK_THROWS_AS(loss_gradient(p.net, p.inputs,
                                  SquaredCombined{&p.combine, &p.targets, 0.0}, -1.0),
                    ConfigError);
}

TEST_CASE("penalty part equals the mean squared frobenius norm of the jacobians") {
    Problem p = make_problem(61);
    SquaredCombined term{&p.combine, &p.targets, p.offset};
    const LossValue v = loss_value(p.net, p.inputs, term, 2.0);

    const DualBatch dual = forward_with_input_jacobian(p.net, p.inputs);
    double frob = 0.0;
    for (std::size_t i = 0; i < p.inputs.rows(); ++i) {
        const Matrix jac = instance_jacobian(dual, i);
        for (double x : jac.flat()) frob += x * x;
    }
    frob /= static_cast<double>(p.inputs.rows());
    CHECK(v.penalty_part == Catch::Approx(frob).margin(1e-12));
    CHECK(v.total == Catch::Approx(v.data_part + 2.0 * v.penalty_part).margin(1e-12));
}
