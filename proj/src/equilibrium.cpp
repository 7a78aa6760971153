#include "aef/equilibrium.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace aef {

void ema_update(EquilibriumState& state, const std::vector<double>& l_total) {
    if (l_total.size() != state.l_ema.size()) {
        throw std::invalid_argument("ema_update: got " + std::to_string(l_total.size()) +
                                    " losses for " + std::to_string(state.l_ema.size()) +
                                    " models");
    }
    for (std::size_t i = 0; i < l_total.size(); ++i) {
        if (!std::isfinite(l_total[i])) {
            throw NumericalError("ema_update: non-finite loss for model " +
                                 std::to_string(i));
        }
    }
    for (std::size_t i = 0; i < l_total.size(); ++i) {
        state.l_ema[i] = state.beta * state.l_ema[i] + (1.0 - state.beta) * l_total[i];
    }
    ++state.iteration;
}

std::vector<double> compute_weights(const std::vector<double>& l_ema, double temperature) {
    if (temperature <= 0.0) {
        throw std::invalid_argument("compute_weights: temperature must be > 0");
    }
    if (l_ema.empty()) {
        throw std::invalid_argument("compute_weights: empty loss vector");
    }
    const double mx = *std::max_element(l_ema.begin(), l_ema.end());
    std::vector<double> w(l_ema.size());
    double z = 0.0;
    for (std::size_t i = 0; i < l_ema.size(); ++i) {
        w[i] = std::exp((l_ema[i] - mx) / temperature);
        z += w[i];
    }
    for (double& v : w) v /= z;
    return w;
}

Tensor aggregate_global_loss(const std::vector<double>& weights,
                             const std::vector<Tensor>& l_total) {
    if (weights.size() != l_total.size() || l_total.empty()) {
        throw std::invalid_argument("aggregate_global_loss: got " +
                                    std::to_string(weights.size()) + " weights for " +
                                    std::to_string(l_total.size()) + " losses");
    }
    Tensor acc = scale(l_total[0], weights[0]);
    for (std::size_t i = 1; i < l_total.size(); ++i) {
        acc = add(acc, scale(l_total[i], weights[i]));
    }
    return acc;
}

}  // namespace aef
