#pragma once

#include <vector>

#include "aef/tensor.hpp"

namespace aef {

// Per-model EMA of composite losses and the softmax weights derived from it.
// Under the negated-distance convention all smoothed losses are <= 0 after the
// first update, and the least-negative entry (the most resistant model) earns
// the largest weight.
struct EquilibriumState {
    std::vector<double> l_ema;  // starts at zero, no bias correction
    double beta = 0.9;
    double temperature = 0.1;
    int iteration = 0;

    EquilibriumState() = default;
    EquilibriumState(int num_models, double beta_, double temperature_)
        : l_ema(static_cast<std::size_t>(num_models), 0.0),
          beta(beta_),
          temperature(temperature_) {}
};

// l_ema[i] <- beta * l_ema[i] + (1 - beta) * l_total[i]; bumps the iteration.
void ema_update(EquilibriumState& state, const std::vector<double>& l_total);

// w_i = exp(l_ema[i]/T) / sum_j exp(l_ema[j]/T), max-subtracted. T > 0.
std::vector<double> compute_weights(const std::vector<double>& l_ema, double temperature);

// sum_i w_i * l_total[i] as a taped scalar; the weights are plain constants,
// so no gradient flows through the softmax.
Tensor aggregate_global_loss(const std::vector<double>& weights,
                             const std::vector<Tensor>& l_total);

}  // namespace aef
