#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "aef/dfe.hpp"
#include "aef/equilibrium.hpp"
#include "aef/surrogate.hpp"
#include "aef/tensor.hpp"

namespace aef {

struct HyperParams {
    double eps_budget = 0.05;    // L-inf bound on the perturbation
    double lambda = 0.001;       // e2e vs feature loss balance
    double beta = 0.9;           // EMA smoothing factor
    double temperature = 0.1;    // softmax temperature
    double alpha = 0.8;          // feature-stage step-size scale
    std::array<double, 3> w_k = kUniformComponentWeights;
    int t_out = 30;              // outer iterations
    int t_in = 3;                // inner feature-enhancement iterations
    double eta = -1.0;           // step size; <= 0 means eps_budget / 10
    double mu_momentum = 1.0;    // momentum decay
    int batch_size = 16;
    std::uint64_t seed = 0;

    double step_size() const { return eta > 0.0 ? eta : eps_budget / 10.0; }
    void validate() const;  // throws std::invalid_argument on bad ranges
};

// The universal perturbation with its momentum accumulator. After every
// update max|delta| <= eps_budget.
struct Perturbation {
    Tensor delta;     // 3 x H x W
    double eps_budget = 0.05;
    Tensor momentum;  // same shape as delta

    static Perturbation zeros(int image_size, double eps_budget);
    static Perturbation random_init(int image_size, double eps_budget, std::uint64_t seed);
};

// One per-model loss evaluation plus its gradient w.r.t. delta.
struct ModelEval {
    LossBundle losses;
    Tensor grad;  // d l_total / d delta (or d l_feat / d delta in stage 1)
};

struct Stage2Row {
    int outer = 0;      // 1-based outer iteration
    int batch = 0;      // 0-based batch index
    int step = 0;       // global stage-2 step counter, 1-based
    std::vector<double> l_e2e, l_feat, l_total, l_ema, weights;
    double l_global = 0.0;
};

struct RunTrace {
    std::vector<Stage2Row> rows;
    double max_abs_delta = 0.0;       // max over all post-update steps
    double max_applied = -1.0;        // extrema of perturbed images actually fed
    double min_applied = 1.0;
    int stage1_steps = 0;
    int zero_grad_skips = 0;
};

enum class Weighting { Adaptive, Static };

// The frozen ensemble with the per-(model, batch) conditions fixed for the run
// (so clean outputs and features can be cached once).
struct EnsembleMember {
    std::string id;
    Surrogate model;
};

struct ImageBatch {
    Tensor images;  // N x 3 x H x W in [-1, 1]
    std::vector<std::string> ids;
};

// MI-FGSM: momentum <- mu * momentum + grad / ||grad||_1, then one projected
// sign step. A zero gradient skips the update entirely (counted, not fatal).
void mifgsm_step(Perturbation& p, const Tensor& grad, double eta, double mu_momentum,
                 RunTrace* trace = nullptr);

// Elementwise clamp of delta to [-eps, +eps].
void project_linf(Perturbation& p);

// clamp(x + delta, -1, 1): the adversarial batch that models actually see.
Tensor apply_perturbation(const Tensor& images, const Tensor& delta);

// Cached clean forward passes (delta-independent, computed untaped).
struct CleanCache {
    std::vector<std::vector<Tensor>> outputs;   // [model][batch]
    std::vector<std::vector<Tensor>> features;  // [model][batch]
};

class AttackContext {
public:
    AttackContext(const std::vector<EnsembleMember>& ensemble,
                  const std::vector<ImageBatch>& batches, const HyperParams& hp);

    // Stage 1: T_in projected steps on the uniform-mean feature loss.
    void stage1_feature_pass(Perturbation& p, int batch_index, RunTrace& trace);

    // Stage 2: per-model composite losses, EMA + softmax weights (or static
    // uniform), one weighted update; appends a trace row.
    void stage2_equilibrium_pass(Perturbation& p, int batch_index,
                                 EquilibriumState& state, Weighting weighting,
                                 RunTrace& trace, int outer_iteration);

    // Per-model composite-loss evaluations at the current delta.
    std::vector<ModelEval> evaluate_models(const Perturbation& p, int batch_index) const;

    const ConditionVector& condition(int model, int batch) const {
        return conditions_[static_cast<std::size_t>(model)][static_cast<std::size_t>(batch)];
    }
    int num_models() const { return static_cast<int>(ensemble_->size()); }

private:
    Tensor stage1_gradient(const Perturbation& p, int batch_index, double* loss_out);

    const std::vector<EnsembleMember>* ensemble_;
    const std::vector<ImageBatch>* batches_;
    HyperParams hp_;
    std::vector<std::vector<ConditionVector>> conditions_;  // [model][batch]
    CleanCache clean_;
    int stage2_steps_ = 0;
};

struct RunResult {
    Perturbation perturbation;
    RunTrace trace;
    EquilibriumState final_state;
};

// Algorithm: random delta init, then T_out passes over the batches running
// stage 1 and stage 2 per batch.
RunResult run_attack(const std::vector<EnsembleMember>& ensemble,
                     const std::vector<ImageBatch>& batches, const HyperParams& hp,
                     Weighting weighting);

inline RunResult run_aef(const std::vector<EnsembleMember>& ensemble,
                         const std::vector<ImageBatch>& batches, const HyperParams& hp) {
    return run_attack(ensemble, batches, hp, Weighting::Adaptive);
}

inline RunResult run_static_baseline(const std::vector<EnsembleMember>& ensemble,
                                     const std::vector<ImageBatch>& batches,
                                     const HyperParams& hp) {
    return run_attack(ensemble, batches, hp, Weighting::Static);
}

std::vector<ImageBatch> split_batches(const ImageBatch& dataset, int batch_size);

}  // namespace aef
