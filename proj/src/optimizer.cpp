#include "aef/optimizer.hpp"

#include <cmath>
#include <stdexcept>

#include "aef/parallel.hpp"
#include "aef/rng.hpp"

namespace aef {

void HyperParams::validate() const {
    if (eps_budget <= 0.0) throw std::invalid_argument("eps_budget must be > 0");
    if (temperature <= 0.0) throw std::invalid_argument("temperature must be > 0");
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("lambda must be in [0,1]");
    if (beta < 0.0 || beta >= 1.0) throw std::invalid_argument("beta must be in [0,1)");
    if (t_out < 1 || t_in < 1) throw std::invalid_argument("t_out and t_in must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (mu_momentum < 0.0) throw std::invalid_argument("mu_momentum must be >= 0");
    if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
    for (double w : w_k) {
        if (w < 0.0) throw std::invalid_argument("component weights must be >= 0");
    }
}

Perturbation Perturbation::zeros(int image_size, double eps_budget) {
    Perturbation p;
    p.eps_budget = eps_budget;
    p.delta = Tensor(Shape{3, image_size, image_size});
    p.momentum = Tensor(Shape{3, image_size, image_size});
    return p;
}

Perturbation Perturbation::random_init(int image_size, double eps_budget,
                                       std::uint64_t seed) {
    Perturbation p = zeros(image_size, eps_budget);
    Rng rng(derive_seed(seed, "delta-init"));
    double* d = p.delta.data();
    for (std::int64_t i = 0; i < p.delta.size(); ++i) {
        d[i] = rng.uniform(-eps_budget / 2.0, eps_budget / 2.0);
    }
    return p;
}

void project_linf(Perturbation& p) {
    double* d = p.delta.data();
    for (std::int64_t i = 0; i < p.delta.size(); ++i) {
        d[i] = std::min(p.eps_budget, std::max(-p.eps_budget, d[i]));
    }
}

void mifgsm_step(Perturbation& p, const Tensor& grad, double eta, double mu_momentum,
                 RunTrace* trace) {
    if (grad.shape() != p.delta.shape()) {
        throw ShapeError("mifgsm_step: gradient shape " + shape_str(grad.shape()) +
                         " does not match delta " + shape_str(p.delta.shape()));
    }
    const double g1 = l1_norm_value(grad);
    if (g1 == 0.0) {
        if (trace) ++trace->zero_grad_skips;
        return;
    }
    double* pm = p.momentum.data();
    double* pd = p.delta.data();
    const double* pg = grad.data();
    for (std::int64_t i = 0; i < p.delta.size(); ++i) {
        pm[i] = mu_momentum * pm[i] + pg[i] / g1;
    }
    for (std::int64_t i = 0; i < p.delta.size(); ++i) {
        pd[i] -= eta * (pm[i] > 0.0 ? 1.0 : (pm[i] < 0.0 ? -1.0 : 0.0));
    }
    project_linf(p);
    if (trace) {
        trace->max_abs_delta = std::max(trace->max_abs_delta, max_abs_value(p.delta));
    }
}

Tensor apply_perturbation(const Tensor& images, const Tensor& delta) {
    return clamp(add(images, delta), -1.0, 1.0);
}

std::vector<ImageBatch> split_batches(const ImageBatch& dataset, int batch_size) {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    const int n = dataset.images.dim(0);
    const int c = dataset.images.dim(1), h = dataset.images.dim(2), w = dataset.images.dim(3);
    const std::int64_t per_image = static_cast<std::int64_t>(c) * h * w;
    std::vector<ImageBatch> out;
    for (int start = 0; start < n; start += batch_size) {
        const int count = std::min(batch_size, n - start);
        ImageBatch b;
        b.images = Tensor(Shape{count, c, h, w},
                          std::vector<double>(dataset.images.data() + start * per_image,
                                              dataset.images.data() + (start + count) * per_image));
        for (int i = 0; i < count; ++i) {
            b.ids.push_back(dataset.ids[static_cast<std::size_t>(start + i)]);
        }
        out.push_back(std::move(b));
    }
    return out;
}

AttackContext::AttackContext(const std::vector<EnsembleMember>& ensemble,
                             const std::vector<ImageBatch>& batches, const HyperParams& hp)
    : ensemble_(&ensemble), batches_(&batches), hp_(hp) {
    if (ensemble.empty()) throw std::invalid_argument("ensemble must be nonempty");
    if (batches.empty()) throw std::invalid_argument("need at least one batch");
    const int num_models = static_cast<int>(ensemble.size());
    const int num_batches = static_cast<int>(batches.size());

    // Conditions are fixed per (model, batch) for the whole run, which keeps
    // the clean passes delta-independent and cacheable.
    conditions_.resize(static_cast<std::size_t>(num_models));
    for (int m = 0; m < num_models; ++m) {
        Rng rng(derive_seed(hp_.seed, "conditions", static_cast<std::uint64_t>(m)));
        for (int b = 0; b < num_batches; ++b) {
            conditions_[static_cast<std::size_t>(m)].push_back(
                random_condition(ensemble[static_cast<std::size_t>(m)].model.spec().paradigm, rng));
        }
    }

    clean_.outputs.assign(static_cast<std::size_t>(num_models), {});
    clean_.features.assign(static_cast<std::size_t>(num_models), {});
    parallel_for(num_models, [&](int m) {
        NoTape guard;
        auto& outs = clean_.outputs[static_cast<std::size_t>(m)];
        auto& feats = clean_.features[static_cast<std::size_t>(m)];
        outs.resize(static_cast<std::size_t>(num_batches));
        feats.resize(static_cast<std::size_t>(num_batches));
        for (int b = 0; b < num_batches; ++b) {
            auto [out, feat] = ensemble[static_cast<std::size_t>(m)].model.forward_with_features(
                batches[static_cast<std::size_t>(b)].images, condition(m, b));
            outs[static_cast<std::size_t>(b)] = out;
            feats[static_cast<std::size_t>(b)] = feat;
        }
    });
}

std::vector<ModelEval> AttackContext::evaluate_models(const Perturbation& p,
                                                      int batch_index) const {
    const int n_models = num_models();
    std::vector<ModelEval> evals(static_cast<std::size_t>(n_models));
    const ImageBatch& batch = (*batches_)[static_cast<std::size_t>(batch_index)];
    parallel_for(n_models, [&](int m) {
        Tape tape;
        Tensor delta = p.delta;
        tape.watch(delta);
        Tensor adv = apply_perturbation(batch.images, delta);
        auto [out_adv, feat_adv] =
            (*ensemble_)[static_cast<std::size_t>(m)].model.forward_with_features(
                adv, condition(m, batch_index));
        LossBundle bundle = make_loss_bundle(
            clean_.outputs[static_cast<std::size_t>(m)][static_cast<std::size_t>(batch_index)],
            out_adv,
            clean_.features[static_cast<std::size_t>(m)][static_cast<std::size_t>(batch_index)],
            feat_adv, hp_.lambda, hp_.w_k);
        Tensor grad = tape.backward(bundle.l_total).at(delta.node);
        evals[static_cast<std::size_t>(m)] = ModelEval{std::move(bundle), std::move(grad)};
    });
    return evals;
}

Tensor AttackContext::stage1_gradient(const Perturbation& p, int batch_index,
                                      double* loss_out) {
    const int n_models = num_models();
    const ImageBatch& batch = (*batches_)[static_cast<std::size_t>(batch_index)];
    std::vector<Tensor> grads(static_cast<std::size_t>(n_models));
    std::vector<double> losses(static_cast<std::size_t>(n_models));
    parallel_for(n_models, [&](int m) {
        Tape tape;
        Tensor delta = p.delta;
        tape.watch(delta);
        Tensor adv = apply_perturbation(batch.images, delta);
        auto [out_adv, feat_adv] =
            (*ensemble_)[static_cast<std::size_t>(m)].model.forward_with_features(
                adv, condition(m, batch_index));
        (void)out_adv;
        FeatureDiscrepancy d = feature_discrepancies(
            clean_.features[static_cast<std::size_t>(m)][static_cast<std::size_t>(batch_index)],
            feat_adv);
        Tensor l_feat = feature_loss(d, hp_.w_k);
        losses[static_cast<std::size_t>(m)] = l_feat.value();
        grads[static_cast<std::size_t>(m)] = tape.backward(l_feat).at(delta.node);
    });
    // uniform-mean aggregation across models, fixed order
    Tensor agg(p.delta.shape());
    double total_loss = 0.0;
    const double inv = 1.0 / static_cast<double>(n_models);
    for (int m = 0; m < n_models; ++m) {
        const double* pg = grads[static_cast<std::size_t>(m)].data();
        double* pa = agg.data();
        for (std::int64_t i = 0; i < agg.size(); ++i) pa[i] += inv * pg[i];
        total_loss += inv * losses[static_cast<std::size_t>(m)];
    }
    if (loss_out) *loss_out = total_loss;
    return agg;
}

void AttackContext::stage1_feature_pass(Perturbation& p, int batch_index, RunTrace& trace) {
    for (int j = 0; j < hp_.t_in; ++j) {
        double loss = 0.0;
        Tensor grad = stage1_gradient(p, batch_index, &loss);
        if (!std::isfinite(loss) || !all_finite(grad)) {
            throw NumericalError("stage 1 produced a non-finite loss (batch=" +
                                 std::to_string(batch_index) + ", inner=" +
                                 std::to_string(j + 1) + ")");
        }
        mifgsm_step(p, grad, hp_.alpha * hp_.step_size(), hp_.mu_momentum, &trace);
        ++trace.stage1_steps;
    }
}

void AttackContext::stage2_equilibrium_pass(Perturbation& p, int batch_index,
                                            EquilibriumState& state, Weighting weighting,
                                            RunTrace& trace, int outer_iteration) {
    const int n_models = num_models();
    {
        // record the extrema of what the models actually see
        NoTape guard;
        Tensor adv = apply_perturbation(
            (*batches_)[static_cast<std::size_t>(batch_index)].images, p.delta);
        const double* pa = adv.data();
        for (std::int64_t i = 0; i < adv.size(); ++i) {
            trace.max_applied = std::max(trace.max_applied, pa[i]);
            trace.min_applied = std::min(trace.min_applied, pa[i]);
        }
    }
    std::vector<ModelEval> evals = evaluate_models(p, batch_index);

    Stage2Row row;
    row.outer = outer_iteration;
    row.batch = batch_index;
    row.step = ++stage2_steps_;
    std::vector<double> l_total(static_cast<std::size_t>(n_models));
    for (int m = 0; m < n_models; ++m) {
        const LossBundle& b = evals[static_cast<std::size_t>(m)].losses;
        const double lt = b.l_total.value();
        if (!std::isfinite(lt)) {
            throw NumericalError("NaN loss (outer=" + std::to_string(outer_iteration) +
                                 ", batch=" + std::to_string(batch_index) + ", model=" +
                                 (*ensemble_)[static_cast<std::size_t>(m)].id + ")");
        }
        l_total[static_cast<std::size_t>(m)] = lt;
        row.l_e2e.push_back(b.l_e2e.value());
        row.l_feat.push_back(b.l_feat.value());
        row.l_total.push_back(lt);
    }

    ema_update(state, l_total);
    std::vector<double> weights =
        weighting == Weighting::Static
            ? std::vector<double>(static_cast<std::size_t>(n_models),
                                  1.0 / static_cast<double>(n_models))
            : compute_weights(state.l_ema, state.temperature);

    // weighted gradient aggregation in fixed model order; by linearity this is
    // the gradient of the weighted global loss
    Tensor grad(p.delta.shape());
    double l_global = 0.0;
    for (int m = 0; m < n_models; ++m) {
        const double w = weights[static_cast<std::size_t>(m)];
        const double* pg = evals[static_cast<std::size_t>(m)].grad.data();
        double* pa = grad.data();
        for (std::int64_t i = 0; i < grad.size(); ++i) pa[i] += w * pg[i];
        l_global += w * l_total[static_cast<std::size_t>(m)];
    }
    mifgsm_step(p, grad, hp_.step_size(), hp_.mu_momentum, &trace);

    row.l_ema = state.l_ema;
    row.weights = std::move(weights);
    row.l_global = l_global;
    trace.rows.push_back(std::move(row));
}


RunResult run_attack(const std::vector<EnsembleMember>& ensemble,
                     const std::vector<ImageBatch>& batches, const HyperParams& hp,
                     Weighting weighting) {
    hp.validate();
    if (ensemble.empty()) throw std::invalid_argument("ensemble must be nonempty");
    if (batches.empty()) throw std::invalid_argument("need at least one batch");
    const int image_size = ensemble.front().model.spec().image_size;
    for (const EnsembleMember& m : ensemble) {
        if (m.model.spec().image_size != image_size) {
            throw std::invalid_argument("ensemble members disagree on image size");
        }
    }
    for (const ImageBatch& b : batches) {
        if (b.images.rank() != 4 || b.images.dim(1) != 3 || b.images.dim(2) != image_size ||
            b.images.dim(3) != image_size) {
            throw ShapeError("batch shape " + shape_str(b.images.shape()) +
                             " does not match the ensemble image size " +
                             std::to_string(image_size));
        }
    }

    RunResult result;
    result.perturbation = Perturbation::random_init(image_size, hp.eps_budget, hp.seed);
    result.final_state = EquilibriumState(static_cast<int>(ensemble.size()), hp.beta,
                                          hp.temperature);
    AttackContext ctx(ensemble, batches, hp);
    for (int t = 1; t <= hp.t_out; ++t) {
        for (int b = 0; b < static_cast<int>(batches.size()); ++b) {
            ctx.stage1_feature_pass(result.perturbation, b, result.trace);
            ctx.stage2_equilibrium_pass(result.perturbation, b, result.final_state,
                                        weighting, result.trace, t);
        }
    }
    return result;
}

}  // namespace aef
