#include "aef/dfe.hpp"

#include <cmath>
#include <stdexcept>

namespace aef {

namespace {

constexpr double kEps = 1e-8;

Tensor as_batched(const Tensor& f, const char* op) {
    if (f.rank() == 4) return f;
    if (f.rank() == 3) return reshape(f, {1, f.dim(0), f.dim(1), f.dim(2)});
    throw ShapeError(std::string(op) + ": expected rank 3 or 4, got " +
                     shape_str(f.shape()));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": incompatible shapes " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
}

Tensor stabilized_sigma(const Tensor& f, const std::vector<int>& axes, bool keepdims) {
    return sqrt(add_scalar(variance(f, axes, keepdims), kEps));
}

}  // namespace

Tensor instance_norm(const Tensor& f) {
    const Tensor fb = as_batched(f, "instance_norm");
    Tensor mu = mean(fb, {2, 3}, true);
    Tensor sigma = stabilized_sigma(fb, {2, 3}, true);
    Tensor out = div(sub(fb, mu), add_scalar(sigma, kEps));
    return f.rank() == 3 ? reshape(out, f.shape()) : out;
}

Tensor csa(const Tensor& f) {
    const Tensor fb = as_batched(f, "csa");
    const int n = fb.dim(0), c = fb.dim(1), hw = fb.dim(2) * fb.dim(3);
    Tensor v = reshape(fb, {n, c, hw});
    Tensor scores = scale(bmm(v, transpose2d(v)), 1.0 / std::sqrt(static_cast<double>(hw)));
    Tensor attn = softmax(scores, 2);
    Tensor out = reshape(bmm(attn, v), fb.shape());
    return f.rank() == 3 ? reshape(out, f.shape()) : out;
}

FeatureDiscrepancy feature_discrepancies(const Tensor& f_clean, const Tensor& f_adv) {
    check_same_shape("feature_discrepancies", f_clean, f_adv);
    const Tensor fc = as_batched(f_clean, "feature_discrepancies");
    const Tensor fa = as_batched(f_adv, "feature_discrepancies");
    const int n = fc.dim(0);

    FeatureDiscrepancy d;
    d.d_local = sub(instance_norm(fa), instance_norm(fc));

    Tensor mu_a = mean(fa, {1, 2, 3}, false);
    Tensor mu_c = mean(fc, {1, 2, 3}, false);
    Tensor sig_a = stabilized_sigma(fa, {1, 2, 3}, false);
    Tensor sig_c = stabilized_sigma(fc, {1, 2, 3}, false);
    Tensor den = add_scalar(sig_c, kEps);
    Tensor mu_shift = div(sub(mu_a, mu_c), den);
    Tensor sig_shift = div(sub(sig_a, sig_c), den);
    d.d_global = concat({reshape(mu_shift, {n, 1}), reshape(sig_shift, {n, 1})}, 1);

    d.d_structure = sub(csa(fa), csa(fc));
    return d;
}

Tensor feature_loss(const FeatureDiscrepancy& d, const std::array<double, 3>& w) {
    for (double wk : w) {
        if (wk < 0.0) throw std::invalid_argument("feature_loss: weights must be >= 0");
    }
    Tensor n_local = l2_norm(d.d_local, {1, 2, 3}, false);
    Tensor n_global = l2_norm(d.d_global, {1}, false);
    Tensor n_structure = l2_norm(d.d_structure, {1, 2, 3}, false);
    Tensor weighted = add(add(scale(n_local, w[0]), scale(n_global, w[1])),
                          scale(n_structure, w[2]));
    return neg(mean_all(weighted));
}

Tensor e2e_loss(const Tensor& out_clean, const Tensor& out_adv) {
    check_same_shape("e2e_loss", out_clean, out_adv);
    const Tensor oc = as_batched(out_clean, "e2e_loss");
    const Tensor oa = as_batched(out_adv, "e2e_loss");
    const double per_image = static_cast<double>(oc.dim(1)) * oc.dim(2) * oc.dim(3);
    Tensor dist = l2_norm(sub(oa, oc), {1, 2, 3}, false);
    return neg(mean_all(scale(dist, 1.0 / std::sqrt(per_image))));
}

Tensor composite_loss(const Tensor& l_e2e, const Tensor& l_feat, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) {
        throw std::invalid_argument("composite_loss: lambda must be in [0, 1]");
    }
    return add(scale(l_e2e, 1.0 - lambda), scale(l_feat, lambda));
}

LossBundle make_loss_bundle(const Tensor& out_clean, const Tensor& out_adv,
                            const Tensor& f_clean, const Tensor& f_adv, double lambda,
                            const std::array<double, 3>& w) {
    LossBundle bundle;
    FeatureDiscrepancy d = feature_discrepancies(f_clean, f_adv);
    bundle.component_distances = {
        mean_all(l2_norm(d.d_local, {1, 2, 3}, false)).value(),
        mean_all(l2_norm(d.d_global, {1}, false)).value(),
        mean_all(l2_norm(d.d_structure, {1, 2, 3}, false)).value(),
    };
    bundle.l_feat = feature_loss(d, w);
    bundle.l_e2e = e2e_loss(out_clean, out_adv);
    bundle.l_total = composite_loss(bundle.l_e2e, bundle.l_feat, lambda);
    return bundle;
}

}  // namespace aef
