#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "aef/dfe.hpp"
#include "aef/rng.hpp"
#include "aef/tensor.hpp"

using namespace aef;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    Rng rng(seed);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("instance_norm maps a constant channel to zeros") {
    // exactly representable mean -> exactly zero output
    Tensor f = Tensor::full({2, 4, 4}, 3.5);
    Tensor out = instance_norm(f);
    for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == 0.0);

    // arbitrary constant: zero up to accumulation noise over the stabilizer
    Tensor g = Tensor::full({2, 4, 4}, 3.7);
    Tensor out2 = instance_norm(g);
    for (std::int64_t i = 0; i < out2.size(); ++i) CHECK(std::abs(out2.data()[i]) <= 1e-9);
}

TEST_CASE("instance_norm leaves a standardized channel nearly unchanged") {
    // one channel, zero mean, unit population variance
    Tensor f({1, 2, 2}, {1.0, -1.0, 1.0, -1.0});
    Tensor out = instance_norm(f);
    for (std::int64_t i = 0; i < f.size(); ++i) {
        CHECK(std::abs(out.data()[i] - f.data()[i]) <= 1e-7);
    }
}

TEST_CASE("instance_norm standardizes random channels") {
    Tensor f = random_tensor({4, 8, 8}, 17, -2.0, 2.0);
    Tensor out = instance_norm(f);
    for (int c = 0; c < 4; ++c) {
        double sum = 0.0, sq = 0.0;
        const int hw = 64;
        for (int i = 0; i < hw; ++i) {
            const double v = out.data()[c * hw + i];
            sum += v;
            sq += v * v;
        }
        const double mu = sum / hw;
        const double var = sq / hw - mu * mu;
        CHECK(std::abs(mu) <= 1e-10);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("csa is the identity for a single channel") {
    Tensor f = random_tensor({1, 3, 3}, 5);
    Tensor out = csa(f);
    for (std::int64_t i = 0; i < f.size(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(f.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("csa of zeros is zeros with uniform attention") {
    Tensor f(Shape{3, 2, 2});
    Tensor out = csa(f);
    for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == 0.0);
}

TEST_CASE("csa attention rows sum to one") {
    // recompute the attention directly from the op's definition
    Tensor f = random_tensor({4, 4, 4}, 23);
    const int c = 4, hw = 16;
    Tensor v = reshape(f, {1, c, hw});
    Tensor attn = softmax(scale(bmm(v, transpose2d(v)), 1.0 / std::sqrt(16.0)), 2);
    for (int i = 0; i < c; ++i) {
        double row = 0.0;
        for (int j = 0; j < c; ++j) row += attn.at({0, i, j});
        CHECK(std::abs(row - 1.0) <= 1e-12);
    }
}

TEST_CASE("identical features have exactly zero discrepancies") {
    Tensor f = random_tensor({2, 4, 6, 6}, 31);
    FeatureDiscrepancy d = feature_discrepancies(f, f.clone());
    for (std::int64_t i = 0; i < d.d_local.size(); ++i) CHECK(d.d_local.data()[i] == 0.0);
    for (std::int64_t i = 0; i < d.d_global.size(); ++i) CHECK(d.d_global.data()[i] == 0.0);
    for (std::int64_t i = 0; i < d.d_structure.size(); ++i) CHECK(d.d_structure.data()[i] == 0.0);
}

TEST_CASE("a unit mean shift shows up in the global discrepancy") {
    // standardized clean features, adversarial = clean + 1
    Tensor fc({1, 2, 2}, {1.0, -1.0, 1.0, -1.0});
    Tensor fa = add_scalar(fc, 1.0);
    FeatureDiscrepancy d = feature_discrepancies(fc, fa);
    CHECK(d.d_global.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(d.d_global.at({0, 1})) <= 1e-6);  // sigma unchanged by a shift
}

TEST_CASE("random feature pairs give finite positive distances") {
    Tensor fc = random_tensor({3, 8, 8}, 0);
    Tensor fa = random_tensor({3, 8, 8}, 1);
    FeatureDiscrepancy d = feature_discrepancies(fc, fa);
    for (const Tensor* t : {&d.d_local, &d.d_global, &d.d_structure}) {
        CHECK(all_finite(*t));
        CHECK(l2_norm_all(*t).value() > 0.0);
    }
}

TEST_CASE("feature_loss on zero discrepancies is zero") {
    Tensor f = random_tensor({2, 4, 4}, 3);
    FeatureDiscrepancy d = feature_discrepancies(f, f.clone());
    CHECK(feature_loss(d).value() == 0.0);
}

TEST_CASE("feature_loss arithmetic with component norms (3,0,0)") {
    FeatureDiscrepancy d;
    d.d_local = Tensor({1, 1, 1, 1}, {3.0});
    d.d_global = Tensor(Shape{1, 2});
    d.d_structure = Tensor(Shape{1, 1, 1, 1});
    CHECK(feature_loss(d).value() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("feature_loss with uniform weights equals the hand-computed mean") {
    Tensor fc = random_tensor({2, 3, 4, 4}, 41);
    Tensor fa = random_tensor({2, 3, 4, 4}, 42);
    FeatureDiscrepancy d = feature_discrepancies(fc, fa);
    const double expected =
        -(mean_all(l2_norm(d.d_local, {1, 2, 3}, false)).value() +
          mean_all(l2_norm(d.d_global, {1}, false)).value() +
          mean_all(l2_norm(d.d_structure, {1, 2, 3}, false)).value()) / 3.0;
    CHECK(feature_loss(d).value() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("e2e_loss basics") {
    Tensor a = random_tensor({3, 4, 4}, 7);
    CHECK(e2e_loss(a, a.clone()).value() == 0.0);

    Tensor b = add_scalar(a, 0.1);
    CHECK(e2e_loss(a, b).value() == doctest::Approx(-0.1).epsilon(1e-12));

    // random pair: equals the negated root-mean-square difference
    Tensor c = random_tensor({3, 4, 4}, 8);
    double ms = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const double dv = c.data()[i] - a.data()[i];
        ms += dv * dv;
    }
    CHECK(e2e_loss(a, c).value() ==
          doctest::Approx(-std::sqrt(ms / static_cast<double>(a.size()))).epsilon(1e-12));
}

TEST_CASE("e2e_loss rejects mismatched shapes") {
    CHECK_THROWS_AS(e2e_loss(Tensor(Shape{3, 4, 4}), Tensor(Shape{3, 4, 2})), ShapeError);
}

TEST_CASE("composite_loss boundaries and arithmetic") {
    Tensor e = Tensor::scalar(-0.2);
    Tensor f = Tensor::scalar(-1.0);
    CHECK(composite_loss(e, f, 0.0).value() == doctest::Approx(-0.2).epsilon(1e-15));
    CHECK(composite_loss(e, f, 1.0).value() == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(composite_loss(e, f, 0.001).value() == doctest::Approx(-0.2008).epsilon(1e-12));
    CHECK_THROWS_AS(composite_loss(e, f, 1.5), std::invalid_argument);
}

TEST_CASE("loss bundle is all zeros at zero perturbation") {
    Tensor out = random_tensor({2, 3, 8, 8}, 9);
    Tensor feat = random_tensor({2, 4, 8, 8}, 10);
    LossBundle b = make_loss_bundle(out, out.clone(), feat, feat.clone(), 0.001);
    CHECK(b.l_e2e.value() == 0.0);
    CHECK(b.l_feat.value() == 0.0);
    CHECK(b.l_total.value() == 0.0);
}

TEST_CASE("losses are never positive") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tensor oc = random_tensor({2, 3, 8, 8}, 100 + seed);
        Tensor oa = random_tensor({2, 3, 8, 8}, 200 + seed);
        Tensor fc = random_tensor({2, 4, 8, 8}, 300 + seed);
        Tensor fa = random_tensor({2, 4, 8, 8}, 400 + seed);
        LossBundle b = make_loss_bundle(oc, oa, fc, fa, 0.001);
        CHECK(b.l_e2e.value() <= 0.0);
        CHECK(b.l_feat.value() <= 0.0);
        CHECK(b.l_total.value() <= 0.0);
        // l_total is the stated mix, exactly
        CHECK(b.l_total.value() ==
              doctest::Approx(0.999 * b.l_e2e.value() + 0.001 * b.l_feat.value())
                  .epsilon(1e-12));
    }
}

TEST_CASE("feature pipeline gradients match finite differences") {
    // gradient w.r.t. the adversarial features through IN + CSA + norms
    Tensor fc = random_tensor({2, 3, 6, 6}, 55);
    Tensor fa0 = random_tensor({2, 3, 6, 6}, 56);

    auto loss_at = [&](const Tensor& fa) {
        FeatureDiscrepancy d = feature_discrepancies(fc, fa);
        return feature_loss(d);
    };

    Tensor autodiff;
    {
        Tape tape;
        Tensor leaf = fa0.clone();
        tape.watch(leaf);
        autodiff = tape.backward(loss_at(leaf)).at(leaf.node);
    }
    Tensor fd = finite_diff_grad([&](const Tensor& p) { return loss_at(p).value(); }, fa0);
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < fd.size(); ++i) {
        const double dv = autodiff.data()[i] - fd.data()[i];
        num += dv * dv;
        den += fd.data()[i] * fd.data()[i];
    }
    CHECK(std::sqrt(num) / std::max(std::sqrt(den), 1e-12) <= 1e-5);
}
