#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "aef/data_io.hpp"
#include "aef/rng.hpp"
#include "aef/surrogate.hpp"

using namespace aef;

namespace {

const Paradigm kAll[] = {Paradigm::InputConcat, Paradigm::LatentInjection,
                         Paradigm::AttentionMask, Paradigm::StyleInjection};

ConditionVector fixed_condition(Paradigm p) {
    Rng rng(99);
    return random_condition(p, rng);
}

Tensor random_images(int n, int size, std::uint64_t seed) {
    return gen_synthetic_faces(n, size, seed).images;
}

}  // namespace

TEST_CASE("forward preserves the image shape for every paradigm") {
    for (Paradigm p : kAll) {
        for (int size : {16, 32}) {
            SurrogateSpec spec{p, size, 16, 0, 0.0};
            Surrogate s = build_surrogate(spec);
            Tensor x = random_images(2, size, 7);
            Tensor out = s.forward(x, fixed_condition(p));
            CHECK(out.shape() == x.shape());

            // single-image rank-3 calls work too
            Tensor one(Shape{3, size, size},
                       std::vector<double>(x.data(), x.data() + 3 * size * size));
            Tensor out1 = s.forward(one, fixed_condition(p));
            CHECK(out1.shape() == one.shape());
        }
    }
}

TEST_CASE("outputs stay in [-1, 1] for all paradigms, even at input extremes") {
    for (Paradigm p : kAll) {
        SurrogateSpec spec{p, 16, 16, 3, 0.0};
        Surrogate s = build_surrogate(spec);
        for (double fill : {-1.0, 0.0, 1.0}) {
            Tensor x = Tensor::full({1, 3, 16, 16}, fill);
            Tensor out = s.forward(x, fixed_condition(p));
            for (std::int64_t i = 0; i < out.size(); ++i) {
                CHECK(out.data()[i] >= -1.0);
                CHECK(out.data()[i] <= 1.0);
            }
        }
        Tensor x = random_images(4, 16, 11);
        Tensor out = s.forward(x, fixed_condition(p));
        CHECK(all_finite(out));
        CHECK(max_abs_value(out) <= 1.0);
    }
}

TEST_CASE("attention-mask paradigm keeps its mask strictly inside (0, 1)") {
    SurrogateSpec spec{Paradigm::AttentionMask, 16, 16, 5, 0.0};
    Surrogate s = build_surrogate(spec);
    Tensor x = random_images(2, 16, 13);
    auto parts = s.forward_parts(x, fixed_condition(Paradigm::AttentionMask));
    REQUIRE(parts.mask.has_value());
    for (std::int64_t i = 0; i < parts.mask->size(); ++i) {
        CHECK(parts.mask->data()[i] > 0.0);
        CHECK(parts.mask->data()[i] < 1.0);
    }
}

TEST_CASE("identical specs build bit-identical weights") {
    for (Paradigm p : kAll) {
        SurrogateSpec spec{p, 16, 16, 42, 0.0};
        Surrogate a = build_surrogate(spec);
        Surrogate b = build_surrogate(spec);
        REQUIRE(a.weights().size() == b.weights().size());
        for (std::size_t i = 0; i < a.weights().size(); ++i) {
            const Tensor& wa = a.weights()[i].second;
            const Tensor& wb = b.weights()[i].second;
            CHECK(std::memcmp(wa.data(), wb.data(),
                              static_cast<std::size_t>(wa.size()) * sizeof(double)) == 0);
        }
        // different seeds differ
        SurrogateSpec other = spec;
        other.seed = 43;
        Surrogate c = build_surrogate(other);
        bool any_diff = false;
        for (std::size_t i = 0; i < a.weights().size() && !any_diff; ++i) {
            if (a.weights()[i].second.size() != c.weights()[i].second.size()) continue;
            any_diff = std::memcmp(a.weights()[i].second.data(), c.weights()[i].second.data(),
                                   static_cast<std::size_t>(a.weights()[i].second.size()) *
                                       sizeof(double)) != 0;
        }
        CHECK(any_diff);
    }
}

TEST_CASE("zero perturbation gives exactly equal features") {
    for (Paradigm p : kAll) {
        SurrogateSpec spec{p, 16, 16, 1, 0.0};
        Surrogate s = build_surrogate(spec);
        Tensor x = random_images(2, 16, 3);
        ConditionVector c = fixed_condition(p);
        auto [out_a, feat_a] = s.forward_with_features(x, c);
        auto [out_b, feat_b] = s.forward_with_features(x.clone(), c);
        CHECK(std::memcmp(out_a.data(), out_b.data(),
                          static_cast<std::size_t>(out_a.size()) * sizeof(double)) == 0);
        CHECK(std::memcmp(feat_a.data(), feat_b.data(),
                          static_cast<std::size_t>(feat_a.size()) * sizeof(double)) == 0);
    }
}

TEST_CASE("unknown paradigm names are rejected") {
    CHECK_THROWS_AS(parse_paradigm("star-gan"), std::invalid_argument);
    CHECK(parse_paradigm("input-concat") == Paradigm::InputConcat);
    CHECK(parse_paradigm("style-injection") == Paradigm::StyleInjection);
}

TEST_CASE("surrogate forward rejects mismatched image sizes") {
    SurrogateSpec spec{Paradigm::InputConcat, 32, 16, 0, 0.0};
    Surrogate s = build_surrogate(spec);
    Tensor x(Shape{1, 3, 16, 16});
    CHECK_THROWS_AS(s.forward(x, fixed_condition(Paradigm::InputConcat)), ShapeError);
}

TEST_CASE("condition vectors are validated") {
    SurrogateSpec spec{Paradigm::InputConcat, 16, 16, 0, 0.0};
    Surrogate s = build_surrogate(spec);
    Tensor x = random_images(1, 16, 5);
    ConditionVector bad;
    bad.values = {0.5, 1.0, -1.0, 1.0};  // entries must be exactly +/-1
    CHECK_THROWS_AS(s.forward(x, bad), std::invalid_argument);

    SurrogateSpec style{Paradigm::StyleInjection, 16, 16, 0, 0.0};
    Surrogate st = build_surrogate(style);
    ConditionVector long_code;
    long_code.values.assign(8, 3.0);  // norm > 4
    CHECK_THROWS_AS(st.forward(x, long_code), std::invalid_argument);
}

TEST_CASE("random style codes respect the norm bound") {
    Rng rng(17);
    for (int i = 0; i < 50; ++i) {
        ConditionVector c = random_condition(Paradigm::StyleInjection, rng);
        double sq = 0.0;
        for (double v : c.values) sq += v * v;
        CHECK(std::sqrt(sq) <= 4.0 + 1e-12);
    }
}

TEST_CASE("procedural_edit responds to the condition") {
    Tensor x = random_images(16, 16, 21);
    ConditionVector lo, hi;
    lo.values = {-1, -1, -1, -1};
    hi.values = {1, 1, 1, 1};
    Tensor a = procedural_edit(x, lo);
    Tensor b = procedural_edit(x, hi);
    double mad = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) mad += std::abs(a.data()[i] - b.data()[i]);
    mad /= static_cast<double>(a.size());
    CHECK(mad > 0.05);

    // zero magnitude is the identity
    Tensor same = procedural_edit(x, hi, 0.0);
    CHECK(std::memcmp(same.data(), x.data(),
                      static_cast<std::size_t>(x.size()) * sizeof(double)) == 0);

    // determinism
    Tensor again = procedural_edit(x, hi);
    CHECK(std::memcmp(again.data(), b.data(),
                      static_cast<std::size_t>(b.size()) * sizeof(double)) == 0);

    // range
    CHECK(max_abs_value(b) <= 1.0);
}

TEST_CASE("pretraining halves the editing loss") {
    // 32x32 per the stated contract; narrow width keeps the test quick
    Tensor batch = random_images(16, 32, 8);
    for (Paradigm p : kAll) {
        CAPTURE(paradigm_name(p));
        SurrogateSpec spec{p, 32, 8, 2, 0.0};
        Surrogate s = build_surrogate(spec);
        PretrainReport report = pretrain(s, batch, 500, 0.01);
        CHECK(report.final_loss <= 0.5 * report.initial_loss);
        CHECK(std::isfinite(report.final_loss));
    }
}

TEST_CASE("pretrain rejects zero steps and tiny batches") {
    SurrogateSpec spec{Paradigm::InputConcat, 16, 8, 0, 0.0};
    Surrogate s = build_surrogate(spec);
    Tensor batch = random_images(16, 16, 2);
    CHECK_THROWS_AS(pretrain(s, batch, 0, 0.01), std::invalid_argument);
    Tensor small = random_images(4, 16, 2);
    CHECK_THROWS_AS(pretrain(s, small, 10, 0.01), std::invalid_argument);
}

TEST_CASE("pretraining is deterministic") {
    Tensor batch = random_images(16, 16, 30);
    SurrogateSpec spec{Paradigm::LatentInjection, 16, 8, 4, 0.0};
    Surrogate a = build_surrogate(spec);
    Surrogate b = build_surrogate(spec);
    pretrain(a, batch, 20, 0.01);
    pretrain(b, batch, 20, 0.01);
    for (std::size_t i = 0; i < a.weights().size(); ++i) {
        const Tensor& wa = a.weights()[i].second;
        const Tensor& wb = b.weights()[i].second;
        CHECK(std::memcmp(wa.data(), wb.data(),
                          static_cast<std::size_t>(wa.size()) * sizeof(double)) == 0);
    }
}

TEST_CASE("resistance blur smooths the model input") {
    SurrogateSpec spec{Paradigm::InputConcat, 16, 8, 6, 0.0};
    SurrogateSpec blurred = spec;
    blurred.resistance_blur = 2.0;
    Surrogate plain = build_surrogate(spec);
    Surrogate smooth = build_surrogate(blurred);
    // same weights, different preprocessing
    Tensor x = random_images(1, 16, 40);
    ConditionVector c = fixed_condition(Paradigm::InputConcat);
    Tensor a = plain.forward(x, c);
    Tensor b = smooth.forward(x, c);
    bool differ = std::memcmp(a.data(), b.data(),
                              static_cast<std::size_t>(a.size()) * sizeof(double)) != 0;
    CHECK(differ);
    CHECK(all_finite(b));
}

TEST_CASE("surrogate gradients flow back to the input") {
    for (Paradigm p : kAll) {
        SurrogateSpec spec{p, 16, 8, 9, 0.0};
        Surrogate s = build_surrogate(spec);
        Tensor x = random_images(1, 16, 50);
        Tape tape;
        Tensor leaf = x.clone();
        tape.watch(leaf);
        Tensor out = s.forward(leaf, fixed_condition(p));
        Tensor loss = sum_all(mul(out, out));
        Tensor g = tape.backward(loss).at(leaf.node);
        CHECK(all_finite(g));
        CHECK(l1_norm_value(g) > 0.0);
    }
}
