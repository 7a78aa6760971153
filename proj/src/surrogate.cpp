#include "aef/surrogate.hpp"

#include <cmath>
#include <stdexcept>

#include "aef/dfe.hpp"

namespace aef {

namespace {

bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

Tensor as_batched_image(const Tensor& x, const char* op) {
    if (x.rank() == 4) return x;
    if (x.rank() == 3) return reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    throw ShapeError(std::string(op) + ": expected an image of rank 3 or 4, got " +
                     shape_str(x.shape()));
}

Tensor gaussian_blur_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(2.0 * sigma));
    const int k = 2 * radius + 1;
    std::vector<double> taps(static_cast<std::size_t>(k) * k);
    double total = 0.0;
    for (int y = 0; y < k; ++y) {
        for (int x = 0; x < k; ++x) {
            const double dy = y - radius, dx = x - radius;
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            taps[static_cast<std::size_t>(y) * k + x] = v;
            total += v;
        }
    }
    for (double& v : taps) v /= total;
    // dense 3->3 kernel, zero off the channel diagonal
    Tensor w(Shape{3, 3, k, k});
    for (int c = 0; c < 3; ++c) {
        double* dst = w.data() + (static_cast<std::int64_t>(c) * 3 + c) * k * k;
        for (int i = 0; i < k * k; ++i) dst[i] = taps[static_cast<std::size_t>(i)];
    }
    return w;
}

Tensor conv_weight(Rng& rng, int out_ch, int in_ch, int k = 3) {
    Tensor w(Shape{out_ch, in_ch, k, k});
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k);
    for (std::int64_t i = 0; i < w.size(); ++i) w.data()[i] = std_dev * rng.normal();
    return w;
}

Tensor dense_weight(Rng& rng, int in_dim, int out_dim) {
    Tensor w(Shape{in_dim, out_dim});
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (std::int64_t i = 0; i < w.size(); ++i) w.data()[i] = std_dev * rng.normal();
    return w;
}

Tensor bias_planes(int ch) { return Tensor(Shape{ch, 1, 1}); }

// condition entries spread into constant spatial planes, N x len x H x W
Tensor condition_planes(const ConditionVector& c, int n, int h, int w) {
    const int len = static_cast<int>(c.values.size());
    Tensor planes(Shape{n, len, h, w});
    double* p = planes.data();
    for (int b = 0; b < n; ++b) {
        for (int i = 0; i < len; ++i) {
            const double v = c.values[static_cast<std::size_t>(i)];
            double* dst = p + (static_cast<std::int64_t>(b) * len + i) * h * w;
            for (int j = 0; j < h * w; ++j) dst[j] = v;
        }
    }
    return planes;
}

// Hidden generator blocks normalize like their full-scale counterparts;
// the 1/sigma factor is what makes the editors sensitive to crafted inputs.
Tensor conv_in_block(const Tensor& x, const Tensor& w) {
    return relu(instance_norm(conv2d(x, w)));
}

Tensor conv_block(const Tensor& x, const Tensor& w, const Tensor& b) {
    return relu(add(conv2d(x, w), b));
}

void check_condition(const ConditionVector& c, Paradigm p) {
    if (p == Paradigm::StyleInjection) {
        if (c.values.size() != 8) {
            throw std::invalid_argument("style-injection expects a length-8 style code");
        }
        double sq = 0.0;
        for (double v : c.values) sq += v * v;
        if (std::sqrt(sq) > 4.0 + 1e-12) {
            throw std::invalid_argument("style code L2 norm must be <= 4");
        }
    } else {
        if (c.values.size() != 4) {
            throw std::invalid_argument("attribute paradigms expect a length-4 vector");
        }
        for (double v : c.values) {
            if (v != 1.0 && v != -1.0) {
                throw std::invalid_argument("attribute entries must be exactly +/-1");
            }
        }
    }
}

}  // namespace

const char* paradigm_name(Paradigm p) {
    switch (p) {
        case Paradigm::InputConcat: return "input-concat";
        case Paradigm::LatentInjection: return "latent-injection";
        case Paradigm::AttentionMask: return "attention-mask";
        case Paradigm::StyleInjection: return "style-injection";
    }
    return "?";
}

Paradigm parse_paradigm(const std::string& name) {
    if (name == "input-concat") return Paradigm::InputConcat;
    if (name == "latent-injection") return Paradigm::LatentInjection;
    if (name == "attention-mask") return Paradigm::AttentionMask;
    if (name == "style-injection") return Paradigm::StyleInjection;
    throw std::invalid_argument("unknown paradigm '" + name + "'");
}

ConditionVector random_condition(Paradigm p, Rng& rng) {
    ConditionVector c;
    if (p == Paradigm::StyleInjection) {
        c.values.resize(8);
        double sq = 0.0;
        for (double& v : c.values) {
            v = rng.normal();
            sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm > 4.0) {
            for (double& v : c.values) v *= 4.0 / norm;
        }
    } else {
        c.values.resize(4);
        for (double& v : c.values) v = rng.sign();
    }
    return c;
}

Surrogate::Surrogate(SurrogateSpec spec, std::vector<std::pair<std::string, Tensor>> weights)
    : spec_(spec), weights_(std::move(weights)) {
    if (spec_.resistance_blur > 0.0) {
        blur_kernel_ = gaussian_blur_kernel(spec_.resistance_blur);
    }
}

const Tensor& Surrogate::weight(const char* name) const {
    for (const auto& [key, value] : weights_) {
        if (key == name) return value;
    }
    throw std::logic_error(std::string("surrogate weight '") + name + "' missing");
}

Tensor Surrogate::blur_input(const Tensor& x) const {
    if (!blur_kernel_.defined()) return x;
    return conv2d(x, blur_kernel_);
}

Surrogate::ForwardParts Surrogate::forward_parts(const Tensor& x,
                                                 const ConditionVector& c) const {
    check_condition(c, spec_.paradigm);
    Tensor xb = as_batched_image(x, "surrogate forward");
    if (xb.dim(1) != 3 || xb.dim(2) != spec_.image_size || xb.dim(3) != spec_.image_size) {
        throw ShapeError("surrogate forward: expected Nx3x" +
                         std::to_string(spec_.image_size) + "x" +
                         std::to_string(spec_.image_size) + ", got " + shape_str(x.shape()));
    }
    const int n = xb.dim(0);
    const int hw = spec_.image_size;
    Tensor xin = blur_input(xb);

    ForwardParts parts;
    switch (spec_.paradigm) {
        case Paradigm::InputConcat: {
            Tensor h0 = concat({xin, condition_planes(c, n, hw, hw)}, 1);
            Tensor h1 = conv_in_block(h0, weight("conv1.w"));
            Tensor h2 = conv_in_block(h1, weight("conv2.w"));
            Tensor h3 = conv_in_block(h2, weight("conv3.w"));
            parts.output = tanh(add(conv2d(h3, weight("conv4.w")), weight("conv4.b")));
            parts.feature = h2;
            break;
        }
        case Paradigm::LatentInjection: {
            Tensor e1 = avg_pool2(conv_in_block(xin, weight("enc1.w")));
            Tensor z = avg_pool2(conv_in_block(e1, weight("enc2.w")));
            const int zh = hw / 4;
            // channel-pooled bottleneck vector with the condition appended,
            // re-broadcast to spatial planes next to the bottleneck itself
            Tensor pooled = mean(z, {2, 3}, true);                       // N x 8 x 1 x 1
            Tensor zeros_p(Shape{n, 8, zh, zh});
            Tensor pooled_planes = add(zeros_p, pooled);
            Tensor cond_planes = condition_planes(c, n, zh, zh);
            Tensor dec_in = concat({z, pooled_planes, cond_planes}, 1);  // N x 20 x zh x zh
            Tensor d1 = upsample_nearest2(conv_in_block(dec_in, weight("dec1.w")));
            Tensor d2 = upsample_nearest2(conv_in_block(d1, weight("dec2.w")));
            parts.output = tanh(add(conv2d(d2, weight("dec3.w")), weight("dec3.b")));
            parts.feature = z;  // bottleneck, pre-injection
            break;
        }
        case Paradigm::AttentionMask: {
            Tensor t0 = concat({xin, condition_planes(c, n, hw, hw)}, 1);
            Tensor t1 = conv_in_block(t0, weight("trunk1.w"));
            Tensor t2 = conv_in_block(t1, weight("trunk2.w"));
            Tensor c1 = conv_in_block(t2, weight("content1.w"));
            Tensor c2 = conv_in_block(c1, weight("content2.w"));
            Tensor edit = tanh(add(conv2d(c2, weight("content3.w")), weight("content3.b")));
            Tensor m1 = conv_in_block(t2, weight("mask1.w"));
            Tensor m = sigmoid(add(conv2d(m1, weight("mask2.w")), weight("mask2.b")));
            // output = m * edit + (1 - m) * input as the model sees it
            Tensor blended = add(mul(m, edit), mul(add_scalar(neg(m), 1.0), xin));
            parts.output = blended;
            parts.feature = c2;  // content branch after its second conv
            parts.mask = m;
            break;
        }
        case Paradigm::StyleInjection: {
            Tensor g1 = conv_in_block(xin, weight("gen1.w"));
            Tensor g2 = conv_block(g1, weight("gen2.w"), weight("gen2.b"));  // tap, pre-IN
            // style encoder: code -> per-channel (scale, shift)
            Tensor code({1, 8}, std::vector<double>(c.values));
            Tensor h = relu(add(matmul(code, weight("style1.w")), weight("style1.b")));
            Tensor gamma = add_scalar(
                scale(tanh(add(matmul(h, weight("style_scale.w")), weight("style_scale.b"))), 0.5),
                1.0);
            Tensor beta =
                scale(tanh(add(matmul(h, weight("style_shift.w")), weight("style_shift.b"))), 0.5);
            const int width = spec_.width;
            Tensor g3 = add(mul(instance_norm(g2), reshape(gamma, {1, width, 1, 1})),
                            reshape(beta, {1, width, 1, 1}));
            Tensor g4 = conv_in_block(g3, weight("gen3.w"));
            parts.output = tanh(add(conv2d(g4, weight("gen4.w")), weight("gen4.b")));
            parts.feature = g2;  // immediately before style injection
            break;
        }
    }
    if (x.rank() == 3) {
        parts.output = reshape(parts.output, {3, hw, hw});
        Shape fs = parts.feature.shape();
        parts.feature = reshape(parts.feature, {fs[1], fs[2], fs[3]});
        if (parts.mask) {
            Shape ms = parts.mask->shape();
            parts.mask = reshape(*parts.mask, {ms[1], ms[2], ms[3]});
        }
    }
    return parts;
}

std::pair<Tensor, Tensor> Surrogate::forward_with_features(const Tensor& x,
                                                           const ConditionVector& c) const {
    ForwardParts parts = forward_parts(x, c);
    return {parts.output, parts.feature};
}

Tensor Surrogate::forward(const Tensor& x, const ConditionVector& c) const {
    return forward_parts(x, c).output;
}

Surrogate build_surrogate(const SurrogateSpec& spec) {
    if (!power_of_two(spec.image_size) || !power_of_two(spec.width)) {
        throw std::invalid_argument("image_size and width must be powers of two");
    }
    if (spec.image_size != 16 && spec.image_size != 32) {
        throw std::invalid_argument("image_size must be 16 or 32");
    }
    if (spec.resistance_blur < 0.0) {
        throw std::invalid_argument("resistance_blur must be >= 0");
    }
    Rng rng(seed_mix(spec.seed, seed_tag(paradigm_name(spec.paradigm))));
    const int w = spec.width;
    std::vector<std::pair<std::string, Tensor>> weights;
    auto conv = [&](const char* name, int out_ch, int in_ch) {
        weights.emplace_back(std::string(name) + ".w", conv_weight(rng, out_ch, in_ch));
        weights.emplace_back(std::string(name) + ".b", bias_planes(out_ch));
    };
    // normalized blocks carry no bias (instance norm would cancel it)
    auto conv_in = [&](const char* name, int out_ch, int in_ch) {
        weights.emplace_back(std::string(name) + ".w", conv_weight(rng, out_ch, in_ch));
    };
    auto dense = [&](const char* name, int in_dim, int out_dim) {
        weights.emplace_back(std::string(name) + ".w", dense_weight(rng, in_dim, out_dim));
        weights.emplace_back(std::string(name) + ".b", Tensor(Shape{1, out_dim}));
    };

    switch (spec.paradigm) {
        case Paradigm::InputConcat:
            conv_in("conv1", w, 7);
            conv_in("conv2", w, w);
            conv_in("conv3", w, w);
            conv("conv4", 3, w);
            break;
        case Paradigm::LatentInjection:
            conv_in("enc1", w, 3);
            conv_in("enc2", 8, w);
            conv_in("dec1", w, 20);
            conv_in("dec2", w, w);
            conv("dec3", 3, w);
            break;
        case Paradigm::AttentionMask:
            conv_in("trunk1", w, 7);
            conv_in("trunk2", w, w);
            conv_in("content1", w, w);
            conv_in("content2", w, w);
            conv("content3", 3, w);
            conv_in("mask1", w, w);
            conv("mask2", 1, w);
            break;
        case Paradigm::StyleInjection:
            conv_in("gen1", w, 3);
            conv("gen2", w, w);
            dense("style1", 8, w);
            dense("style_scale", w, w);
            dense("style_shift", w, w);
            conv_in("gen3", w, w);
            conv("gen4", 3, w);
            break;
    }
    return Surrogate(spec, std::move(weights));
}

Tensor procedural_edit(const Tensor& x, const ConditionVector& c, double magnitude) {
    if (c.values.size() < 4) {
        throw std::invalid_argument("procedural_edit needs at least 4 condition entries");
    }
    Tensor xb = as_batched_image(x, "procedural_edit");
    const int n = xb.dim(0), h = xb.dim(2), w = xb.dim(3);
    double a[4];
    for (int i = 0; i < 4; ++i) {
        a[i] = (c.values[static_cast<std::size_t>(i)] >= 0.0 ? 1.0 : -1.0) * magnitude;
    }
    Tensor out = xb.clone();
    double* p = out.data();
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int b = 0; b < n; ++b) {
        double* img = p + static_cast<std::int64_t>(b) * 3 * plane;
        // brightness shift on all channels
        for (std::int64_t i = 0; i < 3 * plane; ++i) img[i] += a[0];
        // red tint in the upper half
        for (int y = 0; y < h / 2; ++y) {
            for (int xq = 0; xq < w; ++xq) img[static_cast<std::int64_t>(y) * w + xq] += a[1];
        }
        // contrast about mid-gray
        for (std::int64_t i = 0; i < 3 * plane; ++i) img[i] *= 1.0 + a[2];
        // horizontal gradient overlay, left -1 to right +1
        for (int ch = 0; ch < 3; ++ch) {
            for (int y = 0; y < h; ++y) {
                for (int xq = 0; xq < w; ++xq) {
                    const double t = w > 1 ? 2.0 * xq / (w - 1) - 1.0 : 0.0;
                    img[(static_cast<std::int64_t>(ch) * h + y) * w + xq] += a[3] * t;
                }
            }
        }
        for (std::int64_t i = 0; i < 3 * plane; ++i) {
            img[i] = std::min(1.0, std::max(-1.0, img[i]));
        }
    }
    return x.rank() == 3 ? Tensor(Shape{3, h, w}, std::vector<double>(out.data(), out.data() + out.size()))
                         : out;
}

PretrainReport pretrain(Surrogate& s, const Tensor& batch, int steps, double lr) {
    if (steps < 1) throw std::invalid_argument("pretrain: steps must be >= 1");
    Tensor xb = as_batched_image(batch, "pretrain");
    if (xb.dim(0) < 16) {
        throw std::invalid_argument("pretrain: need a batch of >= 16 images");
    }
    Rng cond_rng(seed_mix(s.spec().seed, seed_tag("pretrain-conditions")));

    PretrainReport report;
    report.steps = steps;
    ConditionVector eval_condition;  // condition of the first step, reused for final_loss
    for (int step = 0; step < steps; ++step) {
        ConditionVector c = random_condition(s.spec().paradigm, cond_rng);
        if (step == 0) eval_condition = c;
        Tensor target = procedural_edit(xb, c);

        Tape tape;
        for (auto& [name, tensor] : s.mutable_weights()) tape.watch(tensor);
        Tensor out = s.forward(xb, c);
        Tensor loss = mean_all(mul(sub(out, target), sub(out, target)));
        const double loss_value = loss.value();
        if (!std::isfinite(loss_value)) {
            throw NumericalError("pretrain diverged at step " + std::to_string(step) +
                                 "; try a smaller lr");
        }
        if (step == 0) report.initial_loss = loss_value;
        auto grads = tape.backward(loss);
        for (auto& [name, tensor] : s.mutable_weights()) {
            const Tensor& g = grads.at(tensor.node);
            double* pw = tensor.data();
            const double* pg = g.data();
            for (std::int64_t i = 0; i < tensor.size(); ++i) pw[i] -= lr * pg[i];
        }
    }
    {
        // final loss on the initial-loss condition, evaluation only
        NoTape guard;
        Tensor out = s.forward(xb, eval_condition);
        Tensor target = procedural_edit(xb, eval_condition);
        report.final_loss = mean_all(mul(sub(out, target), sub(out, target))).value();
        if (!std::isfinite(report.final_loss)) {
            throw NumericalError("pretrain diverged; try a smaller lr");
        }
    }
    return report;
}

}  // namespace aef
