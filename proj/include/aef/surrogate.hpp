#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aef/rng.hpp"
#include "aef/tensor.hpp"

namespace aef {

// Four small frozen image-editing generators, one per conditioning paradigm:
//   input-concat     condition planes concatenated with the image up front
//   latent-injection condition appended to the pooled bottleneck vector
//   attention-mask   sigmoid mask blends a content edit into the input
//   style-injection  style code maps to scale/shift on normalized features
enum class Paradigm { InputConcat, LatentInjection, AttentionMask, StyleInjection };

const char* paradigm_name(Paradigm p);
Paradigm parse_paradigm(const std::string& name);  // hard error on unknown names

struct SurrogateSpec {
    Paradigm paradigm = Paradigm::InputConcat;
    int image_size = 32;  // H == W, power of two
    int width = 16;       // channel count, power of two
    std::uint64_t seed = 0;
    double resistance_blur = 0.0;  // Gaussian sigma smoothing the input
};

// Length-4 vector with entries in {-1,+1} for the attribute paradigms, or a
// length-8 real style code with L2 norm <= 4 for style-injection.
struct ConditionVector {
    std::vector<double> values;
};

ConditionVector random_condition(Paradigm p, Rng& rng);

class Surrogate {
public:
    struct ForwardParts {
        Tensor output;   // same shape as the input image(s), values in [-1, 1]
        Tensor feature;  // activation at the designated tap
        std::optional<Tensor> mask;  // attention-mask paradigm only, in (0, 1)
    };

    Surrogate() = default;
    Surrogate(SurrogateSpec spec, std::vector<std::pair<std::string, Tensor>> weights);

    const SurrogateSpec& spec() const { return spec_; }
    const std::vector<std::pair<std::string, Tensor>>& weights() const { return weights_; }
    std::vector<std::pair<std::string, Tensor>>& mutable_weights() { return weights_; }

    // x is 3 x H x W or N x 3 x H x W in [-1, 1]; the condition applies to the
    // whole batch. Differentiable w.r.t. x (and the weights when watched).
    ForwardParts forward_parts(const Tensor& x, const ConditionVector& c) const;
    std::pair<Tensor, Tensor> forward_with_features(const Tensor& x,
                                                    const ConditionVector& c) const;
    Tensor forward(const Tensor& x, const ConditionVector& c) const;

private:
    const Tensor& weight(const char* name) const;
    Tensor blur_input(const Tensor& x) const;

    SurrogateSpec spec_;
    std::vector<std::pair<std::string, Tensor>> weights_;
    Tensor blur_kernel_;  // defined only when resistance_blur > 0
};

Surrogate build_surrogate(const SurrogateSpec& spec);

// Deterministic ground-truth editing function used as the pretraining target.
// The signs of the first four condition entries flip four fixed effects
// (brightness, upper-half red tint, contrast, horizontal gradient), each
// scaled by `magnitude`; the output is clamped to [-1, 1].
Tensor procedural_edit(const Tensor& x, const ConditionVector& c, double magnitude = 0.3);

struct PretrainReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int steps = 0;
};

// Plain gradient descent on the MSE against procedural_edit over random
// conditions; the surrogate's weights are updated in place and frozen after.
PretrainReport pretrain(Surrogate& s, const Tensor& batch, int steps, double lr);

}  // namespace aef
