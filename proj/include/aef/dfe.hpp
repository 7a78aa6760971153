#pragma once

#include <array>

#include "aef/tensor.hpp"

namespace aef {

// Feature-level disruption losses. Feature maps are N x C x h x w; a rank-3
// C x h x w tensor is treated as a batch of one. All losses follow the
// negated-distance convention: values are <= 0 and more negative means a
// stronger disruption, so plain gradient descent maximizes the distances.

// Per-channel (F - mu) / (sigma + 1e-8) over the spatial dims, with the
// variance stabilized by 1e-8 inside the square root.
Tensor instance_norm(const Tensor& f);

// Channel self-attention: rows of softmax(V V^T / sqrt(h*w)) mix the
// channels of V = F flattened to C x (h*w).
Tensor csa(const Tensor& f);

struct FeatureDiscrepancy {
    Tensor d_local;      // IN(F_adv) - IN(F_clean), N x C x h x w
    Tensor d_global;     // stacked mean/sigma shifts over sigma_clean, N x 2
    Tensor d_structure;  // CSA(F_adv) - CSA(F_clean), N x C x h x w
};

FeatureDiscrepancy feature_discrepancies(const Tensor& f_clean, const Tensor& f_adv);

inline constexpr std::array<double, 3> kUniformComponentWeights{1.0 / 3.0, 1.0 / 3.0,
                                                                1.0 / 3.0};

// -sum_k w_k * ||d_k||_2 per image, averaged over the batch.
Tensor feature_loss(const FeatureDiscrepancy& d,
                    const std::array<double, 3>& w = kUniformComponentWeights);

// Negated size-normalized L2 distance between outputs (per-image RMS,
// averaged over the batch).
Tensor e2e_loss(const Tensor& out_clean, const Tensor& out_adv);

// (1 - lambda) * l_e2e + lambda * l_feat, lambda in [0, 1].
Tensor composite_loss(const Tensor& l_e2e, const Tensor& l_feat, double lambda);

struct LossBundle {
    Tensor l_e2e;
    Tensor l_feat;
    Tensor l_total;
    // Batch-mean positive distances ||d_local||, ||d_global||, ||d_structure||.
    std::array<double, 3> component_distances{};
};

LossBundle make_loss_bundle(const Tensor& out_clean, const Tensor& out_adv,
                            const Tensor& f_clean, const Tensor& f_adv, double lambda,
                            const std::array<double, 3>& w = kUniformComponentWeights);

}  // namespace aef
