#pragma once

#include <string>
#include <vector>

#include "aef/tensor.hpp"

namespace aef {

// Disruption efficacy and imperceptibility metrics. Images are 3 x H x W in
// [-1, 1]; PSNR/SSIM map them to [0, 1] internally.

inline constexpr double kSuccessThreshold = 0.05;  // L2mask above this counts as disrupted

struct MetricsRow {
    std::string model;
    double l2mask = 0.0;
    bool success = false;  // l2mask > 0.05, exactly
    double psnr_db = 0.0;
    double ssim = 0.0;
};

struct EditMask {
    Tensor mask;           // H x W, entries 0 or 1
    bool fallback = false; // true when the edit was empty and all-ones was used
    std::int64_t active = 0;
};

// 1 where the channel-max of |g_clean - x| exceeds 0.5, else 0. An empty mask
// falls back to all ones (flagged, since it changes what L2mask measures).
EditMask edit_mask(const Tensor& x, const Tensor& g_clean);

// Mean over masked elements (all channels at masked pixels) of the squared
// output distortion.
double l2mask(const Tensor& g_clean, const Tensor& g_adv, const EditMask& mask);

// Percentage of rows with success=true.
double srmask_percent(const std::vector<MetricsRow>& rows);
std::string format_percent(double percent);  // fixed two decimals

// 10*log10(1/MSE) on [0,1]-mapped images, capped at 100 dB.
double psnr(const Tensor& a, const Tensor& b);

// Windowed SSIM: 11x11 Gaussian window sigma=1.5, K1=0.01, K2=0.03, dynamic
// range 1.0, valid windows only, per channel then averaged.
double ssim(const Tensor& a, const Tensor& b);

}  // namespace aef
