#include "aef/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace aef {

namespace {

void check_image_pair(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    if (a.rank() != 3) {
        throw ShapeError(std::string(op) + ": expected a 3xHxW image, got " +
                         shape_str(a.shape()));
    }
}

inline double to_unit(double v) { return (v + 1.0) * 0.5; }

}  // namespace

EditMask edit_mask(const Tensor& x, const Tensor& g_clean) {
    check_image_pair("edit_mask", x, g_clean);
    const int h = x.dim(1), w = x.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    EditMask result;
    result.mask = Tensor(Shape{h, w});
    double* m = result.mask.data();
    const double* px = x.data();
    const double* pg = g_clean.data();
    for (std::int64_t i = 0; i < plane; ++i) {
        double mx = 0.0;
        for (int c = 0; c < 3; ++c) {
            mx = std::max(mx, std::abs(pg[c * plane + i] - px[c * plane + i]));
        }
        if (mx > 0.5) {
            m[i] = 1.0;
            ++result.active;
        }
    }
    if (result.active == 0) {
        result.fallback = true;
        result.active = plane;
        for (std::int64_t i = 0; i < plane; ++i) m[i] = 1.0;
    }
    return result;
}

double l2mask(const Tensor& g_clean, const Tensor& g_adv, const EditMask& mask) {
    check_image_pair("l2mask", g_clean, g_adv);
    const std::int64_t plane = static_cast<std::int64_t>(g_clean.dim(1)) * g_clean.dim(2);
    if (mask.mask.size() != plane) {
        throw ShapeError("l2mask: mask does not match the image");
    }
    const double* m = mask.mask.data();
    const double* pc = g_clean.data();
    const double* pa = g_adv.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) {
        if (m[i] == 0.0) continue;
        for (int c = 0; c < 3; ++c) {
            const double d = pa[c * plane + i] - pc[c * plane + i];
            acc += d * d;
        }
    }
    return acc / (3.0 * static_cast<double>(mask.active));
}

double srmask_percent(const std::vector<MetricsRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("srmask: no rows");
    std::int64_t hits = 0;
    for (const MetricsRow& r : rows) hits += r.success ? 1 : 0;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(rows.size());
}

std::string format_percent(double percent) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", percent);
    // snprintf honors the C locale set by the harness; normalize just in case
    for (char& c : buf) {
        if (c == ',') c = '.';
    }
    return std::string(buf);
}

double psnr(const Tensor& a, const Tensor& b) {
    check_image_pair("psnr", a, b);
    const double* pa = a.data();
    const double* pb = b.data();
    double mse = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const double d = to_unit(pa[i]) - to_unit(pb[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& a, const Tensor& b) {
    check_image_pair("ssim", a, b);
    constexpr int kWindow = 11;
    constexpr double kSigma = 1.5;
    constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
    constexpr double kC2 = 0.03 * 0.03;
    const int h = a.dim(1), w = a.dim(2);
    if (h < kWindow || w < kWindow) {
        throw ShapeError("ssim: image " + shape_str(a.shape()) +
                         " is smaller than the 11x11 window");
    }

    double weights[kWindow * kWindow];
    double total = 0.0;
    for (int y = 0; y < kWindow; ++y) {
        for (int x = 0; x < kWindow; ++x) {
            const double dy = y - kWindow / 2, dx = x - kWindow / 2;
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
            weights[y * kWindow + x] = v;
            total += v;
        }
    }
    for (double& v : weights) v /= total;

    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    double acc = 0.0;
    std::int64_t windows = 0;
    for (int c = 0; c < 3; ++c) {
        const double* pa = a.data() + c * plane;
        const double* pb = b.data() + c * plane;
        for (int oy = 0; oy + kWindow <= h; ++oy) {
            for (int ox = 0; ox + kWindow <= w; ++ox) {
                double mx = 0.0, my = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
                for (int y = 0; y < kWindow; ++y) {
                    for (int x = 0; x < kWindow; ++x) {
                        const double wgt = weights[y * kWindow + x];
                        const double va = to_unit(pa[(oy + y) * static_cast<std::int64_t>(w) + ox + x]);
                        const double vb = to_unit(pb[(oy + y) * static_cast<std::int64_t>(w) + ox + x]);
                        mx += wgt * va;
                        my += wgt * vb;
                        sxx += wgt * va * va;
                        syy += wgt * vb * vb;
                        sxy += wgt * va * vb;
                    }
                }
                const double vx = sxx - mx * mx;
                const double vy = syy - my * my;
                const double cxy = sxy - mx * my;
                const double num = (2.0 * mx * my + kC1) * (2.0 * cxy + kC2);
                const double den = (mx * mx + my * my + kC1) * (vx + vy + kC2);
                acc += num / den;
                ++windows;
            }
        }
    }
    return acc / static_cast<double>(windows);
}

}  // namespace aef
