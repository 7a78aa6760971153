#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aef/metrics.hpp"
#include "aef/optimizer.hpp"
#include "aef/tensor.hpp"

namespace aef {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic face-like synthetic images: smooth background gradient,
// elliptical skin region with a seeded hue, two dark eye blobs and a mouth
// band. Fully determined by (n, size, seed); values in [-1, 1].
ImageBatch gen_synthetic_faces(int n, int size, std::uint64_t seed);

// Binary PPM (P6, maxval 255). Bytes map linearly onto [-1, 1]; a save/load
// round trip is exact at 8-bit quantization (max elementwise error 1/255).
void save_ppm(const Tensor& image, const std::string& path);
Tensor load_ppm(const std::string& path);

// Perturbation file: "AEFP" magic, u16 version, u16 H, u16 W, f64 eps budget,
// then 3*H*W little-endian doubles (row-major, channel-first). Loads validate
// the budget invariant; round trips are bit-exact.
void save_perturbation(const Perturbation& p, const std::string& path);
Perturbation load_perturbation(const std::string& path);

// Per-image metrics grouped per model, plus the run-level extras that land in
// reports. `final_weights`/`final_l_ema` align with `model_ids`.
struct Report {
    std::string run_id;
    HyperParams hp;
    std::vector<std::string> model_ids;
    std::vector<std::vector<MetricsRow>> rows_per_model;
    std::vector<double> final_weights;
    std::vector<double> final_l_ema;
    RunTrace trace;
    bool has_trace = false;
    double imperceptibility_psnr = -1.0;
    double imperceptibility_ssim = -1.0;
    std::string config_echo;  // resolved key=value config text
};

struct ModelSummary {
    std::string model;
    double l2mask = 0.0;
    double srmask_pct = 0.0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double weight = 0.0;
    double l_ema = 0.0;
};

std::vector<ModelSummary> summarize(const Report& report);  // plus a final "avg" row

enum class ReportFormat { Csv, Json };

// CSV columns, exactly: run_id,model,iteration,l2mask,srmask_pct,psnr_db,ssim,
// weight,l_ema. Summary rows leave `iteration` empty; trace rows (when the
// report carries a trace) leave the metric columns empty. Numeric fields use
// fixed 6-decimal, locale-independent formatting. JSON mirrors the schema and
// echoes the full hyperparameter configuration.
void write_report(const Report& report, const std::string& path, ReportFormat format);

std::string hyperparams_to_json_string(const HyperParams& hp);
HyperParams hyperparams_from_json_string(const std::string& text);

// Fixed 6-decimal representation used by every numeric CSV field.
std::string format_fixed(double v);

}  // namespace aef
