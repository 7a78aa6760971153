#include "aef/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "aef/rng.hpp"

namespace aef {

namespace {

using nlohmann::json;

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
}

std::uint16_t get_u16(const std::string& in, std::size_t off) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(in[off]) |
                                      (static_cast<unsigned char>(in[off + 1]) << 8));
}

double get_f64(const std::string& in, std::size_t off) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + static_cast<std::size_t>(i)]))
                << (8 * i);
    }
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

json hyperparams_to_json(const HyperParams& hp) {
    json j;
    j["eps_budget"] = hp.eps_budget;
    j["lambda"] = hp.lambda;
    j["beta"] = hp.beta;
    j["temperature"] = hp.temperature;
    j["alpha"] = hp.alpha;
    j["w_local"] = hp.w_k[0];
    j["w_global"] = hp.w_k[1];
    j["w_structure"] = hp.w_k[2];
    j["t_out"] = hp.t_out;
    j["t_in"] = hp.t_in;
    j["eta"] = hp.step_size();
    j["mu_momentum"] = hp.mu_momentum;
    j["batch_size"] = hp.batch_size;
    j["seed"] = hp.seed;
    return j;
}

HyperParams hyperparams_from_json(const json& j) {
    HyperParams hp;
    hp.eps_budget = j.at("eps_budget").get<double>();
    hp.lambda = j.at("lambda").get<double>();
    hp.beta = j.at("beta").get<double>();
    hp.temperature = j.at("temperature").get<double>();
    hp.alpha = j.at("alpha").get<double>();
    hp.w_k = {j.at("w_local").get<double>(), j.at("w_global").get<double>(),
              j.at("w_structure").get<double>()};
    hp.t_out = j.at("t_out").get<int>();
    hp.t_in = j.at("t_in").get<int>();
    hp.eta = j.at("eta").get<double>();
    hp.mu_momentum = j.at("mu_momentum").get<double>();
    hp.batch_size = j.at("batch_size").get<int>();
    hp.seed = j.at("seed").get<std::uint64_t>();
    return hp;
}

void fill_ellipse(double* plane, int size, double cy, double cx, double ry, double rx,
                  double value, double blend) {
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double dy = (y - cy) / ry;
            const double dx = (x - cx) / rx;
            const double d = dy * dy + dx * dx;
            if (d <= 1.0) {
                double& px = plane[static_cast<std::int64_t>(y) * size + x];
                const double soft = blend * std::min(1.0, 2.0 * (1.0 - d));
                px = px * (1.0 - soft) + value * soft;
            }
        }
    }
}

}  // namespace

ImageBatch gen_synthetic_faces(int n, int size, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("gen_synthetic_faces: n must be >= 1");
    if (size != 16 && size != 32) {
        throw std::invalid_argument("gen_synthetic_faces: size must be 16 or 32");
    }
    ImageBatch batch;
    batch.images = Tensor(Shape{n, 3, size, size});
    const std::int64_t plane = static_cast<std::int64_t>(size) * size;
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "synthetic-face", static_cast<std::uint64_t>(i)));
        double* img = batch.images.data() + static_cast<std::int64_t>(i) * 3 * plane;

        // background gradient
        for (int c = 0; c < 3; ++c) {
            const double base = rng.uniform(-0.7, 0.1);
            const double gx = rng.uniform(-0.5, 0.5);
            const double gy = rng.uniform(-0.5, 0.5);
            double* pl = img + c * plane;
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    pl[static_cast<std::int64_t>(y) * size + x] =
                        base + gx * x / (size - 1.0) + gy * y / (size - 1.0);
                }
            }
        }

        // elliptical skin region with a seeded hue
        const double cy = size * rng.uniform(0.42, 0.58);
        const double cx = size * rng.uniform(0.42, 0.58);
        const double ry = size * rng.uniform(0.30, 0.42);
        const double rx = size * rng.uniform(0.26, 0.36);
        const double skin_r = rng.uniform(0.15, 0.65);
        const double skin_g = skin_r - rng.uniform(0.15, 0.30);
        const double skin_b = skin_g - rng.uniform(0.15, 0.30);
        const double skin[3] = {skin_r, skin_g, skin_b};
        for (int c = 0; c < 3; ++c) {
            fill_ellipse(img + c * plane, size, cy, cx, ry, rx, skin[c], 1.0);
        }

        // two dark eye blobs
        const double eye_y = cy - 0.22 * ry;
        const double eye_dx = 0.45 * rx;
        const double eye_r = std::max(1.2, 0.10 * size * rng.uniform(0.8, 1.2));
        const double eye_shade = rng.uniform(-0.95, -0.7);
        for (int c = 0; c < 3; ++c) {
            fill_ellipse(img + c * plane, size, eye_y, cx - eye_dx, eye_r, eye_r, eye_shade, 1.0);
            fill_ellipse(img + c * plane, size, eye_y, cx + eye_dx, eye_r, eye_r, eye_shade, 1.0);
        }

        // mouth band
        const double mouth_y = cy + 0.45 * ry;
        const double mouth[3] = {rng.uniform(-0.3, 0.1), -0.7, -0.7};
        for (int c = 0; c < 3; ++c) {
            fill_ellipse(img + c * plane, size, mouth_y, cx, std::max(1.0, 0.10 * ry),
                         0.5 * rx, mouth[c], 0.9);
        }

        for (std::int64_t p = 0; p < 3 * plane; ++p) {
            img[p] = std::min(1.0, std::max(-1.0, img[p]));
        }
        batch.ids.push_back("synthetic-" + std::to_string(seed) + "-" + std::to_string(i));
    }
    return batch;
}

void save_ppm(const Tensor& image, const std::string& path) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("save_ppm: expected 3xHxW, got " + shape_str(image.shape()));
    }
    const int h = image.dim(1), w = image.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<std::size_t>(3 * plane));
    const double* p = image.data();
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            const double v = std::min(1.0, std::max(-1.0, p[c * plane + i]));
            const int byte = static_cast<int>(std::lround((v + 1.0) * 0.5 * 255.0));
            out.push_back(static_cast<char>(std::min(255, std::max(0, byte))));
        }
    }
    write_file(path, out);
}

namespace {

// PPM header tokenizer: skips whitespace and '#' comments, errors carry the
// byte offset of the failure.
int ppm_int(const std::string& data, std::size_t& pos, const std::string& path) {
    while (pos < data.size()) {
        const char c = data[pos];
        if (c == '#') {
            while (pos < data.size() && data[pos] != '\n') ++pos;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            ++pos;
        } else {
            break;
        }
    }
    if (pos >= data.size()) {
        throw IoError("'" + path + "': truncated header at byte " + std::to_string(pos));
    }
    int value = 0;
    bool any = false;
    while (pos < data.size() && std::isdigit(static_cast<unsigned char>(data[pos]))) {
        value = value * 10 + (data[pos] - '0');
        any = true;
        ++pos;
    }
    if (!any) {
        throw IoError("'" + path + "': expected an integer at byte " + std::to_string(pos));
    }
    return value;
}

}  // namespace

Tensor load_ppm(const std::string& path) {
    const std::string data = read_file(path);
    if (data.size() < 2 || data[0] != 'P' || data[1] != '6') {
        throw IoError("'" + path + "': bad magic at byte 0 (expected P6)");
    }
    std::size_t pos = 2;
    const int w = ppm_int(data, pos, path);
    const int h = ppm_int(data, pos, path);
    const int maxval = ppm_int(data, pos, path);
    if (w <= 0 || h <= 0) {
        throw IoError("'" + path + "': bad dimensions " + std::to_string(w) + "x" +
                      std::to_string(h));
    }
    if (maxval != 255) {
        throw IoError("'" + path + "': unsupported maxval " + std::to_string(maxval));
    }
    if (pos >= data.size() || !std::isspace(static_cast<unsigned char>(data[pos]))) {
        throw IoError("'" + path + "': missing header terminator at byte " +
                      std::to_string(pos));
    }
    ++pos;  // single whitespace after maxval
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    if (data.size() - pos < static_cast<std::size_t>(3 * plane)) {
        throw IoError("'" + path + "': truncated pixel data at byte " + std::to_string(pos) +
                      " (need " + std::to_string(3 * plane) + " bytes, have " +
                      std::to_string(data.size() - pos) + ")");
    }
    Tensor img(Shape{3, h, w});
    double* p = img.data();
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            const auto byte = static_cast<unsigned char>(data[pos + static_cast<std::size_t>(3 * i + c)]);
            p[c * plane + i] = byte / 255.0 * 2.0 - 1.0;
        }
    }
    return img;
}

void save_perturbation(const Perturbation& p, const std::string& path) {
    if (p.delta.rank() != 3 || p.delta.dim(0) != 3) {
        throw ShapeError("save_perturbation: expected 3xHxW delta, got " +
                         shape_str(p.delta.shape()));
    }
    std::string out = "AEFP";
    put_u16(out, 1);
    put_u16(out, static_cast<std::uint16_t>(p.delta.dim(1)));
    put_u16(out, static_cast<std::uint16_t>(p.delta.dim(2)));
    put_f64(out, p.eps_budget);
    for (std::int64_t i = 0; i < p.delta.size(); ++i) put_f64(out, p.delta.data()[i]);
    write_file(path, out);
}

Perturbation load_perturbation(const std::string& path) {
    const std::string data = read_file(path);
    if (data.size() < 18) {
        throw IoError("'" + path + "': truncated header (" + std::to_string(data.size()) +
                      " bytes)");
    }
    if (data.compare(0, 4, "AEFP") != 0) {
        throw IoError("'" + path + "': bad magic (expected AEFP)");
    }
    const std::uint16_t version = get_u16(data, 4);
    if (version != 1) {
        throw IoError("'" + path + "': unsupported version " + std::to_string(version));
    }
    const int h = get_u16(data, 6);
    const int w = get_u16(data, 8);
    const double eps = get_f64(data, 10);
    const std::int64_t count = 3LL * h * w;
    if (h <= 0 || w <= 0 || eps <= 0.0) {
        throw IoError("'" + path + "': invalid header fields");
    }
    if (data.size() != 18 + static_cast<std::size_t>(count) * 8) {
        throw IoError("'" + path + "': payload length mismatch (expected " +
                      std::to_string(18 + count * 8) + " bytes, have " +
                      std::to_string(data.size()) + ")");
    }
    Perturbation p;
    p.eps_budget = eps;
    p.delta = Tensor(Shape{3, h, w});
    p.momentum = Tensor(Shape{3, h, w});
    for (std::int64_t i = 0; i < count; ++i) {
        const double v = get_f64(data, 18 + static_cast<std::size_t>(i) * 8);
        if (std::abs(v) > eps) {
            throw IoError("'" + path + "': payload value " + std::to_string(v) +
                          " violates the budget " + std::to_string(eps));
        }
        p.delta.data()[i] = v;
    }
    return p;
}

std::string format_fixed(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 6);
    return std::string(buf, res.ptr);
}

std::vector<ModelSummary> summarize(const Report& report) {
    std::vector<ModelSummary> out;
    ModelSummary agg;
    agg.model = "avg";
    for (std::size_t m = 0; m < report.model_ids.size(); ++m) {
        const auto& rows = report.rows_per_model[m];
        ModelSummary s;
        s.model = report.model_ids[m];
        for (const MetricsRow& r : rows) {
            s.l2mask += r.l2mask;
            s.psnr_db += r.psnr_db;
            s.ssim += r.ssim;
        }
        const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
        s.l2mask /= n;
        s.psnr_db /= n;
        s.ssim /= n;
        s.srmask_pct = rows.empty() ? 0.0 : srmask_percent(rows);
        s.weight = m < report.final_weights.size() ? report.final_weights[m] : 0.0;
        s.l_ema = m < report.final_l_ema.size() ? report.final_l_ema[m] : 0.0;
        agg.l2mask += s.l2mask;
        agg.psnr_db += s.psnr_db;
        agg.ssim += s.ssim;
        agg.srmask_pct += s.srmask_pct;
        agg.weight += s.weight;
        agg.l_ema += s.l_ema;
        out.push_back(std::move(s));
    }
    const double nm = report.model_ids.empty() ? 1.0 : static_cast<double>(report.model_ids.size());
    agg.l2mask /= nm;
    agg.psnr_db /= nm;
    agg.ssim /= nm;
    agg.srmask_pct /= nm;
    agg.weight /= nm;
    agg.l_ema /= nm;
    out.push_back(std::move(agg));
    return out;
}

namespace {

json trace_row_to_json(const Stage2Row& row) {
    json j;
    j["outer"] = row.outer;
    j["batch"] = row.batch;
    j["step"] = row.step;
    j["l_e2e"] = row.l_e2e;
    j["l_feat"] = row.l_feat;
    j["l_total"] = row.l_total;
    j["l_ema"] = row.l_ema;
    j["weights"] = row.weights;
    j["l_global"] = row.l_global;
    return j;
}

}  // namespace

void write_report(const Report& report, const std::string& path, ReportFormat format) {
    if (report.model_ids.size() != report.rows_per_model.size()) {
        throw std::invalid_argument("write_report: model ids and row groups disagree");
    }
    const std::vector<ModelSummary> summaries = summarize(report);
    if (format == ReportFormat::Csv) {
        std::string out = "run_id,model,iteration,l2mask,srmask_pct,psnr_db,ssim,weight,l_ema\n";
        if (report.has_trace) {
            for (const Stage2Row& row : report.trace.rows) {
                for (std::size_t m = 0; m < report.model_ids.size(); ++m) {
                    out += report.run_id + "," + report.model_ids[m] + "," +
                           std::to_string(row.step) + ",,,,," +
                           format_fixed(row.weights[m]) + "," + format_fixed(row.l_ema[m]) +
                           "\n";
                }
            }
        }
        for (const ModelSummary& s : summaries) {
            out += report.run_id + "," + s.model + ",," + format_fixed(s.l2mask) + "," +
                   format_fixed(s.srmask_pct) + "," + format_fixed(s.psnr_db) + "," +
                   format_fixed(s.ssim) + "," + format_fixed(s.weight) + "," +
                   format_fixed(s.l_ema) + "\n";
        }
        write_file(path, out);
        return;
    }

    json j;
    j["run_id"] = report.run_id;
    j["config"] = hyperparams_to_json(report.hp);
    if (!report.config_echo.empty()) j["config_echo"] = report.config_echo;
    json models = json::array();
    json aggregate;
    for (const ModelSummary& s : summaries) {
        json row;
        row["model"] = s.model;
        row["l2mask"] = s.l2mask;
        row["srmask_pct"] = s.srmask_pct;
        row["psnr_db"] = s.psnr_db;
        row["ssim"] = s.ssim;
        row["weight"] = s.weight;
        row["l_ema"] = s.l_ema;
        if (s.model == "avg") {
            aggregate = row;
        } else {
            models.push_back(row);
        }
    }
    j["models"] = models;
    j["aggregate"] = aggregate;
    if (report.imperceptibility_psnr >= 0.0) {
        j["imperceptibility"] = {{"psnr_db", report.imperceptibility_psnr},
                                 {"ssim", report.imperceptibility_ssim}};
    }
    if (report.has_trace) {
        json rows = json::array();
        for (const Stage2Row& row : report.trace.rows) rows.push_back(trace_row_to_json(row));
        j["trace"] = rows;
        j["budget"] = {{"max_abs_delta", report.trace.max_abs_delta},
                       {"max_applied", report.trace.max_applied},
                       {"min_applied", report.trace.min_applied}};
    }
    write_file(path, j.dump(2) + "\n");
}

std::string hyperparams_to_json_string(const HyperParams& hp) {
    return hyperparams_to_json(hp).dump(2);
}

HyperParams hyperparams_from_json_string(const std::string& text) {
    return hyperparams_from_json(json::parse(text));
}

}  // namespace aef
