#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "aef/data_io.hpp"
#include "aef/rng.hpp"

using namespace aef;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("aef-test-" + std::to_string(Rng(std::random_device{}()).uniform_int(1u << 30)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("synthetic faces are deterministic, bounded and seed-sensitive") {
    ImageBatch a = gen_synthetic_faces(8, 32, 0);
    ImageBatch b = gen_synthetic_faces(8, 32, 0);
    CHECK(std::memcmp(a.images.data(), b.images.data(),
                      static_cast<std::size_t>(a.images.size()) * sizeof(double)) == 0);
    CHECK(a.ids == b.ids);

    CHECK(max_abs_value(a.images) <= 1.0);

    ImageBatch c = gen_synthetic_faces(8, 32, 1);
    double mad = 0.0;
    for (std::int64_t i = 0; i < a.images.size(); ++i) {
        mad += std::abs(a.images.data()[i] - c.images.data()[i]);
    }
    mad /= static_cast<double>(a.images.size());
    CHECK(mad > 0.01);
}

TEST_CASE("ppm round trip stays within the 8-bit quantization bound") {
    TempDir dir;
    ImageBatch batch = gen_synthetic_faces(1, 16, 3);
    Tensor img(Shape{3, 16, 16},
               std::vector<double>(batch.images.data(), batch.images.data() + 3 * 256));
    const std::string path = dir.file("img.ppm");
    save_ppm(img, path);
    Tensor back = load_ppm(path);
    REQUIRE(back.shape() == img.shape());
    for (std::int64_t i = 0; i < img.size(); ++i) {
        CHECK(std::abs(back.data()[i] - img.data()[i]) <= 1.0 / 255.0 + 1e-12);
    }
    // a second save of the loaded image is byte-identical (8-bit fixpoint)
    const std::string path2 = dir.file("img2.ppm");
    save_ppm(back, path2);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("ppm loader rejects malformed files") {
    TempDir dir;
    const std::string p5 = dir.file("gray.ppm");
    {
        std::ofstream out(p5, std::ios::binary);
        out << "P5\n4 4\n255\n" << std::string(16, '\0');
    }
    CHECK_THROWS_WITH_AS(load_ppm(p5), doctest::Contains("magic"), IoError);

    const std::string empty = dir.file("empty.ppm");
    { std::ofstream out(empty, std::ios::binary); }
    CHECK_THROWS_AS(load_ppm(empty), IoError);

    const std::string truncated = dir.file("short.ppm");
    {
        std::ofstream out(truncated, std::ios::binary);
        out << "P6\n8 8\n255\n";
        out << std::string(10, '\x7f');  // needs 192 bytes
    }
    CHECK_THROWS_WITH_AS(load_ppm(truncated), doctest::Contains("truncated"), IoError);

    CHECK_THROWS_AS(load_ppm(dir.file("missing.ppm")), IoError);
}

TEST_CASE("perturbation files round trip bit-exactly") {
    TempDir dir;
    Perturbation p = Perturbation::random_init(16, 0.05, 17);
    const std::string path = dir.file("delta.aefp");
    save_perturbation(p, path);
    Perturbation q = load_perturbation(path);
    CHECK(q.eps_budget == p.eps_budget);
    REQUIRE(q.delta.shape() == p.delta.shape());
    CHECK(std::memcmp(q.delta.data(), p.delta.data(),
                      static_cast<std::size_t>(p.delta.size()) * sizeof(double)) == 0);

    // saving again produces identical bytes
    const std::string path2 = dir.file("delta2.aefp");
    save_perturbation(q, path2);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("perturbation loader enforces the budget and the format") {
    TempDir dir;
    Perturbation p = Perturbation::zeros(16, 0.05);
    p.delta.data()[7] = 0.06;  // out of budget
    const std::string path = dir.file("bad.aefp");
    save_perturbation(p, path);
    CHECK_THROWS_WITH_AS(load_perturbation(path), doctest::Contains("budget"), IoError);

    const std::string magic = dir.file("magic.aefp");
    {
        std::ofstream out(magic, std::ios::binary);
        out << "NOPE" << std::string(40, '\0');
    }
    CHECK_THROWS_WITH_AS(load_perturbation(magic), doctest::Contains("magic"), IoError);

    const std::string shorted = dir.file("short.aefp");
    {
        std::ofstream out(shorted, std::ios::binary);
        out << "AEFP" << std::string(20, '\0');
    }
    CHECK_THROWS_AS(load_perturbation(shorted), IoError);
}

TEST_CASE("csv reports follow the schema") {
    TempDir dir;
    Report report;
    report.run_id = "test-run";
    report.model_ids = {"m0", "m1", "m2", "m3"};
    report.rows_per_model.resize(4);
    for (int m = 0; m < 4; ++m) {
        for (int i = 0; i < 3; ++i) {
            MetricsRow row;
            row.model = report.model_ids[static_cast<std::size_t>(m)];
            row.l2mask = 0.01 * (m + 1) * (i + 1);
            row.success = row.l2mask > kSuccessThreshold;
            row.psnr_db = 20.0 + m;
            row.ssim = 0.5 + 0.05 * m;
            report.rows_per_model[static_cast<std::size_t>(m)].push_back(row);
        }
        report.final_weights.push_back(0.25);
        report.final_l_ema.push_back(-0.1 * (m + 1));
    }
    const std::string path = dir.file("report.csv");
    write_report(report, path, ReportFormat::Csv);
    const std::string text = slurp(path);

    // exact header
    CHECK(text.rfind("run_id,model,iteration,l2mask,srmask_pct,psnr_db,ssim,weight,l_ema\n", 0) == 0);
    // summary mode: header + 4 model rows + 1 aggregate row
    std::size_t lines = 0;
    for (char c : text) lines += c == '\n' ? 1 : 0;
    CHECK(lines == 1 + 4 + 1);
    CHECK(text.find("test-run,m0,,") != std::string::npos);
    CHECK(text.find("test-run,avg,,") != std::string::npos);
    // 6-decimal fixed formatting
    CHECK(text.find("0.250000") != std::string::npos);
}

TEST_CASE("json reports echo a round-trippable configuration") {
    TempDir dir;
    Report report;
    report.run_id = "echo";
    report.hp.seed = 1234;
    report.hp.temperature = 0.37;
    report.hp.eta = -1.0;  // resolved value is echoed
    report.model_ids = {"only"};
    report.rows_per_model.resize(1);
    MetricsRow row;
    row.model = "only";
    row.l2mask = 0.2;
    row.success = true;
    row.psnr_db = 15.0;
    row.ssim = 0.4;
    report.rows_per_model[0].push_back(row);
    report.final_weights = {1.0};
    report.final_l_ema = {-0.5};

    const std::string path = dir.file("report.json");
    write_report(report, path, ReportFormat::Json);

    const std::string text = slurp(path);
    auto parsed = nlohmann::json::parse(text);
    HyperParams back = hyperparams_from_json_string(parsed.at("config").dump());
    CHECK(back.seed == report.hp.seed);
    CHECK(back.temperature == report.hp.temperature);
    CHECK(back.eta == report.hp.step_size());
    CHECK(back.eps_budget == report.hp.eps_budget);
    CHECK(back.lambda == report.hp.lambda);
    CHECK(back.beta == report.hp.beta);
    CHECK(back.alpha == report.hp.alpha);
    CHECK(back.w_k == report.hp.w_k);
    CHECK(back.t_out == report.hp.t_out);
    CHECK(back.t_in == report.hp.t_in);
    CHECK(back.mu_momentum == report.hp.mu_momentum);
    CHECK(back.batch_size == report.hp.batch_size);
}

TEST_CASE("format_fixed is locale independent and 6-decimal") {
    CHECK(format_fixed(0.25) == "0.250000");
    CHECK(format_fixed(-1.0 / 3.0) == "-0.333333");
    CHECK(format_fixed(100.0) == "100.000000");
}

TEST_CASE("reports are byte-deterministic") {
    TempDir dir;
    Report report;
    report.run_id = "det";
    report.model_ids = {"a", "b"};
    report.rows_per_model.resize(2);
    for (int m = 0; m < 2; ++m) {
        MetricsRow row;
        row.model = report.model_ids[static_cast<std::size_t>(m)];
        row.l2mask = 0.07;
        row.success = true;
        row.psnr_db = 18.0;
        row.ssim = 0.6;
        report.rows_per_model[static_cast<std::size_t>(m)].push_back(row);
    }
    report.final_weights = {0.5, 0.5};
    report.final_l_ema = {-0.2, -0.3};
    write_report(report, dir.file("a.json"), ReportFormat::Json);
    write_report(report, dir.file("b.json"), ReportFormat::Json);
    CHECK(slurp(dir.file("a.json")) == slurp(dir.file("b.json")));
    write_report(report, dir.file("a.csv"), ReportFormat::Csv);
    write_report(report, dir.file("b.csv"), ReportFormat::Csv);
    CHECK(slurp(dir.file("a.csv")) == slurp(dir.file("b.csv")));
}
