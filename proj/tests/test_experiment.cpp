#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "minisam/experiment.hpp"

using namespace minisam;

namespace {

const char* kMinimalConfig =
    "task_mode = box_prompt\n"
    "rows = FZ-FF\n";

std::filesystem::path temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("minisam_exp_" + tag);
    std::filesystem::remove_all(p);
    return p;
}

DiceReport report_of(std::vector<std::pair<int, double>> obs) {
    return aggregate_report(obs, {"a", "b"});
}

}  // namespace

TEST_CASE("parse_config_text fills defaults and parses rows") {
    const ExperimentMatrix m = parse_config_text(kMinimalConfig);
    REQUIRE(m.rows.size() == 1);
    CHECK(m.rows[0].label() == "mini/FZ-FF");
    CHECK(m.seeds == std::vector<uint64_t>{0});
    CHECK(m.base_config.base_lr == 3e-4f);
    CHECK(m.base_config.batch_size == 4);
    CHECK(m.base_config.warmup_epochs == 1);
    CHECK(m.dataset == "synth");
}

TEST_CASE("parse_config_text handles full configurations") {
    const ExperimentMatrix m = parse_config_text(
        "task_mode = semantic\n"
        "rows = L-C, small/P-C\n"
        "seeds = 1, 2, 3\n"
        "base_lr = 1e-3\n"
        "epochs = 5\n"
        "max_steps = 42\n"
        "head_lr_scale = 0.5\n"
        "synth_train = 12\n"
        "synth_classes = 6\n"
        "output_dir = /tmp/somewhere\n");
    REQUIRE(m.rows.size() == 2);
    CHECK(m.rows[0].label() == "mini/L-C");
    CHECK(m.rows[1].label() == "small/P-C");
    CHECK(m.seeds == std::vector<uint64_t>{1, 2, 3});
    CHECK(m.base_config.base_lr == doctest::Approx(1e-3f));
    CHECK(m.base_config.max_steps == 42);
    CHECK(m.base_config.head_lr_scale == doctest::Approx(0.5f));
    CHECK(m.synth_train == 12);
    CHECK(m.synth.num_classes == 6);
    CHECK(m.output_dir == "/tmp/somewhere");
}

TEST_CASE("parse_config_text rejects unknown keys, bad values, and missing rows") {
    CHECK_THROWS_AS(parse_config_text("task_mode = box_prompt\nrows = FZ-FF\nbogus_key = 1\n"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config_text("task_mode = box_prompt\nrows = FZ-FF\nepochs = soon\n"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config_text("task_mode = box_prompt\n"), ConfigError);          // no rows
    CHECK_THROWS_AS(parse_config_text("task_mode = box_prompt\nrows = XX-FF\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("task_mode = maybe\nrows = FZ-FF\n"), ConfigError);
}

TEST_CASE("serialize/parse round trip preserves the matrix") {
    ExperimentMatrix m = parse_config_text(
        "task_mode = semantic\n"
        "rows = L-C, FZ-C\n"
        "seeds = 7, 9\n"
        "base_lr = 2e-4\n"
        "synth_train = 8\n");
    const ExperimentMatrix back = parse_config_text(serialize_config(m), "<round-trip>");
    REQUIRE(back.rows.size() == m.rows.size());
    for (size_t i = 0; i < m.rows.size(); ++i) CHECK(back.rows[i].label() == m.rows[i].label());
    CHECK(back.seeds == m.seeds);
    CHECK(back.base_config.base_lr == m.base_config.base_lr);
    CHECK(back.base_config.task_mode == m.base_config.task_mode);
    CHECK(back.synth_train == m.synth_train);
    CHECK(back.output_dir == m.output_dir);
}

TEST_CASE("parse_config reads from disk and reports the file name on errors") {
    const auto dir = temp_dir("cfg");
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "exp.cfg").string();
    std::ofstream(path) << kMinimalConfig;
    CHECK(parse_config(path).rows.size() == 1);
    CHECK_THROWS(parse_config((dir / "missing.cfg").string()));
    std::filesystem::remove_all(dir);
}

TEST_CASE("resolve_output_dir honors the environment override") {
    ExperimentMatrix m = parse_config_text(kMinimalConfig);
    m.output_dir = "runs/exp1";
    unsetenv("MINISAM_OUTPUT_ROOT");
    CHECK(resolve_output_dir(m) == "runs/exp1");
    setenv("MINISAM_OUTPUT_ROOT", "/tmp/override_root", 1);
    const std::string resolved = resolve_output_dir(m);
    CHECK(resolved.find("/tmp/override_root") == 0);
    unsetenv("MINISAM_OUTPUT_ROOT");
}

TEST_CASE("emit_table prints single-seed rows at two decimals") {
    TableRow row{"mini/FZ-FF", {report_of({{1, 71.238}, {2, 80.0}})}};
    const std::string csv = emit_table({row}, {"a", "b"}, TableFormat::Csv);
    CHECK(csv.find("mini/FZ-FF") != std::string::npos);
    CHECK(csv.find("71.24") != std::string::npos);
    CHECK(csv.find("75.62") != std::string::npos);  // row average
    const std::string md = emit_table({row}, {"a", "b"}, TableFormat::Markdown);
    CHECK(md.find("|") != std::string::npos);
    CHECK(md.find("71.24") != std::string::npos);
}

TEST_CASE("emit_table prints mean and sample standard deviation for multi-seed rows") {
    TableRow row{"mini/L-FF",
                 {report_of({{1, 70.0}, {2, 80.0}}), report_of({{1, 74.0}, {2, 80.0}})}};
    const std::string csv = emit_table({row}, {"a", "b"}, TableFormat::Csv);
    // class a: seeds 70 and 74 -> mean 72, sample sd sqrt(8) = 2.83
    CHECK(csv.find("72.00") != std::string::npos);
    CHECK(csv.find("2.83") != std::string::npos);
    CHECK(csv.find("80.00") != std::string::npos);
}

TEST_CASE("run_matrix executes, writes artifacts, and resumes completed runs") {
    const auto out = temp_dir("runs");
    ExperimentMatrix m = parse_config_text(
        "task_mode = box_prompt\n"
        "rows = FZ-FF\n"
        "seeds = 0\n"
        "epochs = 2\n"
        "max_steps = 2\n"
        "batch_size = 2\n"
        "synth_train = 2\n"
        "synth_classes = 2\n");
    m.output_dir = out.string();

    const auto records = run_matrix(m);
    REQUIRE(records.size() == 1);
    CHECK_FALSE(records[0].skipped);
    CHECK(records[0].row_label == "mini/FZ-FF");
    CHECK(std::filesystem::exists(out / "table.csv"));
    CHECK(std::filesystem::exists(out / "table.md"));

    const auto resumed = run_matrix(m);
    REQUIRE(resumed.size() == 1);
    CHECK(resumed[0].skipped);
    CHECK(resumed[0].report.average == doctest::Approx(records[0].report.average));
    std::filesystem::remove_all(out);
}

TEST_CASE("run_matrix rejects task/decoder combinations that make no sense") {
    ExperimentMatrix bad_box = parse_config_text(
        "task_mode = box_prompt\n"
        "rows = FZ-C\n");  // a class head cannot answer a box prompt
    bad_box.output_dir = temp_dir("bad1").string();
    CHECK_THROWS_AS(run_matrix(bad_box), ConfigError);

    ExperimentMatrix bad_sem = parse_config_text(
        "task_mode = semantic\n"
        "rows = FZ-L\n");  // promptable decoder, but the semantic task has no prompts
    bad_sem.output_dir = temp_dir("bad2").string();
    CHECK_THROWS_AS(run_matrix(bad_sem), ConfigError);
}
