// Command-line front end: experiment matrices, standalone evaluation,
// synthetic dataset generation, table rendering, and the gradient self-check.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "minisam/experiment.hpp"
#include "minisam/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace minisam;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRun = 4;

SynthSpec parse_synth_spec(const std::string& path) {
    SynthSpec spec;
    if (path == "default") return spec;
    std::ifstream is(path);
    if (!is) throw IoError("cannot read synth spec " + path);
    std::string raw;
    int number = 0;
    while (std::getline(is, raw)) {
        ++number;
        const size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        std::istringstream ls(raw);
        std::string key, eq, value;
        if (!(ls >> key)) continue;
        if (!(ls >> eq >> value) || eq != "=")
            throw ConfigError("synth spec line " + std::to_string(number) +
                              ": expected key = value");
        try {
            if (key == "image_size") spec.image_size = std::stoi(value);
            else if (key == "num_classes") spec.num_classes = std::stoi(value);
            else if (key == "background") spec.background = std::stof(value);
            else if (key == "intensity_lo") spec.intensity_lo = std::stof(value);
            else if (key == "intensity_hi") spec.intensity_hi = std::stof(value);
            else if (key == "speckle") spec.speckle = std::stof(value);
            else if (key == "shadow_prob") spec.shadow_prob = std::stof(value);
            else if (key == "min_instances") spec.min_instances = std::stoi(value);
            else if (key == "max_instances") spec.max_instances = std::stoi(value);
            else if (key == "min_radius") spec.min_radius = std::stoi(value);
            else if (key == "max_radius") spec.max_radius = std::stoi(value);
            else
                throw ConfigError("synth spec line " + std::to_string(number) +
                                  ": unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ConfigError("synth spec line " + std::to_string(number) +
                              ": malformed value '" + value + "'");
        }
    }
    if (spec.shadow_prob < 0.0f || spec.shadow_prob > 1.0f)
        throw ConfigError("synth spec: shadow_prob must be in [0,1]");
    return spec;
}

int cmd_run(const std::string& config_path) {
    const ExperimentMatrix matrix = parse_config(config_path);
    const auto records = run_matrix(matrix);
    int executed = 0, skipped = 0;
    for (const auto& r : records) (r.skipped ? skipped : executed) += 1;
    std::cout << "completed " << executed << " runs (" << skipped
              << " resumed), results under " << resolve_output_dir(matrix) << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& dataset, const std::string& mode) {
    const TaskMode task = task_mode_from(mode);
    MiniSamModel model = load_checkpoint(ckpt);
    const std::vector<Sample> samples = load_dataset(dataset);
    const std::vector<std::string> names = load_class_names(dataset);
    const DiceReport report = evaluate(model, samples, task, names);
    std::cout << report_to_csv(report);
    return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& outdir, int n, uint64_t seed) {
    const SynthSpec spec = parse_synth_spec(spec_path);
    const auto samples = synth_generate(spec, seed, n);
    write_dataset(outdir, samples, synth_class_names(spec));
    std::cout << "wrote " << samples.size() << " samples to " << outdir << "\n";
    return 0;
}

int cmd_table(const std::string& dir, const std::string& format) {
    if (format != "csv" && format != "markdown")
        throw ConfigError("table: format must be csv or markdown");
    if (!fs::is_directory(dir)) throw IoError("table: no such directory " + dir);

    std::map<std::string, TableRow> rows;
    std::map<int, std::string> classes;
    std::vector<fs::path> summaries;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.path().filename() == "summary.json") summaries.push_back(entry.path());
    std::sort(summaries.begin(), summaries.end());
    for (const fs::path& path : summaries) {
        std::ifstream is(path);
        nlohmann::json j;
        is >> j;
        DiceReport report;
        report.average = j.at("report").at("average").get<double>();
        for (const auto& e : j.at("report").at("per_class")) {
            DiceReport::Entry entry;
            entry.class_id = e.at("class_id").get<int>();
            entry.name = e.at("name").get<std::string>();
            entry.score = e.at("score").get<double>();
            entry.count = e.at("count").get<int>();
            classes[entry.class_id] = entry.name;
            report.per_class.push_back(std::move(entry));
        }
        const std::string label = j.at("row").get<std::string>();
        auto& row = rows[label];
        row.label = label;
        row.reports.push_back(std::move(report));
    }
    if (rows.empty()) throw ValidationError("table: no summary.json files under " + dir);

    std::vector<std::string> class_names;
    for (const auto& [id, name] : classes) class_names.push_back(name);
    std::vector<TableRow> ordered;
    for (auto& [label, row] : rows) ordered.push_back(std::move(row));
    std::cout << emit_table(ordered, class_names,
                            format == "csv" ? TableFormat::Csv : TableFormat::Markdown);
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    const auto results = run_gradcheck(seed);
    for (const auto& r : results)
        std::printf("%-40s max rel err %.3e  %s\n", r.name.c_str(),
                    static_cast<double>(r.max_rel_err), r.pass ? "ok" : "FAIL");
    if (!gradcheck_all_pass(results)) {
        std::cerr << "gradient check failed\n";
        return kExitRun;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prompt-driven segmentation fine-tuning workbench"};
    app.require_subcommand(1);

    std::string config_path, ckpt, dataset, mode, spec_path, outdir, table_dir;
    std::string format = "csv";
    int n = 32;
    uint64_t seed = 0;

    auto* run = app.add_subcommand("run", "Execute an experiment matrix from a config file");
    run->add_option("config", config_path, "key=value config file")->required();

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    ev->add_option("checkpoint", ckpt)->required();
    ev->add_option("dataset", dataset, "dataset root directory")->required();
    ev->add_option("mode", mode, "box_prompt or semantic")->required();

    auto* synth = app.add_subcommand("synth", "Materialize a synthetic dataset");
    synth->add_option("spec", spec_path, "synth spec file, or 'default'")->required();
    synth->add_option("outdir", outdir)->required();
    synth->add_option("n", n, "number of samples")->required();
    synth->add_option("seed", seed)->required();

    auto* table = app.add_subcommand("table", "Render a combined result table");
    table->add_option("dir", table_dir, "directory containing run outputs")->required();
    table->add_option("--format", format, "csv or markdown");

    auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
    gc->add_option("--seed", seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path);
        if (ev->parsed()) return cmd_eval(ckpt, dataset, mode);
        if (synth->parsed()) return cmd_synth(spec_path, outdir, n, seed);
        if (table->parsed()) return cmd_table(table_dir, format);
        if (gc->parsed()) return cmd_gradcheck(seed);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ValidationError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "run error: " << e.what() << "\n";
        return kExitRun;
    }
    return 0;
}
