#include "minisam/experiment.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace minisam {

std::string MatrixRow::label() const {
    return preset + "/" + to_code(encoder_mode) + "-" + to_code(decoder_mode);
}

// ---------------------------------------------------------------- parsing

namespace {

struct Line {
    int number = 0;
    std::string key, value;
};

std::vector<Line> tokenize(const std::string& text) {
    std::vector<Line> lines;
    std::istringstream is(text);
    std::string raw;
    int number = 0;
    while (std::getline(is, raw)) {
        ++number;
        const size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        raw = trim(raw);
        if (raw.empty()) continue;
        const size_t eq = raw.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(number) + ": expected key=value");
        lines.push_back({number, trim(raw.substr(0, eq)), trim(raw.substr(eq + 1))});
    }
    return lines;
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> items;
    std::string item;
    std::istringstream is(value);
    while (std::getline(is, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        if (b != std::string::npos) items.push_back(item.substr(b, e - b + 1));
    }
    return items;
}

MatrixRow parse_row(const std::string& text, const std::string& default_preset, int line) {
    MatrixRow row;
    std::string spec = text;
    row.preset = default_preset;
    const size_t slash = spec.find('/');
    if (slash != std::string::npos) {
        row.preset = spec.substr(0, slash);
        spec = spec.substr(slash + 1);
    }
    const size_t dash = spec.find('-');
    if (dash == std::string::npos)
        throw ConfigError("config line " + std::to_string(line) + ": row '" + text +
                          "' must look like [preset/]ENC-DEC");
    try {
        row.encoder_mode = encoder_mode_from(spec.substr(0, dash));
        row.decoder_mode = decoder_mode_from(spec.substr(dash + 1));
        preset_by_name(row.preset);
    } catch (const ConfigError& e) {
        throw ConfigError("config line " + std::to_string(line) + ": " + e.what());
    }
    return row;
}

template <typename F>
auto parse_number(const std::string& value, int line, F&& convert) {
    try {
        size_t used = 0;
        auto v = convert(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config line " + std::to_string(line) + ": malformed number '" + value +
                          "'");
    }
}

float parse_float(const std::string& v, int line) {
    return parse_number(v, line, [](const std::string& s, size_t* u) { return std::stof(s, u); });
}
int parse_int(const std::string& v, int line) {
    return parse_number(v, line, [](const std::string& s, size_t* u) { return std::stoi(s, u); });
}
uint64_t parse_u64(const std::string& v, int line) {
    return parse_number(v, line, [](const std::string& s, size_t* u) { return std::stoull(s, u); });
}

bool parse_bool(const std::string& v, int line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config line " + std::to_string(line) + ": expected true/false, got '" + v +
                      "'");
}

}  // namespace

ExperimentMatrix parse_config_text(const std::string& text, const std::string& origin) {
    ExperimentMatrix m;
    std::string default_preset = "mini";
    std::vector<std::pair<std::string, int>> row_specs;
    bool have_rows = false, have_task = false;

    for (const Line& ln : tokenize(text)) {
        const std::string& k = ln.key;
        const std::string& v = ln.value;
        if (k == "task_mode") {
            try {
                m.base_config.task_mode = task_mode_from(v);
            } catch (const ConfigError& e) {
                throw ConfigError("config line " + std::to_string(ln.number) + ": " + e.what());
            }
            have_task = true;
        } else if (k == "preset") {
            try {
                preset_by_name(v);
            } catch (const ConfigError& e) {
                throw ConfigError("config line " + std::to_string(ln.number) + ": " + e.what());
            }
            default_preset = v;
        } else if (k == "rows") {
            for (const std::string& item : split_list(v)) row_specs.emplace_back(item, ln.number);
            have_rows = true;
        } else if (k == "seeds") {
            m.seeds.clear();
            for (const std::string& item : split_list(v))
                m.seeds.push_back(parse_u64(item, ln.number));
        } else if (k == "base_lr") {
            m.base_config.base_lr = parse_float(v, ln.number);
        } else if (k == "batch_size") {
            m.base_config.batch_size = parse_int(v, ln.number);
        } else if (k == "epochs") {
            m.base_config.epochs = parse_int(v, ln.number);
        } else if (k == "warmup_epochs") {
            m.base_config.warmup_epochs = parse_int(v, ln.number);
        } else if (k == "max_steps") {
            m.base_config.max_steps = parse_int(v, ln.number);
        } else if (k == "grad_clip") {
            m.base_config.grad_clip = parse_float(v, ln.number);
        } else if (k == "head_lr_scale") {
            m.base_config.head_lr_scale = parse_float(v, ln.number);
        } else if (k == "augment") {
            m.base_config.augment = parse_bool(v, ln.number);
        } else if (k == "dataset") {
            m.dataset = v;
        } else if (k == "synth_classes") {
            m.synth.num_classes = parse_int(v, ln.number);
        } else if (k == "synth_image_size") {
            m.synth.image_size = parse_int(v, ln.number);
        } else if (k == "synth_train") {
            m.synth_train = parse_int(v, ln.number);
        } else if (k == "synth_val") {
            m.synth_val = parse_int(v, ln.number);
        } else if (k == "synth_test") {
            m.synth_test = parse_int(v, ln.number);
        } else if (k == "synth_seed") {
            m.synth_seed = parse_u64(v, ln.number);
        } else if (k == "output_dir") {
            m.output_dir = v;
        } else {
            throw ConfigError("config line " + std::to_string(ln.number) + ": unknown key '" + k +
                              "'");
        }
    }
    if (!have_task)
        throw ConfigError(origin + ": missing required key 'task_mode'");
    if (!have_rows || row_specs.empty())
        throw ConfigError(origin + ": missing required key 'rows'");
    for (const auto& [spec, line] : row_specs)
        m.rows.push_back(parse_row(spec, default_preset, line));
    if (m.seeds.empty()) m.seeds.push_back(0);

    std::vector<std::string> labels;
    for (const MatrixRow& row : m.rows) labels.push_back(row.label());
    std::sort(labels.begin(), labels.end());
    if (std::adjacent_find(labels.begin(), labels.end()) != labels.end())
        throw ConfigError(origin + ": duplicate matrix row labels");
    if (m.dataset.empty()) m.dataset = "synth";
    m.base_config.validate();
    return m;
}

ExperimentMatrix parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string serialize_config(const ExperimentMatrix& m) {
    std::ostringstream os;
    os << "task_mode = " << to_code(m.base_config.task_mode) << "\n";
    os << "rows = ";
    for (size_t i = 0; i < m.rows.size(); ++i) os << (i ? ", " : "") << m.rows[i].label();
    os << "\n";
    os << "seeds = ";
    for (size_t i = 0; i < m.seeds.size(); ++i) os << (i ? ", " : "") << m.seeds[i];
    os << "\n";
    os << "base_lr = " << m.base_config.base_lr << "\n";
    os << "batch_size = " << m.base_config.batch_size << "\n";
    os << "epochs = " << m.base_config.epochs << "\n";
    os << "warmup_epochs = " << m.base_config.warmup_epochs << "\n";
    os << "max_steps = " << m.base_config.max_steps << "\n";
    os << "grad_clip = " << m.base_config.grad_clip << "\n";
    os << "head_lr_scale = " << m.base_config.head_lr_scale << "\n";
    os << "augment = " << (m.base_config.augment ? "true" : "false") << "\n";
    os << "dataset = " << m.dataset << "\n";
    os << "synth_classes = " << m.synth.num_classes << "\n";
    os << "synth_image_size = " << m.synth.image_size << "\n";
    os << "synth_train = " << m.synth_train << "\n";
    os << "synth_val = " << m.synth_val << "\n";
    os << "synth_test = " << m.synth_test << "\n";
    os << "synth_seed = " << m.synth_seed << "\n";
    os << "output_dir = " << m.output_dir << "\n";
    return os.str();
}

std::string resolve_output_dir(const ExperimentMatrix& matrix) {
    if (const char* root = std::getenv("MINISAM_OUTPUT_ROOT"); root && *root)
        return (fs::path(root) / matrix.output_dir).string();
    return matrix.output_dir;
}

// ---------------------------------------------------------------- running

namespace {

std::string run_dir_name(const MatrixRow& row, uint64_t seed) {
    std::string s = row.label();
    std::replace(s.begin(), s.end(), '/', '_');
    return s + "_seed" + std::to_string(seed);
}

DiceReport report_from_json(const nlohmann::json& j) {
    DiceReport r;
    r.average = j.at("average").get<double>();
    for (const auto& e : j.at("per_class")) {
        DiceReport::Entry entry;
        entry.class_id = e.at("class_id").get<int>();
        entry.name = e.at("name").get<std::string>();
        entry.score = e.at("score").get<double>();
        entry.count = e.at("count").get<int>();
        r.per_class.push_back(std::move(entry));
    }
    return r;
}

nlohmann::json report_to_json(const DiceReport& r) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& e : r.per_class)
        per_class.push_back({{"class_id", e.class_id},
                             {"name", e.name},
                             {"score", e.score},
                             {"count", e.count}});
    return {{"average", r.average}, {"per_class", per_class}};
}

void validate_row(const MatrixRow& row, TaskMode task) {
    if (task == TaskMode::Semantic && row.decoder_mode != DecoderMode::C)
        throw ConfigError("matrix row " + row.label() +
                          ": semantic task requires decoder mode C");
    if (task == TaskMode::BoxPrompt && row.decoder_mode == DecoderMode::C)
        throw ConfigError("matrix row " + row.label() +
                          ": box-prompt task is incompatible with decoder mode C");
}

}  // namespace

std::vector<RunRecord> run_matrix(const ExperimentMatrix& matrix) {
    // fail-fast: every row validated before any training starts
    for (const MatrixRow& row : matrix.rows) validate_row(row, matrix.base_config.task_mode);
    if (matrix.seeds.empty()) throw ConfigError("run_matrix: no seeds");

    // materialize data once; all runs share it
    std::vector<Sample> train_set, val_set, test_set;
    std::vector<std::string> class_names;
    if (matrix.dataset == "synth") {
        if (matrix.synth_train < 1) throw ConfigError("run_matrix: synth_train must be >= 1");
        class_names = synth_class_names(matrix.synth);
        train_set = synth_generate(matrix.synth, matrix.synth_seed * 3 + 1, matrix.synth_train);
        if (matrix.synth_val > 0)
            val_set = synth_generate(matrix.synth, matrix.synth_seed * 3 + 2, matrix.synth_val);
        if (matrix.synth_test > 0)
            test_set = synth_generate(matrix.synth, matrix.synth_seed * 3 + 3, matrix.synth_test);
    } else {
        std::vector<Sample> all = load_dataset(matrix.dataset);
        class_names = load_class_names(matrix.dataset);
        std::vector<std::string> ids;
        for (const Sample& s : all) ids.push_back(s.id);
        const DatasetSplit split = split_dataset(ids, matrix.synth_seed);
        auto pick = [&](const std::vector<std::string>& want) {
            std::vector<Sample> out;
            for (const std::string& id : want)
                for (const Sample& s : all)
                    if (s.id == id) out.push_back(s);
            return out;
        };
        train_set = pick(split.train);
        val_set = pick(split.val);
        test_set = pick(split.test);
    }
    const std::vector<Sample>& eval_set =
        !test_set.empty() ? test_set : (!val_set.empty() ? val_set : train_set);
    const int num_classes = static_cast<int>(class_names.size());

    const fs::path out_root = resolve_output_dir(matrix);
    fs::create_directories(out_root);

    std::vector<RunRecord> records;
    for (const MatrixRow& row : matrix.rows) {
        for (uint64_t seed : matrix.seeds) {
            const fs::path dir = out_root / run_dir_name(row, seed);
            const fs::path summary_path = dir / "summary.json";
            RunRecord record;
            record.row_label = row.label();
            record.seed = seed;
            if (fs::exists(summary_path)) {
                std::ifstream is(summary_path);
                nlohmann::json j;
                is >> j;
                record.report = report_from_json(j.at("report"));
                record.skipped = true;
                records.push_back(std::move(record));
                continue;
            }
            fs::create_directories(dir);

            MiniSamModel model = build_model(preset_by_name(row.preset), num_classes, seed);
            // alpha above the rank-equal default: the adapters start exactly
            // transparent (B = 0) but reach useful deltas within short step
            // budgets, where the B*A product of two slowly moving factors
            // would otherwise stay negligible
            if (row.encoder_mode == EncoderMode::L || row.decoder_mode == DecoderMode::L)
                apply_lora(model, {.rank = 4, .alpha = 32.0f, .seed = seed});
            if (row.encoder_mode == EncoderMode::P) insert_prompt_layers(model, seed);
            const TuningPlan plan = build_tuning_plan(row.encoder_mode, row.decoder_mode, model);

            TrainConfig config = matrix.base_config;
            config.seed = seed;
            config.preset = row.preset;
            config.encoder_mode = to_code(row.encoder_mode);
            config.decoder_mode = to_code(row.decoder_mode);

            TrainResult result = train(config, train_set, val_set, model, plan,
                                       (dir / "ckpt.bin").string());
            result.log.write_jsonl((dir / "runlog.jsonl").string());

            // evaluate the best checkpoint when validation selected one
            MiniSamModel best = load_checkpoint((dir / "ckpt.bin").string());
            record.report = evaluate(best, eval_set, config.task_mode, class_names);
            {
                std::ofstream os(dir / "report.csv");
                os << report_to_csv(record.report);
            }
            {
                std::ofstream os(summary_path);
                os << nlohmann::json{{"row", record.row_label},
                                     {"seed", seed},
                                     {"report", report_to_json(record.report)}}
                          .dump(2)
                   << "\n";
            }
            records.push_back(std::move(record));
        }
    }

    // combined tables across all rows
    std::vector<TableRow> table_rows;
    for (const MatrixRow& row : matrix.rows) {
        TableRow tr;
        tr.label = row.label();
        for (const RunRecord& record : records)
            if (record.row_label == tr.label) tr.reports.push_back(record.report);
        table_rows.push_back(std::move(tr));
    }
    {
        std::ofstream os(out_root / "table.csv");
        os << emit_table(table_rows, class_names, TableFormat::Csv);
    }
    {
        std::ofstream os(out_root / "table.md");
        os << emit_table(table_rows, class_names, TableFormat::Markdown);
    }
    return records;
}

// ---------------------------------------------------------------- tables

std::string emit_table(const std::vector<TableRow>& rows,
                       const std::vector<std::string>& class_names, TableFormat format) {
    if (rows.empty()) throw UsageError("emit_table: no rows");

    const int c = static_cast<int>(class_names.size());
    auto cell = [&](const TableRow& row, int cls) -> std::string {
        // cls in [1, c] selects a class column; 0 selects the average
        std::vector<double> values;
        for (const DiceReport& r : row.reports) {
            if (cls == 0) {
                values.push_back(r.average);
                continue;
            }
            for (const auto& e : r.per_class)
                if (e.class_id == cls && e.count > 0) values.push_back(e.score);
        }
        if (values.empty()) return "-";
        double mean = 0.0;
        for (double v : values) mean += v;
        mean /= static_cast<double>(values.size());
        if (values.size() < 2) return fixed2(mean);
        double var = 0.0;
        for (double v : values) var += (v - mean) * (v - mean);
        var /= static_cast<double>(values.size() - 1);
        return fixed2(mean) + " ± " + fixed2(std::sqrt(var));
    };

    std::ostringstream os;
    if (format == TableFormat::Csv) {
        os << "row";
        for (const std::string& name : class_names) os << "," << name;
        os << ",average\n";
        for (const TableRow& row : rows) {
            os << row.label;
            for (int cls = 1; cls <= c; ++cls) os << "," << cell(row, cls);
            os << "," << cell(row, 0) << "\n";
        }
    } else {
        os << "| row |";
        for (const std::string& name : class_names) os << " " << name << " |";
        os << " average |\n";
        os << "| --- |";
        for (int cls = 0; cls < c + 1; ++cls) os << " --- |";
        os << "\n";
        for (const TableRow& row : rows) {
            os << "| " << row.label << " |";
            for (int cls = 1; cls <= c; ++cls) os << " " << cell(row, cls) << " |";
            os << " " << cell(row, 0) << " |\n";
        }
    }
    return os.str();
}

}  // namespace minisam
