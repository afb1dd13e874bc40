#pragma once

#include <map>
#include <string>
#include <vector>

#include "minisam/data.hpp"
#include "minisam/losses.hpp"
#include "minisam/train.hpp"

namespace minisam {

struct MatrixRow {
    std::string preset;  // "mini" | "small" | "base"
    EncoderMode encoder_mode = EncoderMode::FZ;
    DecoderMode decoder_mode = DecoderMode::FF;

    std::string label() const;  // "preset/ENC-DEC"
};

struct ExperimentMatrix {
    std::vector<MatrixRow> rows;
    std::vector<uint64_t> seeds;  // each row runs once per seed
    TrainConfig base_config;      // shared overrides; per-run seed/preset filled in

    // data source: either a dataset directory or a synthetic recipe
    std::string dataset;  // "synth" or a path
    SynthSpec synth;
    int synth_train = 32;
    int synth_val = 0;
    int synth_test = 0;
    uint64_t synth_seed = 0;

    std::string output_dir = "runs";
};

// Flat key=value config file. Unknown keys, malformed values, and missing
// required keys raise ConfigError naming the line. Defaults are echoed into
// the parsed result, so serialize(parse(x)) is self-describing.
ExperimentMatrix parse_config(const std::string& path);
ExperimentMatrix parse_config_text(const std::string& text, const std::string& origin = "<text>");
std::string serialize_config(const ExperimentMatrix& matrix);

// Resolves the effective output directory, honoring the MINISAM_OUTPUT_ROOT
// environment variable when set.
std::string resolve_output_dir(const ExperimentMatrix& matrix);

struct RunRecord {
    std::string row_label;
    uint64_t seed = 0;
    DiceReport report;
    bool skipped = false;  // resumed from an existing summary
};

// Validates every row, then executes runs sequentially in declaration order.
// Completed runs (existing summary.json) are loaded and skipped. Writes per-run
// artifacts plus combined table.csv / table.md under the output directory.
std::vector<RunRecord> run_matrix(const ExperimentMatrix& matrix);

enum class TableFormat { Csv, Markdown };

struct TableRow {
    std::string label;
    std::vector<DiceReport> reports;  // one per seed
};

// Rows x (per-class columns..., average); 2-decimal fixed point; multi-seed
// rows print "mean ± sd" (sample standard deviation).
std::string emit_table(const std::vector<TableRow>& rows,
                       const std::vector<std::string>& class_names, TableFormat format);

}  // namespace minisam
