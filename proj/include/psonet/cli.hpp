#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace psonet::cli {

// Subcommand argument bundles, exposed so tests can drive commands
// in-process. Every command throws ValidationError for bad input (exit 2
// via run_cli) and std::runtime_error for runtime failures (exit 1).

struct SynthArgs {
    std::filesystem::path spec_file; // optional; defaults when empty
    std::filesystem::path out_dir;
    std::optional<uint64_t> seed;
};
void cmd_synth(const SynthArgs& args);

struct TrainArgs {
    std::filesystem::path manifest; // dataset directory or manifest.json
    std::filesystem::path out_dir;
    std::string profile = "desk"; // desk | paper
    std::filesystem::path config_file;
    std::filesystem::path resume;
    std::filesystem::path pretrained; // encoder weights imported at init
    std::optional<int> epochs;
    std::optional<double> learning_rate;
    std::optional<std::string> mode;
    std::optional<uint64_t> seed;
    std::optional<int> batch_size;
    std::optional<std::string> target;
    std::optional<int> base_width;
    std::optional<int> image_size;
    uint64_t split_seed = 17;
};
void cmd_train(const TrainArgs& args);

struct EvalArgs {
    std::filesystem::path checkpoint;
    std::filesystem::path manifest;
    std::filesystem::path out_dir;
    std::vector<std::filesystem::path> rater_csv;
    std::string split = "test"; // test | val | train | all
    bool truth_as_rater = true; // labels join as rater "truth" when set
    std::string ci_method = "f"; // f | bootstrap
    double confidence = 0.95;
};
void cmd_eval(const EvalArgs& args);

struct ExplainArgs {
    std::filesystem::path checkpoint;
    std::filesystem::path manifest;
    std::string visit;  // "<patient>/<visit>"
    std::string region; // HN | UE | LE | TR
    int top_k = 1;
    double alpha = 0.45;
    std::filesystem::path out_dir;
};
void cmd_explain(const ExplainArgs& args);

struct InferArgs {
    std::filesystem::path checkpoint;
    std::filesystem::path visit_dir; // <dir>/{HN,UE,LE,TR}/*.png
    std::filesystem::path out_file;  // optional scores JSON
};
void cmd_infer(const InferArgs& args);

// Parses argv and dispatches. Exit codes: 0 success, 1 runtime failure,
// 2 configuration or validation failure.
int run_cli(int argc, const char* const* argv);

} // namespace psonet::cli
