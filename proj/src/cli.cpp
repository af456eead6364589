#include "psonet/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "psonet/dataio.hpp"
#include "psonet/errors.hpp"
#include "psonet/evalmetrics.hpp"
#include "psonet/interpret.hpp"
#include "psonet/manifest.hpp"
#include "psonet/nnet.hpp"
#include "psonet/synth.hpp"
#include "psonet/train.hpp"

namespace psonet::cli {

using nlohmann::json;

namespace {

std::filesystem::path resolve_manifest_path(const std::filesystem::path& path) {
    if (std::filesystem::is_directory(path)) return path / "manifest.json";
    return path;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

} // namespace

void cmd_synth(const SynthArgs& args) {
    dataio::SyntheticSpec spec;
    if (!args.spec_file.empty()) {
        spec = dataio::synthetic_spec_from_json_file(args.spec_file);
    }
    if (args.seed) spec.rng_seed = *args.seed;
    spec.validate();

    const auto manifest = dataio::generate_synthetic_dataset(spec, args.out_dir);

    size_t high = 0;
    double lo = 72.0, hi = 0.0, sum = 0.0;
    for (const auto& [key, labels] : manifest.labels) {
        lo = std::min(lo, labels.total);
        hi = std::max(hi, labels.total);
        sum += labels.total;
        if (labels.total > 10.0) ++high;
    }
    std::cout << "dataset written to " << args.out_dir.string() << "\n"
              << "patients: " << manifest.patients.size()
              << ", visits: " << manifest.labels.size()
              << ", images: " << manifest.records.size() << "\n"
              << "total PASI: min " << lo << ", mean "
              << sum / static_cast<double>(manifest.labels.size()) << ", max " << hi << ", >10: "
              << high << "/" << manifest.labels.size() << "\n";
}

namespace {

struct ResolvedTrainConfig {
    nnet::ModelConfig model;
    train::TrainConfig training;
    uint64_t split_seed = 17;
};

ResolvedTrainConfig resolve_train_config(const TrainArgs& args) {
    ResolvedTrainConfig cfg;
    if (args.profile == "desk") {
        cfg.model = train::desk_model_config();
        cfg.training = train::desk_train_config();
    } else if (args.profile == "paper") {
        cfg.model = nnet::ModelConfig{};
        cfg.model.encoder.base_width = 96;
        cfg.model.encoder.input_height = 224;
        cfg.model.encoder.input_width = 224;
        cfg.model.encoder.variant = nnet::EncoderVariant::PluggablePretrained;
        cfg.training = train::TrainConfig{}; // lr 1e-6, 100 epochs, batch 4
    } else {
        throw ValidationError("unknown profile '" + args.profile + "' (desk or paper)");
    }
    cfg.split_seed = args.split_seed;

    if (!args.config_file.empty()) {
        std::ifstream f(args.config_file);
        if (!f) throw ValidationError("cannot open config: " + args.config_file.string());
        json doc;
        try {
            doc = json::parse(f);
        } catch (const json::parse_error& e) {
            throw ValidationError("config parse error: " + std::string(e.what()));
        }
        if (doc.contains("epochs")) cfg.training.epochs = doc["epochs"].get<int>();
        if (doc.contains("learning_rate")) {
            cfg.training.learning_rate = doc["learning_rate"].get<double>();
        }
        if (doc.contains("weight_decay")) {
            cfg.training.weight_decay = doc["weight_decay"].get<double>();
        }
        if (doc.contains("batch_size")) cfg.training.batch_size = doc["batch_size"].get<int>();
        if (doc.contains("seed")) cfg.training.seed = doc["seed"].get<uint64_t>();
        if (doc.contains("mode")) {
            cfg.training.mode = dataio::assemble_mode_from_name(doc["mode"].get<std::string>());
        }
        if (doc.contains("target")) {
            const auto t = doc["target"].get<std::string>();
            if (t == "per_region") {
                cfg.training.target = train::TrainConfig::Target::PerRegion;
            } else if (t == "absolute") {
                cfg.training.target = train::TrainConfig::Target::Absolute;
            } else {
                throw ValidationError("config target must be per_region or absolute");
            }
        }
        if (doc.contains("sampling_threshold")) {
            cfg.training.sampling_threshold = doc["sampling_threshold"].get<double>();
        }
        if (doc.contains("base_width")) cfg.model.encoder.base_width = doc["base_width"].get<int>();
        if (doc.contains("image_size")) {
            cfg.model.encoder.input_height = doc["image_size"].get<int>();
            cfg.model.encoder.input_width = doc["image_size"].get<int>();
        }
        if (doc.contains("embed_dim")) cfg.model.embed_dim = doc["embed_dim"].get<int>();
        if (doc.contains("attention_hidden")) {
            cfg.model.attention_hidden = doc["attention_hidden"].get<int>();
        }
        if (doc.contains("shared_encoder")) {
            cfg.model.shared_encoder = doc["shared_encoder"].get<bool>();
        }
        if (doc.contains("split_seed")) cfg.split_seed = doc["split_seed"].get<uint64_t>();
    }

    if (args.epochs) cfg.training.epochs = *args.epochs;
    if (args.learning_rate) cfg.training.learning_rate = *args.learning_rate;
    if (args.mode) cfg.training.mode = dataio::assemble_mode_from_name(*args.mode);
    if (args.seed) cfg.training.seed = *args.seed;
    if (args.batch_size) cfg.training.batch_size = *args.batch_size;
    if (args.target) {
        if (*args.target == "per_region") {
            cfg.training.target = train::TrainConfig::Target::PerRegion;
        } else if (*args.target == "absolute") {
            cfg.training.target = train::TrainConfig::Target::Absolute;
        } else {
            throw ValidationError("--target must be per_region or absolute");
        }
    }
    if (args.base_width) cfg.model.encoder.base_width = *args.base_width;
    if (args.image_size) {
        cfg.model.encoder.input_height = *args.image_size;
        cfg.model.encoder.input_width = *args.image_size;
    }
    cfg.model.mode = cfg.training.mode;
    cfg.model.validate();
    cfg.training.validate();
    return cfg;
}

json echo_train_config(const TrainArgs& args, const ResolvedTrainConfig& cfg) {
    json doc;
    doc["command"] = "train";
    doc["manifest"] = args.manifest.string();
    doc["profile"] = args.profile;
    doc["model"] = json::parse(nnet::model_config_to_json(cfg.model));
    doc["train"]["learning_rate"] = cfg.training.learning_rate;
    doc["train"]["weight_decay"] = cfg.training.weight_decay;
    doc["train"]["batch_size"] = cfg.training.batch_size;
    doc["train"]["epochs"] = cfg.training.epochs;
    doc["train"]["mode"] = std::string(dataio::assemble_mode_name(cfg.training.mode));
    doc["train"]["seed"] = cfg.training.seed;
    doc["train"]["sampling_threshold"] = cfg.training.sampling_threshold;
    doc["train"]["target"] = cfg.training.target == train::TrainConfig::Target::PerRegion
                                 ? "per_region"
                                 : "absolute";
    doc["split_seed"] = cfg.split_seed;
    return doc;
}

} // namespace

void cmd_train(const TrainArgs& args) {
    const auto cfg = resolve_train_config(args);
    const auto manifest = dataio::load_manifest(resolve_manifest_path(args.manifest));

    std::filesystem::create_directories(args.out_dir);
    write_text(args.out_dir / "resolved_config.json", echo_train_config(args, cfg).dump(2) + "\n");

    auto parts = dataio::split_by_patient(manifest, {}, cfg.split_seed);
    {
        // Echo the split so downstream commands see the same partition;
        // image paths are rewritten relative to the echo's location.
        dataio::DatasetManifest tagged = manifest;
        tagged.split.clear();
        for (int part = 0; part < 3; ++part) {
            for (const auto& [patient, tag] : parts[part].split) tagged.split.emplace(patient, tag);
        }
        for (auto& rec : tagged.records) {
            rec.path = std::filesystem::relative(manifest.resolve(rec.path), args.out_dir)
                           .generic_string();
        }
        tagged.base_dir = args.out_dir;
        dataio::save_manifest(tagged, args.out_dir / "split_manifest.json");
    }

    train::FitOptions options;
    options.checkpoint_path = args.out_dir / "best.ckpt";
    options.state_path = args.out_dir / "train_state.bin";
    options.resume_from = args.resume;
    options.pretrained_encoder = args.pretrained;

    const auto result = train::fit(parts[0], parts[1], cfg.model, cfg.training, options);
    train::write_metrics_csv(args.out_dir / "metrics.csv", result.log);

    const double baseline = train::mean_predictor_baseline(parts[0], parts[1]);
    std::cout << "trained " << result.log.size() << " epochs; best val MAE "
              << result.best_val_mae << " at epoch " << result.best_epoch
              << " (mean-predictor baseline " << baseline << ")\n"
              << "checkpoint: " << options.checkpoint_path.string() << "\n";
    for (const auto& row : result.log) {
        std::cout << "epoch " << row.epoch << ": train_mae " << row.train_mae << ", val_mae "
                  << row.val_mae << "\n";
    }
}

namespace {

struct InferenceResult {
    evalmetrics::ScoreTable totals;
    std::array<std::vector<std::pair<double, double>>, 4> attention_pairs; // (max attn, score)
    std::vector<std::tuple<std::string, pasi::RegionId, double, double>> regional_rows;
};

InferenceResult run_inference(const nnet::PsoNetParams& params,
                              const dataio::DatasetManifest& manifest) {
    const auto& enc = params.config.encoder;
    dataio::VisitProvider provider(manifest, params.config.mode, enc.input_height,
                                   enc.input_width);
    InferenceResult result;
    for (size_t i = 0; i < provider.size(); ++i) {
        const auto sample = provider.get(i);
        const auto out = nnet::absolute_forward(sample, params);
        const auto& key = provider.visit_keys()[i];
        result.totals[key] = out.total.value;
        for (size_t r = 0; r < 4; ++r) {
            const auto& weights = out.regions[r].attention.weights;
            const double max_attention = *std::max_element(weights.begin(), weights.end());
            result.attention_pairs[r].push_back({max_attention, out.regions[r].score.value});
            result.regional_rows.emplace_back(key, pasi::kAllRegions[r],
                                              out.regions[r].score.value, max_attention);
        }
    }
    return result;
}

void write_regional_scores_csv(const std::filesystem::path& path, const InferenceResult& result) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "visit,region,score,max_attention\n";
    f.precision(17);
    for (const auto& [key, region, score, max_attention] : result.regional_rows) {
        f << key << "," << pasi::region_code(region) << "," << score << "," << max_attention
          << "\n";
    }
}

} // namespace

void cmd_eval(const EvalArgs& args) {
    const auto params = nnet::load_checkpoint(args.checkpoint);
    auto manifest = dataio::load_manifest(resolve_manifest_path(args.manifest));

    if (args.split != "all") {
        if (manifest.split.empty()) {
            throw ValidationError("manifest has no split tags; use --split all or a "
                                  "split_manifest.json produced by train");
        }
        manifest = dataio::filter_split(manifest, dataio::split_from_name(args.split));
    }

    std::filesystem::create_directories(args.out_dir);
    const auto inference = run_inference(params, manifest);
    evalmetrics::save_score_csv(args.out_dir / "model_scores.csv", inference.totals);
    write_regional_scores_csv(args.out_dir / "regional_scores.csv", inference);

    std::vector<std::pair<std::string, evalmetrics::ScoreTable>> raters;
    for (const auto& path : args.rater_csv) {
        raters.emplace_back(path.stem().string(), evalmetrics::load_score_csv(path));
    }
    if (args.truth_as_rater || raters.empty()) {
        evalmetrics::ScoreTable truth;
        for (const auto& [key, labels] : manifest.labels) truth[key] = labels.total;
        raters.emplace_back("truth", std::move(truth));
    }

    const auto method = args.ci_method == "bootstrap" ? evalmetrics::CiMethod::Bootstrap
                                                      : evalmetrics::CiMethod::FDistribution;
    auto report = evalmetrics::build_report(inference.totals, raters, args.confidence, method);
    json echo;
    echo["command"] = "eval";
    echo["checkpoint"] = args.checkpoint.string();
    echo["split"] = args.split;
    echo["confidence"] = args.confidence;
    echo["ci_method"] = args.ci_method;
    report.config_echo = echo.dump();

    write_text(args.out_dir / "report.json", evalmetrics::report_to_json(report) + "\n");
    const auto table = evalmetrics::render_report_table(report);
    write_text(args.out_dir / "report.txt", table);

    interpret::write_quartile_csv(args.out_dir / "attention_quartiles.csv",
                                  interpret::attention_quartiles(inference.attention_pairs));
    std::cout << table;
}

void cmd_explain(const ExplainArgs& args) {
    const auto params = nnet::load_checkpoint(args.checkpoint);
    const auto manifest = dataio::load_manifest(resolve_manifest_path(args.manifest));
    const auto region = pasi::region_from_code(args.region);

    std::vector<dataio::ImageRecord> records;
    for (const auto& rec : manifest.records) {
        if (dataio::visit_key(rec.patient_id, rec.visit_id) == args.visit &&
            rec.region == region) {
            records.push_back(rec);
        }
    }
    if (records.empty()) {
        throw ValidationError("no images for visit '" + args.visit + "' region " + args.region);
    }

    const auto& enc = params.config.encoder;
    const auto set = dataio::assemble_region_set(records, region, params.config.mode,
                                                 enc.input_height, enc.input_width, manifest);

    bool truncated = false;
    const auto maps =
        interpret::explain_set(set, params.regions[static_cast<size_t>(region)], args.top_k,
                               &truncated);
    if (truncated) {
        std::cout << "note: top_k clipped to the " << maps.size() << " valid images\n";
    }

    std::filesystem::create_directories(args.out_dir);
    for (size_t rank = 0; rank < maps.size(); ++rank) {
        const auto& map = maps[rank];
        ImageU8 base;
        const auto& rec = set.sources[map.source.slot];
        if (!rec.crop_index && !rec.path.empty()) {
            base = read_png(manifest.resolve(rec.path));
        } else {
            // Crops have no backing file; render the network input.
            base = to_interleaved_u8(dataio::denormalize_image(set.images[map.source.slot]));
        }
        char stem[64];
        std::snprintf(stem, sizeof(stem), "rank%02zu_slot%02d", rank, map.source.slot);
        interpret::write_overlay_with_sidecar(args.out_dir, stem, base, map, args.alpha);
    }
    std::cout << "wrote " << maps.size() << " overlay(s) to " << args.out_dir.string() << "\n";
}

void cmd_infer(const InferArgs& args) {
    const auto params = nnet::load_checkpoint(args.checkpoint);
    const auto& enc = params.config.encoder;

    dataio::DatasetManifest scratch;
    scratch.base_dir = args.visit_dir;
    scratch.patients.push_back("query");

    dataio::VisitSample sample;
    sample.patient_id = "query";
    sample.visit_id = "v0";
    for (auto region : pasi::kAllRegions) {
        const auto code = std::string(pasi::region_code(region));
        const auto dir = args.visit_dir / code;
        std::vector<std::filesystem::path> files;
        if (std::filesystem::is_directory(dir)) {
            for (const auto& entry : std::filesystem::directory_iterator(dir)) {
                if (entry.path().extension() == ".png") files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        const int capacity = pasi::region_image_count(region);
        if (static_cast<int>(files.size()) > capacity) {
            throw ValidationError("region " + code + " has " + std::to_string(files.size()) +
                                  " images; capacity is " + std::to_string(capacity));
        }
        std::vector<dataio::ImageRecord> records;
        for (size_t i = 0; i < files.size(); ++i) {
            dataio::ImageRecord rec;
            rec.path = std::filesystem::relative(files[i], args.visit_dir).string();
            rec.patient_id = "query";
            rec.visit_id = "v0";
            rec.region = region;
            rec.slot_index = static_cast<int>(i);
            records.push_back(std::move(rec));
        }
        sample.region_sets[static_cast<size_t>(region)] = dataio::assemble_region_set(
            records, region, params.config.mode, enc.input_height, enc.input_width, scratch);
        if (sample.region_sets[static_cast<size_t>(region)].valid_count() == 0) {
            throw ValidationError("region " + code + " has no images under " + dir.string() +
                                  "; a fully masked set cannot be scored (attention needs at "
                                  "least one photo)");
        }
    }

    const auto out = nnet::absolute_forward(sample, params);
    json doc;
    for (auto region : pasi::kAllRegions) {
        doc[std::string(pasi::region_code(region))] =
            out.regions[static_cast<size_t>(region)].score.value;
    }
    doc["total"] = out.total.value;
    const auto text = doc.dump(2) + "\n";
    if (!args.out_file.empty()) write_text(args.out_file, text);
    std::cout << text;
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Attention-pooled multi-image PASI scoring"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic lesion dataset");
    synth_cmd->add_option("--spec", synth.spec_file, "Generator spec JSON (defaults when omitted)");
    synth_cmd->add_option("--out", synth.out_dir, "Output dataset directory")->required();
    uint64_t synth_seed = 0;
    auto* synth_seed_opt = synth_cmd->add_option("--seed", synth_seed, "Override the spec seed");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Split, weight and train");
    train_cmd->add_option("--manifest", train_args.manifest, "Dataset dir or manifest.json")
        ->required();
    train_cmd->add_option("--out", train_args.out_dir, "Run output directory")->required();
    train_cmd->add_option("--profile", train_args.profile, "desk or paper");
    train_cmd->add_option("--config", train_args.config_file, "Config JSON merged under flags");
    train_cmd->add_option("--resume", train_args.resume, "Train state to resume from");
    train_cmd->add_option("--pretrained", train_args.pretrained,
                          "Checkpoint with encoder.* tensors to import");
    int epochs = 0;
    auto* epochs_opt = train_cmd->add_option("--epochs", epochs, "Epoch count");
    double lr = 0.0;
    auto* lr_opt = train_cmd->add_option("--lr", lr, "Learning rate");
    std::string mode;
    auto* mode_opt = train_cmd->add_option("--mode", mode, "low_res or four_crop");
    uint64_t train_seed = 0;
    auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "Training seed");
    int batch = 0;
    auto* batch_opt = train_cmd->add_option("--batch-size", batch, "Visits per step");
    std::string target;
    auto* target_opt = train_cmd->add_option("--target", target, "per_region or absolute");
    int base_width = 0;
    auto* width_opt = train_cmd->add_option("--base-width", base_width, "Encoder base width K");
    int image_size = 0;
    auto* size_opt = train_cmd->add_option("--image-size", image_size, "Square input side");
    train_cmd->add_option("--split-seed", train_args.split_seed, "Patient split seed");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Score a split and report agreement");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Model checkpoint")->required();
    eval_cmd->add_option("--manifest", eval_args.manifest, "Dataset dir or manifest.json")
        ->required();
    eval_cmd->add_option("--out", eval_args.out_dir, "Report output directory")->required();
    eval_cmd->add_option("--rater", eval_args.rater_csv, "Rater CSV (repeatable)");
    eval_cmd->add_option("--split", eval_args.split, "test, val, train or all");
    eval_cmd->add_flag("--no-truth-rater{false}", eval_args.truth_as_rater,
                       "Drop the labels-as-rater row");
    eval_cmd->add_option("--ci", eval_args.ci_method, "f or bootstrap");
    eval_cmd->add_option("--confidence", eval_args.confidence, "CI level");

    ExplainArgs explain_args;
    auto* explain_cmd = app.add_subcommand("explain", "Ranked activation-map overlays");
    explain_cmd->add_option("--checkpoint", explain_args.checkpoint, "Model checkpoint")
        ->required();
    explain_cmd->add_option("--manifest", explain_args.manifest, "Dataset dir or manifest.json")
        ->required();
    explain_cmd->add_option("--visit", explain_args.visit, "<patient>/<visit>")->required();
    explain_cmd->add_option("--region", explain_args.region, "HN, UE, LE or TR")->required();
    explain_cmd->add_option("--top-k", explain_args.top_k, "Maps to produce");
    explain_cmd->add_option("--alpha", explain_args.alpha, "Overlay blend factor");
    explain_cmd->add_option("--out", explain_args.out_dir, "Overlay output directory")
        ->required();

    InferArgs infer_args;
    auto* infer_cmd = app.add_subcommand("infer", "Score a visit directory");
    infer_cmd->add_option("--checkpoint", infer_args.checkpoint, "Model checkpoint")->required();
    infer_cmd->add_option("--dir", infer_args.visit_dir, "Visit directory with region folders")
        ->required();
    infer_cmd->add_option("--out", infer_args.out_file, "Scores JSON path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 2;
    }

    try {
        if (synth_cmd->parsed()) {
            if (*synth_seed_opt) synth.seed = synth_seed;
            cmd_synth(synth);
        } else if (train_cmd->parsed()) {
            if (*epochs_opt) train_args.epochs = epochs;
            if (*lr_opt) train_args.learning_rate = lr;
            if (*mode_opt) train_args.mode = mode;
            if (*train_seed_opt) train_args.seed = train_seed;
            if (*batch_opt) train_args.batch_size = batch;
            if (*target_opt) train_args.target = target;
            if (*width_opt) train_args.base_width = base_width;
            if (*size_opt) train_args.image_size = image_size;
            cmd_train(train_args);
        } else if (eval_cmd->parsed()) {
            cmd_eval(eval_args);
        } else if (explain_cmd->parsed()) {
            cmd_explain(explain_args);
        } else if (infer_cmd->parsed()) {
            cmd_infer(infer_args);
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace psonet::cli
