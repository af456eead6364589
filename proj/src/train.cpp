#include "psonet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "psonet/errors.hpp"
#include "psonet/threadpool.hpp"

namespace psonet::train {

using nlohmann::json;

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ValidationError("learning_rate must be finite and >= 0");
    }
    if (!(weight_decay >= 0.0) || weight_decay >= 1.0) {
        throw ValidationError("weight_decay must be in [0, 1)");
    }
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (epochs < 0) throw ValidationError("epochs must be >= 0");
}

TrainConfig desk_train_config() {
    TrainConfig config;
    config.learning_rate = 1e-3;
    config.epochs = 30;
    return config;
}

nnet::ModelConfig desk_model_config() {
    nnet::ModelConfig config;
    config.encoder.base_width = 16;
    config.encoder.input_height = 64;
    config.encoder.input_width = 64;
    return config;
}

double mae_loss(std::span<const double> predictions, std::span<const double> targets) {
    if (predictions.size() != targets.size()) {
        throw ValidationError("mae_loss: length mismatch (" + std::to_string(predictions.size()) +
                              " vs " + std::to_string(targets.size()) + ")");
    }
    if (predictions.empty()) throw ValidationError("mae_loss: empty input");
    double acc = 0.0;
    for (size_t i = 0; i < predictions.size(); ++i) {
        if (!std::isfinite(predictions[i]) || !std::isfinite(targets[i])) {
            throw ValidationError("mae_loss: non-finite input at index " + std::to_string(i));
        }
        acc += std::abs(predictions[i] - targets[i]);
    }
    return acc / static_cast<double>(predictions.size());
}

TrainState init_train_state(const nnet::ModelConfig& model_config, const TrainConfig& config) {
    TrainState state;
    state.params = nnet::init_params(model_config, config.seed);
    for (size_t r = 0; r < 4; ++r) {
        state.opt.m[r] = nnet::zero_like(state.params.regions[r]);
        state.opt.v[r] = nnet::zero_like(state.params.regions[r]);
    }
    // Separate stream from the init draws so data order is independent of
    // the parameter init.
    state.rng = Rng(config.seed).fork(0x7261696eULL);
    return state;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Decoupled weight decay, applied unscaled by the learning rate so decay
// is active even at lr = 0.
void adam_step(nnet::RegionalModelParams& params, const nnet::RegionalModelParams& grads,
               nnet::RegionalModelParams& m, nnet::RegionalModelParams& v, int64_t step,
               const TrainConfig& config) {
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
    auto p = nnet::collect_tensors(params);
    auto g = nnet::collect_tensors(const_cast<nnet::RegionalModelParams&>(grads));
    auto mt = nnet::collect_tensors(m);
    auto vt = nnet::collect_tensors(v);
    for (size_t t = 0; t < p.size(); ++t) {
        double* pp = p[t]->ptr();
        const double* gg = g[t]->ptr();
        double* mm = mt[t]->ptr();
        double* vv = vt[t]->ptr();
        const size_t n = p[t]->data.size();
        for (size_t i = 0; i < n; ++i) {
            mm[i] = kBeta1 * mm[i] + (1.0 - kBeta1) * gg[i];
            vv[i] = kBeta2 * vv[i] + (1.0 - kBeta2) * gg[i] * gg[i];
            const double mhat = mm[i] / bc1;
            const double vhat = vv[i] / bc2;
            pp[i] = pp[i] * (1.0 - config.weight_decay) -
                    config.learning_rate * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

struct VisitWork {
    dataio::VisitSample sample;
    std::array<nnet::RegionalCache, 4> caches;
    std::array<double, 4> scores{};
    std::array<nnet::RegionalModelParams, 4> grads;
    double visit_objective = 0.0;
    double total_score = 0.0;
};

} // namespace

EpochStats train_epoch(TrainState& state, const dataio::VisitProvider& data,
                       const dataio::SamplingWeights& weights, const TrainConfig& config) {
    config.validate();
    if (data.size() == 0) throw ValidationError("train_epoch: empty dataset");
    if (weights.weights.size() != data.size()) {
        throw ValidationError("train_epoch: sampling weights misaligned with the dataset");
    }

    const dataio::WeightedSampler sampler(weights.weights);
    const size_t steps = (data.size() + config.batch_size - 1) / config.batch_size;
    auto& pool = ThreadPool::global();

    EpochStats stats;
    double objective_acc = 0.0;
    double mae_acc = 0.0;
    size_t visits_seen = 0;

    for (size_t step = 0; step < steps; ++step) {
        // Draw the batch up front; the RNG stream must not depend on
        // worker scheduling.
        std::vector<size_t> batch(config.batch_size);
        for (auto& idx : batch) idx = sampler.draw(state.rng);

        std::vector<VisitWork> work(batch.size());
        pool.parallel_for(batch.size(), [&](size_t b) { work[b].sample = data.get(batch[b]); });
        // Region forwards need the samples loaded first, hence two phases.
        pool.parallel_for(batch.size() * 4, [&](size_t task) {
            const size_t b = task / 4;
            const size_t r = task % 4;
            auto out = nnet::regional_forward(work[b].sample.region_sets[r],
                                              state.params.regions[r], &work[b].caches[r]);
            work[b].scores[r] = out.score.value;
        });

        // Upstream gradients per region from the configured objective.
        for (size_t b = 0; b < work.size(); ++b) {
            auto& unit = work[b];
            const auto& labels = unit.sample.labels;
            unit.total_score = 0.0;
            for (size_t r = 0; r < 4; ++r) {
                unit.total_score += pasi::region_weight(pasi::kAllRegions[r]) * unit.scores[r];
            }
            if (config.target == TrainConfig::Target::PerRegion) {
                for (size_t r = 0; r < 4; ++r) {
                    unit.visit_objective += std::abs(unit.scores[r] - labels.regional[r]);
                }
            } else {
                unit.visit_objective = std::abs(unit.total_score - labels.total);
            }
            if (!std::isfinite(unit.visit_objective)) {
                throw std::runtime_error(
                    "non-finite training loss at step " + std::to_string(step) + ", visit " +
                    dataio::visit_key(unit.sample.patient_id, unit.sample.visit_id));
            }
        }

        const double batch_scale = 1.0 / static_cast<double>(work.size());
        pool.parallel_for(work.size() * 4, [&](size_t task) {
            const size_t b = task / 4;
            const size_t r = task % 4;
            auto& unit = work[b];
            double dscore = 0.0;
            if (config.target == TrainConfig::Target::PerRegion) {
                dscore = sign(unit.scores[r] - unit.sample.labels.regional[r]) * batch_scale;
            } else {
                dscore = pasi::region_weight(pasi::kAllRegions[r]) *
                         sign(unit.total_score - unit.sample.labels.total) * batch_scale;
            }
            unit.grads[r] = nnet::zero_like(state.params.regions[r]);
            nnet::regional_backward(dscore, unit.sample.region_sets[r], state.params.regions[r],
                                    unit.caches[r], unit.grads[r]);
        });

        // Fixed-order reduction keeps runs bit-reproducible.
        std::array<nnet::RegionalModelParams, 4> grads;
        for (size_t r = 0; r < 4; ++r) grads[r] = nnet::zero_like(state.params.regions[r]);
        for (auto& unit : work) {
            for (size_t r = 0; r < 4; ++r) nnet::accumulate(grads[r], unit.grads[r]);
        }

        if (state.params.config.shared_encoder) {
            // Tie the encoders: pool their gradients, update one copy.
            for (size_t r = 1; r < 4; ++r) {
                for (size_t layer = 0; layer < grads[0].encoder.convs.size(); ++layer) {
                    auto& dst_w = grads[0].encoder.convs[layer].weight.data;
                    const auto& src_w = grads[r].encoder.convs[layer].weight.data;
                    for (size_t i = 0; i < dst_w.size(); ++i) dst_w[i] += src_w[i];
                    auto& dst_b = grads[0].encoder.convs[layer].bias.data;
                    const auto& src_b = grads[r].encoder.convs[layer].bias.data;
                    for (size_t i = 0; i < dst_b.size(); ++i) dst_b[i] += src_b[i];
                }
            }
        }

        state.opt.step += 1;
        for (size_t r = 0; r < 4; ++r) {
            adam_step(state.params.regions[r], grads[r], state.opt.m[r], state.opt.v[r],
                      state.opt.step, config);
        }
        if (state.params.config.shared_encoder) {
            for (size_t r = 1; r < 4; ++r) {
                state.params.regions[r].encoder = state.params.regions[0].encoder;
            }
        }

        for (const auto& unit : work) {
            objective_acc += unit.visit_objective;
            mae_acc += std::abs(unit.total_score - unit.sample.labels.total);
            ++visits_seen;
        }
    }

    stats.steps = steps;
    stats.objective = objective_acc / static_cast<double>(visits_seen);
    stats.train_mae = mae_acc / static_cast<double>(visits_seen);
    return stats;
}

double evaluate_mae(const nnet::PsoNetParams& params, const dataio::VisitProvider& data) {
    if (data.size() == 0) throw ValidationError("evaluate_mae: empty dataset");
    std::vector<double> errors(data.size(), 0.0);
    ThreadPool::global().parallel_for(data.size(), [&](size_t i) {
        const auto sample = data.get(i);
        const auto out = nnet::absolute_forward(sample, params);
        errors[i] = std::abs(out.total.value - sample.labels.total);
    });
    double acc = 0.0;
    for (double e : errors) acc += e;
    return acc / static_cast<double>(errors.size());
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write metrics log: " + path.string());
    f << "epoch,train_mae,val_mae,lr,wall_seconds\n";
    f.precision(17);
    for (const auto& row : rows) {
        f << row.epoch << "," << row.train_mae << "," << row.val_mae << "," << row.lr << ","
          << row.wall_seconds << "\n";
    }
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open metrics log: " + path.string());
    std::vector<MetricsRow> rows;
    std::string line;
    std::getline(f, line); // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        MetricsRow row;
        std::istringstream ss(line);
        char comma;
        ss >> row.epoch >> comma >> row.train_mae >> comma >> row.val_mae >> comma >> row.lr >>
            comma >> row.wall_seconds;
        if (ss.fail()) throw ValidationError("malformed metrics row: " + line);
        rows.push_back(row);
    }
    return rows;
}

namespace {

std::string u64_to_string(uint64_t v) { return std::to_string(v); }

} // namespace

void save_train_state(const std::filesystem::path& path, const TrainState& state) {
    json header;
    header["format"] = "psonet-train-state";
    header["version"] = 1;
    header["model"] = json::parse(nnet::model_config_to_json(state.params.config));
    header["epoch"] = state.epoch;
    header["best_val_mae"] = state.best_val_mae;
    header["best_epoch"] = state.best_epoch;
    header["opt_step"] = state.opt.step;
    json rng_state = json::array();
    for (uint64_t word : state.rng.state()) rng_state.push_back(u64_to_string(word));
    header["rng_state"] = rng_state;

    nnet::TensorArchive archive;
    archive.header_json = header.dump();
    auto& params = const_cast<nnet::PsoNetParams&>(state.params);
    for (const auto& [name, tensor] : nnet::collect_named_tensors(params)) {
        archive.tensors.emplace_back(name, *tensor);
    }
    for (size_t r = 0; r < 4; ++r) {
        const auto prefix = "region." + std::string(pasi::region_code(pasi::kAllRegions[r])) + ".";
        auto& m = const_cast<nnet::RegionalModelParams&>(state.opt.m[r]);
        auto& v = const_cast<nnet::RegionalModelParams&>(state.opt.v[r]);
        for (const auto& [name, tensor] : nnet::collect_named_tensors(m, "opt.m." + prefix)) {
            archive.tensors.emplace_back(name, *tensor);
        }
        for (const auto& [name, tensor] : nnet::collect_named_tensors(v, "opt.v." + prefix)) {
            archive.tensors.emplace_back(name, *tensor);
        }
    }
    nnet::save_archive(path, archive);
}

TrainState load_train_state(const std::filesystem::path& path) {
    auto archive = nnet::load_archive(path);
    json header;
    try {
        header = json::parse(archive.header_json);
    } catch (const json::parse_error& e) {
        throw ValidationError("train state header parse error: " + std::string(e.what()));
    }
    if (header.value("format", "") != "psonet-train-state") {
        throw ValidationError("not a train state file: " + path.string());
    }

    TrainState state;
    const auto model_config = nnet::model_config_from_json(header.at("model").dump());
    state.params = nnet::init_params(model_config, 0);
    for (size_t r = 0; r < 4; ++r) {
        state.opt.m[r] = nnet::zero_like(state.params.regions[r]);
        state.opt.v[r] = nnet::zero_like(state.params.regions[r]);
    }
    state.epoch = header.at("epoch").get<int>();
    state.best_val_mae = header.at("best_val_mae").get<double>();
    state.best_epoch = header.at("best_epoch").get<int>();
    state.opt.step = header.at("opt_step").get<int64_t>();
    std::array<uint64_t, 4> rng_state{};
    for (size_t i = 0; i < 4; ++i) {
        rng_state[i] = std::stoull(header.at("rng_state").at(i).get<std::string>());
    }
    state.rng.set_state(rng_state);

    std::map<std::string, Tensor*> by_name;
    for (auto& [name, tensor] : nnet::collect_named_tensors(state.params)) {
        by_name.emplace(name, tensor);
    }
    for (size_t r = 0; r < 4; ++r) {
        const auto prefix = "region." + std::string(pasi::region_code(pasi::kAllRegions[r])) + ".";
        for (auto& [name, tensor] : nnet::collect_named_tensors(state.opt.m[r], "opt.m." + prefix)) {
            by_name.emplace(name, tensor);
        }
        for (auto& [name, tensor] : nnet::collect_named_tensors(state.opt.v[r], "opt.v." + prefix)) {
            by_name.emplace(name, tensor);
        }
    }
    size_t applied = 0;
    for (const auto& [name, tensor] : archive.tensors) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw ValidationError("train state tensor '" + name + "' does not match the model");
        }
        if (it->second->shape != tensor.shape) {
            throw ValidationError("train state tensor '" + name + "' has mismatched shape");
        }
        it->second->data = tensor.data;
        ++applied;
    }
    if (applied != by_name.size()) {
        throw ValidationError("train state is missing tensors");
    }
    return state;
}

double mean_predictor_baseline(const dataio::DatasetManifest& train_manifest,
                               const dataio::DatasetManifest& val_manifest) {
    if (train_manifest.labels.empty() || val_manifest.labels.empty()) {
        throw ValidationError("mean_predictor_baseline: empty labels");
    }
    double mean = 0.0;
    for (const auto& [key, labels] : train_manifest.labels) mean += labels.total;
    mean /= static_cast<double>(train_manifest.labels.size());
    double acc = 0.0;
    for (const auto& [key, labels] : val_manifest.labels) acc += std::abs(labels.total - mean);
    return acc / static_cast<double>(val_manifest.labels.size());
}

FitResult fit(const dataio::DatasetManifest& train_manifest,
              const dataio::DatasetManifest& val_manifest,
              const nnet::ModelConfig& model_config, const TrainConfig& config,
              const FitOptions& options) {
    config.validate();
    model_config.validate();

    TrainState state;
    if (!options.resume_from.empty()) {
        state = load_train_state(options.resume_from);
    } else {
        state = init_train_state(model_config, config);
        if (!options.pretrained_encoder.empty()) {
            nnet::load_pretrained_encoder(state.params, options.pretrained_encoder);
        }
    }

    const dataio::VisitProvider train_data(train_manifest, config.mode,
                                           model_config.encoder.input_height,
                                           model_config.encoder.input_width);
    const dataio::VisitProvider val_data(val_manifest, config.mode,
                                         model_config.encoder.input_height,
                                         model_config.encoder.input_width);
    const auto weights = dataio::compute_sampling_weights(train_manifest,
                                                          config.sampling_threshold);

    FitResult result;
    result.best_params = state.params;
    result.best_epoch = state.best_epoch;
    result.best_val_mae = state.best_val_mae;

    if (config.epochs == 0 || state.epoch >= config.epochs) {
        if (!options.checkpoint_path.empty()) {
            nnet::save_checkpoint(options.checkpoint_path, state.params);
        }
        return result;
    }

    for (int epoch = state.epoch + 1; epoch <= config.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        const auto stats = train_epoch(state, train_data, weights, config);
        const double val_mae = evaluate_mae(state.params, val_data);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        state.epoch = epoch;
        MetricsRow row{epoch, stats.train_mae, val_mae, config.learning_rate, wall};
        result.log.push_back(row);

        if (val_mae < state.best_val_mae) {
            state.best_val_mae = val_mae;
            state.best_epoch = epoch;
            result.best_params = state.params;
            if (!options.checkpoint_path.empty()) {
                nnet::save_checkpoint(options.checkpoint_path, state.params);
            }
        }
        if (!options.state_path.empty()) {
            save_train_state(options.state_path, state);
        }
    }
    result.best_epoch = state.best_epoch;
    result.best_val_mae = state.best_val_mae;
    return result;
}

} // namespace psonet::train
