#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psonet/dataio.hpp"
#include "psonet/pasi.hpp"
#include "psonet/tensor.hpp"

namespace psonet::nnet {

enum class EncoderVariant { TinyConv, PluggablePretrained };

std::string_view encoder_variant_name(EncoderVariant v);
EncoderVariant encoder_variant_from_name(std::string_view name);

// Staged convolutional encoder geometry: widths K, 2K, 4K, 8K at /4, /8,
// /16, /32 of the input. The tiny_conv variant realizes it with five
// stride-2 3x3 convolutions (two in stage 0); the pluggable variant uses
// the same topology with externally trained weights.
struct EncoderConfig {
    EncoderVariant variant = EncoderVariant::TinyConv;
    int base_width = 16; // K
    int input_height = 64;
    int input_width = 64;

    int feature_dim() const { return 8 * base_width; }
    void validate() const; // sides divisible by 32, K >= 1
};

struct ModelConfig {
    EncoderConfig encoder;
    int embed_dim = 768;      // D
    int attention_hidden = 128;
    bool shared_encoder = false;
    dataio::AssembleMode mode = dataio::AssembleMode::LowRes;

    void validate() const;
};

// --- Parameter containers -------------------------------------------------

struct ConvLayer {
    int in_ch = 0, out_ch = 0, stride = 2; // 3x3 kernel, pad 1
    Tensor weight;                         // [out, in, 3, 3]
    Tensor bias;                           // [out]
};

struct LinearLayer {
    int in_dim = 0, out_dim = 0;
    Tensor weight; // [out, in]
    Tensor bias;   // [out]
};

struct AttentionParams {
    LinearLayer fc1; // D -> A
    LinearLayer fc2; // A -> 1
};

struct EncoderParams {
    std::vector<ConvLayer> convs;
};

struct RegionalModelParams {
    EncoderParams encoder;
    LinearLayer embed; // 8K -> D, GELU
    AttentionParams attention;
    LinearLayer head; // D -> 1, clamped to [0, 72]
};

struct PsoNetParams {
    ModelConfig config;
    std::array<RegionalModelParams, 4> regions; // indexed by RegionId
};

// Deterministic fan-in-scaled uniform init (bound sqrt(3/fan_in), zero
// biases); each region gets an independent stream from the seed.
PsoNetParams init_params(const ModelConfig& config, uint64_t seed);

RegionalModelParams zero_like(const RegionalModelParams& p);
PsoNetParams zero_like(const PsoNetParams& p);

// Stable traversal used by the optimizer, checkpoints and tests. Order is
// part of the format: encoder convs, embed, attention.fc1, attention.fc2,
// head; weight before bias.
std::vector<Tensor*> collect_tensors(RegionalModelParams& p);
std::vector<const Tensor*> collect_tensors(const RegionalModelParams& p);
std::vector<std::pair<std::string, Tensor*>> collect_named_tensors(RegionalModelParams& p,
                                                                   const std::string& prefix);
std::vector<std::pair<std::string, Tensor*>> collect_named_tensors(PsoNetParams& p);

void accumulate(RegionalModelParams& into, const RegionalModelParams& grads);

// --- Forward --------------------------------------------------------------

struct ImageFeature {
    Tensor spatial;             // [8K, h, w], post-activation final stage
    std::vector<double> pooled; // spatial mean per channel, length 8K
};

struct EncoderCache {
    std::vector<Tensor> inputs;  // input of each conv
    std::vector<Tensor> preacts; // pre-activation output of each conv
};

ImageFeature encode(const ImageF& image, const EncoderParams& params,
                    EncoderCache* cache = nullptr);

std::vector<double> embed(const ImageFeature& feature, const LinearLayer& layer,
                          std::vector<double>* preact = nullptr);

struct AttentionOutput {
    std::vector<double> weights; // length N, simplex over valid slots, 0 at masked
    std::vector<double> logits;  // length N, -inf at masked
    std::vector<double> pooled;  // length D
};

struct AttentionCache {
    std::vector<std::vector<double>> hidden; // tanh(fc1 e) per slot, empty when masked
};

// Scores each valid embedding with fc2(tanh(fc1(e))), softmaxes over the
// valid slots and returns the weighted sum of embeddings.
AttentionOutput attention_pool(const std::vector<std::vector<double>>& embeddings,
                               const std::vector<bool>& valid, const AttentionParams& params,
                               AttentionCache* cache = nullptr);

struct RegionalOutput {
    pasi::RegionalPasi score;
    AttentionOutput attention;
};

struct RegionalCache {
    std::vector<int> valid_slots;
    std::vector<EncoderCache> encoder;
    std::vector<ImageFeature> features;
    std::vector<std::vector<double>> embed_pre;
    std::vector<std::vector<double>> embeddings; // indexed like the set's slots
    AttentionCache attention;
    AttentionOutput attention_out;
    double raw_score = 0.0;
};

RegionalOutput regional_forward(const dataio::RegionalImageSet& set,
                                const RegionalModelParams& params,
                                RegionalCache* cache = nullptr);

struct AbsoluteOutput {
    pasi::AbsolutePasi total;
    std::array<RegionalOutput, 4> regions;
};

AbsoluteOutput absolute_forward(const dataio::VisitSample& sample, const PsoNetParams& params);

// --- Backward -------------------------------------------------------------

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(score) for a
// forward pass captured in `cache`. The clamp passes gradient on the
// closed interval [0, 72].
void regional_backward(double dscore, const dataio::RegionalImageSet& set,
                       const RegionalModelParams& params, const RegionalCache& cache,
                       RegionalModelParams& grads);

// d(score)/d(final-stage spatial map) for one valid image of the cached
// forward pass; the quantity the activation-map generator consumes.
Tensor spatial_feature_gradient(const RegionalModelParams& params, const RegionalCache& cache,
                                size_t valid_index);

// --- Checkpoints ----------------------------------------------------------

// Single binary archive of named fp64 tensors plus a JSON config header.
// fp32 payloads are accepted on load for externally produced encoders.
void save_checkpoint(const std::filesystem::path& path, const PsoNetParams& params);
PsoNetParams load_checkpoint(const std::filesystem::path& path);

// Applies "encoder.*" tensors to every region (or "region.<R>.encoder.*"
// to one); anything else in the archive is ignored. Shape mismatches name
// the offending tensor.
void load_pretrained_encoder(PsoNetParams& params, const std::filesystem::path& path);

// Low-level named-tensor archive, shared with optimizer-state files.
struct TensorArchive {
    std::string header_json;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

} // namespace psonet::nnet
