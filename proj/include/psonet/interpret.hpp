#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psonet/dataio.hpp"
#include "psonet/image.hpp"
#include "psonet/nnet.hpp"
#include "psonet/pasi.hpp"

namespace psonet::interpret {

inline constexpr int kGradRamResolution = 224;

// Valid slots ordered by descending attention weight, ties broken by
// ascending slot index. Masked slots never appear.
struct AttentionRanking {
    std::vector<std::pair<int, double>> entries; // (slot, weight)
};

AttentionRanking rank_attention(const nnet::AttentionOutput& output);

struct MapSource {
    std::string patient_id;
    std::string visit_id;
    pasi::RegionId region = pasi::RegionId::HeadNeck;
    int slot = 0;
    std::optional<int> crop_index;
};

struct GradRamMap {
    std::vector<double> grid; // kGradRamResolution^2, values in [0, 1]
    MapSource source;
    double score = 0.0;            // regional score of the generating pass
    double attention_weight = 1.0; // weight of the source image in its set
    double raw_min = 0.0;          // pre-normalization range of the grid
    double raw_max = 0.0;
};

// Counts the two kinds of model passes the two-step procedure issues;
// install a struct to observe, nullptr to disable.
struct Instrumentation {
    size_t set_inferences = 0;
    size_t gradram_backwards = 0;
};
void set_instrumentation(Instrumentation* hook);

// Single-image activation map: the image runs as an N=1 set (attention
// weight exactly 1), the score's gradient w.r.t. the final-stage spatial
// map weights its channels, and the rectified combination is upsampled to
// 224x224 and min-max normalized (all zeros when constant). signed_map
// keeps negative evidence instead of rectifying.
GradRamMap grad_ram(const ImageF& image, const nnet::RegionalModelParams& params,
                    const MapSource& source = {}, bool signed_map = false);

// Step 1: one full-set inference to rank attention; step 2: grad_ram per
// top-k ranked image. top_k beyond the valid count truncates and flags.
std::vector<GradRamMap> explain_set(const dataio::RegionalImageSet& set,
                                    const nnet::RegionalModelParams& params, int top_k,
                                    bool* truncated = nullptr, bool signed_map = false);

// Fixed-colormap alpha blend, rounded to the nearest byte.
ImageU8 overlay(const ImageU8& image, const GradRamMap& map, double alpha);

// Writes <stem>.png and the <stem>.json sidecar with source, score,
// attention weight and the raw grid range.
void write_overlay_with_sidecar(const std::filesystem::path& dir, const std::string& stem,
                                const ImageU8& image, const GradRamMap& map, double alpha);

// Per-region quartiles of the max attention weight over image sets,
// carrying the (max_attention, regional label) members of each quartile.
struct QuartileTable {
    struct Entry {
        double max_attention = 0.0;
        double label = 0.0;
        int quartile = 1; // 1..4
    };
    struct RegionTable {
        std::array<double, 3> boundaries{}; // 25/50/75th percentiles
        std::vector<Entry> entries;
        bool single_bucket = false; // fewer than 4 sets
        bool degenerate = false;    // boundaries not strictly increasing
    };
    std::array<RegionTable, 4> regions; // indexed by RegionId
};

QuartileTable attention_quartiles(
    const std::array<std::vector<std::pair<double, double>>, 4>& per_region_pairs);

void write_quartile_csv(const std::filesystem::path& path, const QuartileTable& table);

// Spearman correlation between quartile index and the mean regional label
// of each non-empty quartile; one value per region.
std::array<double, 4> quartile_label_correlation(const QuartileTable& table);

} // namespace psonet::interpret
