#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "psonet/manifest.hpp"

namespace psonet::dataio {

// Procedural lesion dataset with ground truth known by construction.
//
// Each visit-region gets a canvas (canvas_scale x the view size) of skin
// tone plus lighting and grain. Lesions are elliptical patches whose
// redness, embossed relief and bright speckle density are quantized to
// integer levels 0..4; those levels are the erythema / induration /
// desquamation truth, and the rasterized union coverage feeds the area
// score. Every photo of the set is a window into the canvas, so images
// within a set genuinely differ in what they show.
struct LesionCountRange {
    int min_count = 0;
    int max_count = 3;
};

struct SyntheticSpec {
    int patients = 24;
    int min_visits = 1;
    int max_visits = 3;
    int image_height = 64;
    int image_width = 64;
    std::array<LesionCountRange, 4> lesions_per_region = {
        LesionCountRange{0, 2}, LesionCountRange{0, 2}, LesionCountRange{0, 2},
        LesionCountRange{0, 2}};
    int min_redness = 0, max_redness = 4;   // erythema proxy level
    int min_relief = 0, max_relief = 4;     // induration proxy level
    int min_speckle = 0, max_speckle = 4;   // desquamation proxy level
    double min_area_fraction = 0.02;
    double max_area_fraction = 0.55;
    std::vector<std::array<uint8_t, 3>> skin_palette = default_skin_palette();
    uint64_t rng_seed = 1;

    double canvas_scale = 2.0; // region canvas size relative to one view
    int images_per_region = -1; // -1 fills every slot of the region
    bool single_lesion = false; // exactly one lesion, full-canvas views
    bool write_masks = false;   // emit per-image lesion masks under masks/

    // Fraction of views rendered blurred, noisy and badly exposed, the way
    // handheld capture produces throwaway shots. Gives attention pooling a
    // real quality signal to rank.
    double degraded_view_fraction = 0.0;

    static std::vector<std::array<uint8_t, 3>> default_skin_palette();

    void validate() const;
};

SyntheticSpec synthetic_spec_from_json_file(const std::filesystem::path& path);

// Writes images (and masks when requested) plus manifest.json and
// truth_components.json under out_dir. Deterministic for a fixed seed.
DatasetManifest generate_synthetic_dataset(const SyntheticSpec& spec,
                                           const std::filesystem::path& out_dir);

// Truth sub-scores recorded by the generator, keyed like manifest labels.
std::map<std::string, std::array<pasi::SeverityComponents, 4>> load_truth_components(
    const std::filesystem::path& dataset_dir);

} // namespace psonet::dataio
