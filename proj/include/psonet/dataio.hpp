#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "psonet/image.hpp"
#include "psonet/manifest.hpp"
#include "psonet/pasi.hpp"
#include "psonet/rng.hpp"

namespace psonet::dataio {

// ImageNet channel statistics; the standard convention for pretrained
// encoders.
inline constexpr std::array<double, 3> kChannelMean = {0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kChannelStd = {0.229, 0.224, 0.225};

enum class AssembleMode { LowRes, FourCrop };

std::string_view assemble_mode_name(AssembleMode m);
AssembleMode assemble_mode_from_name(std::string_view name);

// (v/255 - mean_c) / std_c per channel. Input values are expected in
// [0, 255]; 3 channels required.
ImageF normalize_image(const ImageF& raw);
ImageF denormalize_image(const ImageF& normalized);

// Non-overlapping quadrants in row-major order (TL, TR, BL, BR).
// Both sides must be even; callers pad or resize first.
std::array<ImageF, 4> four_crop(const ImageF& image);
// Exact inverse of four_crop, used by tests.
ImageF recompose_quadrants(const std::array<ImageF, 4>& quadrants);

// Fixed-capacity masked image set for one region. Capacity is the region's
// image count (x4 in four-crop mode); unfilled slots stay all-zero with
// valid=false and are excluded from attention.
struct RegionalImageSet {
    pasi::RegionId region = pasi::RegionId::HeadNeck;
    std::vector<ImageF> images;
    std::vector<bool> valid;
    std::vector<ImageRecord> sources; // aligned to slots; empty path when invalid

    int valid_count() const;
};

struct VisitSample {
    std::string patient_id;
    std::string visit_id;
    std::array<RegionalImageSet, 4> region_sets; // indexed by RegionId
    VisitLabels labels;
    std::optional<std::array<pasi::SeverityComponents, 4>> truth_components;
};

// Decoded-image cache so epoch loops do not re-inflate PNGs.
class ImageCache {
public:
    const ImageU8& get(const std::filesystem::path& path);

private:
    std::map<std::string, ImageU8> cache_;
    std::mutex mutex_;
};

// Loads, resizes and normalizes one visit-region's records into a set.
// In four-crop mode each source image is resized to 2x the target and cut
// into quadrants, quadrupling the slot count.
RegionalImageSet assemble_region_set(const std::vector<ImageRecord>& records,
                                     pasi::RegionId region, AssembleMode mode, int target_height,
                                     int target_width, const DatasetManifest& manifest,
                                     ImageCache* cache = nullptr);

// Visit-oriented view over a manifest with deterministic ordering.
class VisitProvider {
public:
    VisitProvider(const DatasetManifest& manifest, AssembleMode mode, int target_height,
                  int target_width);

    size_t size() const { return visit_keys_.size(); }
    const std::vector<std::string>& visit_keys() const { return visit_keys_; }
    VisitSample get(size_t index) const;
    const VisitLabels& labels(size_t index) const;

private:
    const DatasetManifest& manifest_;
    AssembleMode mode_;
    int target_height_, target_width_;
    std::vector<std::string> visit_keys_;
    std::map<std::string, std::vector<ImageRecord>> records_by_visit_;
    mutable ImageCache cache_;
};

// Two-bin inverse-frequency weights over training visits: visits with
// total PASI above the threshold are upweighted until either bin is drawn
// with probability ~0.5. Falls back to uniform when a bin is empty.
struct SamplingWeights {
    std::vector<double> weights; // aligned to VisitProvider order
    double threshold = 10.0;
    bool uniform_fallback = false;
};

SamplingWeights compute_sampling_weights(const DatasetManifest& manifest,
                                         double threshold = 10.0);

// Cumulative-sum sampler over positive weights.
class WeightedSampler {
public:
    explicit WeightedSampler(const std::vector<double>& weights);
    size_t draw(Rng& rng) const;

private:
    std::vector<double> cumulative_;
};

} // namespace psonet::dataio
