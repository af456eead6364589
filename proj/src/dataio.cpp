#include "psonet/dataio.hpp"

#include <algorithm>
#include <cmath>

#include "psonet/errors.hpp"

namespace psonet::dataio {

std::string_view assemble_mode_name(AssembleMode m) {
    return m == AssembleMode::LowRes ? "low_res" : "four_crop";
}

AssembleMode assemble_mode_from_name(std::string_view name) {
    if (name == "low_res") return AssembleMode::LowRes;
    if (name == "four_crop") return AssembleMode::FourCrop;
    throw ValidationError("unknown mode '" + std::string(name) +
                          "' (expected low_res or four_crop)");
}

ImageF normalize_image(const ImageF& raw) {
    if (raw.channels != 3) {
        throw ValidationError("normalize_image expects 3 channels, got " +
                              std::to_string(raw.channels));
    }
    ImageF out = raw;
    const size_t plane = static_cast<size_t>(raw.height) * raw.width;
    for (int c = 0; c < 3; ++c) {
        const double mean = kChannelMean[c];
        const double inv_std = 1.0 / kChannelStd[c];
        double* p = out.values.data() + c * plane;
        for (size_t i = 0; i < plane; ++i) p[i] = (p[i] / 255.0 - mean) * inv_std;
    }
    return out;
}

ImageF denormalize_image(const ImageF& normalized) {
    if (normalized.channels != 3) {
        throw ValidationError("denormalize_image expects 3 channels, got " +
                              std::to_string(normalized.channels));
    }
    ImageF out = normalized;
    const size_t plane = static_cast<size_t>(out.height) * out.width;
    for (int c = 0; c < 3; ++c) {
        double* p = out.values.data() + c * plane;
        for (size_t i = 0; i < plane; ++i) p[i] = (p[i] * kChannelStd[c] + kChannelMean[c]) * 255.0;
    }
    return out;
}

std::array<ImageF, 4> four_crop(const ImageF& image) {
    if (image.height % 2 != 0 || image.width % 2 != 0) {
        throw ValidationError("four_crop requires even dimensions, got " +
                              std::to_string(image.height) + "x" + std::to_string(image.width));
    }
    const int h = image.height / 2, w = image.width / 2;
    std::array<ImageF, 4> out;
    for (int q = 0; q < 4; ++q) {
        const int oy = (q / 2) * h, ox = (q % 2) * w;
        out[q] = ImageF::zeros(image.channels, h, w);
        for (int c = 0; c < image.channels; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    out[q].at(c, y, x) = image.at(c, oy + y, ox + x);
                }
            }
        }
    }
    return out;
}

ImageF recompose_quadrants(const std::array<ImageF, 4>& quadrants) {
    const int h = quadrants[0].height, w = quadrants[0].width;
    ImageF out = ImageF::zeros(quadrants[0].channels, h * 2, w * 2);
    for (int q = 0; q < 4; ++q) {
        const int oy = (q / 2) * h, ox = (q % 2) * w;
        for (int c = 0; c < out.channels; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    out.at(c, oy + y, ox + x) = quadrants[q].at(c, y, x);
                }
            }
        }
    }
    return out;
}

int RegionalImageSet::valid_count() const {
    return static_cast<int>(std::count(valid.begin(), valid.end(), true));
}

const ImageU8& ImageCache::get(const std::filesystem::path& path) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = cache_.find(path.string());
    if (it == cache_.end()) {
        it = cache_.emplace(path.string(), read_png(path)).first;
    }
    return it->second;
}

RegionalImageSet assemble_region_set(const std::vector<ImageRecord>& records,
                                     pasi::RegionId region, AssembleMode mode, int target_height,
                                     int target_width, const DatasetManifest& manifest,
                                     ImageCache* cache) {
    const int base_capacity = pasi::region_image_count(region);
    const int per_slot = (mode == AssembleMode::FourCrop) ? 4 : 1;
    const int capacity = base_capacity * per_slot;

    if (static_cast<int>(records.size()) > base_capacity) {
        throw ValidationError("too many records for " + std::string(pasi::region_code(region)) +
                              ": " + std::to_string(records.size()) + " > " +
                              std::to_string(base_capacity));
    }

    RegionalImageSet set;
    set.region = region;
    set.images.assign(capacity, ImageF::zeros(3, target_height, target_width));
    set.valid.assign(capacity, false);
    set.sources.assign(capacity, ImageRecord{});

    ImageCache local_cache;
    ImageCache& images = cache ? *cache : local_cache;

    for (const auto& rec : records) {
        if (rec.region != region) {
            throw ValidationError("record region mismatch while assembling " +
                                  std::string(pasi::region_code(region)));
        }
        const ImageU8& raw = images.get(manifest.resolve(rec.path));
        if (raw.channels != 3) {
            throw ValidationError("expected RGB image: " + manifest.resolve(rec.path).string());
        }
        if (mode == AssembleMode::LowRes) {
            const ImageF resized = resize_bilinear(to_planar(raw), target_height, target_width);
            set.images[rec.slot_index] = normalize_image(resized);
            set.valid[rec.slot_index] = true;
            set.sources[rec.slot_index] = rec;
        } else {
            const ImageF doubled =
                resize_bilinear(to_planar(raw), target_height * 2, target_width * 2);
            const auto quadrants = four_crop(doubled);
            for (int q = 0; q < 4; ++q) {
                const int slot = rec.slot_index * 4 + q;
                set.images[slot] = normalize_image(quadrants[q]);
                set.valid[slot] = true;
                ImageRecord src = rec;
                src.crop_index = q;
                set.sources[slot] = src;
            }
        }
    }
    return set;
}

VisitProvider::VisitProvider(const DatasetManifest& manifest, AssembleMode mode,
                             int target_height, int target_width)
    : manifest_(manifest), mode_(mode), target_height_(target_height),
      target_width_(target_width) {
    for (const auto& rec : manifest.records) {
        records_by_visit_[visit_key(rec.patient_id, rec.visit_id)].push_back(rec);
    }
    for (const auto& [key, labels] : manifest.labels) {
        if (!records_by_visit_.count(key)) {
            throw ValidationError("labeled visit without images: " + key);
        }
        visit_keys_.push_back(key);
    }
}

VisitSample VisitProvider::get(size_t index) const {
    const auto& key = visit_keys_.at(index);
    const auto& records = records_by_visit_.at(key);
    VisitSample sample;
    const auto slash = key.find('/');
    sample.patient_id = key.substr(0, slash);
    sample.visit_id = key.substr(slash + 1);
    sample.labels = manifest_.labels.at(key);
    for (auto region : pasi::kAllRegions) {
        std::vector<ImageRecord> region_records;
        for (const auto& rec : records) {
            if (rec.region == region) region_records.push_back(rec);
        }
        sample.region_sets[static_cast<size_t>(region)] =
            assemble_region_set(region_records, region, mode_, target_height_, target_width_,
                                manifest_, &cache_);
    }
    return sample;
}

const VisitLabels& VisitProvider::labels(size_t index) const {
    return manifest_.labels.at(visit_keys_.at(index));
}

SamplingWeights compute_sampling_weights(const DatasetManifest& manifest, double threshold) {
    SamplingWeights result;
    result.threshold = threshold;

    std::vector<double> totals;
    for (const auto& [key, labels] : manifest.labels) totals.push_back(labels.total);
    if (totals.empty()) throw ValidationError("no labeled visits to weight");

    size_t n_high = 0;
    for (double t : totals) {
        if (t > threshold) ++n_high;
    }
    const size_t n_low = totals.size() - n_high;

    if (n_high == 0 || n_low == 0) {
        result.weights.assign(totals.size(), 1.0);
        result.uniform_fallback = true;
        return result;
    }

    // Upweight the rare bin so each bin is drawn with probability ~0.5.
    const double high_weight = static_cast<double>(n_low) / static_cast<double>(n_high);
    result.weights.reserve(totals.size());
    for (double t : totals) result.weights.push_back(t > threshold ? high_weight : 1.0);
    return result;
}

WeightedSampler::WeightedSampler(const std::vector<double>& weights) {
    if (weights.empty()) throw ValidationError("sampler needs at least one weight");
    cumulative_.reserve(weights.size());
    double acc = 0.0;
    for (double w : weights) {
        if (!(w > 0.0) || !std::isfinite(w)) {
            throw ValidationError("sampler weights must be positive and finite");
        }
        acc += w;
        cumulative_.push_back(acc);
    }
}

size_t WeightedSampler::draw(Rng& rng) const {
    const double u = rng.uniform01() * cumulative_.back();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min(static_cast<size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
}

} // namespace psonet::dataio
