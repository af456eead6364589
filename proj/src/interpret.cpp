#include "psonet/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "psonet/errors.hpp"
#include "psonet/evalmetrics.hpp"

namespace psonet::interpret {

using nlohmann::json;

namespace {

Instrumentation* g_hook = nullptr;

void count_set_inference() {
    if (g_hook) g_hook->set_inferences++;
}
void count_gradram_backward() {
    if (g_hook) g_hook->gradram_backwards++;
}

} // namespace

void set_instrumentation(Instrumentation* hook) { g_hook = hook; }

namespace {

// The encoder's stride-2 chain puts the receptive center of final-stage
// cell (i, j) at input pixel (32i, 32j), not at the half-pixel cell center
// a plain resize assumes; at coarse grids that half-cell shift drags the
// rendered map visibly off the evidence. Sample accordingly.
ImageF upsample_aligned(const ImageF& raw, int out_side, int input_height, int input_width) {
    ImageF out = ImageF::zeros(1, out_side, out_side);
    const double sy = static_cast<double>(input_height) / out_side;
    const double sx = static_cast<double>(input_width) / out_side;
    const double cell_h = static_cast<double>(input_height) / raw.height;
    const double cell_w = static_cast<double>(input_width) / raw.width;
    for (int q = 0; q < out_side; ++q) {
        const double uy = (q + 0.5) * sy - 0.5;
        double fy = std::clamp(uy / cell_h, 0.0, static_cast<double>(raw.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, raw.height - 1);
        const double wy = fy - y0;
        for (int p = 0; p < out_side; ++p) {
            const double ux = (p + 0.5) * sx - 0.5;
            double fx = std::clamp(ux / cell_w, 0.0, static_cast<double>(raw.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, raw.width - 1);
            const double wx = fx - x0;
            const double top = raw.at(0, y0, x0) * (1 - wx) + raw.at(0, y0, x1) * wx;
            const double bot = raw.at(0, y1, x0) * (1 - wx) + raw.at(0, y1, x1) * wx;
            out.at(0, q, p) = top * (1 - wy) + bot * wy;
        }
    }
    return out;
}

} // namespace

AttentionRanking rank_attention(const nnet::AttentionOutput& output) {
    AttentionRanking ranking;
    for (size_t i = 0; i < output.weights.size(); ++i) {
        if (std::isfinite(output.logits[i])) {
            ranking.entries.emplace_back(static_cast<int>(i), output.weights[i]);
        }
    }
    std::stable_sort(ranking.entries.begin(), ranking.entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    return ranking;
}

GradRamMap grad_ram(const ImageF& image, const nnet::RegionalModelParams& params,
                    const MapSource& source, bool signed_map) {
    dataio::RegionalImageSet singleton;
    singleton.region = source.region;
    singleton.images.push_back(image);
    singleton.valid.push_back(true);
    singleton.sources.emplace_back();

    nnet::RegionalCache cache;
    const auto out = nnet::regional_forward(singleton, params, &cache);
    const Tensor dspatial = nnet::spatial_feature_gradient(params, cache, 0);
    count_gradram_backward();

    const Tensor& spatial = cache.features[0].spatial;
    const size_t channels = spatial.shape[0];
    const size_t h = spatial.shape[1], w = spatial.shape[2];
    const size_t plane = h * w;

    // Channel weights: spatial mean of the gradient.
    std::vector<double> channel_weight(channels, 0.0);
    for (size_t c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) acc += dspatial.data[c * plane + i];
        if (!std::isfinite(acc)) {
            throw std::runtime_error("grad_ram: non-finite gradient in channel " +
                                     std::to_string(c));
        }
        channel_weight[c] = acc / static_cast<double>(plane);
    }

    ImageF raw = ImageF::zeros(1, static_cast<int>(h), static_cast<int>(w));
    for (size_t c = 0; c < channels; ++c) {
        const double alpha = channel_weight[c];
        for (size_t i = 0; i < plane; ++i) raw.values[i] += alpha * spatial.data[c * plane + i];
    }
    if (!signed_map) {
        for (double& v : raw.values) v = std::max(v, 0.0);
    }

    const ImageF up =
        upsample_aligned(raw, kGradRamResolution, image.height, image.width);

    GradRamMap map;
    map.source = source;
    map.score = out.score.value;
    map.grid.assign(up.values.begin(), up.values.end());
    const auto [lo, hi] = std::minmax_element(map.grid.begin(), map.grid.end());
    map.raw_min = *lo;
    map.raw_max = *hi;
    const double span = map.raw_max - map.raw_min;
    if (span <= 0.0) {
        std::fill(map.grid.begin(), map.grid.end(), 0.0);
    } else {
        for (double& v : map.grid) v = (v - map.raw_min) / span;
    }
    return map;
}

std::vector<GradRamMap> explain_set(const dataio::RegionalImageSet& set,
                                    const nnet::RegionalModelParams& params, int top_k,
                                    bool* truncated, bool signed_map) {
    if (top_k < 1) throw ValidationError("explain_set: top_k must be >= 1");

    nnet::RegionalCache cache;
    const auto out = nnet::regional_forward(set, params, &cache);
    count_set_inference();

    const auto ranking = rank_attention(out.attention);
    const int available = static_cast<int>(ranking.entries.size());
    const int k = std::min(top_k, available);
    if (truncated) *truncated = top_k > available;

    std::vector<GradRamMap> maps;
    maps.reserve(k);
    for (int i = 0; i < k; ++i) {
        const int slot = ranking.entries[i].first;
        MapSource source;
        const auto& rec = set.sources[slot];
        source.patient_id = rec.patient_id;
        source.visit_id = rec.visit_id;
        source.region = set.region;
        source.slot = slot;
        source.crop_index = rec.crop_index;
        auto map = grad_ram(set.images[slot], params, source, signed_map);
        map.attention_weight = ranking.entries[i].second;
        map.score = out.score.value; // the set-level regional score at inference
        maps.push_back(std::move(map));
    }
    return maps;
}

namespace {

// Classic jet ramp on [0, 1].
std::array<double, 3> colormap(double v) {
    const auto band = [](double x) { return std::clamp(x, 0.0, 1.0); };
    return {band(1.5 - std::abs(4.0 * v - 3.0)), band(1.5 - std::abs(4.0 * v - 2.0)),
            band(1.5 - std::abs(4.0 * v - 1.0))};
}

} // namespace

ImageU8 overlay(const ImageU8& image, const GradRamMap& map, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ValidationError("overlay alpha must be in [0, 1], got " + std::to_string(alpha));
    }
    if (image.channels != 3) throw ValidationError("overlay expects an RGB image");

    ImageF grid = ImageF::zeros(1, kGradRamResolution, kGradRamResolution);
    grid.values.assign(map.grid.begin(), map.grid.end());
    const ImageF sized = resize_bilinear(grid, image.height, image.width);

    ImageU8 out{image.width, image.height, 3};
    out.pixels.resize(image.pixels.size());
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const auto heat = colormap(sized.at(0, y, x));
            for (int c = 0; c < 3; ++c) {
                const double blended =
                    (1.0 - alpha) * image.at(y, x, c) + alpha * 255.0 * heat[c];
                out.at(y, x, c) = static_cast<uint8_t>(std::clamp(std::round(blended), 0.0, 255.0));
            }
        }
    }
    return out;
}

void write_overlay_with_sidecar(const std::filesystem::path& dir, const std::string& stem,
                                const ImageU8& image, const GradRamMap& map, double alpha) {
    std::filesystem::create_directories(dir);
    write_png(dir / (stem + ".png"), overlay(image, map, alpha));

    json sidecar;
    sidecar["source"]["patient_id"] = map.source.patient_id;
    sidecar["source"]["visit_id"] = map.source.visit_id;
    sidecar["source"]["region"] = std::string(pasi::region_code(map.source.region));
    sidecar["source"]["slot"] = map.source.slot;
    if (map.source.crop_index) sidecar["source"]["crop"] = *map.source.crop_index;
    sidecar["score"] = map.score;
    sidecar["attention_weight"] = map.attention_weight;
    sidecar["grid_minmax"] = {map.raw_min, map.raw_max};

    std::ofstream f(dir / (stem + ".json"));
    if (!f) throw std::runtime_error("cannot write sidecar for " + stem);
    f << sidecar.dump(2) << "\n";
}

namespace {

// Type-7 (linear interpolation) percentile of sorted values.
double percentile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

} // namespace

QuartileTable attention_quartiles(
    const std::array<std::vector<std::pair<double, double>>, 4>& per_region_pairs) {
    QuartileTable table;
    for (size_t r = 0; r < 4; ++r) {
        auto& region_table = table.regions[r];
        const auto& pairs = per_region_pairs[r];
        for (const auto& [attention, label] : pairs) {
            region_table.entries.push_back({attention, label, 1});
        }
        if (pairs.size() < 4) {
            region_table.single_bucket = true;
            continue;
        }
        std::vector<double> sorted;
        sorted.reserve(pairs.size());
        for (const auto& [attention, _] : pairs) sorted.push_back(attention);
        std::sort(sorted.begin(), sorted.end());
        region_table.boundaries = {percentile(sorted, 0.25), percentile(sorted, 0.50),
                                   percentile(sorted, 0.75)};
        region_table.degenerate = !(region_table.boundaries[0] < region_table.boundaries[1] &&
                                    region_table.boundaries[1] < region_table.boundaries[2]);
        for (auto& entry : region_table.entries) {
            int q = 1;
            for (double boundary : region_table.boundaries) {
                if (entry.max_attention > boundary) ++q;
            }
            entry.quartile = q;
        }
    }
    return table;
}

void write_quartile_csv(const std::filesystem::path& path, const QuartileTable& table) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write quartile data: " + path.string());
    f << "region,quartile,max_attention,label\n";
    f.precision(17);
    for (size_t r = 0; r < 4; ++r) {
        const auto code = pasi::region_code(pasi::kAllRegions[r]);
        for (const auto& entry : table.regions[r].entries) {
            f << code << "," << entry.quartile << "," << entry.max_attention << ","
              << entry.label << "\n";
        }
    }
}

std::array<double, 4> quartile_label_correlation(const QuartileTable& table) {
    std::array<double, 4> out{};
    for (size_t r = 0; r < 4; ++r) {
        std::array<double, 4> sums{};
        std::array<int, 4> counts{};
        for (const auto& entry : table.regions[r].entries) {
            sums[entry.quartile - 1] += entry.label;
            counts[entry.quartile - 1] += 1;
        }
        std::vector<double> indices, means;
        for (int q = 0; q < 4; ++q) {
            if (counts[q] > 0) {
                indices.push_back(q + 1);
                means.push_back(sums[q] / counts[q]);
            }
        }
        out[r] = (indices.size() < 2) ? 0.0 : evalmetrics::spearman(indices, means);
    }
    return out;
}

} // namespace psonet::interpret
