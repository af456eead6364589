#include "psonet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "psonet/errors.hpp"
#include "psonet/image.hpp"
#include "psonet/rng.hpp"

namespace psonet::dataio {

using nlohmann::json;

std::vector<std::array<uint8_t, 3>> SyntheticSpec::default_skin_palette() {
    // Rough Fitzpatrick I..VI tones.
    return {{{244, 222, 204}},
            {{231, 202, 180}},
            {{213, 175, 146}},
            {{185, 140, 106}},
            {{142, 98, 70}},
            {{96, 62, 43}}};
}

void SyntheticSpec::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ValidationError("synthetic spec field '" + field + "': " + why);
    };
    if (patients < 1) fail("patients", "must be >= 1");
    if (min_visits < 1 || max_visits < min_visits) fail("visits", "need 1 <= min <= max");
    if (image_height < 16 || image_width < 16) fail("image_size", "sides must be >= 16");
    for (size_t r = 0; r < 4; ++r) {
        const auto& lr = lesions_per_region[r];
        if (lr.min_count < 0 || lr.max_count < lr.min_count) {
            fail("lesions_per_region[" + std::string(pasi::region_code(pasi::kAllRegions[r])) + "]",
                 "need 0 <= min <= max");
        }
    }
    auto check_level = [&](int lo, int hi, const char* field) {
        if (lo < 0 || hi > 4 || hi < lo) fail(field, "need 0 <= min <= max <= 4");
    };
    check_level(min_redness, max_redness, "redness");
    check_level(min_relief, max_relief, "relief");
    check_level(min_speckle, max_speckle, "speckle");
    if (!(min_area_fraction >= 0.0 && max_area_fraction <= 1.0 &&
          min_area_fraction <= max_area_fraction)) {
        fail("area_fraction", "need 0 <= min <= max <= 1");
    }
    if (skin_palette.empty()) fail("skin_palette", "must list at least one tone");
    if (canvas_scale < 1.0 || canvas_scale > 8.0) fail("canvas_scale", "must be in [1, 8]");
    if (images_per_region == 0 || images_per_region < -1) {
        fail("images_per_region", "must be -1 (all slots) or >= 1");
    }
    if (!(degraded_view_fraction >= 0.0 && degraded_view_fraction <= 0.9)) {
        fail("degraded_view_fraction", "must be in [0, 0.9]");
    }
}

SyntheticSpec synthetic_spec_from_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open synthetic spec: " + path.string());
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ValidationError("synthetic spec parse error: " + std::string(e.what()));
    }

    SyntheticSpec spec;
    try {
        if (doc.contains("patients")) spec.patients = doc["patients"].get<int>();
        if (doc.contains("min_visits")) spec.min_visits = doc["min_visits"].get<int>();
        if (doc.contains("max_visits")) spec.max_visits = doc["max_visits"].get<int>();
        if (doc.contains("image_height")) spec.image_height = doc["image_height"].get<int>();
        if (doc.contains("image_width")) spec.image_width = doc["image_width"].get<int>();
        if (doc.contains("lesions_per_region")) {
            for (auto region : pasi::kAllRegions) {
                const auto code = std::string(pasi::region_code(region));
                if (doc["lesions_per_region"].contains(code)) {
                    const auto& pair = doc["lesions_per_region"][code];
                    spec.lesions_per_region[static_cast<size_t>(region)] = {pair.at(0).get<int>(),
                                                                            pair.at(1).get<int>()};
                }
            }
        }
        auto range = [&](const char* key, int& lo, int& hi) {
            if (doc.contains(key)) {
                lo = doc[key].at(0).get<int>();
                hi = doc[key].at(1).get<int>();
            }
        };
        range("redness", spec.min_redness, spec.max_redness);
        range("relief", spec.min_relief, spec.max_relief);
        range("speckle", spec.min_speckle, spec.max_speckle);
        if (doc.contains("area_fraction")) {
            spec.min_area_fraction = doc["area_fraction"].at(0).get<double>();
            spec.max_area_fraction = doc["area_fraction"].at(1).get<double>();
        }
        if (doc.contains("skin_palette")) {
            spec.skin_palette.clear();
            for (const auto& tone : doc["skin_palette"]) {
                spec.skin_palette.push_back({tone.at(0).get<uint8_t>(), tone.at(1).get<uint8_t>(),
                                             tone.at(2).get<uint8_t>()});
            }
        }
        if (doc.contains("rng_seed")) spec.rng_seed = doc["rng_seed"].get<uint64_t>();
        if (doc.contains("canvas_scale")) spec.canvas_scale = doc["canvas_scale"].get<double>();
        if (doc.contains("images_per_region")) {
            spec.images_per_region = doc["images_per_region"].get<int>();
        }
        if (doc.contains("single_lesion")) spec.single_lesion = doc["single_lesion"].get<bool>();
        if (doc.contains("write_masks")) spec.write_masks = doc["write_masks"].get<bool>();
        if (doc.contains("degraded_view_fraction")) {
            spec.degraded_view_fraction = doc["degraded_view_fraction"].get<double>();
        }
    } catch (const json::exception& e) {
        throw ValidationError("synthetic spec field error: " + std::string(e.what()));
    }
    spec.validate();
    return spec;
}

namespace {

struct Canvas {
    ImageF pixels;            // RGB planar, [0, 255]
    std::vector<uint8_t> mask; // union lesion mask

    uint8_t& mask_at(int y, int x) { return mask[static_cast<size_t>(y) * pixels.width + x]; }
};

Canvas make_skin_canvas(int height, int width, const std::array<double, 3>& tone, Rng& rng) {
    Canvas canvas;
    canvas.pixels = ImageF::zeros(3, height, width);
    canvas.mask.assign(static_cast<size_t>(height) * width, 0);

    const double grad_amp = rng.uniform(2.0, 9.0);
    const double gy = rng.uniform(-1.0, 1.0);
    const double gx = rng.uniform(-1.0, 1.0);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double light = grad_amp * ((static_cast<double>(y) / height - 0.5) * gy +
                                             (static_cast<double>(x) / width - 0.5) * gx);
            const double grain = rng.uniform(-3.0, 3.0);
            for (int c = 0; c < 3; ++c) {
                canvas.pixels.at(c, y, x) = std::clamp(tone[c] + light + grain, 0.0, 255.0);
            }
        }
    }
    return canvas;
}

struct Ellipse {
    double cx, cy, a, b, angle;
};

// Places an ellipse of roughly target_area_px fully inside the canvas so
// the rasterized coverage tracks the drawn area.
Ellipse place_ellipse(int height, int width, double target_area_px, Rng& rng) {
    const double min_side = static_cast<double>(std::min(height, width));
    const double max_a = 0.48 * min_side;
    double q_lo = std::max(0.45, target_area_px / (3.14159265358979 * max_a * max_a));
    q_lo = std::min(q_lo, 1.0);
    const double q = rng.uniform(q_lo, 1.0);
    double a = std::sqrt(target_area_px / (3.14159265358979 * q));
    a = std::min(a, max_a);
    const double b = target_area_px / (3.14159265358979 * a);

    Ellipse e;
    e.a = a;
    e.b = std::min(b, a);
    e.angle = rng.uniform(0.0, 3.14159265358979);
    const double margin = a + 1.0;
    e.cx = rng.uniform(margin, std::max(margin, width - margin));
    e.cy = rng.uniform(margin, std::max(margin, height - margin));
    return e;
}

void render_lesion(Canvas& canvas, const Ellipse& e, int redness, int relief, int speckle,
                   Rng& rng) {
    const int height = canvas.pixels.height, width = canvas.pixels.width;
    const double cosang = std::cos(e.angle), sinang = std::sin(e.angle);
    const std::array<double, 3> lesion_color = {rng.uniform(165.0, 195.0), rng.uniform(48.0, 72.0),
                                                rng.uniform(44.0, 66.0)};
    const double ripple_phase = rng.uniform(0.0, 6.28318);

    const int y0 = std::max(0, static_cast<int>(std::floor(e.cy - e.a - 1)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(e.cy + e.a + 1)));
    const int x0 = std::max(0, static_cast<int>(std::floor(e.cx - e.a - 1)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(e.cx + e.a + 1)));

    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - e.cx, dy = y - e.cy;
            const double u = (dx * cosang + dy * sinang) / e.a;
            const double v = (-dx * sinang + dy * cosang) / e.b;
            const double rr = u * u + v * v;
            if (rr > 1.0) continue;
            canvas.mask_at(y, x) = 1;
            const double r = std::sqrt(rr);
            const double falloff = std::min(1.0, (1.0 - r) / 0.3);

            const double mix = 0.7 * (redness / 4.0) * falloff;
            const double ripple =
                14.0 * (relief / 4.0) * falloff * std::cos(5.5 * r * 6.28318 * 0.5 + ripple_phase);
            for (int c = 0; c < 3; ++c) {
                double px = canvas.pixels.at(c, y, x);
                px += mix * (lesion_color[c] - px);
                px += ripple;
                canvas.pixels.at(c, y, x) = std::clamp(px, 0.0, 255.0);
            }
        }
    }

    // Bright scaling flakes, density proportional to the level.
    const double area_px = 3.14159265358979 * e.a * e.b;
    const int flakes = static_cast<int>(std::round((speckle / 4.0) * area_px * 0.03));
    for (int i = 0; i < flakes; ++i) {
        // Uniform point in the ellipse via the parametric square-root trick.
        const double t = rng.uniform(0.0, 6.28318);
        const double rad = std::sqrt(rng.uniform01());
        const double lu = rad * std::cos(t) * e.a, lv = rad * std::sin(t) * e.b;
        const int px = static_cast<int>(std::round(e.cx + lu * cosang - lv * sinang));
        const int py = static_cast<int>(std::round(e.cy + lu * sinang + lv * cosang));
        const int flake_r = (rng.uniform01() < 0.3) ? 2 : 1;
        for (int yy = py - flake_r; yy <= py + flake_r; ++yy) {
            for (int xx = px - flake_r; xx <= px + flake_r; ++xx) {
                if (yy < 0 || yy >= height || xx < 0 || xx >= width) continue;
                if ((yy - py) * (yy - py) + (xx - px) * (xx - px) > flake_r * flake_r) continue;
                for (int c = 0; c < 3; ++c) {
                    const std::array<double, 3> flake_color = {236.0, 229.0, 218.0};
                    double v = canvas.pixels.at(c, yy, xx);
                    v += 0.85 * (flake_color[c] - v);
                    canvas.pixels.at(c, yy, xx) = std::clamp(v, 0.0, 255.0);
                }
            }
        }
    }
}

// Box blur with edge clamping, run twice for a soft out-of-focus look.
void blur_in_place(ImageF& img, int radius) {
    ImageF tmp = img;
    const double norm = 1.0 / (2 * radius + 1);
    for (int pass = 0; pass < 2; ++pass) {
        // horizontal
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < img.height; ++y) {
                for (int x = 0; x < img.width; ++x) {
                    double acc = 0.0;
                    for (int d = -radius; d <= radius; ++d) {
                        acc += img.at(c, y, std::clamp(x + d, 0, img.width - 1));
                    }
                    tmp.at(c, y, x) = acc * norm;
                }
            }
        }
        // vertical
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < img.height; ++y) {
                for (int x = 0; x < img.width; ++x) {
                    double acc = 0.0;
                    for (int d = -radius; d <= radius; ++d) {
                        acc += tmp.at(c, std::clamp(y + d, 0, img.height - 1), x);
                    }
                    img.at(c, y, x) = acc * norm;
                }
            }
        }
    }
}

// Exposure varies per photo, as it does with handheld capture; global
// brightness alone therefore cannot predict severity and models must read
// local contrast. Degraded views are blurred, over/under-exposed and noisy
// throwaway shots for the attention block to learn to discount.
ImageU8 crop_window_u8(const ImageF& canvas, int oy, int ox, int height, int width,
                       double exposure, bool degraded, Rng& rng) {
    ImageF window = ImageF::zeros(3, height, width);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                window.at(c, y, x) =
                    std::clamp(canvas.at(c, oy + y, ox + x) * exposure, 0.0, 255.0);
            }
        }
    }
    if (degraded) {
        const double extreme = rng.uniform01() < 0.5 ? rng.uniform(0.65, 0.8)
                                                     : rng.uniform(1.25, 1.4);
        blur_in_place(window, 2);
        for (auto& v : window.values) {
            v = std::clamp(v * extreme + rng.uniform(-5.0, 5.0), 0.0, 255.0);
        }
    }
    return to_interleaved_u8(window);
}

ImageU8 crop_mask_u8(const std::vector<uint8_t>& mask, int canvas_width, int oy, int ox,
                     int height, int width) {
    ImageU8 out = ImageU8::filled(width, height, 1, 0);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            out.at(y, x, 0) =
                mask[static_cast<size_t>(oy + y) * canvas_width + (ox + x)] ? 255 : 0;
        }
    }
    return out;
}

std::string zero_pad(int value, int width) {
    std::string s = std::to_string(value);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

} // namespace

DatasetManifest generate_synthetic_dataset(const SyntheticSpec& spec,
                                           const std::filesystem::path& out_dir) {
    spec.validate();

    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw std::runtime_error("cannot create output directory: " + out_dir.string());
    if (spec.write_masks) std::filesystem::create_directories(out_dir / "masks");

    const double effective_scale = spec.single_lesion ? 1.0 : spec.canvas_scale;
    const int canvas_h = static_cast<int>(std::lround(spec.image_height * effective_scale));
    const int canvas_w = static_cast<int>(std::lround(spec.image_width * effective_scale));

    DatasetManifest manifest;
    manifest.base_dir = out_dir;
    json truth_doc = json::object();

    Rng rng(spec.rng_seed);
    for (int p = 0; p < spec.patients; ++p) {
        const std::string patient_id = "p" + zero_pad(p, 4);
        manifest.patients.push_back(patient_id);

        const auto& base_tone =
            spec.skin_palette[static_cast<size_t>(rng.uniform_int(0, spec.skin_palette.size() - 1))];
        std::array<double, 3> tone;
        for (int c = 0; c < 3; ++c) {
            tone[c] = std::clamp(static_cast<double>(base_tone[c]) + rng.uniform(-8.0, 8.0), 0.0,
                                 255.0);
        }

        const int visits = static_cast<int>(rng.uniform_int(spec.min_visits, spec.max_visits));
        for (int v = 0; v < visits; ++v) {
            const std::string visit_id = "v" + std::to_string(v);
            const std::string key = visit_key(patient_id, visit_id);

            std::vector<pasi::RegionalPasi> regional_scores;
            json truth_block = json::object();
            for (auto region : pasi::kAllRegions) {
                const auto& count_range = spec.lesions_per_region[static_cast<size_t>(region)];
                const int lesion_count =
                    spec.single_lesion
                        ? 1
                        : static_cast<int>(rng.uniform_int(count_range.min_count,
                                                           count_range.max_count));

                Canvas canvas = make_skin_canvas(canvas_h, canvas_w, tone, rng);

                // Focus point for lesion-framed photos: the largest lesion.
                double focus_cx = 0.5 * canvas_w;
                double focus_cy = 0.5 * canvas_h;
                pasi::SeverityComponents truth;
                if (lesion_count > 0) {
                    truth.erythema = static_cast<int>(rng.uniform_int(spec.min_redness,
                                                                      spec.max_redness));
                    truth.induration = static_cast<int>(rng.uniform_int(spec.min_relief,
                                                                        spec.max_relief));
                    truth.desquamation = static_cast<int>(rng.uniform_int(spec.min_speckle,
                                                                          spec.max_speckle));
                    const double target_fraction =
                        rng.uniform(spec.min_area_fraction, spec.max_area_fraction);
                    const double canvas_px = static_cast<double>(canvas_h) * canvas_w;

                    std::vector<double> parts(lesion_count);
                    double part_sum = 0.0;
                    for (auto& part : parts) {
                        part = rng.uniform(0.35, 1.0);
                        part_sum += part;
                    }
                    for (auto& part : parts) part *= target_fraction / part_sum;

                    std::sort(parts.begin(), parts.end(), std::greater<double>());
                    for (size_t li = 0; li < parts.size(); ++li) {
                        const double area_px = std::max(16.0, parts[li] * canvas_px);
                        const Ellipse e = place_ellipse(canvas_h, canvas_w, area_px, rng);
                        if (li == 0) {
                            focus_cx = e.cx;
                            focus_cy = e.cy;
                        }
                        render_lesion(canvas, e, truth.erythema, truth.induration,
                                      truth.desquamation, rng);
                    }

                    size_t covered = 0;
                    for (uint8_t m : canvas.mask) covered += m;
                    const double coverage = static_cast<double>(covered) /
                                            (static_cast<double>(canvas_h) * canvas_w);
                    truth.area_score = pasi::area_fraction_to_score(coverage);
                }

                const auto score = pasi::regional_pasi(truth, region);
                regional_scores.push_back(score);
                truth_block[std::string(pasi::region_code(region))] = {
                    truth.erythema, truth.induration, truth.desquamation, truth.area_score};

                const int capacity = pasi::region_image_count(region);
                const int n_images = spec.images_per_region < 0
                                         ? capacity
                                         : std::min(spec.images_per_region, capacity);
                for (int slot = 0; slot < n_images; ++slot) {
                    // People photograph what bothers them: when lesions
                    // exist, a share of the photos frames the flare
                    // instead of panning the region at random.
                    const bool closeup = lesion_count > 0 && rng.uniform01() < 0.3;
                    int oy = 0, ox = 0;
                    if (canvas_h > spec.image_height) {
                        if (closeup) {
                            const double jitter = 0.15 * canvas_h;
                            const double target = focus_cy - spec.image_height / 2.0 +
                                                  rng.uniform(-jitter, jitter);
                            oy = static_cast<int>(std::clamp(
                                target, 0.0, static_cast<double>(canvas_h - spec.image_height)));
                        } else {
                            oy = static_cast<int>(
                                rng.uniform_int(0, canvas_h - spec.image_height));
                        }
                    }
                    if (canvas_w > spec.image_width) {
                        if (closeup) {
                            const double jitter = 0.15 * canvas_w;
                            const double target = focus_cx - spec.image_width / 2.0 +
                                                  rng.uniform(-jitter, jitter);
                            ox = static_cast<int>(std::clamp(
                                target, 0.0, static_cast<double>(canvas_w - spec.image_width)));
                        } else {
                            ox = static_cast<int>(
                                rng.uniform_int(0, canvas_w - spec.image_width));
                        }
                    }
                    const double exposure = rng.uniform(0.85, 1.15);
                    const bool degraded = rng.uniform01() < spec.degraded_view_fraction;
                    const std::string name = patient_id + "_" + visit_id + "_" +
                                             std::string(pasi::region_code(region)) + "_" +
                                             zero_pad(slot, 2) + ".png";
                    const std::string rel = "images/" + name;
                    write_png(out_dir / rel,
                              crop_window_u8(canvas.pixels, oy, ox, spec.image_height,
                                             spec.image_width, exposure, degraded, rng));
                    if (spec.write_masks) {
                        write_png(out_dir / ("masks/" + name),
                                  crop_mask_u8(canvas.mask, canvas_w, oy, ox, spec.image_height,
                                               spec.image_width));
                    }
                    ImageRecord rec;
                    rec.path = rel;
                    rec.patient_id = patient_id;
                    rec.visit_id = visit_id;
                    rec.region = region;
                    rec.slot_index = slot;
                    manifest.records.push_back(std::move(rec));
                }
            }

            VisitLabels labels;
            for (const auto& score : regional_scores) {
                labels.regional[static_cast<size_t>(score.region)] = score.value;
            }
            labels.total = pasi::total_pasi(regional_scores).value;
            manifest.labels.emplace(key, labels);
            truth_doc[key] = std::move(truth_block);
        }
    }

    validate_manifest(manifest, /*check_files=*/true);
    save_manifest(manifest, out_dir / "manifest.json");
    std::ofstream tf(out_dir / "truth_components.json");
    tf << truth_doc.dump(2) << "\n";
    return manifest;
}

std::map<std::string, std::array<pasi::SeverityComponents, 4>> load_truth_components(
    const std::filesystem::path& dataset_dir) {
    std::ifstream f(dataset_dir / "truth_components.json");
    if (!f) {
        throw ValidationError("missing truth_components.json in " + dataset_dir.string());
    }
    json doc = json::parse(f);
    std::map<std::string, std::array<pasi::SeverityComponents, 4>> out;
    for (const auto& [key, block] : doc.items()) {
        std::array<pasi::SeverityComponents, 4> comps;
        for (auto region : pasi::kAllRegions) {
            const auto& arr = block.at(std::string(pasi::region_code(region)));
            auto& c = comps[static_cast<size_t>(region)];
            c.erythema = arr.at(0).get<int>();
            c.induration = arr.at(1).get<int>();
            c.desquamation = arr.at(2).get<int>();
            c.area_score = arr.at(3).get<int>();
        }
        out.emplace(key, comps);
    }
    return out;
}

} // namespace psonet::dataio
