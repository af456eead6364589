#include "psonet/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "psonet/errors.hpp"
#include "psonet/rng.hpp"

namespace psonet::dataio {

using nlohmann::json;

std::string_view split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    throw ValidationError("unknown split");
}

Split split_from_name(std::string_view name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    throw ValidationError("unknown split name '" + std::string(name) + "'");
}

void validate_manifest(const DatasetManifest& manifest, bool check_files) {
    std::set<std::string> patient_set(manifest.patients.begin(), manifest.patients.end());
    if (patient_set.size() != manifest.patients.size()) {
        throw ValidationError("manifest: duplicate patient id");
    }

    std::set<std::tuple<std::string, std::string, pasi::RegionId, int>> slots;
    std::set<std::string> visits_with_images;
    for (const auto& rec : manifest.records) {
        if (!patient_set.count(rec.patient_id)) {
            throw ValidationError("manifest: record references unknown patient '" +
                                  rec.patient_id + "'");
        }
        const int capacity = pasi::region_image_count(rec.region);
        if (rec.slot_index < 0 || rec.slot_index >= capacity) {
            throw ValidationError(
                "manifest: slot_index " + std::to_string(rec.slot_index) + " out of range for " +
                std::string(pasi::region_code(rec.region)) + " (capacity " +
                std::to_string(capacity) + ") in visit " +
                visit_key(rec.patient_id, rec.visit_id));
        }
        if (!slots.insert({rec.patient_id, rec.visit_id, rec.region, rec.slot_index}).second) {
            throw ValidationError("manifest: duplicate slot (" + rec.patient_id + ", " +
                                  rec.visit_id + ", " + std::string(pasi::region_code(rec.region)) +
                                  ", " + std::to_string(rec.slot_index) + ")");
        }
        visits_with_images.insert(visit_key(rec.patient_id, rec.visit_id));
        if (check_files && !std::filesystem::exists(manifest.resolve(rec.path))) {
            throw ValidationError("manifest: image file missing: " +
                                  manifest.resolve(rec.path).string());
        }
    }

    for (const auto& [key, labels] : manifest.labels) {
        if (!visits_with_images.count(key)) {
            throw ValidationError("manifest: labeled visit '" + key + "' has no images");
        }
        for (double v : labels.regional) {
            if (!(v >= 0.0 && v <= 72.0)) {
                throw ValidationError("manifest: regional label out of [0, 72] for '" + key + "'");
            }
        }
        if (!(labels.total >= 0.0 && labels.total <= 72.0)) {
            throw ValidationError("manifest: total label out of [0, 72] for '" + key + "'");
        }
    }

    for (const auto& [patient, _] : manifest.split) {
        if (!patient_set.count(patient)) {
            throw ValidationError("manifest: split references unknown patient '" + patient + "'");
        }
    }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open manifest: " + path.string());
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ValidationError("manifest parse error in " + path.string() + ": " + e.what());
    }

    DatasetManifest m;
    m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    try {
        m.patients = doc.at("patients").get<std::vector<std::string>>();
        for (const auto& r : doc.at("records")) {
            ImageRecord rec;
            rec.path = r.at("path").get<std::string>();
            rec.patient_id = r.at("patient_id").get<std::string>();
            rec.visit_id = r.at("visit_id").get<std::string>();
            rec.region = pasi::region_from_code(r.at("region").get<std::string>());
            rec.slot_index = r.at("slot").get<int>();
            if (r.contains("crop")) rec.crop_index = r.at("crop").get<int>();
            m.records.push_back(std::move(rec));
        }
        if (doc.contains("labels")) {
            for (const auto& [key, block] : doc.at("labels").items()) {
                VisitLabels labels;
                for (auto region : pasi::kAllRegions) {
                    labels.regional[static_cast<size_t>(region)] =
                        block.at(std::string(pasi::region_code(region))).get<double>();
                }
                labels.total = block.at("total").get<double>();
                m.labels.emplace(key, labels);
            }
        }
        if (doc.contains("split")) {
            for (const auto& [patient, tag] : doc.at("split").items()) {
                m.split.emplace(patient, split_from_name(tag.get<std::string>()));
            }
        }
    } catch (const json::exception& e) {
        throw ValidationError("manifest field error in " + path.string() + ": " + e.what());
    }

    validate_manifest(m, /*check_files=*/true);
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    json doc;
    doc["patients"] = manifest.patients;
    doc["records"] = json::array();
    for (const auto& rec : manifest.records) {
        json r;
        r["path"] = rec.path;
        r["patient_id"] = rec.patient_id;
        r["visit_id"] = rec.visit_id;
        r["region"] = std::string(pasi::region_code(rec.region));
        r["slot"] = rec.slot_index;
        if (rec.crop_index) r["crop"] = *rec.crop_index;
        doc["records"].push_back(std::move(r));
    }
    doc["labels"] = json::object();
    for (const auto& [key, labels] : manifest.labels) {
        json block;
        for (auto region : pasi::kAllRegions) {
            block[std::string(pasi::region_code(region))] =
                labels.regional[static_cast<size_t>(region)];
        }
        block["total"] = labels.total;
        doc["labels"][key] = std::move(block);
    }
    if (!manifest.split.empty()) {
        json split = json::object();
        for (const auto& [patient, tag] : manifest.split) {
            split[patient] = std::string(split_name(tag));
        }
        doc["split"] = std::move(split);
    }

    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write manifest: " + path.string());
    f << doc.dump(2) << "\n";
}

namespace {

// Largest-remainder apportionment of n patients over the three ratios.
std::array<size_t, 3> apportion(size_t n, const SplitRatios& ratios) {
    const std::array<double, 3> r = {ratios.train, ratios.val, ratios.test};
    std::array<size_t, 3> counts{};
    std::array<double, 3> remainder{};
    size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = r[i] * static_cast<double>(n);
        counts[i] = static_cast<size_t>(std::floor(exact));
        remainder[i] = exact - std::floor(exact);
        assigned += counts[i];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return remainder[a] > remainder[b]; });
    for (size_t i = 0; assigned < n; ++i, ++assigned) counts[order[i % 3]]++;
    return counts;
}

} // namespace

std::array<DatasetManifest, 3> split_by_patient(const DatasetManifest& manifest,
                                                const SplitRatios& ratios, uint64_t seed) {
    const double sum = ratios.train + ratios.val + ratios.test;
    if (ratios.train <= 0.0 || ratios.val <= 0.0 || ratios.test <= 0.0 ||
        std::abs(sum - 1.0) > 1e-9) {
        throw ValidationError("split ratios must be positive and sum to 1");
    }
    if (manifest.patients.size() < 3) {
        throw ValidationError("need at least 3 patients to split, got " +
                              std::to_string(manifest.patients.size()));
    }

    std::vector<std::string> shuffled = manifest.patients;
    std::sort(shuffled.begin(), shuffled.end());
    Rng rng(seed);
    for (size_t i = shuffled.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
        std::swap(shuffled[i - 1], shuffled[j]);
    }

    const auto counts = apportion(shuffled.size(), ratios);
    std::map<std::string, Split> assignment;
    size_t pos = 0;
    for (int part = 0; part < 3; ++part) {
        for (size_t i = 0; i < counts[part]; ++i, ++pos) {
            assignment.emplace(shuffled[pos], static_cast<Split>(part));
        }
    }

    std::array<DatasetManifest, 3> out;
    for (int part = 0; part < 3; ++part) {
        out[part].base_dir = manifest.base_dir;
    }
    for (const auto& patient : manifest.patients) {
        out[static_cast<size_t>(assignment.at(patient))].patients.push_back(patient);
    }
    for (const auto& rec : manifest.records) {
        out[static_cast<size_t>(assignment.at(rec.patient_id))].records.push_back(rec);
    }
    for (const auto& [key, labels] : manifest.labels) {
        const auto patient = key.substr(0, key.find('/'));
        out[static_cast<size_t>(assignment.at(patient))].labels.emplace(key, labels);
    }
    for (int part = 0; part < 3; ++part) {
        for (const auto& patient : out[part].patients) {
            out[part].split.emplace(patient, static_cast<Split>(part));
        }
    }
    return out;
}

DatasetManifest filter_split(const DatasetManifest& manifest, Split split) {
    DatasetManifest out;
    out.base_dir = manifest.base_dir;
    std::set<std::string> keep;
    for (const auto& [patient, tag] : manifest.split) {
        if (tag == split) keep.insert(patient);
    }
    if (keep.empty()) {
        throw ValidationError("manifest has no patients tagged '" +
                              std::string(split_name(split)) + "'");
    }
    for (const auto& patient : manifest.patients) {
        if (keep.count(patient)) {
            out.patients.push_back(patient);
            out.split.emplace(patient, split);
        }
    }
    for (const auto& rec : manifest.records) {
        if (keep.count(rec.patient_id)) out.records.push_back(rec);
    }
    for (const auto& [key, labels] : manifest.labels) {
        if (keep.count(key.substr(0, key.find('/')))) out.labels.emplace(key, labels);
    }
    return out;
}

} // namespace psonet::dataio
