#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psonet/pasi.hpp"

namespace psonet::dataio {

enum class Split { Train, Val, Test };

std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

// One photo slot of one visit. Paths are stored relative to the manifest's
// directory so datasets stay relocatable.
struct ImageRecord {
    std::string path;
    std::string patient_id;
    std::string visit_id;
    pasi::RegionId region = pasi::RegionId::HeadNeck;
    int slot_index = 0;
    std::optional<int> crop_index; // only set for in-memory 4-crop expansion
};

struct VisitLabels {
    std::array<double, 4> regional{}; // indexed by RegionId
    double total = 0.0;
};

inline std::string visit_key(const std::string& patient_id, const std::string& visit_id) {
    return patient_id + "/" + visit_id;
}

struct DatasetManifest {
    std::vector<std::string> patients;
    std::vector<ImageRecord> records;
    std::map<std::string, VisitLabels> labels; // keyed by "<patient>/<visit>"
    std::map<std::string, Split> split;        // optional, keyed by patient
    std::filesystem::path base_dir;            // directory image paths resolve against

    std::filesystem::path resolve(const std::string& relative_path) const {
        return base_dir / relative_path;
    }
};

// Parses and validates a manifest JSON document. Referenced image files
// must exist; duplicate (patient, visit, region, slot) tuples, slot
// overflow, and labeled visits without images are rejected.
DatasetManifest load_manifest(const std::filesystem::path& path);

// Serializes with stable key order so identical manifests are byte-identical.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Structural checks shared by load and the generator.
void validate_manifest(const DatasetManifest& manifest, bool check_files);

// Deterministic patient-level split: every patient's visits land wholly in
// one part and part sizes match the ratios to within one patient.
struct SplitRatios {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;
};

std::array<DatasetManifest, 3> split_by_patient(const DatasetManifest& manifest,
                                                const SplitRatios& ratios, uint64_t seed);

// Restricts a manifest to the patients carrying the given split tag.
DatasetManifest filter_split(const DatasetManifest& manifest, Split split);

} // namespace psonet::dataio
