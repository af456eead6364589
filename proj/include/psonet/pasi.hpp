#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace psonet::pasi {

// The four body regions scored by PASI, with their fixed combination
// weights and the number of photos an assessment set holds per region.
enum class RegionId { HeadNeck = 0, UpperExtremities = 1, LowerExtremities = 2, Trunk = 3 };

inline constexpr std::array<RegionId, 4> kAllRegions = {
    RegionId::HeadNeck, RegionId::UpperExtremities, RegionId::LowerExtremities, RegionId::Trunk};

constexpr double region_weight(RegionId r) {
    constexpr std::array<double, 4> w = {0.1, 0.2, 0.4, 0.3};
    return w[static_cast<size_t>(r)];
}

constexpr int region_image_count(RegionId r) {
    constexpr std::array<int, 4> n = {12, 18, 13, 10};
    return n[static_cast<size_t>(r)];
}

// Wire codes used in manifests, CSV output and directory layouts.
std::string_view region_code(RegionId r);
RegionId region_from_code(std::string_view code);

// Ordinal clinician sub-scores for one body region.
struct SeverityComponents {
    int erythema = 0;      // 0..4
    int induration = 0;    // 0..4
    int desquamation = 0;  // 0..4
    int area_score = 0;    // 0..6

    // Throws ValidationError naming the offending field.
    void validate() const;
};

struct RegionalPasi {
    double value = 0.0; // 0..72
    RegionId region = RegionId::HeadNeck;
};

struct AbsolutePasi {
    double value = 0.0; // 0..72
};

// (erythema + induration + desquamation) * area_score, exact in integer
// arithmetic before widening to double.
RegionalPasi regional_pasi(const SeverityComponents& components, RegionId region);

// Weighted sum over exactly one score per region. Missing or duplicate
// regions are structural errors.
AbsolutePasi total_pasi(const std::vector<RegionalPasi>& regional);

// Standard clinical binning of affected-surface fraction onto the 0..6
// ordinal scale: 0%, <10%, 10-29%, 30-49%, 50-69%, 70-89%, >=90%.
int area_fraction_to_score(double fraction);

} // namespace psonet::pasi
