#include "psonet/pasi.hpp"

#include <bitset>

#include "psonet/errors.hpp"

namespace psonet::pasi {

std::string_view region_code(RegionId r) {
    switch (r) {
        case RegionId::HeadNeck: return "HN";
        case RegionId::UpperExtremities: return "UE";
        case RegionId::LowerExtremities: return "LE";
        case RegionId::Trunk: return "TR";
    }
    throw ValidationError("unknown region id");
}

RegionId region_from_code(std::string_view code) {
    if (code == "HN") return RegionId::HeadNeck;
    if (code == "UE") return RegionId::UpperExtremities;
    if (code == "LE") return RegionId::LowerExtremities;
    if (code == "TR") return RegionId::Trunk;
    throw ValidationError("unknown region code '" + std::string(code) +
                          "' (expected HN, UE, LE or TR)");
}

namespace {

void check_range(int value, int lo, int hi, const char* field) {
    if (value < lo || value > hi) {
        throw ValidationError(std::string(field) + " must be in [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + "], got " + std::to_string(value));
    }
}

} // namespace

void SeverityComponents::validate() const {
    check_range(erythema, 0, 4, "erythema");
    check_range(induration, 0, 4, "induration");
    check_range(desquamation, 0, 4, "desquamation");
    check_range(area_score, 0, 6, "area_score");
}

RegionalPasi regional_pasi(const SeverityComponents& components, RegionId region) {
    components.validate();
    const int value = (components.erythema + components.induration + components.desquamation) *
                      components.area_score;
    return RegionalPasi{static_cast<double>(value), region};
}

AbsolutePasi total_pasi(const std::vector<RegionalPasi>& regional) {
    if (regional.size() != 4) {
        throw ValidationError("total_pasi expects exactly four regional scores, got " +
                              std::to_string(regional.size()));
    }
    std::bitset<4> seen;
    double total = 0.0;
    for (const auto& r : regional) {
        const auto idx = static_cast<size_t>(r.region);
        if (seen[idx]) {
            throw ValidationError("duplicate regional score for " +
                                  std::string(region_code(r.region)));
        }
        seen[idx] = true;
        if (r.value < 0.0 || r.value > 72.0) {
            throw ValidationError("regional PASI for " + std::string(region_code(r.region)) +
                                  " out of [0, 72]: " + std::to_string(r.value));
        }
        total += region_weight(r.region) * r.value;
    }
    return AbsolutePasi{total};
}

int area_fraction_to_score(double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ValidationError("area fraction must be in [0, 1], got " + std::to_string(fraction));
    }
    if (fraction == 0.0) return 0;
    if (fraction < 0.10) return 1;
    if (fraction < 0.30) return 2;
    if (fraction < 0.50) return 3;
    if (fraction < 0.70) return 4;
    if (fraction < 0.90) return 5;
    return 6;
}

} // namespace psonet::pasi
