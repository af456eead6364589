#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "psonet/errors.hpp"
#include "psonet/pasi.hpp"
#include "psonet/rng.hpp"

using namespace psonet;
using namespace psonet::pasi;

TEST_CASE("regional score matches the paper endpoints") {
    CHECK(regional_pasi({4, 4, 4, 6}, RegionId::Trunk).value == 72.0);
    CHECK(regional_pasi({0, 0, 0, 0}, RegionId::HeadNeck).value == 0.0);
    CHECK(regional_pasi({2, 3, 1, 4}, RegionId::UpperExtremities).value == 24.0);
}

TEST_CASE("regional score equals the brute-force oracle on the full ordinal grid") {
    // Independent oracle: direct (a+b+c)*d over all 5*5*5*7 = 875 tuples.
    int checked = 0;
    for (int a = 0; a <= 4; ++a) {
        for (int b = 0; b <= 4; ++b) {
            for (int c = 0; c <= 4; ++c) {
                for (int d = 0; d <= 6; ++d) {
                    const double oracle = static_cast<double>((a + b + c) * d);
                    const auto got = regional_pasi({a, b, c, d}, RegionId::Trunk);
                    CHECK(got.value == oracle);
                    ++checked;
                }
            }
        }
    }
    CHECK(checked == 875);
}

TEST_CASE("out-of-range ordinals name the offending field") {
    CHECK_THROWS_WITH_AS(regional_pasi({5, 0, 0, 0}, RegionId::Trunk),
                         doctest::Contains("erythema"), ValidationError);
    CHECK_THROWS_WITH_AS(regional_pasi({0, -1, 0, 0}, RegionId::Trunk),
                         doctest::Contains("induration"), ValidationError);
    CHECK_THROWS_WITH_AS(regional_pasi({0, 0, 9, 0}, RegionId::Trunk),
                         doctest::Contains("desquamation"), ValidationError);
    CHECK_THROWS_WITH_AS(regional_pasi({0, 0, 0, 7}, RegionId::Trunk),
                         doctest::Contains("area_score"), ValidationError);
}

namespace {

std::vector<RegionalPasi> all_regions_at(double hn, double ue, double le, double tr) {
    return {RegionalPasi{hn, RegionId::HeadNeck}, RegionalPasi{ue, RegionId::UpperExtremities},
            RegionalPasi{le, RegionId::LowerExtremities}, RegionalPasi{tr, RegionId::Trunk}};
}

} // namespace

TEST_CASE("weighted total") {
    CHECK(total_pasi(all_regions_at(10, 10, 10, 10)).value == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(total_pasi(all_regions_at(10, 20, 5, 8)).value == doctest::Approx(9.4).epsilon(1e-12));
    CHECK(total_pasi(all_regions_at(72, 72, 72, 72)).value ==
          doctest::Approx(72.0).epsilon(1e-12));
}

TEST_CASE("region weights sum to one and image counts are positive") {
    double sum = 0.0;
    for (auto region : kAllRegions) {
        sum += region_weight(region);
        CHECK(region_image_count(region) > 0);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("total rejects missing or duplicate regions") {
    auto scores = all_regions_at(1, 2, 3, 4);
    scores.pop_back();
    CHECK_THROWS_AS(total_pasi(scores), ValidationError);

    scores = all_regions_at(1, 2, 3, 4);
    scores[3].region = RegionId::HeadNeck;
    CHECK_THROWS_AS(total_pasi(scores), ValidationError);
}

TEST_CASE("area fraction binning") {
    CHECK(area_fraction_to_score(0.0) == 0);
    CHECK(area_fraction_to_score(1.0) == 6);
    CHECK(area_fraction_to_score(0.35) == 3);

    CHECK_THROWS_AS(area_fraction_to_score(-0.01), ValidationError);
    CHECK_THROWS_AS(area_fraction_to_score(1.01), ValidationError);
}

TEST_CASE("area binning is monotone and surjective") {
    int prev = 0;
    bool seen[7] = {};
    for (int i = 0; i <= 10000; ++i) {
        const int score = area_fraction_to_score(i / 10000.0);
        CHECK(score >= prev);
        prev = score;
        seen[score] = true;
    }
    for (bool s : seen) CHECK(s);
}

TEST_CASE("monotonicity in every component") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        SeverityComponents c{static_cast<int>(rng.uniform_int(0, 4)),
                             static_cast<int>(rng.uniform_int(0, 4)),
                             static_cast<int>(rng.uniform_int(0, 4)),
                             static_cast<int>(rng.uniform_int(0, 6))};
        const double base = regional_pasi(c, RegionId::Trunk).value;
        auto bumped = c;
        if (c.erythema < 4) {
            bumped.erythema++;
            CHECK(regional_pasi(bumped, RegionId::Trunk).value >= base);
        }
        bumped = c;
        if (c.induration < 4) {
            bumped.induration++;
            CHECK(regional_pasi(bumped, RegionId::Trunk).value >= base);
        }
        bumped = c;
        if (c.desquamation < 4) {
            bumped.desquamation++;
            CHECK(regional_pasi(bumped, RegionId::Trunk).value >= base);
        }
        bumped = c;
        if (c.area_score < 6) {
            bumped.area_score++;
            CHECK(regional_pasi(bumped, RegionId::Trunk).value >= base);
        }
    }
}

TEST_CASE("total stays inside [0, 72] and grows with any regional score") {
    Rng rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        auto scores = all_regions_at(rng.uniform(0, 72), rng.uniform(0, 72), rng.uniform(0, 72),
                                     rng.uniform(0, 72));
        const double total = total_pasi(scores).value;
        CHECK(total >= 0.0);
        CHECK(total <= 72.0);

        const size_t which = static_cast<size_t>(rng.uniform_int(0, 3));
        auto bumped = scores;
        bumped[which].value = std::min(72.0, bumped[which].value + rng.uniform(0, 5));
        CHECK(total_pasi(bumped).value >= total - 1e-12);
    }
}

TEST_CASE("region codes round-trip") {
    for (auto region : kAllRegions) {
        CHECK(region_from_code(region_code(region)) == region);
    }
    CHECK_THROWS_AS(region_from_code("XX"), ValidationError);
}
