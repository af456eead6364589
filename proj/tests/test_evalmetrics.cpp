#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <cmath>

#include "psonet/errors.hpp"
#include "psonet/evalmetrics.hpp"
#include "psonet/rng.hpp"
#include "test_util.hpp"

using namespace psonet;
using namespace psonet::evalmetrics;

namespace {

RatingPairs make_pairs(const std::vector<double>& a, const std::vector<double>& b) {
    RatingPairs pairs;
    for (size_t i = 0; i < a.size(); ++i) {
        pairs.subjects.push_back({"s" + std::to_string(i), a[i], b[i]});
    }
    return pairs;
}

// Textbook two-way ANOVA oracle: mean squares from the sums-of-squares
// decomposition (SSE = SST - SSR - SSC), long-double accumulation. Coded
// separately from the implementation's residual route.
long double oracle_icc21(const std::vector<std::array<double, 2>>& matrix) {
    const size_t n = matrix.size();
    const long double k = 2.0L;
    long double grand = 0.0L;
    for (const auto& row : matrix) grand += row[0] + row[1];
    grand /= (k * n);

    long double ss_total = 0.0L, ss_rows = 0.0L, ss_cols = 0.0L;
    long double col0 = 0.0L, col1 = 0.0L;
    for (const auto& row : matrix) {
        col0 += row[0];
        col1 += row[1];
        const long double row_mean = (row[0] + row[1]) / 2.0L;
        ss_rows += k * (row_mean - grand) * (row_mean - grand);
        ss_total += (row[0] - grand) * (row[0] - grand) + (row[1] - grand) * (row[1] - grand);
    }
    col0 /= n;
    col1 /= n;
    ss_cols = n * ((col0 - grand) * (col0 - grand) + (col1 - grand) * (col1 - grand));
    const long double ss_err = ss_total - ss_rows - ss_cols;

    const long double msr = ss_rows / (n - 1);
    const long double msc = ss_cols / (k - 1);
    const long double mse = ss_err / ((n - 1) * (k - 1));
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n);
}

} // namespace

TEST_CASE("mae and std basics plus the scalar oracle") {
    auto identical = make_pairs({1, 2, 3}, {1, 2, 3});
    auto [m0, s0] = mae_std(identical);
    CHECK(m0 == 0.0);
    CHECK(s0 == 0.0);

    auto crossed = make_pairs({0, 10}, {10, 0});
    auto [m1, s1] = mae_std(crossed);
    CHECK(m1 == 10.0);
    CHECK(s1 == 0.0);

    Rng rng(8);
    std::vector<double> a(50), b(50);
    for (size_t i = 0; i < a.size(); ++i) {
        a[i] = rng.uniform(0, 72);
        b[i] = rng.uniform(0, 72);
    }
    // Scalar-loop oracle.
    double mean = 0.0;
    for (size_t i = 0; i < a.size(); ++i) mean += std::fabs(a[i] - b[i]);
    mean /= 50.0;
    double var = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = std::fabs(a[i] - b[i]) - mean;
        var += d * d;
    }
    auto [m2, s2] = mae_std(make_pairs(a, b));
    CHECK(m2 == doctest::Approx(mean).epsilon(1e-12));
    CHECK(s2 == doctest::Approx(std::sqrt(var / 50.0)).epsilon(1e-12));

    // Symmetry and scale behavior.
    auto [mf, sf] = mae_std(make_pairs(b, a));
    CHECK(mf == m2);
    std::vector<double> ka(a), kb(b);
    for (auto& v : ka) v *= 3.0;
    for (auto& v : kb) v *= 3.0;
    auto [mk, sk] = mae_std(make_pairs(ka, kb));
    CHECK(mk == doctest::Approx(3.0 * m2).epsilon(1e-12));

    CHECK_THROWS_AS(mae_std(RatingPairs{}), ValidationError);
}

TEST_CASE("icc on hand-computed fixtures") {
    SUBCASE("identical columns agree perfectly") {
        auto result = icc(make_pairs({1, 2, 3, 4, 5}, {1, 2, 3, 4, 5}));
        CHECK(result.value == 1.0);
        CHECK(result.ci_high == 1.0);
        CHECK(result.variant == "ICC(2,1)");
    }
    SUBCASE("constant shift fixture equals the by-hand mean squares") {
        // Rows (i, i+1), i=1..4: MSR=10/3, MSC=2, MSE=0 => ICC = 10/13.
        auto result = icc(make_pairs({1, 2, 3, 4}, {2, 3, 4, 5}));
        CHECK(result.value == doctest::Approx(10.0 / 13.0).epsilon(1e-12));
        CHECK(result.ci_low <= result.value);
        CHECK(result.ci_high >= result.value);
    }
    SUBCASE("constant columns are an undefined-variance error") {
        CHECK_THROWS_WITH_AS(icc(make_pairs({3, 3, 3, 3}, {5, 5, 5, 5})),
                             doctest::Contains("between-subject variance"), ValidationError);
    }
    SUBCASE("fewer than 3 subjects rejected") {
        CHECK_THROWS_AS(icc(make_pairs({1, 2}, {1, 2})), ValidationError);
    }
}

TEST_CASE("icc is symmetric in its arguments") {
    Rng rng(19);
    for (int trial = 0; trial < 10; ++trial) {
        const size_t n = 4 + rng.uniform_int(0, 10);
        std::vector<double> a(n), b(n);
        for (size_t i = 0; i < n; ++i) {
            a[i] = rng.uniform(0, 30);
            b[i] = rng.uniform(0, 30);
        }
        const auto ab = icc(make_pairs(a, b));
        const auto ba = icc(make_pairs(b, a));
        CHECK(ab.value == ba.value);
    }
}

TEST_CASE("absolute agreement punishes constant offsets monotonically") {
    const std::vector<double> base = {2, 5, 9, 14, 20, 27};
    double prev = 1.0;
    for (double offset : {0.5, 1.0, 2.0, 4.0}) {
        std::vector<double> shifted = base;
        for (auto& v : shifted) v += offset;
        const auto result = icc(make_pairs(base, shifted));
        CHECK(result.value < prev);
        prev = result.value;
    }
    CHECK(prev < 1.0);
}

TEST_CASE("fifty random matrices match the textbook oracle within 1e-9") {
    Rng rng(2025);
    int degenerate = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const size_t n = 3 + rng.uniform_int(0, 27);
        std::vector<double> a(n), b(n);
        std::vector<std::array<double, 2>> matrix(n);
        for (size_t i = 0; i < n; ++i) {
            a[i] = rng.uniform(0, 72);
            b[i] = std::clamp(a[i] + rng.normal() * rng.uniform(0.5, 6.0), -20.0, 90.0);
            matrix[i] = {a[i], b[i]};
        }
        const auto result = icc(make_pairs(a, b));
        const double oracle = static_cast<double>(oracle_icc21(matrix));
        if (!std::isfinite(oracle)) {
            ++degenerate;
            continue;
        }
        CHECK(std::abs(result.value - oracle) < 1e-9);
        CHECK(result.ci_low <= result.value);
        CHECK(result.ci_high >= result.value);
        CHECK(result.value <= 1.0);
        CHECK(result.value >= -1.0);
    }
    CHECK(degenerate == 0);
}

TEST_CASE("bootstrap interval brackets the estimate") {
    Rng rng(31);
    std::vector<double> a(20), b(20);
    for (size_t i = 0; i < a.size(); ++i) {
        a[i] = rng.uniform(0, 40);
        b[i] = a[i] + rng.normal() * 2.0;
    }
    const auto f_based = icc(make_pairs(a, b));
    const auto boot = icc(make_pairs(a, b), 0.95, CiMethod::Bootstrap);
    CHECK(boot.value == f_based.value);
    CHECK(boot.ci_low <= boot.value);
    CHECK(boot.ci_high >= boot.value);
    CHECK(boot.ci_high - boot.ci_low < 1.0);
}

TEST_CASE("f quantiles match standard table values") {
    CHECK(f_quantile(0.95, 1, 1) == doctest::Approx(161.4476).epsilon(1e-3));
    CHECK(f_quantile(0.95, 5, 10) == doctest::Approx(3.3258).epsilon(1e-3));
    CHECK(f_quantile(0.975, 10, 20) == doctest::Approx(2.7737).epsilon(1e-3));

    // Self-consistency on assorted dof.
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const double d1 = rng.uniform(1, 40);
        const double d2 = rng.uniform(1, 40);
        const double p = rng.uniform(0.05, 0.99);
        const double q = f_quantile(p, d1, d2);
        CHECK(q > 0.0);
        CHECK(std::isfinite(q));
    }
}

TEST_CASE("spearman rank correlation") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {9, 7, 5, 3}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3, 4}, {5, 5, 5, 5}) == 0.0);
    CHECK(spearman({1, 1, 2, 2}, {1, 1, 2, 2}) == doctest::Approx(1.0));
}

TEST_CASE("report generation") {
    ScoreTable model = {{"p1/v0", 3.0}, {"p2/v0", 7.0}, {"p3/v0", 11.0}, {"p4/v0", 2.0}};
    ScoreTable rater_a = model;
    ScoreTable rater_b = {{"p1/v0", 4.0}, {"p2/v0", 6.5}, {"p3/v0", 12.0}, {"p4/v0", 2.5}};

    auto report = build_report(model, {{"rater_A", rater_a}, {"rater_B", rater_b}});
    REQUIRE(report.rows.size() == 3);
    CHECK(report.rows[0].comparison == "model_vs_rater_A");
    CHECK(report.rows[0].icc.value == 1.0);
    CHECK(report.rows[0].mae == 0.0);
    CHECK(report.rows[1].comparison == "model_vs_rater_B");
    CHECK(report.rows[2].comparison == "rater_A_vs_rater_B");

    const auto text = render_report_table(report);
    CHECK(text.find("model_vs_rater_A") != std::string::npos);
    CHECK(text.find("ICC") != std::string::npos);
    const auto json_text = report_to_json(report);
    CHECK(json_text.find("\"icc\"") != std::string::npos);

    SUBCASE("subject mismatch names the id") {
        ScoreTable missing = rater_b;
        missing.erase("p3/v0");
        CHECK_THROWS_WITH_AS(build_report(model, {{"rater_B", missing}}),
                             doctest::Contains("p3/v0"), ValidationError);
    }
}

TEST_CASE("score csv round-trips") {
    testutil::TempDir tmp("scores");
    ScoreTable table = {{"p1/v0", 3.25}, {"p2/v1", 0.0}};
    save_score_csv(tmp.path() / "scores.csv", table);
    auto loaded = load_score_csv(tmp.path() / "scores.csv");
    CHECK(loaded == table);
    CHECK_THROWS_AS(load_score_csv(tmp.path() / "missing.csv"), ValidationError);
}
