#include "psonet/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "psonet/errors.hpp"
#include "psonet/rng.hpp"

namespace psonet::evalmetrics {

using nlohmann::json;

std::pair<double, double> mae_std(const RatingPairs& pairs) {
    if (pairs.subjects.empty()) throw ValidationError("mae_std: no subjects");
    std::vector<double> diffs;
    diffs.reserve(pairs.subjects.size());
    for (const auto& s : pairs.subjects) {
        if (!std::isfinite(s.score_a) || !std::isfinite(s.score_b)) {
            throw ValidationError("mae_std: non-finite score for subject '" + s.id + "'");
        }
        diffs.push_back(std::abs(s.score_a - s.score_b));
    }
    const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) /
                        static_cast<double>(diffs.size());
    double var = 0.0;
    for (double d : diffs) var += (d - mean) * (d - mean);
    var /= static_cast<double>(diffs.size());
    return {mean, std::sqrt(var)};
}

// --- F distribution ---------------------------------------------------------

namespace {

// Regularized incomplete beta via the Lentz continued fraction.
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;

    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * betacf(a, b, x) / a;
    }
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double f_cdf(double x, double d1, double d2) {
    if (x <= 0.0) return 0.0;
    return incomplete_beta(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2));
}

} // namespace

double f_quantile(double p, double d1, double d2) {
    if (!(p > 0.0 && p < 1.0)) throw ValidationError("f_quantile: p must be in (0, 1)");
    if (!(d1 > 0.0) || !(d2 > 0.0)) throw ValidationError("f_quantile: dof must be positive");
    // Bisection on a bracketing interval; the CDF is monotone.
    double lo = 0.0, hi = 1.0;
    while (f_cdf(hi, d1, d2) < p) {
        hi *= 2.0;
        if (hi > 1e12) break;
    }
    for (int iter = 0; iter < 200; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (f_cdf(mid, d1, d2) < p) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

// --- ICC(2,1) ----------------------------------------------------------------

namespace {

struct MeanSquares {
    double msr = 0.0; // between subjects
    double msc = 0.0; // between raters
    double mse = 0.0; // residual
    size_t n = 0;     // subjects
    size_t k = 2;     // raters
    double scale = 0.0;
};

MeanSquares mean_squares(const RatingPairs& pairs) {
    const size_t n = pairs.subjects.size();
    constexpr size_t k = 2;
    MeanSquares ms;
    ms.n = n;

    double grand = 0.0;
    for (const auto& s : pairs.subjects) grand += s.score_a + s.score_b;
    grand /= static_cast<double>(n * k);

    double col_a = 0.0, col_b = 0.0;
    for (const auto& s : pairs.subjects) {
        col_a += s.score_a;
        col_b += s.score_b;
    }
    col_a /= static_cast<double>(n);
    col_b /= static_cast<double>(n);

    // Squares go through named temporaries so FMA contraction cannot make
    // the result depend on which column came first; icc(a,b) must equal
    // icc(b,a) bit for bit.
    double ss_rows = 0.0, ss_cols = 0.0, ss_err = 0.0;
    for (const auto& s : pairs.subjects) {
        const double row = 0.5 * (s.score_a + s.score_b);
        ss_rows += (row - grand) * (row - grand);
        const double resid_a = s.score_a - row - col_a + grand;
        const double resid_b = s.score_b - row - col_b + grand;
        const double sq_a = resid_a * resid_a;
        const double sq_b = resid_b * resid_b;
        ss_err += sq_a + sq_b;
    }
    const double dev_a = (col_a - grand) * (col_a - grand);
    const double dev_b = (col_b - grand) * (col_b - grand);
    ss_cols = dev_a + dev_b;

    ms.msr = k * ss_rows / static_cast<double>(n - 1);
    ms.msc = static_cast<double>(n) * ss_cols / static_cast<double>(k - 1);
    ms.mse = ss_err / static_cast<double>((n - 1) * (k - 1));
    ms.scale = 1.0 + grand * grand;
    return ms;
}

double icc_from_mean_squares(const MeanSquares& ms) {
    const double k = static_cast<double>(ms.k);
    const double n = static_cast<double>(ms.n);
    const double denom = ms.msr + (k - 1.0) * ms.mse + (k / n) * (ms.msc - ms.mse);
    return (ms.msr - ms.mse) / denom;
}

} // namespace

IccResult icc(const RatingPairs& pairs, double confidence, CiMethod method) {
    const size_t n = pairs.subjects.size();
    if (n < 3) throw ValidationError("icc: need at least 3 subjects, got " + std::to_string(n));
    if (!(confidence > 0.0 && confidence < 1.0)) {
        throw ValidationError("icc: confidence must be in (0, 1)");
    }
    for (const auto& s : pairs.subjects) {
        if (!std::isfinite(s.score_a) || !std::isfinite(s.score_b)) {
            throw ValidationError("icc: non-finite score for subject '" + s.id + "'");
        }
    }

    const auto ms = mean_squares(pairs);
    const double var_floor = 1e-12 * ms.scale;
    if (ms.msr <= var_floor) {
        throw ValidationError("icc undefined: between-subject variance is zero (" +
                              pairs.source_a + " vs " + pairs.source_b + ")");
    }

    IccResult result;
    result.n_subjects = n;
    result.value = icc_from_mean_squares(ms);

    if (ms.mse <= var_floor && ms.msc <= var_floor) {
        // Perfect absolute agreement; the interval degenerates.
        result.value = 1.0;
        result.ci_low = 1.0;
        result.ci_high = 1.0;
        return result;
    }

    if (method == CiMethod::FDistribution) {
        const double k = 2.0, dn = static_cast<double>(n);
        const double alpha = 1.0 - confidence;
        const double r = result.value;
        const double a = k * r / (dn * (1.0 - r));
        const double b = 1.0 + k * r * (dn - 1.0) / (dn * (1.0 - r));
        const double num = a * ms.msc + b * ms.mse;
        const double v = num * num /
                         ((a * ms.msc) * (a * ms.msc) / (k - 1.0) +
                          (b * ms.mse) * (b * ms.mse) / ((dn - 1.0) * (k - 1.0)));
        const double fl = f_quantile(1.0 - alpha / 2.0, dn - 1.0, v);
        const double fu = f_quantile(1.0 - alpha / 2.0, v, dn - 1.0);
        const double cross = k * ms.msc + (k * dn - k - dn) * ms.mse;
        result.ci_low = dn * (ms.msr - fl * ms.mse) / (fl * cross + dn * ms.msr);
        result.ci_high = dn * (fu * ms.msr - ms.mse) / (cross + dn * fu * ms.msr);
    } else {
        // Percentile bootstrap over subjects, fixed seed for repeatability.
        constexpr int kResamples = 2000;
        Rng rng(0xb007);
        std::vector<double> values;
        values.reserve(kResamples);
        RatingPairs resample = pairs;
        for (int rep = 0; rep < kResamples; ++rep) {
            for (size_t i = 0; i < n; ++i) {
                resample.subjects[i] =
                    pairs.subjects[static_cast<size_t>(rng.uniform_int(0, n - 1))];
            }
            const auto rms = mean_squares(resample);
            if (rms.msr <= 1e-12 * rms.scale) continue; // degenerate draw
            values.push_back(icc_from_mean_squares(rms));
        }
        if (values.size() < 100) {
            throw ValidationError("icc bootstrap: too many degenerate resamples");
        }
        std::sort(values.begin(), values.end());
        const double alpha = 1.0 - confidence;
        const auto pick = [&](double q) {
            const double pos = q * static_cast<double>(values.size() - 1);
            const size_t lo = static_cast<size_t>(pos);
            const size_t hi = std::min(lo + 1, values.size() - 1);
            const double frac = pos - static_cast<double>(lo);
            return values[lo] * (1.0 - frac) + values[hi] * frac;
        };
        result.ci_low = pick(alpha / 2.0);
        result.ci_high = pick(1.0 - alpha / 2.0);
    }

    result.ci_low = std::clamp(result.ci_low, -1.0, 1.0);
    result.ci_high = std::clamp(result.ci_high, -1.0, 1.0);
    result.ci_low = std::min(result.ci_low, result.value);
    result.ci_high = std::max(result.ci_high, result.value);
    return result;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ValidationError("spearman: need two equal-length series of >= 2 points");
    }
    const auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n, 0.0);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (size_t t = i; t <= j; ++t) r[order[t]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if (vx == 0.0 || vy == 0.0) return 0.0;
    return cov / std::sqrt(vx * vy);
}

// --- Reports ------------------------------------------------------------------

namespace {

RatingPairs pair_tables(const ScoreTable& a, const ScoreTable& b, const std::string& name_a,
                        const std::string& name_b) {
    for (const auto& [id, _] : a) {
        if (!b.count(id)) {
            throw ValidationError("subject '" + id + "' present in " + name_a + " but missing in " +
                                  name_b);
        }
    }
    for (const auto& [id, _] : b) {
        if (!a.count(id)) {
            throw ValidationError("subject '" + id + "' present in " + name_b + " but missing in " +
                                  name_a);
        }
    }
    RatingPairs pairs;
    pairs.source_a = name_a;
    pairs.source_b = name_b;
    for (const auto& [id, score] : a) {
        pairs.subjects.push_back({id, score, b.at(id)});
    }
    return pairs;
}

} // namespace

MetricsReport build_report(const ScoreTable& model_scores,
                           const std::vector<std::pair<std::string, ScoreTable>>& raters,
                           double confidence, CiMethod method) {
    if (raters.empty()) throw ValidationError("build_report: no rater tables supplied");
    MetricsReport report;
    auto add_row = [&](const ScoreTable& a, const ScoreTable& b, const std::string& name_a,
                       const std::string& name_b) {
        const auto pairs = pair_tables(a, b, name_a, name_b);
        ReportRow row;
        row.comparison = name_a + "_vs_" + name_b;
        row.icc = icc(pairs, confidence, method);
        std::tie(row.mae, row.std_dev) = mae_std(pairs);
        report.rows.push_back(std::move(row));
    };

    for (const auto& [name, table] : raters) add_row(model_scores, table, "model", name);
    for (size_t i = 0; i < raters.size(); ++i) {
        for (size_t j = i + 1; j < raters.size(); ++j) {
            add_row(raters[i].second, raters[j].second, raters[i].first, raters[j].first);
        }
    }
    return report;
}

ScoreTable load_score_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open rating table: " + path.string());
    ScoreTable table;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw ValidationError("rating table " + path.string() + " line " +
                                  std::to_string(line_no) + ": expected 'subject_id,score'");
        }
        const std::string id = line.substr(0, comma);
        const std::string value = line.substr(comma + 1);
        if (line_no == 1 && id == "subject_id") continue; // header
        try {
            size_t used = 0;
            const double score = std::stod(value, &used);
            table[id] = score;
        } catch (const std::exception&) {
            throw ValidationError("rating table " + path.string() + " line " +
                                  std::to_string(line_no) + ": bad score '" + value + "'");
        }
    }
    if (table.empty()) throw ValidationError("rating table is empty: " + path.string());
    return table;
}

void save_score_csv(const std::filesystem::path& path, const ScoreTable& table) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write rating table: " + path.string());
    f << "subject_id,score\n";
    f.precision(17);
    for (const auto& [id, score] : table) f << id << "," << score << "\n";
}

std::string report_to_json(const MetricsReport& report) {
    json doc;
    doc["rows"] = json::array();
    for (const auto& row : report.rows) {
        json r;
        r["comparison"] = row.comparison;
        r["icc"] = row.icc.value;
        r["ci_low"] = row.icc.ci_low;
        r["ci_high"] = row.icc.ci_high;
        r["variant"] = row.icc.variant;
        r["n_subjects"] = row.icc.n_subjects;
        r["mae"] = row.mae;
        r["std"] = row.std_dev;
        doc["rows"].push_back(std::move(r));
    }
    if (!report.config_echo.empty()) {
        doc["config"] = json::parse(report.config_echo, nullptr, false);
    }
    return doc.dump(2);
}

std::string render_report_table(const MetricsReport& report) {
    std::ostringstream out;
    out << "Comparison                     ICC [CI95%]            MAE +- STD\n";
    out << "-----------------------------  ---------------------  --------------\n";
    for (const auto& row : report.rows) {
        char icc_buf[64], mae_buf[64];
        std::snprintf(icc_buf, sizeof(icc_buf), "%.3f [%.2f, %.2f]", row.icc.value,
                      row.icc.ci_low, row.icc.ci_high);
        std::snprintf(mae_buf, sizeof(mae_buf), "%.2f +- %.2f", row.mae, row.std_dev);
        out << row.comparison;
        for (size_t i = row.comparison.size(); i < 31; ++i) out << ' ';
        out << icc_buf;
        for (size_t i = std::string(icc_buf).size(); i < 23; ++i) out << ' ';
        out << mae_buf << "\n";
    }
    return out.str();
}

} // namespace psonet::evalmetrics
