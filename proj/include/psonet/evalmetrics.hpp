#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace psonet::evalmetrics {

// Paired scores for one comparison (two raters, or model vs rater).
struct RatingPairs {
    struct Subject {
        std::string id;
        double score_a = 0.0;
        double score_b = 0.0;
    };
    std::vector<Subject> subjects;
    std::string source_a = "a";
    std::string source_b = "b";
};

// Mean and population standard deviation of |a - b|.
std::pair<double, double> mae_std(const RatingPairs& pairs);

struct IccResult {
    double value = 0.0;
    double ci_low = -1.0;
    double ci_high = 1.0;
    size_t n_subjects = 0;
    std::string variant = "ICC(2,1)";
};

enum class CiMethod { FDistribution, Bootstrap };

// Two-way random-effects, absolute-agreement, single-measure ICC with a
// confidence interval from F-distribution bounds (default) or a 2000-
// resample percentile bootstrap. Zero between-subject variance is an
// error, never a silent zero.
IccResult icc(const RatingPairs& pairs, double confidence = 0.95,
              CiMethod method = CiMethod::FDistribution);

// Quantile of the F distribution, exposed for the statistics tests.
double f_quantile(double p, double d1, double d2);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct ReportRow {
    std::string comparison; // e.g. "model_vs_rater_A"
    IccResult icc;
    double mae = 0.0;
    double std_dev = 0.0;
};

struct MetricsReport {
    std::vector<ReportRow> rows;
    std::string config_echo; // JSON text of the run configuration
};

// Scores keyed by subject id ("<patient>/<visit>").
using ScoreTable = std::map<std::string, double>;

// model vs every rater plus each rater-vs-rater pair. All tables must
// cover exactly the same subjects.
MetricsReport build_report(const ScoreTable& model_scores,
                           const std::vector<std::pair<std::string, ScoreTable>>& raters,
                           double confidence = 0.95,
                           CiMethod method = CiMethod::FDistribution);

// CSV "subject_id,score" with an optional header line.
ScoreTable load_score_csv(const std::filesystem::path& path);
void save_score_csv(const std::filesystem::path& path, const ScoreTable& table);

std::string report_to_json(const MetricsReport& report);
std::string render_report_table(const MetricsReport& report);

} // namespace psonet::evalmetrics
