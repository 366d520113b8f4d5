#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlq/data.hpp"

namespace vlq {

// Fractional ranks, 1-based; tied values share the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& v);

// Pearson correlation. Throws NumericalError when either input is constant.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

double srcc(const std::vector<double>& x, const std::vector<double>& y);

// Kendall tau-b, O(n log n).
double krcc(const std::vector<double>& x, const std::vector<double>& y);

struct LogisticFit {
    double beta1 = 0.0, beta2 = 0.0, beta3 = 0.0, beta4 = 1.0;
    double operator()(double x) const;
};

// Four-parameter logistic mapping of x onto y, least squares.
LogisticFit fit_logistic4(const std::vector<double>& x, const std::vector<double>& y);

// Pearson on raw values, or after the four-parameter logistic remap.
double plcc(const std::vector<double>& x, const std::vector<double>& y, bool logistic_fit = false);

struct CorrelationTriple {
    double srcc = 0.0;
    double plcc = 0.0;
    double krcc = 0.0;
    std::size_t n = 0;
};

CorrelationTriple correlate(const std::vector<double>& predictions, const std::vector<double>& targets,
                            bool logistic_plcc = false);

struct RepeatRun {
    std::vector<double> predictions;
    std::vector<double> targets;
};

struct CorrelationReport {
    std::vector<CorrelationTriple> repeats;
    CorrelationTriple mean;
    CorrelationTriple stddev; // sample standard deviation; zero for a single repeat

    nlohmann::json to_json() const;
};

CorrelationReport evaluate(const std::vector<RepeatRun>& runs, bool logistic_plcc = false);
CorrelationReport aggregate(const std::vector<CorrelationTriple>& triples);

// CSV: one row per repeat, then "mean" and "std" rows.
void write_report_csv(std::ostream& out, const CorrelationReport& report);

struct GroupCorrelation {
    std::string group;
    std::size_t n = 0;
    double srcc = 0.0;
};

// SRCC(mos_align, mos_percept) per generator, sorted by generator name, then
// an "overall" row. Groups with fewer than 2 usable samples are skipped with
// a warning.
std::vector<GroupCorrelation> alignment_perception_analysis(const std::vector<SampleRecord>& records,
                                                            std::ostream* warnings = nullptr);

void write_analysis_csv(std::ostream& out, const std::vector<GroupCorrelation>& rows);

} // namespace vlq
