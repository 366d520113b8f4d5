#include "vlq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>

#include <Eigen/Core>
#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

#include "vlq/error.hpp"

namespace vlq {

namespace {

void check_pair(const std::vector<double>& x, const std::vector<double>& y, const char* what) {
    if (x.size() != y.size()) {
        throw DimensionError(std::string(what) + ": lengths " + std::to_string(x.size()) + " and " +
                             std::to_string(y.size()));
    }
    if (x.size() < 2) {
        throw DimensionError(std::string(what) + ": need at least 2 samples");
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
            throw NumericalError(std::string(what) + ": non-finite value at index " + std::to_string(i));
        }
    }
}

// Sorts `v` ascending and returns the number of strictly inverted pairs.
std::int64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::int64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            swaps += static_cast<std::int64_t>(mid - i);
            buf[k++] = v[j++];
        } else {
            buf[k++] = v[i++];
        }
    }
    while (i < mid) buf[k++] = v[i++];
    while (j < hi) buf[k++] = v[j++];
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return swaps;
}

// Sum of t(t-1)/2 over runs of equal values in a sorted range.
template <typename Eq>
std::int64_t tied_pairs(std::size_t n, Eq equal) {
    std::int64_t total = 0;
    std::int64_t run = 1;
    for (std::size_t i = 1; i < n; ++i) {
        if (equal(i - 1, i)) {
            ++run;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    return total + run * (run - 1) / 2;
}

} // namespace

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i + 1;
        while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
        // positions i+1 .. j (1-based) share their mean
        const double r = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
        i = j;
    }
    return ranks;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    check_pair(x, y, "pearson");
    const double n = static_cast<double>(x.size());
    double sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
    }
    const double mx = sx / n;
    const double my = sy / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw NumericalError("correlation undefined: constant input");
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double srcc(const std::vector<double>& x, const std::vector<double>& y) {
    check_pair(x, y, "srcc");
    return pearson(average_ranks(x), average_ranks(y));
}

double krcc(const std::vector<double>& x, const std::vector<double>& y) {
    check_pair(x, y, "krcc");
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
    });

    const std::int64_t n1 = tied_pairs(n, [&](std::size_t a, std::size_t b) { return x[idx[a]] == x[idx[b]]; });
    const std::int64_t n3 = tied_pairs(n, [&](std::size_t a, std::size_t b) {
        return x[idx[a]] == x[idx[b]] && y[idx[a]] == y[idx[b]];
    });

    std::vector<double> ys(n);
    for (std::size_t i = 0; i < n; ++i) ys[i] = y[idx[i]];
    std::vector<double> buf(n);
    const std::int64_t swaps = merge_count(ys, buf, 0, n);
    const std::int64_t n2 = tied_pairs(n, [&](std::size_t a, std::size_t b) { return ys[a] == ys[b]; });

    const std::int64_t n0 = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(n - 1) / 2;
    const std::int64_t s = n0 - n1 - n2 + n3 - 2 * swaps;
    if (n0 == n1 || n0 == n2) {
        throw NumericalError("krcc undefined: all values tied");
    }
    const double denom = std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
    return std::clamp(static_cast<double>(s) / denom, -1.0, 1.0);
}

double LogisticFit::operator()(double x) const {
    return beta2 + (beta1 - beta2) / (1.0 + std::exp(-(x - beta3) / std::abs(beta4)));
}

namespace {

struct LogisticResidual {
    using Scalar = double;
    using InputType = Eigen::VectorXd;
    using ValueType = Eigen::VectorXd;
    using JacobianType = Eigen::MatrixXd;
    enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

    const std::vector<double>* x;
    const std::vector<double>* y;

    int inputs() const { return 4; }
    int values() const { return static_cast<int>(x->size()); }

    int operator()(const Eigen::VectorXd& b, Eigen::VectorXd& r) const {
        const LogisticFit f{b[0], b[1], b[2], b[3]};
        for (std::size_t i = 0; i < x->size(); ++i) r[static_cast<Eigen::Index>(i)] = f((*x)[i]) - (*y)[i];
        return 0;
    }
};

} // namespace

LogisticFit fit_logistic4(const std::vector<double>& x, const std::vector<double>& y) {
    check_pair(x, y, "fit_logistic4");
    const auto [ymin, ymax] = std::minmax_element(y.begin(), y.end());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mx) * (v - mx);
    double sd = std::sqrt(var / static_cast<double>(x.size()));
    if (!(sd > 0.0)) sd = 1.0;

    Eigen::VectorXd b(4);
    b << *ymax, *ymin, mx, sd;
    LogisticResidual functor{&x, &y};
    Eigen::NumericalDiff<LogisticResidual> numeric(functor);
    Eigen::LevenbergMarquardt<Eigen::NumericalDiff<LogisticResidual>> lm(numeric);
    lm.parameters.maxfev = 2000;
    lm.minimize(b);
    LogisticFit fit{b[0], b[1], b[2], b[3]};
    if (!std::isfinite(fit.beta1) || !std::isfinite(fit.beta2) || !std::isfinite(fit.beta3) ||
        !std::isfinite(fit.beta4) || fit.beta4 == 0.0) {
        throw NumericalError("logistic fit diverged");
    }
    return fit;
}

double plcc(const std::vector<double>& x, const std::vector<double>& y, bool logistic_fit) {
    check_pair(x, y, "plcc");
    if (!logistic_fit) {
        return pearson(x, y);
    }
    const LogisticFit f = fit_logistic4(x, y);
    std::vector<double> mapped(x.size());
    std::transform(x.begin(), x.end(), mapped.begin(), f);
    return pearson(mapped, y);
}

CorrelationTriple correlate(const std::vector<double>& predictions, const std::vector<double>& targets,
                            bool logistic_plcc) {
    return {srcc(predictions, targets), plcc(predictions, targets, logistic_plcc), krcc(predictions, targets),
            predictions.size()};
}

CorrelationReport aggregate(const std::vector<CorrelationTriple>& triples) {
    if (triples.empty()) {
        throw ConfigError("evaluate: no repeats");
    }
    CorrelationReport r;
    r.repeats = triples;
    const double k = static_cast<double>(triples.size());
    for (const auto& t : triples) {
        r.mean.srcc += t.srcc;
        r.mean.plcc += t.plcc;
        r.mean.krcc += t.krcc;
        r.mean.n += t.n;
    }
    r.mean.srcc /= k;
    r.mean.plcc /= k;
    r.mean.krcc /= k;
    r.mean.n /= triples.size();
    r.stddev.n = r.mean.n;
    if (triples.size() > 1) {
        for (const auto& t : triples) {
            r.stddev.srcc += (t.srcc - r.mean.srcc) * (t.srcc - r.mean.srcc);
            r.stddev.plcc += (t.plcc - r.mean.plcc) * (t.plcc - r.mean.plcc);
            r.stddev.krcc += (t.krcc - r.mean.krcc) * (t.krcc - r.mean.krcc);
        }
        r.stddev.srcc = std::sqrt(r.stddev.srcc / (k - 1.0));
        r.stddev.plcc = std::sqrt(r.stddev.plcc / (k - 1.0));
        r.stddev.krcc = std::sqrt(r.stddev.krcc / (k - 1.0));
    }
    return r;
}

CorrelationReport evaluate(const std::vector<RepeatRun>& runs, bool logistic_plcc) {
    if (runs.empty()) {
        throw ConfigError("evaluate: no repeats");
    }
    std::vector<CorrelationTriple> triples;
    for (const auto& run : runs) triples.push_back(correlate(run.predictions, run.targets, logistic_plcc));
    return aggregate(triples);
}

nlohmann::json CorrelationReport::to_json() const {
    auto triple = [](const CorrelationTriple& t) {
        return nlohmann::json{{"srcc", t.srcc}, {"plcc", t.plcc}, {"krcc", t.krcc}, {"n", t.n}};
    };
    nlohmann::json j;
    j["repeats"] = nlohmann::json::array();
    for (const auto& t : repeats) j["repeats"].push_back(triple(t));
    j["mean"] = triple(mean);
    j["stddev"] = triple(stddev);
    return j;
}

void write_report_csv(std::ostream& out, const CorrelationReport& report) {
    out << "repeat,srcc,plcc,krcc,n\n";
    out.precision(10);
    for (std::size_t i = 0; i < report.repeats.size(); ++i) {
        const auto& t = report.repeats[i];
        out << i << ',' << t.srcc << ',' << t.plcc << ',' << t.krcc << ',' << t.n << '\n';
    }
    out << "mean," << report.mean.srcc << ',' << report.mean.plcc << ',' << report.mean.krcc << ',' << report.mean.n
        << '\n';
    out << "std," << report.stddev.srcc << ',' << report.stddev.plcc << ',' << report.stddev.krcc << ','
        << report.stddev.n << '\n';
}

std::vector<GroupCorrelation> alignment_perception_analysis(const std::vector<SampleRecord>& records,
                                                            std::ostream* warnings) {
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
    std::vector<double> all_a, all_p;
    std::size_t with_align = 0;
    for (const auto& r : records) {
        auto& g = groups[r.generator];
        if (!r.mos_align) continue;
        ++with_align;
        g.first.push_back(*r.mos_align);
        g.second.push_back(r.mos_percept);
        all_a.push_back(*r.mos_align);
        all_p.push_back(r.mos_percept);
    }
    if (with_align == 0) {
        throw ConfigError("analysis needs alignment MOS values; none present");
    }
    std::vector<GroupCorrelation> rows;
    auto add = [&](const std::string& name, const std::vector<double>& a, const std::vector<double>& p) {
        if (a.size() < 2) {
            if (warnings) *warnings << "warning: group '" << name << "' has " << a.size() << " samples, skipped\n";
            return;
        }
        try {
            rows.push_back({name, a.size(), srcc(a, p)});
        } catch (const NumericalError& e) {
            if (warnings) *warnings << "warning: group '" << name << "' skipped: " << e.what() << '\n';
        }
    };
    for (const auto& [name, g] : groups) add(name, g.first, g.second);
    add("overall", all_a, all_p);
    return rows;
}

void write_analysis_csv(std::ostream& out, const std::vector<GroupCorrelation>& rows) {
    out << "generator,n,srcc\n";
    out.precision(10);
    for (const auto& r : rows) out << r.group << ',' << r.n << ',' << r.srcc << '\n';
}

} // namespace vlq
