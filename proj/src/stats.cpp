#include "mpum/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mpum {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw ShapeError("pearson: series lengths " + std::to_string(x.size()) + " and " + std::to_string(y.size()) +
                         " differ");
    const size_t n = x.size();
    if (n < 3) throw DataError("pearson: need at least 3 samples, got " + std::to_string(n));
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw DataError("pearson: non-finite sample");
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DataError("pearson: zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

FisherResult fisher_compare(double r_control, int64_t n_control, double r_patient, int64_t n_patient) {
    if (n_control <= 3 || n_patient <= 3)
        throw DataError("fisher_compare: cohort sizes must exceed 3, got " + std::to_string(n_control) + " and " +
                        std::to_string(n_patient));
    if (std::abs(r_control) >= 1.0 || std::abs(r_patient) >= 1.0)
        throw DataError("fisher_compare: |r| = 1 has no finite transform");
    FisherResult res;
    res.z_control = std::atanh(r_control);
    res.z_patient = std::atanh(r_patient);
    const double se =
        std::sqrt(1.0 / static_cast<double>(n_control - 3) + 1.0 / static_cast<double>(n_patient - 3));
    res.z_score = (res.z_control - res.z_patient) / se;
    res.p_value = 2.0 * (1.0 - normal_cdf(std::abs(res.z_score)));
    return res;
}

namespace {

// Numerical Recipes style continued fraction for I_x(a,b)
double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 1e-15, kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    throw NumericError("regularized_incomplete_beta: continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (a <= 0 || b <= 0) throw DataError("regularized_incomplete_beta: a and b must be positive");
    if (x < 0 || x > 1) throw DataError("regularized_incomplete_beta: x must lie in [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                                  b * std::log1p(-x));
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
    if (df <= 0) throw DataError("student_t_cdf: degrees of freedom must be positive");
    if (t == 0.0) return 0.5;
    const double x = df / (df + t * t);
    const double tail = regularized_incomplete_beta(df / 2.0, 0.5, x);  // P(|T| > |t|)
    return t > 0 ? 1.0 - tail / 2.0 : tail / 2.0;
}

WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) throw DataError("welch_t_test: need at least 2 samples per cohort");
    auto moments = [](const std::vector<double>& v) {
        double mean = 0;
        for (double x : v) {
            if (!std::isfinite(x)) throw DataError("welch_t_test: non-finite sample");
            mean += x;
        }
        mean /= static_cast<double>(v.size());
        double var = 0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= static_cast<double>(v.size() - 1);
        return std::pair<double, double>(mean, var);
    };
    const auto [ma, va] = moments(a);
    const auto [mb, vb] = moments(b);
    const double ra = va / static_cast<double>(a.size()), rb = vb / static_cast<double>(b.size());
    if (ra + rb == 0.0) throw DataError("welch_t_test: zero variance in both cohorts");

    WelchResult res;
    res.statistic = (ma - mb) / std::sqrt(ra + rb);
    res.df = (ra + rb) * (ra + rb) /
             (ra * ra / static_cast<double>(a.size() - 1) + rb * rb / static_cast<double>(b.size() - 1));
    if (res.statistic == 0.0) {
        res.p_value = 1.0;
    } else {
        res.p_value = regularized_incomplete_beta(res.df / 2.0, 0.5, res.df / (res.df + res.statistic * res.statistic));
    }
    return res;
}

void RoiSeries::validate(size_t min_subjects) const {
    if (cohort != "control" && cohort != "patient")
        throw DataError("RoiSeries: cohort must be control or patient, got '" + cohort + "'");
    if (values.size() < min_subjects)
        throw DataError("RoiSeries: " + cohort + " cohort has " + std::to_string(values.size()) +
                        " subjects, need at least " + std::to_string(min_subjects));
    if (roi_names.empty()) throw DataError("RoiSeries: no ROIs");
    for (const auto& row : values) {
        if (row.size() != roi_names.size())
            throw ShapeError("RoiSeries: a subject row has " + std::to_string(row.size()) + " values for " +
                             std::to_string(roi_names.size()) + " ROIs");
        for (double v : row)
            if (!std::isfinite(v)) throw DataError("RoiSeries: non-finite SUV entry");
    }
    for (const auto& name : roi_names) {
        auto it = roi_class.find(name);
        if (it == roi_class.end()) throw DataError("RoiSeries: ROI '" + name + "' has no class");
        if (it->second != "brain" && it->second != "body")
            throw DataError("RoiSeries: ROI '" + name + "' has class '" + it->second + "'");
    }
}

size_t RoiSeries::roi_index(const std::string& name) const {
    for (size_t i = 0; i < roi_names.size(); ++i)
        if (roi_names[i] == name) return i;
    throw DataError("RoiSeries: unknown ROI '" + name + "'");
}

std::vector<double> RoiSeries::column(size_t roi) const {
    std::vector<double> out;
    out.reserve(values.size());
    for (const auto& row : values) out.push_back(row.at(roi));
    return out;
}

PairEnumeration enumerate_pairs(const std::vector<std::string>& names,
                                const std::map<std::string, std::string>& classes,
                                const std::vector<std::string>& exclusions) {
    std::set<std::string> name_set(names.begin(), names.end());
    if (name_set.size() != names.size()) throw DataError("enumerate_pairs: duplicate ROI names");
    std::set<std::string> excluded;
    for (const auto& e : exclusions) {
        if (!name_set.count(e)) throw DataError("enumerate_pairs: exclusion '" + e + "' is not a known ROI");
        excluded.insert(e);
    }
    std::vector<std::string> kept;
    for (const auto& n : name_set)
        if (!excluded.count(n)) kept.push_back(n);  // set iteration = lexicographic

    auto class_of = [&](const std::string& n) -> const std::string& {
        auto it = classes.find(n);
        if (it == classes.end()) throw DataError("enumerate_pairs: ROI '" + n + "' has no class");
        if (it->second != "brain" && it->second != "body")
            throw DataError("enumerate_pairs: ROI '" + n + "' has class '" + it->second + "'");
        return it->second;
    };

    PairEnumeration out;
    out.class_counts = {{"brain-brain", 0}, {"brain-body", 0}, {"body-body", 0}};
    for (size_t i = 0; i < kept.size(); ++i)
        for (size_t j = i + 1; j < kept.size(); ++j) {
            RoiPair p;
            p.a = kept[i];
            p.b = kept[j];
            const std::string &ca = class_of(p.a), &cb = class_of(p.b);
            p.pair_class = (ca == cb) ? ca + "-" + cb : "brain-body";
            out.class_counts[p.pair_class]++;
            out.pairs.push_back(std::move(p));
        }
    out.total = static_cast<int64_t>(out.pairs.size());
    return out;
}

PairwiseReport pairwise_analysis(const RoiSeries& control, const RoiSeries& patient, double alpha,
                                 const std::set<std::string>& class_filter) {
    if (alpha <= 0 || alpha > 1) throw DataError("pairwise_analysis: alpha must lie in (0,1]");
    control.validate(4);
    patient.validate(4);
    if (control.cohort == patient.cohort) throw DataError("pairwise_analysis: both series carry the same cohort");
    if (std::set<std::string>(control.roi_names.begin(), control.roi_names.end()) !=
        std::set<std::string>(patient.roi_names.begin(), patient.roi_names.end()))
        throw DataError("pairwise_analysis: cohorts disagree on the ROI set");

    std::vector<std::string> exclusions = control.exclusions;
    exclusions.insert(exclusions.end(), patient.exclusions.begin(), patient.exclusions.end());
    std::sort(exclusions.begin(), exclusions.end());
    exclusions.erase(std::unique(exclusions.begin(), exclusions.end()), exclusions.end());

    PairEnumeration pairs = enumerate_pairs(control.roi_names, control.roi_class, exclusions);

    // per-ROI degeneracy, detected once
    std::map<std::string, std::string> degenerate;
    auto variance_zero = [](const std::vector<double>& v) {
        const double first = v.empty() ? 0.0 : v[0];
        for (double x : v)
            if (x != first) return false;
        return true;
    };
    for (const auto& name : control.roi_names) {
        if (variance_zero(control.column(control.roi_index(name))))
            degenerate[name] = "zero variance in control";
        else if (variance_zero(patient.column(patient.roi_index(name))))
            degenerate[name] = "zero variance in patient";
    }

    PairwiseReport report;
    report.alpha = alpha;
    const int64_t n_c = static_cast<int64_t>(control.values.size());
    const int64_t n_p = static_cast<int64_t>(patient.values.size());
    for (const auto& pair : pairs.pairs) {
        if (!class_filter.empty() && !class_filter.count(pair.pair_class)) continue;
        auto deg = degenerate.find(pair.a);
        if (deg == degenerate.end()) deg = degenerate.find(pair.b);
        if (deg != degenerate.end()) {
            report.skipped.push_back(pair.a + "|" + pair.b + ": " + deg->first + " has " + deg->second);
            continue;
        }
        const double r_c =
            pearson(control.column(control.roi_index(pair.a)), control.column(control.roi_index(pair.b)));
        const double r_p =
            pearson(patient.column(patient.roi_index(pair.a)), patient.column(patient.roi_index(pair.b)));
        if (std::abs(r_c) >= 1.0 || std::abs(r_p) >= 1.0) {
            report.skipped.push_back(pair.a + "|" + pair.b + ": perfect correlation has no finite transform");
            continue;
        }
        FisherResult f = fisher_compare(r_c, n_c, r_p, n_p);
        PairResult row;
        row.roi_a = pair.a;
        row.roi_b = pair.b;
        row.pair_class = pair.pair_class;
        row.r_control = r_c;
        row.r_patient = r_p;
        row.z_control = f.z_control;
        row.z_patient = f.z_patient;
        row.z_score = f.z_score;
        row.p_value = f.p_value;
        row.significant = f.p_value < alpha;
        report.rows.push_back(std::move(row));
    }

    const double m = static_cast<double>(report.rows.size());
    for (auto& row : report.rows) {
        row.p_bonferroni = std::min(1.0, row.p_value * m);
        if (row.significant) {
            report.significant_count++;
            report.significant_per_roi[row.roi_a]++;
            report.significant_per_roi[row.roi_b]++;
        }
    }
    std::sort(report.rows.begin(), report.rows.end(), [](const PairResult& a, const PairResult& b) {
        const double za = std::abs(a.z_score), zb = std::abs(b.z_score);
        if (za != zb) return za > zb;
        if (a.roi_a != b.roi_a) return a.roi_a < b.roi_a;
        return a.roi_b < b.roi_b;
    });
    return report;
}

void write_pairwise_csv(const PairwiseReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("write_pairwise_csv: cannot open '" + path + "'");
    os << "roi_a,roi_b,class,r_control,r_patient,z,p,significant,p_bonferroni\n";
    os.precision(12);
    for (const auto& r : report.rows)
        os << r.roi_a << ',' << r.roi_b << ',' << r.pair_class << ',' << r.r_control << ',' << r.r_patient << ','
           << r.z_score << ',' << r.p_value << ',' << (r.significant ? 1 : 0) << ',' << r.p_bonferroni << '\n';
    if (!os) throw DataError("write_pairwise_csv: failed writing '" + path + "'");
}

void write_pairwise_json(const PairwiseReport& report, const std::string& path) {
    nlohmann::json j;
    j["alpha"] = report.alpha;
    j["tested"] = report.rows.size();
    j["significant"] = report.significant_count;
    j["skipped"] = report.skipped;
    j["significant_per_roi"] = report.significant_per_roi;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows)
        rows.push_back(nlohmann::json{{"roi_a", r.roi_a},
                                      {"roi_b", r.roi_b},
                                      {"class", r.pair_class},
                                      {"r_control", r.r_control},
                                      {"r_patient", r.r_patient},
                                      {"z", r.z_score},
                                      {"p", r.p_value},
                                      {"significant", r.significant},
                                      {"p_bonferroni", r.p_bonferroni}});
    j["pairs"] = std::move(rows);
    std::ofstream os(path);
    if (!os) throw DataError("write_pairwise_json: cannot open '" + path + "'");
    os << j.dump(2) << '\n';
    if (!os) throw DataError("write_pairwise_json: failed writing '" + path + "'");
}

double roi_mean_suv(const Volume& pet, const LabelVolume& labels, int32_t roi) {
    pet.validate();
    labels.validate();
    if (pet.shape != labels.shape) throw ShapeError("roi_mean_suv: volume and labels disagree in shape");
    double sum = 0;
    int64_t count = 0;
    for (size_t i = 0; i < labels.labels.size(); ++i)
        if (labels.labels[i] == roi) {
            sum += static_cast<double>(pet.data[i]);
            count++;
        }
    if (count == 0) throw DataError("roi_mean_suv: ROI " + std::to_string(roi) + " has no voxels");
    return sum / static_cast<double>(count);
}

WelchResult single_organ_test(const RoiSeries& control, const RoiSeries& patient, const std::string& roi) {
    control.validate(2);
    patient.validate(2);
    return welch_t_test(control.column(control.roi_index(roi)), patient.column(patient.roi_index(roi)));
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

}  // namespace

RoiSeries load_cohort_csv(const std::string& path, const std::string& cohort,
                          const std::map<std::string, std::string>& roi_class,
                          const std::vector<std::string>& exclusions) {
    std::ifstream is(path);
    if (!is) throw DataError("load_cohort_csv: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw FormatError("load_cohort_csv: '" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "subject_id" || header[1] != "cohort")
        throw FormatError("load_cohort_csv: header must start with subject_id,cohort and list ROIs");

    RoiSeries series;
    series.cohort = cohort;
    series.roi_names.assign(header.begin() + 2, header.end());
    series.roi_class = roi_class;
    series.exclusions = exclusions;

    size_t line_no = 1;
    while (std::getline(is, line)) {
        line_no++;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != header.size())
            throw FormatError("load_cohort_csv: line " + std::to_string(line_no) + " has " +
                              std::to_string(fields.size()) + " fields, header has " +
                              std::to_string(header.size()));
        if (fields[1] != cohort) continue;
        std::vector<double> row;
        row.reserve(series.roi_names.size());
        for (size_t i = 2; i < fields.size(); ++i) {
            try {
                size_t pos = 0;
                const double v = std::stod(fields[i], &pos);
                if (pos != fields[i].size() || !std::isfinite(v)) throw std::invalid_argument("trailing");
                row.push_back(v);
            } catch (const std::exception&) {
                throw FormatError("load_cohort_csv: line " + std::to_string(line_no) + " column '" +
                                  header[i] + "' is not a finite number: '" + fields[i] + "'");
            }
        }
        series.subject_ids.push_back(fields[0]);
        series.values.push_back(std::move(row));
    }
    if (series.values.empty())
        throw DataError("load_cohort_csv: no rows with cohort '" + cohort + "' in '" + path + "'");
    return series;
}

std::map<std::string, std::string> load_roi_class_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("load_roi_class_json: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_roi_class_json: ") + e.what());
    }
    if (!j.is_object()) throw FormatError("load_roi_class_json: expected an object of roi -> class");
    std::map<std::string, std::string> out;
    for (const auto& [name, value] : j.items()) {
        if (!value.is_string() || (value != "brain" && value != "body"))
            throw FormatError("load_roi_class_json: ROI '" + name + "' must map to brain or body");
        out[name] = value.get<std::string>();
    }
    return out;
}

}  // namespace mpum
