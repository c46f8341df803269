#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mpum/volume.hpp"

namespace mpum {

// standard normal CDF, absolute error well under 1e-7
double normal_cdf(double x);

// Pearson correlation, clamped to [-1,1] against round-off. Requires n >= 3
// and nonzero variance on both sides.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct FisherResult {
    double z_control = 0, z_patient = 0, z_score = 0, p_value = 0;
};

// Fisher-Z comparison of two independent correlations: z = arctanh(r),
// z_score = (z_c - z_p) / sqrt(1/(n_c-3) + 1/(n_p-3)), two-tailed p.
FisherResult fisher_compare(double r_control, int64_t n_control, double r_patient, int64_t n_patient);

// I_x(a,b) by Lentz continued fraction, absolute error <= 1e-10 here
double regularized_incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);

struct WelchResult {
    double statistic = 0, df = 0, p_value = 0;
};

// Welch two-sample t-test with Welch-Satterthwaite degrees of freedom.
WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

struct RoiSeries {
    std::string cohort;                            // control | patient
    std::vector<std::string> subject_ids;
    std::vector<std::string> roi_names;
    std::vector<std::vector<double>> values;       // [subject][roi]
    std::map<std::string, std::string> roi_class;  // name -> brain | body
    std::vector<std::string> exclusions;

    void validate(size_t min_subjects) const;
    size_t roi_index(const std::string& name) const;
    std::vector<double> column(size_t roi) const;
};

struct RoiPair {
    std::string a, b;
    std::string pair_class;  // brain-brain | brain-body | body-body
};

struct PairEnumeration {
    std::vector<RoiPair> pairs;                 // lexicographic in (a, b)
    std::map<std::string, int64_t> class_counts;
    int64_t total = 0;
};

PairEnumeration enumerate_pairs(const std::vector<std::string>& names,
                                const std::map<std::string, std::string>& classes,
                                const std::vector<std::string>& exclusions);

struct PairResult {
    std::string roi_a, roi_b, pair_class;
    double r_control = 0, r_patient = 0;
    double z_control = 0, z_patient = 0, z_score = 0;
    double p_value = 1, p_bonferroni = 1;
    bool significant = false;
};

struct PairwiseReport {
    double alpha = 0.001;
    std::vector<PairResult> rows;                       // |z_score| descending
    std::vector<std::string> skipped;                   // "a|b: reason"
    std::map<std::string, int64_t> significant_per_roi;
    int64_t significant_count = 0;
};

// Fisher comparison over every enumerated pair. class_filter empty = all
// classes. Degenerate series (zero variance, |r| = 1) skip the pair with a
// logged reason instead of aborting the run.
PairwiseReport pairwise_analysis(const RoiSeries& control, const RoiSeries& patient, double alpha,
                                 const std::set<std::string>& class_filter = {});

void write_pairwise_csv(const PairwiseReport& report, const std::string& path);
void write_pairwise_json(const PairwiseReport& report, const std::string& path);

// arithmetic mean over the ROI's voxels; empty ROI is an error
double roi_mean_suv(const Volume& pet, const LabelVolume& labels, int32_t roi);

// Welch test on per-subject mean SUV for one ROI across cohorts.
WelchResult single_organ_test(const RoiSeries& control, const RoiSeries& patient, const std::string& roi);

// CSV: subject_id, cohort, one column per ROI; rows filtered by cohort.
RoiSeries load_cohort_csv(const std::string& path, const std::string& cohort,
                          const std::map<std::string, std::string>& roi_class,
                          const std::vector<std::string>& exclusions);

// {"roi_name": "brain"|"body", ...}
std::map<std::string, std::string> load_roi_class_json(const std::string& path);

}  // namespace mpum
