#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "realdiff/pgm.hpp"

namespace realdiff {

struct StaticInfo {
    double age = 0.0;
    std::string sex;
    std::string smoking_status;
};

struct PatientRecord {
    std::string id;
    std::vector<double> weeks;  // strictly increasing, >= 2 visits
    std::vector<double> fvc;    // raw mL
    StaticInfo static_info;
    std::vector<std::string> image_paths;  // slice files, may be empty
    std::vector<GrayImage> images;         // loaded alongside image_paths
};

struct Cohort {
    std::vector<PatientRecord> records;
};

struct DatagenConfig {
    int visits_min = 5;
    int visits_max = 12;
    int gap_min_weeks = 3;
    int gap_max_weeks = 12;
    double baseline_mean = 3000.0;  // mL
    double baseline_sd = 400.0;
    double decline_median = 0.003;  // per-week exponential decline rate
    double decline_log_sd = 0.6;
    double smoker_factor = 1.8;     // rate multiplier for current smokers
    double ex_smoker_factor = 1.3;
    double noise_sd = 0.02;         // multiplicative measurement noise
    int image_size = 32;
    int slices_per_patient = 1;
};

// Deterministic synthetic cohort; per-patient streams derive from (seed, index)
// so generation order never matters. Image mean intensity encodes the decline
// rate, giving the image modality real signal.
Cohort generate_synthetic_cohort(int n, std::uint64_t seed, const DatagenConfig& cfg = {});

// Writes measurements.csv, manifest.csv and images/ under dir (created if needed).
void save_cohort(const Cohort& cohort, const std::string& dir);

// Loads the two-file layout. Duplicate (patient, week) rows keep the last and
// warn; rows are sorted by week per patient. Image paths resolve relative to
// the manifest's directory.
Cohort load_cohort_csv(const std::string& measurements_path, const std::string& manifest_path,
                       std::ostream* warnings = nullptr);
Cohort load_cohort_dir(const std::string& dir, std::ostream* warnings = nullptr);

struct SplitCohort {
    Cohort train, val, test;
};

// Patient-level 70/20/10 split: floor for val and test, remainder to train.
SplitCohort split_cohort(const Cohort& cohort, std::uint64_t seed);

// Label encoding over sorted training categories; unseen values map to the
// reserved code categories.size().
struct LabelMap {
    std::vector<std::string> categories;
    int code(const std::string& value) const;
    int cardinality() const { return static_cast<int>(categories.size()) + 1; }
};

struct FeatureStats {
    double mean = 0.0;
    double stddev = 1.0;  // population standard deviation

    double normalize(double x) const { return (x - mean) / stddev; }
    double denormalize(double z) const { return z * stddev + mean; }
};

struct PreprocessStats {
    FeatureStats fvc, age, week;
    LabelMap sex, smoking;
};

struct PreparedPatient {
    std::string id;
    std::vector<double> weeks;     // raw weeks; paths keep the week axis
    std::vector<double> fvc_norm;  // z-scored on train stats
    double age_norm = 0.0;
    int sex_code = 0;
    int smoking_code = 0;
    const PatientRecord* source = nullptr;  // image access; owned by the cohort
};

// One supervised pair per consecutive visit: step i's features predict the
// next visit's FVC, with the next visit's week supplied as a feature.
struct ShiftedExample {
    double week = 0.0;       // raw weeks
    double next_week = 0.0;  // strictly greater than week
    double fvc_norm = 0.0;
    double target_fvc_norm = 0.0;
};

std::vector<ShiftedExample> shifted_examples(const PreparedPatient& p);

struct PreparedCohort {
    std::vector<PreparedPatient> train, val, test;
    PreprocessStats stats;
};

// Stats and label maps come from the training split only and are applied to
// all three splits. Zero-variance continuous features are an error.
PreparedCohort preprocess(const SplitCohort& splits);

// Computed on an arbitrary record list; exposed so tests can prove the
// pipeline kept validation data out of the statistics.
PreprocessStats compute_stats(const std::vector<PatientRecord>& records);

}  // namespace realdiff
