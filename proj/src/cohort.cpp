#include "realdiff/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "realdiff/errors.hpp"
#include "realdiff/rng.hpp"

namespace fs = std::filesystem;

namespace realdiff {
namespace {

double quantize(double v, double scale) { return std::round(v * scale) / scale; }

// Fixed-precision decimal with trailing zeros trimmed; parsing the result
// with strtod recovers the quantized double bit-for-bit.
std::string format_number(double v, int max_decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", max_decimals, v);
    std::string s(buf);
    if (s.find('.') != std::string::npos) {
        while (s.back() == '0') s.pop_back();
        if (s.back() == '.') s.pop_back();
    }
    if (s == "-0") s = "0";
    return s;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

double parse_number(const std::string& field, const std::string& file, int row,
                    const char* what) {
    const char* begin = field.c_str();
    char* end = nullptr;
    double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0' || !std::isfinite(v)) {
        throw FormatError(file + " row " + std::to_string(row) + ": bad " + what + " '" +
                          field + "'");
    }
    return v;
}

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

GrayImage render_slice(std::mt19937_64& rng, int size, double decline_rate) {
    GrayImage img;
    img.width = size;
    img.height = size;
    img.pixels.assign(static_cast<std::size_t>(size) * size, 0.0);
    // Mean intensity carries the decline rate so the image modality holds
    // genuine predictive signal for the forecasting task.
    double base = std::clamp(0.15 + 55.0 * decline_rate, 0.05, 0.95);
    double half = (size - 1) / 2.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double dx = (x - half) / half;
            double dy = (y - half) / half;
            double rad = std::sqrt(dx * dx + dy * dy);
            double v = base + 0.08 * std::cos(6.2831853071795865 * rad) +
                       0.02 * normal_sample(rng, 0.0, 1.0);
            // Snap onto the 8-bit grid so a save/load cycle is lossless.
            img.pixels[static_cast<std::size_t>(y) * size + x] =
                quantize(std::clamp(v, 0.0, 1.0), 255.0);
        }
    }
    return img;
}

}  // namespace

Cohort generate_synthetic_cohort(int n, std::uint64_t seed, const DatagenConfig& cfg) {
    if (n < 4) throw ConfigError("cohort size must be at least 4, got " + std::to_string(n));
    if (cfg.visits_min < 2 || cfg.visits_max < cfg.visits_min) {
        throw ConfigError("visit count range must satisfy 2 <= min <= max");
    }
    if (cfg.gap_min_weeks < 1 || cfg.gap_max_weeks < cfg.gap_min_weeks) {
        throw ConfigError("gap range must satisfy 1 <= min <= max");
    }

    Cohort cohort;
    cohort.records.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        // Each patient owns an independent stream keyed by (seed, index), so
        // the cohort is reproducible regardless of generation order.
        std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)));

        PatientRecord rec;
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "P%04d", i);
        rec.id = idbuf;

        rec.static_info.age = quantize(uniform_range(rng, 45.0, 80.0), 10.0);
        rec.static_info.sex = uniform_unit(rng) < 0.5 ? "Male" : "Female";
        double su = uniform_unit(rng);
        double smoke_factor;
        if (su < 0.45) {
            rec.static_info.smoking_status = "Never smoked";
            smoke_factor = 1.0;
        } else if (su < 0.80) {
            rec.static_info.smoking_status = "Ex-smoker";
            smoke_factor = cfg.ex_smoker_factor;
        } else {
            rec.static_info.smoking_status = "Currently smokes";
            smoke_factor = cfg.smoker_factor;
        }

        double baseline = std::max(1200.0, normal_sample(rng, cfg.baseline_mean, cfg.baseline_sd));
        double rate = lognormal_sample(rng, cfg.decline_median, cfg.decline_log_sd) * smoke_factor;

        int visits = uniform_int(rng, cfg.visits_min, cfg.visits_max);
        double week = 0.0;
        for (int v = 0; v < visits; ++v) {
            if (v > 0) week += uniform_int(rng, cfg.gap_min_weeks, cfg.gap_max_weeks);
            double noise = cfg.noise_sd * normal_sample(rng, 0.0, 1.0);
            double fvc = baseline * std::exp(-rate * week) * (1.0 + noise);
            rec.weeks.push_back(week);
            rec.fvc.push_back(quantize(std::max(fvc, 100.0), 100.0));
        }

        for (int s = 0; s < cfg.slices_per_patient; ++s) {
            rec.images.push_back(render_slice(rng, cfg.image_size, rate));
            rec.image_paths.push_back("images/" + rec.id + "_" + std::to_string(s) + ".pgm");
        }
        cohort.records.push_back(std::move(rec));
    }
    return cohort;
}

void save_cohort(const Cohort& cohort, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");

    std::ofstream meas(fs::path(dir) / "measurements.csv");
    if (!meas) throw FormatError("cannot open " + dir + "/measurements.csv for writing");
    meas << "patient_id,week,fvc\n";
    for (const auto& rec : cohort.records) {
        for (std::size_t i = 0; i < rec.weeks.size(); ++i) {
            meas << rec.id << ',' << format_number(rec.weeks[i], 6) << ','
                 << format_number(rec.fvc[i], 2) << '\n';
        }
    }

    std::ofstream man(fs::path(dir) / "manifest.csv");
    if (!man) throw FormatError("cannot open " + dir + "/manifest.csv for writing");
    man << "patient_id,age,sex,smoking_status,image_path\n";
    for (const auto& rec : cohort.records) {
        std::string joined;
        for (std::size_t s = 0; s < rec.image_paths.size(); ++s) {
            if (s > 0) joined += ';';
            joined += rec.image_paths[s];
        }
        man << rec.id << ',' << format_number(rec.static_info.age, 1) << ','
            << rec.static_info.sex << ',' << rec.static_info.smoking_status << ',' << joined
            << '\n';
        for (std::size_t s = 0; s < rec.images.size(); ++s) {
            save_pgm((fs::path(dir) / rec.image_paths[s]).string(), rec.images[s]);
        }
    }
}

Cohort load_cohort_csv(const std::string& measurements_path, const std::string& manifest_path,
                       std::ostream* warnings) {
    std::ostream& warn = warnings ? *warnings : std::cerr;

    std::ifstream meas(measurements_path);
    if (!meas) throw FormatError("cannot open " + measurements_path);
    std::string line;
    if (!std::getline(meas, line) || strip_cr(line) != "patient_id,week,fvc") {
        throw FormatError(measurements_path + ": expected header 'patient_id,week,fvc'");
    }
    // insertion-ordered per-patient series; duplicate weeks keep the last row
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    int row = 1;
    while (std::getline(meas, line)) {
        ++row;
        line = strip_cr(line);
        if (line.empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != 3) {
            throw FormatError(measurements_path + " row " + std::to_string(row) +
                              ": expected 3 fields, got " + std::to_string(fields.size()));
        }
        const std::string& id = fields[0];
        if (id.empty()) {
            throw FormatError(measurements_path + " row " + std::to_string(row) +
                              ": empty patient_id");
        }
        double week = parse_number(fields[1], measurements_path, row, "week");
        double fvc = parse_number(fields[2], measurements_path, row, "fvc");
        auto it = series.find(id);
        if (it == series.end()) {
            order.push_back(id);
            it = series.emplace(id, std::vector<std::pair<double, double>>{}).first;
        }
        auto& vec = it->second;
        auto dup = std::find_if(vec.begin(), vec.end(),
                                [&](const auto& p) { return p.first == week; });
        if (dup != vec.end()) {
            warn << "warning: " << measurements_path << " row " << row << ": duplicate ("
                 << id << ", week " << format_number(week, 6) << "), keeping the last value\n";
            dup->second = fvc;
        } else {
            vec.emplace_back(week, fvc);
        }
    }

    std::ifstream man(manifest_path);
    if (!man) throw FormatError("cannot open " + manifest_path);
    if (!std::getline(man, line) ||
        strip_cr(line) != "patient_id,age,sex,smoking_status,image_path") {
        throw FormatError(manifest_path +
                          ": expected header 'patient_id,age,sex,smoking_status,image_path'");
    }
    fs::path image_root = fs::path(manifest_path).parent_path();

    Cohort cohort;
    std::map<std::string, std::size_t> index;
    row = 1;
    while (std::getline(man, line)) {
        ++row;
        line = strip_cr(line);
        if (line.empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != 5) {
            throw FormatError(manifest_path + " row " + std::to_string(row) +
                              ": expected 5 fields, got " + std::to_string(fields.size()));
        }
        PatientRecord rec;
        rec.id = fields[0];
        if (rec.id.empty()) {
            throw FormatError(manifest_path + " row " + std::to_string(row) +
                              ": empty patient_id");
        }
        rec.static_info.age = parse_number(fields[1], manifest_path, row, "age");
        rec.static_info.sex = fields[2];
        rec.static_info.smoking_status = fields[3];
        if (!fields[4].empty()) {
            std::string part;
            std::stringstream paths(fields[4]);
            while (std::getline(paths, part, ';')) {
                rec.image_paths.push_back(part);
                rec.images.push_back(load_pgm((image_root / part).string()));
            }
        }

        auto sit = series.find(rec.id);
        if (sit == series.end()) {
            throw FormatError(manifest_path + " row " + std::to_string(row) + ": patient " +
                              rec.id + " has no measurements");
        }
        auto visits = sit->second;
        std::sort(visits.begin(), visits.end());
        for (const auto& [week, fvc] : visits) {
            rec.weeks.push_back(week);
            rec.fvc.push_back(fvc);
        }

        auto iit = index.find(rec.id);
        if (iit != index.end()) {
            warn << "warning: " << manifest_path << " row " << row << ": duplicate patient "
                 << rec.id << ", keeping the last row\n";
            cohort.records[iit->second] = std::move(rec);
        } else {
            index.emplace(rec.id, cohort.records.size());
            cohort.records.push_back(std::move(rec));
        }
    }

    for (const auto& id : order) {
        if (index.find(id) == index.end()) {
            throw FormatError(measurements_path + ": patient " + id +
                              " is missing from the manifest");
        }
    }
    return cohort;
}

Cohort load_cohort_dir(const std::string& dir, std::ostream* warnings) {
    return load_cohort_csv((fs::path(dir) / "measurements.csv").string(),
                           (fs::path(dir) / "manifest.csv").string(), warnings);
}

SplitCohort split_cohort(const Cohort& cohort, std::uint64_t seed) {
    std::size_t n = cohort.records.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    // Hand-rolled Fisher-Yates; std::shuffle's output is implementation-defined.
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(
            uniform_int(rng, 0, static_cast<long long>(i) - 1));
        std::swap(idx[i - 1], idx[j]);
    }
    std::size_t n_val = n / 5;    // floor(0.2 n)
    std::size_t n_test = n / 10;  // floor(0.1 n)
    std::size_t n_train = n - n_val - n_test;

    SplitCohort out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& rec = cohort.records[idx[i]];
        if (i < n_train) {
            out.train.records.push_back(rec);
        } else if (i < n_train + n_val) {
            out.val.records.push_back(rec);
        } else {
            out.test.records.push_back(rec);
        }
    }
    return out;
}

int LabelMap::code(const std::string& value) const {
    auto it = std::lower_bound(categories.begin(), categories.end(), value);
    if (it != categories.end() && *it == value) {
        return static_cast<int>(it - categories.begin());
    }
    return static_cast<int>(categories.size());  // reserved unseen code
}

namespace {

FeatureStats stats_of(const std::vector<double>& xs, const char* feature) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());  // population variance
    if (!(var > 0.0)) {
        throw ContractError(std::string("feature '") + feature +
                            "' has zero variance in the training split");
    }
    return FeatureStats{mean, std::sqrt(var)};
}

LabelMap label_map_of(std::vector<std::string> values) {
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    return LabelMap{std::move(values)};
}

PreparedPatient prepare_one(const PatientRecord& rec, const PreprocessStats& stats) {
    PreparedPatient p;
    p.id = rec.id;
    p.weeks = rec.weeks;
    p.fvc_norm.reserve(rec.fvc.size());
    for (double v : rec.fvc) p.fvc_norm.push_back(stats.fvc.normalize(v));
    p.age_norm = stats.age.normalize(rec.static_info.age);
    p.sex_code = stats.sex.code(rec.static_info.sex);
    p.smoking_code = stats.smoking.code(rec.static_info.smoking_status);
    p.source = &rec;
    return p;
}

}  // namespace

PreprocessStats compute_stats(const std::vector<PatientRecord>& records) {
    if (records.empty()) throw ContractError("cannot compute statistics from an empty split");
    std::vector<double> fvc, age, week;
    std::vector<std::string> sex, smoking;
    for (const auto& rec : records) {
        for (double v : rec.fvc) fvc.push_back(v);
        for (double w : rec.weeks) week.push_back(w);
        age.push_back(rec.static_info.age);
        sex.push_back(rec.static_info.sex);
        smoking.push_back(rec.static_info.smoking_status);
    }
    PreprocessStats stats;
    stats.fvc = stats_of(fvc, "fvc");
    stats.age = stats_of(age, "age");
    stats.week = stats_of(week, "week");
    stats.sex = label_map_of(std::move(sex));
    stats.smoking = label_map_of(std::move(smoking));
    return stats;
}

std::vector<ShiftedExample> shifted_examples(const PreparedPatient& p) {
    std::vector<ShiftedExample> out;
    for (std::size_t i = 0; i + 1 < p.weeks.size(); ++i) {
        ShiftedExample ex;
        ex.week = p.weeks[i];
        ex.next_week = p.weeks[i + 1];
        ex.fvc_norm = p.fvc_norm[i];
        ex.target_fvc_norm = p.fvc_norm[i + 1];
        out.push_back(ex);
    }
    return out;
}

PreparedCohort preprocess(const SplitCohort& splits) {
    PreparedCohort out;
    out.stats = compute_stats(splits.train.records);
    for (const auto& rec : splits.train.records) {
        out.train.push_back(prepare_one(rec, out.stats));
    }
    for (const auto& rec : splits.val.records) {
        out.val.push_back(prepare_one(rec, out.stats));
    }
    for (const auto& rec : splits.test.records) {
        out.test.push_back(prepare_one(rec, out.stats));
    }
    return out;
}

}  // namespace realdiff
