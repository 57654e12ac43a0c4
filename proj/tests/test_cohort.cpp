#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "doctest.h"
#include "realdiff/cohort.hpp"
#include "realdiff/errors.hpp"
#include "realdiff/pgm.hpp"

using namespace realdiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("realdiff_test_" + tag + "_" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Byte-level comparison of every regular file under two directory trees.
bool trees_identical(const fs::path& a, const fs::path& b) {
    std::set<fs::path> rel_a, rel_b;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (e.is_regular_file()) rel_a.insert(fs::relative(e.path(), a));
    }
    for (const auto& e : fs::recursive_directory_iterator(b)) {
        if (e.is_regular_file()) rel_b.insert(fs::relative(e.path(), b));
    }
    if (rel_a != rel_b) return false;
    for (const auto& rel : rel_a) {
        if (slurp(a / rel) != slurp(b / rel)) return false;
    }
    return true;
}

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary);
    out << content;
}

}  // namespace

TEST_CASE("generation is deterministic and seed-sensitive") {
    Cohort a = generate_synthetic_cohort(12, 99);
    Cohort b = generate_synthetic_cohort(12, 99);
    REQUIRE(a.records.size() == 12);
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].id == b.records[i].id);
        CHECK(a.records[i].weeks == b.records[i].weeks);
        CHECK(a.records[i].fvc == b.records[i].fvc);
        CHECK(a.records[i].static_info.age == b.records[i].static_info.age);
        CHECK(a.records[i].images[0].pixels == b.records[i].images[0].pixels);
    }

    Cohort c = generate_synthetic_cohort(12, 100);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        if (a.records[i].fvc != c.records[i].fvc) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("a patient's draws do not depend on cohort size") {
    Cohort small = generate_synthetic_cohort(4, 7);
    Cohort large = generate_synthetic_cohort(16, 7);
    for (std::size_t i = 0; i < small.records.size(); ++i) {
        CHECK(small.records[i].weeks == large.records[i].weeks);
        CHECK(small.records[i].fvc == large.records[i].fvc);
    }
}

TEST_CASE("saved cohort directories are byte-identical across runs") {
    TempDir d1("gen1"), d2("gen2");
    save_cohort(generate_synthetic_cohort(8, 1234), d1.path.string());
    save_cohort(generate_synthetic_cohort(8, 1234), d2.path.string());
    CHECK(trees_identical(d1.path, d2.path));
}

TEST_CASE("save then load reproduces the cohort exactly") {
    TempDir dir("roundtrip");
    Cohort orig = generate_synthetic_cohort(6, 42);
    save_cohort(orig, dir.path.string());
    Cohort back = load_cohort_dir(dir.path.string());

    REQUIRE(back.records.size() == orig.records.size());
    for (std::size_t i = 0; i < orig.records.size(); ++i) {
        const auto& o = orig.records[i];
        const auto& l = back.records[i];
        CHECK(l.id == o.id);
        CHECK(l.weeks == o.weeks);
        CHECK(l.fvc == o.fvc);  // quantized at generation, so exact
        CHECK(l.static_info.age == o.static_info.age);
        CHECK(l.static_info.sex == o.static_info.sex);
        CHECK(l.static_info.smoking_status == o.static_info.smoking_status);
        CHECK(l.image_paths == o.image_paths);
        REQUIRE(l.images.size() == o.images.size());
        for (std::size_t s = 0; s < o.images.size(); ++s) {
            CHECK(l.images[s].pixels == o.images[s].pixels);
        }
    }
}

TEST_CASE("generated images survive a pgm round trip bit-for-bit") {
    TempDir dir("pgm");
    Cohort cohort = generate_synthetic_cohort(4, 5);
    const GrayImage& img = cohort.records[0].images[0];
    std::string path = (dir.path / "x.pgm").string();
    save_pgm(path, img);
    GrayImage back = load_pgm(path);
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
    CHECK(back.pixels == img.pixels);
}

TEST_CASE("image intensity tracks the decline rate") {
    // Faster-declining patients must show brighter scans on average; rank
    // correlation over a sizable cohort should be clearly positive.
    Cohort cohort = generate_synthetic_cohort(60, 2024);
    std::vector<std::pair<double, double>> pairs;  // (empirical rate, mean intensity)
    for (const auto& rec : cohort.records) {
        double t = rec.weeks.back();
        if (t <= 0) continue;
        double ratio = rec.fvc.back() / rec.fvc.front();
        double rate = -std::log(std::max(ratio, 1e-6)) / t;
        double mean = 0.0;
        for (double p : rec.images[0].pixels) mean += p;
        mean /= static_cast<double>(rec.images[0].pixels.size());
        pairs.emplace_back(rate, mean);
    }
    int concordant = 0, discordant = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        for (std::size_t j = i + 1; j < pairs.size(); ++j) {
            double d = (pairs[i].first - pairs[j].first) * (pairs[i].second - pairs[j].second);
            if (d > 0) ++concordant;
            else if (d < 0) ++discordant;
        }
    }
    CHECK(concordant > 2 * discordant);
}

TEST_CASE("cohorts decline on average") {
    Cohort cohort = generate_synthetic_cohort(200, 31);
    double ratio_sum = 0.0;
    for (const auto& rec : cohort.records) {
        ratio_sum += rec.fvc.back() / rec.fvc.front();
    }
    CHECK(ratio_sum / 200.0 < 0.95);
}

TEST_CASE("visit counts and gaps stay inside the configured ranges") {
    Cohort cohort = generate_synthetic_cohort(50, 17);
    for (const auto& rec : cohort.records) {
        CHECK(rec.weeks.size() >= 5);
        CHECK(rec.weeks.size() <= 12);
        CHECK(rec.weeks.front() == 0.0);
        for (std::size_t i = 1; i < rec.weeks.size(); ++i) {
            double gap = rec.weeks[i] - rec.weeks[i - 1];
            CHECK(gap >= 3.0);
            CHECK(gap <= 12.0);
            CHECK(gap == std::floor(gap));
        }
    }
}

TEST_CASE("cohort size below four is rejected") {
    CHECK_THROWS_AS(generate_synthetic_cohort(3, 1), ConfigError);
}

TEST_CASE("split is a 70/20/10 patient-level partition") {
    Cohort cohort = generate_synthetic_cohort(10, 8);
    SplitCohort s = split_cohort(cohort, 8);
    CHECK(s.train.records.size() == 7);
    CHECK(s.val.records.size() == 2);
    CHECK(s.test.records.size() == 1);

    std::set<std::string> seen;
    for (const auto* split : {&s.train, &s.val, &s.test}) {
        for (const auto& rec : split->records) {
            CHECK(seen.insert(rec.id).second);  // no patient appears twice
        }
    }
    CHECK(seen.size() == 10);

    SplitCohort again = split_cohort(cohort, 8);
    REQUIRE(again.train.records.size() == s.train.records.size());
    for (std::size_t i = 0; i < s.train.records.size(); ++i) {
        CHECK(again.train.records[i].id == s.train.records[i].id);
    }
}

TEST_CASE("split respects floors at awkward sizes") {
    Cohort cohort = generate_synthetic_cohort(7, 3);
    SplitCohort s = split_cohort(cohort, 3);
    CHECK(s.train.records.size() == 6);
    CHECK(s.val.records.size() == 1);
    CHECK(s.test.records.size() == 0);
}

TEST_CASE("normalization uses training statistics only") {
    Cohort cohort = generate_synthetic_cohort(30, 77);
    SplitCohort splits = split_cohort(cohort, 77);
    PreparedCohort prep = preprocess(splits);

    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (const auto& p : prep.train) {
        for (double v : p.fvc_norm) {
            sum += v;
            sq += v * v;
            ++count;
        }
    }
    double mean = sum / static_cast<double>(count);
    double var = sq / static_cast<double>(count) - mean * mean;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-10);

    // Val-split statistics differ, so pooling them in would shift the result.
    PreprocessStats val_stats = compute_stats(splits.val.records);
    CHECK(val_stats.fvc.mean != doctest::Approx(prep.stats.fvc.mean).epsilon(1e-12));
}

TEST_CASE("label maps come from sorted train categories with a reserved unseen code") {
    LabelMap map{{"Currently smokes", "Ex-smoker", "Never smoked"}};
    CHECK(map.code("Currently smokes") == 0);
    CHECK(map.code("Ex-smoker") == 1);
    CHECK(map.code("Never smoked") == 2);
    CHECK(map.code("Unknown") == 3);
    CHECK(map.cardinality() == 4);
}

TEST_CASE("shifted examples pair each visit with the next") {
    PreparedPatient p;
    p.weeks = {0.0, 3.0, 7.0};
    p.fvc_norm = {0.5, 0.2, -0.1};
    auto ex = shifted_examples(p);
    REQUIRE(ex.size() == 2);
    CHECK(ex[0].week == 0.0);
    CHECK(ex[0].next_week == 3.0);
    CHECK(ex[0].fvc_norm == 0.5);
    CHECK(ex[0].target_fvc_norm == 0.2);
    CHECK(ex[1].week == 3.0);
    CHECK(ex[1].next_week == 7.0);
    CHECK(ex[1].target_fvc_norm == -0.1);
}

TEST_CASE("zero-variance features are rejected by name") {
    PatientRecord a, b;
    a.id = "A";
    a.weeks = {0, 5};
    a.fvc = {2000, 2000};
    a.static_info = {60.0, "Male", "Never smoked"};
    b.id = "B";
    b.weeks = {0, 9};
    b.fvc = {2000, 2000};
    b.static_info = {70.0, "Female", "Ex-smoker"};
    std::vector<PatientRecord> records{a, b};
    CHECK_THROWS_WITH_AS(compute_stats(records),
                         "feature 'fvc' has zero variance in the training split",
                         ContractError);
}

TEST_CASE("duplicate measurement rows keep the last value and warn") {
    TempDir dir("dups");
    write_file(dir.path / "measurements.csv",
               "patient_id,week,fvc\n"
               "P1,0,2500\n"
               "P1,4,2400\n"
               "P1,4,2390\n");
    write_file(dir.path / "manifest.csv",
               "patient_id,age,sex,smoking_status,image_path\n"
               "P1,61,Male,Never smoked,\n");
    std::ostringstream warn;
    Cohort c = load_cohort_dir(dir.path.string(), &warn);
    REQUIRE(c.records.size() == 1);
    REQUIRE(c.records[0].weeks.size() == 2);
    CHECK(c.records[0].fvc[1] == 2390.0);
    CHECK(warn.str().find("row 4") != std::string::npos);
    CHECK(warn.str().find("duplicate") != std::string::npos);
}

TEST_CASE("loader sorts out-of-order visits by week") {
    TempDir dir("sort");
    write_file(dir.path / "measurements.csv",
               "patient_id,week,fvc\n"
               "P1,8,2300\n"
               "P1,0,2500\n"
               "P1,4,2400\n");
    write_file(dir.path / "manifest.csv",
               "patient_id,age,sex,smoking_status,image_path\n"
               "P1,61,Male,Never smoked,\n");
    Cohort c = load_cohort_dir(dir.path.string());
    CHECK(c.records[0].weeks == std::vector<double>{0, 4, 8});
    CHECK(c.records[0].fvc == std::vector<double>{2500, 2400, 2300});
}

TEST_CASE("format errors carry the offending row number") {
    TempDir dir("badrows");
    write_file(dir.path / "manifest.csv",
               "patient_id,age,sex,smoking_status,image_path\n"
               "P1,61,Male,Never smoked,\n");

    write_file(dir.path / "measurements.csv",
               "patient_id,week,fvc\n"
               "P1,0,2500\n"
               "P1,4\n");
    CHECK_THROWS_WITH_AS(load_cohort_dir(dir.path.string()),
                         doctest::Contains("row 3"), FormatError);

    write_file(dir.path / "measurements.csv",
               "patient_id,week,fvc\n"
               "P1,zero,2500\n");
    CHECK_THROWS_WITH_AS(load_cohort_dir(dir.path.string()),
                         doctest::Contains("row 2"), FormatError);

    write_file(dir.path / "measurements.csv", "id,week,fvc\nP1,0,2500\n");
    CHECK_THROWS_AS(load_cohort_dir(dir.path.string()), FormatError);
}

TEST_CASE("cross-file consistency is enforced") {
    TempDir dir("consist");
    write_file(dir.path / "measurements.csv",
               "patient_id,week,fvc\n"
               "P1,0,2500\n"
               "P2,0,2600\n");
    write_file(dir.path / "manifest.csv",
               "patient_id,age,sex,smoking_status,image_path\n"
               "P1,61,Male,Never smoked,\n");
    CHECK_THROWS_WITH_AS(load_cohort_dir(dir.path.string()),
                         doctest::Contains("P2"), FormatError);

    write_file(dir.path / "measurements.csv",
               "patient_id,week,fvc\n"
               "P1,0,2500\n");
    write_file(dir.path / "manifest.csv",
               "patient_id,age,sex,smoking_status,image_path\n"
               "P1,61,Male,Never smoked,\n"
               "P3,70,Female,Ex-smoker,\n");
    CHECK_THROWS_WITH_AS(load_cohort_dir(dir.path.string()),
                         doctest::Contains("P3"), FormatError);
}

TEST_CASE("pgm loader rejects malformed files") {
    TempDir dir("badpgm");
    write_file(dir.path / "bad_magic.pgm", "P6\n2 2\n255\n\0\0\0\0");
    CHECK_THROWS_AS(load_pgm((dir.path / "bad_magic.pgm").string()), FormatError);

    write_file(dir.path / "truncated.pgm", std::string("P5\n4 4\n255\n\0\0", 12));
    CHECK_THROWS_AS(load_pgm((dir.path / "truncated.pgm").string()), FormatError);
}
