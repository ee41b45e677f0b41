#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "maskts/numeric.hpp"
#include "maskts/synth.hpp"

using namespace maskts;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("generation is deterministic byte for byte") {
    SynthConfig cfg;
    cfg.n_train = 3;
    cfg.n_val = 1;
    cfg.n_test = 2;
    cfg.seed = 7;
    const auto dir_a = fs::temp_directory_path() / "maskts_synth_a";
    const auto dir_b = fs::temp_directory_path() / "maskts_synth_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    const Manifest ma = generate_dataset(cfg, dir_a);
    const Manifest mb = generate_dataset(cfg, dir_b);
    CHECK(slurp(dir_a / "manifest.json") == slurp(dir_b / "manifest.json"));
    REQUIRE(ma.entries.size() == 6);
    for (const auto& e : ma.entries) CHECK(slurp(dir_a / e.path) == slurp(dir_b / e.path));

    // a different seed produces different bytes
    SynthConfig cfg2 = cfg;
    cfg2.seed = 8;
    const auto dir_c = fs::temp_directory_path() / "maskts_synth_c";
    fs::remove_all(dir_c);
    generate_dataset(cfg2, dir_c);
    CHECK(slurp(dir_a / ma.entries[0].path) != slurp(dir_c / ma.entries[0].path));

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    fs::remove_all(dir_c);
}

TEST_CASE("manifest round-trips and validates its digest") {
    SynthConfig cfg;
    cfg.n_train = 2;
    cfg.n_val = 1;
    cfg.n_test = 1;
    cfg.seed = 9;
    const auto dir = fs::temp_directory_path() / "maskts_synth_m";
    fs::remove_all(dir);
    generate_dataset(cfg, dir);

    const Manifest m = load_manifest(dir / "manifest.json");
    CHECK(m.entries.size() == 4);
    CHECK(SynthConfig::from_json(m.config).seed == 9);
    const auto train = load_split(m, "train");
    CHECK(train.size() == 2);
    CHECK(train[0].logits.dim_h() == cfg.height);
    CHECK_THROWS_AS(load_split(m, "nope"), ContractError);

    // corrupt the digest
    json j = read_json_file(dir / "manifest.json");
    j["digest"] = "0000000000000000";
    write_json_file(dir / "manifest.json", j);
    CHECK_THROWS_AS(load_manifest(dir / "manifest.json"), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("records obey the planted-temperature construction") {
    SynthConfig cfg;
    cfg.seed = 21;
    const auto rec = make_record(cfg, "train", 0);
    REQUIRE(rec.true_logits.numel() == rec.logits.numel());
    for (int64_t i = 0; i < rec.logits.numel(); ++i) {
        const float w = rec.true_logits[i];
        const double t_true = w > 0.0f ? cfg.t_fg : cfg.t_bg;
        CHECK(rec.logits[i] == float(t_true * double(w)));
        CHECK((rec.label[i] == 0.0f || rec.label[i] == 1.0f));
        CHECK(std::abs(w) <= float(cfg.amplitude));
    }
}

TEST_CASE("lesion area stays inside the configured band") {
    SynthConfig cfg;
    cfg.seed = 33;
    for (int i = 0; i < 12; ++i) {
        const auto rec = make_record(cfg, "test", i);
        int64_t inside = 0;
        for (float w : rec.true_logits) inside += w > 0.0f;
        const double frac = double(inside) / double(rec.true_logits.numel());
        CHECK(frac >= cfg.lesion_frac_min);
        CHECK(frac <= cfg.lesion_frac_max);
    }
}

TEST_CASE("labels are Bernoulli draws of the true logit field") {
    // pool pixels by true probability bands across many records; the
    // empirical frequency must match within three binomial deviations
    SynthConfig cfg;
    cfg.seed = 55;
    cfg.height = 96;
    cfg.width = 96;
    std::vector<double> p_lo{0.05, 0.3, 0.6, 0.9};
    std::vector<double> p_hi{0.3, 0.6, 0.9, 0.999};
    std::vector<int64_t> count(4, 0);
    std::vector<double> hits(4, 0), expect(4, 0), var(4, 0);
    for (int r = 0; r < 30; ++r) {
        const auto rec = make_record(cfg, "train", r);
        for (int64_t i = 0; i < rec.true_logits.numel(); ++i) {
            const double p = stable_sigmoid(double(rec.true_logits[i]));
            for (size_t b = 0; b < 4; ++b)
                if (p >= p_lo[b] && p < p_hi[b]) {
                    ++count[b];
                    hits[b] += double(rec.label[i]);
                    expect[b] += p;
                    var[b] += p * (1 - p);
                }
        }
    }
    for (size_t b = 0; b < 4; ++b) {
        CAPTURE(b);
        REQUIRE(count[b] > 200);
        const double sigma = std::sqrt(var[b]);
        CHECK(std::abs(hits[b] - expect[b]) <= 3.0 * sigma);
    }
}

TEST_CASE("splits draw from disjoint streams") {
    SynthConfig cfg;
    cfg.seed = 77;
    const auto a = make_record(cfg, "train", 0);
    const auto b = make_record(cfg, "test", 0);
    const auto c = make_record(cfg, "val", 0);
    CHECK(std::memcmp(a.logits.data(), b.logits.data(),
                      sizeof(float) * size_t(a.logits.numel())) != 0);
    CHECK(std::memcmp(a.logits.data(), c.logits.data(),
                      sizeof(float) * size_t(a.logits.numel())) != 0);
    CHECK_THROWS_AS(make_record(cfg, "holdout", 0), ContractError);
}

TEST_CASE("profile presets fix the geometry") {
    CHECK(SynthConfig::mini().height == 64);
    CHECK(SynthConfig::full().height == 352);
    CHECK(SynthConfig::full().width == 352);
}

TEST_CASE("config validation rejects out-of-band parameters") {
    SynthConfig cfg;
    cfg.t_fg = 30.0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = SynthConfig{};
    cfg.radius_frac_max = 0.5;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = SynthConfig{};
    cfg.min_blobs = 0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = SynthConfig{};
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("uniformly planted unit temperature stores calibrated logits") {
    SynthConfig cfg;
    cfg.t_fg = 1.0;
    cfg.t_bg = 1.0;
    cfg.seed = 91;
    const auto rec = make_record(cfg, "train", 0);
    CHECK(std::memcmp(rec.logits.data(), rec.true_logits.data(),
                      sizeof(float) * size_t(rec.logits.numel())) == 0);
}
