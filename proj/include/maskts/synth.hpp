#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "maskts/dataset.hpp"
#include "maskts/errors.hpp"
#include "maskts/mts_io.hpp"
#include "maskts/numeric.hpp"
#include "maskts/rng.hpp"
#include "maskts/tensor.hpp"

namespace maskts {

// Synthetic dataset with planted miscalibration.
//
// Each record is built from a smooth signed blob potential phi: positive
// inside 1..3 elliptical-ish lesions, negative outside, crossing zero at the
// lesion contour with a transition width set by `softness`. The true logit
// field is w = amplitude * tanh(phi), labels are drawn pixel-wise as
// Bernoulli(sigmoid(w)), and the stored (miscalibrated) logits are
// z = T_true * w with T_true = t_fg inside the contour and t_bg outside.
// Dividing z by the planted temperature therefore recovers exact
// calibration, which is what makes the generator usable as an oracle.
struct SynthConfig {
    int n_train = 40;
    int n_val = 10;
    int n_test = 20;
    int height = 64;
    int width = 64;
    double t_fg = 3.0;
    double t_bg = 1.5;
    int min_blobs = 1;
    int max_blobs = 3;
    double radius_frac_min = 0.08;
    double radius_frac_max = 0.20;
    double amplitude = 8.0;      // peak |true logit|
    double softness = 1.5;       // contour transition width, pixels
    double noise_sigma = 0.1;    // image noise
    double lesion_frac_min = 0.02;
    double lesion_frac_max = 0.12;
    uint64_t seed = 1;

    static SynthConfig mini() { return SynthConfig{}; }

    static SynthConfig full() {
        SynthConfig cfg;
        cfg.height = 352;
        cfg.width = 352;
        return cfg;
    }

    json to_json() const {
        return json{{"n_train", n_train},
                    {"n_val", n_val},
                    {"n_test", n_test},
                    {"height", height},
                    {"width", width},
                    {"t_fg", t_fg},
                    {"t_bg", t_bg},
                    {"min_blobs", min_blobs},
                    {"max_blobs", max_blobs},
                    {"radius_frac_min", radius_frac_min},
                    {"radius_frac_max", radius_frac_max},
                    {"amplitude", amplitude},
                    {"softness", softness},
                    {"noise_sigma", noise_sigma},
                    {"lesion_frac_min", lesion_frac_min},
                    {"lesion_frac_max", lesion_frac_max},
                    {"seed", seed}};
    }

    static SynthConfig from_json(const json& j) {
        SynthConfig cfg;
        cfg.n_train = j.at("n_train");
        cfg.n_val = j.at("n_val");
        cfg.n_test = j.at("n_test");
        cfg.height = j.at("height");
        cfg.width = j.at("width");
        cfg.t_fg = j.at("t_fg");
        cfg.t_bg = j.at("t_bg");
        cfg.min_blobs = j.at("min_blobs");
        cfg.max_blobs = j.at("max_blobs");
        cfg.radius_frac_min = j.at("radius_frac_min");
        cfg.radius_frac_max = j.at("radius_frac_max");
        cfg.amplitude = j.at("amplitude");
        cfg.softness = j.at("softness");
        cfg.noise_sigma = j.at("noise_sigma");
        cfg.lesion_frac_min = j.at("lesion_frac_min");
        cfg.lesion_frac_max = j.at("lesion_frac_max");
        cfg.seed = j.at("seed");
        return cfg;
    }

    void validate() const {
        require(n_train >= 1 && n_val >= 0 && n_test >= 1, "synth: empty split");
        require(height >= 8 && width >= 8, "synth: image too small");
        require(t_fg >= 0.05 && t_fg <= 20.0 && t_bg >= 0.05 && t_bg <= 20.0,
                "synth: planted temperatures must lie in [0.05, 20]");
        require(min_blobs >= 1 && max_blobs <= 3 && min_blobs <= max_blobs,
                "synth: blob count must lie in [1, 3]");
        require(radius_frac_min >= 0.05 && radius_frac_max <= 0.2 &&
                    radius_frac_min <= radius_frac_max,
                "synth: radius fraction must lie in [0.05, 0.2]");
        require(amplitude > 0 && softness > 0, "synth: amplitude and softness must be positive");
        require(lesion_frac_min > 0 && lesion_frac_max < 1 &&
                    lesion_frac_min < lesion_frac_max,
                "synth: bad lesion fraction bounds");
    }
};

namespace detail {

inline int split_tag(const std::string& split) {
    if (split == "train") return 0;
    if (split == "val") return 1;
    if (split == "test") return 2;
    throw ContractError("unknown split '" + split + "'");
}

struct Blob {
    double cy, cx, r;
};

// Signed distance-like potential, positive inside the nearest blob.
inline double blob_potential(const std::vector<Blob>& blobs, double y, double x,
                             double softness) {
    double best = -1e30;
    for (const auto& b : blobs) {
        const double d = std::hypot(y - b.cy, x - b.cx);
        best = std::max(best, (b.r - d) / softness);
    }
    return best;
}

}  // namespace detail

// Generates one record deterministically from (seed, split, index). Blob
// layouts are resampled until the lesion area lands inside the configured
// fraction band.
inline CalibRecord make_record(const SynthConfig& cfg, const std::string& split, int index) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, uint64_t(detail::split_tag(split)), uint64_t(index)));
    const int H = cfg.height, W = cfg.width;
    const double rmin = cfg.radius_frac_min * std::min(H, W);
    const double rmax = cfg.radius_frac_max * std::min(H, W);

    std::vector<detail::Blob> blobs;
    double lesion_frac = 0.0;
    for (int attempt = 0; attempt < 256; ++attempt) {
        blobs.clear();
        const int k = int(rng.uniform_int(cfg.min_blobs, cfg.max_blobs));
        for (int i = 0; i < k; ++i) {
            detail::Blob b;
            b.r = rng.uniform(rmin, rmax);
            b.cy = rng.uniform(0.2 * H, 0.8 * H);
            b.cx = rng.uniform(0.2 * W, 0.8 * W);
            blobs.push_back(b);
        }
        int64_t inside = 0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (detail::blob_potential(blobs, y, x, cfg.softness) > 0.0) ++inside;
        lesion_frac = double(inside) / double(int64_t(H) * W);
        if (lesion_frac >= cfg.lesion_frac_min && lesion_frac <= cfg.lesion_frac_max) break;
    }
    require(lesion_frac >= cfg.lesion_frac_min && lesion_frac <= cfg.lesion_frac_max,
            "synth: could not place lesions within the area band; adjust radii");

    CalibRecord rec;
    rec.id = split + "_" + std::to_string(index);
    rec.split = split;
    rec.image = Tensor({1, 1, H, W});
    rec.logits = Tensor({1, 1, H, W});
    rec.label = Tensor({1, 1, H, W});
    rec.true_logits = Tensor({1, 1, H, W});

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int64_t i = rec.logits.index(0, 0, y, x);
            const double phi = detail::blob_potential(blobs, y, x, cfg.softness);
            // the stored z is exactly T_true times the stored w
            const float w = float(cfg.amplitude * std::tanh(phi));
            const double t_true = phi > 0.0 ? cfg.t_fg : cfg.t_bg;
            rec.true_logits[i] = w;
            rec.logits[i] = float(t_true * double(w));
            rec.label[i] = rng.uniform() < stable_sigmoid(double(w)) ? 1.0f : 0.0f;
            rec.image[i] = float(0.5 * (std::tanh(phi) + 1.0) + cfg.noise_sigma * rng.normal());
        }
    return rec;
}

// Writes all splits plus a manifest under out_dir.
inline Manifest generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "records", ec);
    if (ec) throw FormatError("cannot create " + (out_dir / "records").string());

    Manifest m;
    m.config = cfg.to_json();
    m.digest = config_digest(m.config);
    m.root = out_dir;
    const std::vector<std::pair<std::string, int>> splits{
        {"train", cfg.n_train}, {"val", cfg.n_val}, {"test", cfg.n_test}};
    for (const auto& [split, count] : splits)
        for (int i = 0; i < count; ++i) {
            CalibRecord rec = make_record(cfg, split, i);
            const std::string rel = "records/" + rec.id + ".mts";
            save_record(rec, out_dir / rel);
            m.entries.push_back({rec.id, split, rel});
        }
    write_manifest(m, out_dir / "manifest.json");
    return m;
}

// In-memory variant used by tests and the acceptance suite.
inline std::vector<CalibRecord> generate_split(const SynthConfig& cfg, const std::string& split,
                                               int count) {
    std::vector<CalibRecord> out;
    out.reserve(size_t(count));
    for (int i = 0; i < count; ++i) out.push_back(make_record(cfg, split, i));
    return out;
}

}  // namespace maskts
