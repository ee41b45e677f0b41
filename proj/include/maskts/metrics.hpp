#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "maskts/calib.hpp"
#include "maskts/dataset.hpp"
#include "maskts/errors.hpp"
#include "maskts/rng.hpp"

namespace maskts {

// Calibration metrics over flat per-pixel samples, all reported in percent.
//
// Binning conventions:
//   - even bins partition [0, 1] into half-open intervals [k/B, (k+1)/B),
//     with the top bin closed, so every sample lands in exactly one bin;
//   - adaptive bins sort by score and split the indices into B
//     near-equal-count groups (remainder spread over the leading groups),
//     with boundaries snapped forward so tied scores share one group;
//   - empty bins contribute zero to ECE/SCE and are skipped by MCE/ACE.
//
// SCE and ACE use the two-class decomposition of the binary task: class 1 is
// scored by p, class 0 by 1-p, and the per-bin gap compares the mean score
// against the empirical frequency of that class.

struct BinStats {
    double bin_lower = 0.0;
    double bin_upper = 0.0;
    int64_t count = 0;
    double mean_confidence = std::numeric_limits<double>::quiet_NaN();
    double accuracy = std::numeric_limits<double>::quiet_NaN();
};

enum class BinScheme { Even, Adaptive };

inline std::vector<BinStats> bin_samples(std::span<const float> confidence,
                                         std::span<const uint8_t> correct,
                                         BinScheme scheme = BinScheme::Even, int bins = 10) {
    require(confidence.size() == correct.size(), "bin_samples: length mismatch");
    require(!confidence.empty(), "bin_samples: empty input");
    require(bins >= 1, "bin_samples: bins must be >= 1");
    std::vector<BinStats> out(static_cast<size_t>(bins));

    if (scheme == BinScheme::Even) {
        std::vector<double> conf_sum(size_t(bins), 0.0), hit_sum(size_t(bins), 0.0);
        std::vector<int64_t> count(size_t(bins), 0);
        for (size_t i = 0; i < confidence.size(); ++i) {
            const double c = double(confidence[i]);
            require(c >= 0.0 && c <= 1.0, "bin_samples: confidence outside [0, 1]");
            int b = int(c * bins);
            if (b >= bins) b = bins - 1;  // confidence exactly 1.0
            conf_sum[size_t(b)] += c;
            hit_sum[size_t(b)] += double(correct[i]);
            ++count[size_t(b)];
        }
        for (int b = 0; b < bins; ++b) {
            out[size_t(b)].bin_lower = double(b) / bins;
            out[size_t(b)].bin_upper = double(b + 1) / bins;
            out[size_t(b)].count = count[size_t(b)];
            if (count[size_t(b)] > 0) {
                out[size_t(b)].mean_confidence = conf_sum[size_t(b)] / double(count[size_t(b)]);
                out[size_t(b)].accuracy = hit_sum[size_t(b)] / double(count[size_t(b)]);
            }
        }
        return out;
    }

    std::vector<size_t> order(confidence.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return confidence[a] < confidence[b]; });
    const int64_t n = int64_t(confidence.size());
    const int64_t q = n / bins, r = n % bins;
    // Tentative equal-count boundaries, snapped forward so a run of equal
    // scores never straddles two groups. Group membership then depends only
    // on the score value, which keeps the scheme permutation-invariant and
    // collapses fully tied inputs into a single occupied group.
    std::vector<int64_t> bounds(size_t(bins) + 1, 0);
    int64_t cum = 0;
    for (int b = 0; b < bins; ++b) {
        cum += q + (b < r ? 1 : 0);
        bounds[size_t(b) + 1] = cum;
    }
    for (int b = 1; b < bins; ++b) {
        int64_t e = std::max(bounds[size_t(b)], bounds[size_t(b) - 1]);
        while (e > 0 && e < n &&
               confidence[order[size_t(e)]] == confidence[order[size_t(e) - 1]])
            ++e;
        bounds[size_t(b)] = e;
    }
    for (int b = 0; b < bins; ++b) {
        const int64_t lo = bounds[size_t(b)], hi = bounds[size_t(b) + 1];
        BinStats& stats = out[size_t(b)];
        stats.count = hi - lo;
        if (stats.count > 0) {
            double conf_sum = 0.0, hit_sum = 0.0;
            for (int64_t i = lo; i < hi; ++i) {
                conf_sum += double(confidence[order[size_t(i)]]);
                hit_sum += double(correct[order[size_t(i)]]);
            }
            stats.bin_lower = double(confidence[order[size_t(lo)]]);
            stats.bin_upper = double(confidence[order[size_t(hi) - 1]]);
            stats.mean_confidence = conf_sum / double(stats.count);
            stats.accuracy = hit_sum / double(stats.count);
        }
    }
    return out;
}

inline double ece(std::span<const float> confidence, std::span<const uint8_t> correct,
                  int bins = 10) {
    const auto stats = bin_samples(confidence, correct, BinScheme::Even, bins);
    const double n = double(confidence.size());
    double acc = 0.0;
    for (const auto& b : stats)
        if (b.count > 0) acc += (double(b.count) / n) * std::abs(b.accuracy - b.mean_confidence);
    return 100.0 * acc;
}

inline double mce(std::span<const float> confidence, std::span<const uint8_t> correct,
                  int bins = 10) {
    const auto stats = bin_samples(confidence, correct, BinScheme::Even, bins);
    double worst = 0.0;
    for (const auto& b : stats)
        if (b.count > 0) worst = std::max(worst, std::abs(b.accuracy - b.mean_confidence));
    return 100.0 * worst;
}

namespace detail {

// Per-class binned gap shared by SCE (even bins, count-weighted) and ACE
// (adaptive bins, unweighted).
inline double classwise_gap(std::span<const float> prob, std::span<const uint8_t> label,
                            int cls, BinScheme scheme, int bins) {
    std::vector<float> score(prob.size());
    std::vector<uint8_t> is_class(prob.size());
    for (size_t i = 0; i < prob.size(); ++i) {
        require(prob[i] >= 0.0f && prob[i] <= 1.0f, "probability outside [0, 1]");
        score[i] = cls == 1 ? prob[i] : 1.0f - prob[i];
        is_class[i] = label[i] == cls ? 1 : 0;
    }
    const auto stats = bin_samples(score, is_class, scheme, bins);
    if (scheme == BinScheme::Even) {
        const double n = double(prob.size());
        double acc = 0.0;
        for (const auto& b : stats)
            if (b.count > 0)
                acc += (double(b.count) / n) * std::abs(b.accuracy - b.mean_confidence);
        return acc;
    }
    double acc = 0.0;
    int64_t occupied = 0;
    for (const auto& b : stats)
        if (b.count > 0) {
            acc += std::abs(b.accuracy - b.mean_confidence);
            ++occupied;
        }
    return occupied > 0 ? acc / double(occupied) : 0.0;
}

}  // namespace detail

inline double sce(std::span<const float> prob, std::span<const uint8_t> label, int bins = 10) {
    require(prob.size() == label.size(), "sce: length mismatch");
    require(!prob.empty(), "sce: empty input");
    return 100.0 * 0.5 *
           (detail::classwise_gap(prob, label, 0, BinScheme::Even, bins) +
            detail::classwise_gap(prob, label, 1, BinScheme::Even, bins));
}

inline double ace(std::span<const float> prob, std::span<const uint8_t> label, int bins = 10) {
    require(prob.size() == label.size(), "ace: length mismatch");
    require(!prob.empty(), "ace: empty input");
    return 100.0 * 0.5 *
           (detail::classwise_gap(prob, label, 0, BinScheme::Adaptive, bins) +
            detail::classwise_gap(prob, label, 1, BinScheme::Adaptive, bins));
}

// ---------------------------------------------------------------------------
// Reliability table: one row per bin, empty bins included with null stats.
// The gap is mean confidence minus accuracy, positive for overconfidence.

struct ReliabilityRow {
    double bin_lower = 0.0;
    double bin_upper = 0.0;
    int64_t count = 0;
    double accuracy = std::numeric_limits<double>::quiet_NaN();
    double mean_confidence = std::numeric_limits<double>::quiet_NaN();
    double gap = std::numeric_limits<double>::quiet_NaN();
};

inline std::vector<ReliabilityRow> reliability_table(std::span<const float> confidence,
                                                     std::span<const uint8_t> correct,
                                                     int bins = 10) {
    const auto stats = bin_samples(confidence, correct, BinScheme::Even, bins);
    std::vector<ReliabilityRow> rows;
    rows.reserve(stats.size());
    for (const auto& b : stats) {
        ReliabilityRow row;
        row.bin_lower = b.bin_lower;
        row.bin_upper = b.bin_upper;
        row.count = b.count;
        if (b.count > 0) {
            row.accuracy = b.accuracy;
            row.mean_confidence = b.mean_confidence;
            row.gap = b.mean_confidence - b.accuracy;
        }
        rows.push_back(row);
    }
    return rows;
}

inline std::string reliability_csv(const std::vector<ReliabilityRow>& rows) {
    std::ostringstream os;
    os << "bin_lower,bin_upper,count,accuracy,mean_confidence,gap\n";
    auto cell = [&os](double v) {
        if (std::isnan(v)) return;  // null -> empty field
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.10g", v);
        os << buf;
    };
    for (const auto& r : rows) {
        cell(r.bin_lower);
        os << ",";
        cell(r.bin_upper);
        os << "," << r.count << ",";
        cell(r.accuracy);
        os << ",";
        cell(r.mean_confidence);
        os << ",";
        cell(r.gap);
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Local evaluation patches: n square windows whose centers are drawn
// uniformly with integer coordinates from the open range (margin, dim-margin)
// per axis; the window spans [c - size/2, c + size/2).

inline constexpr int kPatchMargin = 70;

struct PatchSpec {
    int center_y = 0;
    int center_x = 0;
    int size = 72;
};

inline std::vector<PatchSpec> sample_local_patches(int height, int width, int n, int size,
                                                   uint64_t seed) {
    require(size > 0 && size % 2 == 0, "sample_local_patches: size must be even");
    require(height >= size && width >= size,
            "sample_local_patches: image smaller than the patch window");
    const int half = size / 2;
    auto axis_range = [&](int dim) {
        const int lo = kPatchMargin + 1, hi = dim - kPatchMargin - 1;
        require(lo <= hi, "sample_local_patches: no drawable centers for dim " +
                              std::to_string(dim));
        require(lo - half >= 0 && hi + half <= dim,
                "sample_local_patches: window would leave the image");
        return std::pair<int, int>(lo, hi);
    };
    const auto [ylo, yhi] = axis_range(height);
    const auto [xlo, xhi] = axis_range(width);
    Rng rng(seed);
    std::vector<PatchSpec> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        PatchSpec p;
        p.center_y = int(rng.uniform_int(ylo, yhi));
        p.center_x = int(rng.uniform_int(xlo, xhi));
        p.size = size;
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Record-set evaluation: pools pixels according to the mode, then computes
// all four metrics over the pool.

enum class EvalMode { Full, Lesion, Patches };

inline std::string eval_mode_name(EvalMode m) {
    switch (m) {
        case EvalMode::Full: return "full";
        case EvalMode::Lesion: return "lesion";
        case EvalMode::Patches: return "patches";
    }
    return "?";
}

inline EvalMode eval_mode_from_name(const std::string& s) {
    if (s == "full") return EvalMode::Full;
    if (s == "lesion") return EvalMode::Lesion;
    if (s == "patches") return EvalMode::Patches;
    throw ContractError("unknown eval mode '" + s + "'");
}

struct EvalReport {
    double ece = 0.0;
    double mce = 0.0;
    double sce = 0.0;
    double ace = 0.0;
    EvalMode mode = EvalMode::Full;
    uint64_t seed = 0;
    int64_t n_pixels = 0;

    json to_json() const {
        return json{{"ece", ece},     {"mce", mce},
                    {"sce", sce},     {"ace", ace},
                    {"mode", eval_mode_name(mode)}, {"seed", seed},
                    {"n_pixels", n_pixels}};
    }
};

struct PixelPool {
    std::vector<float> confidence;
    std::vector<float> prob;
    std::vector<uint8_t> correct;
    std::vector<uint8_t> label;
};

namespace detail {

// Boolean window-union mask for the patches mode; overlapping windows do not
// double-count pixels. Centers are seeded per (seed, record index).
inline std::vector<uint8_t> patch_mask(int h, int w, int n, int size, uint64_t seed,
                                       size_t record_index) {
    const auto patches =
        sample_local_patches(h, w, n, size, mix_seed(seed, uint64_t(record_index)));
    std::vector<uint8_t> mask(size_t(h) * size_t(w), 0);
    const int half = size / 2;
    for (const auto& p : patches)
        for (int y = p.center_y - half; y < p.center_y + half; ++y)
            for (int x = p.center_x - half; x < p.center_x + half; ++x)
                mask[size_t(y) * size_t(w) + size_t(x)] = 1;
    return mask;
}

inline void pool_record(const CalibRecord& rec, const CalibratedOutput& out, EvalMode mode,
                        uint64_t seed, size_t record_index, PixelPool& pool) {
    require_shape(out.prob.same_shape(rec.label), "evaluate: output/label shape mismatch");
    const int h = rec.height(), w = rec.width();
    std::vector<uint8_t> keep;
    switch (mode) {
        case EvalMode::Full:
            keep.assign(size_t(h) * size_t(w), 1);
            break;
        case EvalMode::Lesion: {
            const Tensor m = union_mask(rec.label, out.prediction);
            keep.resize(size_t(m.numel()));
            for (int64_t i = 0; i < m.numel(); ++i) keep[size_t(i)] = m[i] == 1.0f;
            break;
        }
        case EvalMode::Patches:
            keep = patch_mask(h, w, 10, 72, seed, record_index);
            break;
    }
    for (int64_t i = 0; i < rec.label.numel(); ++i) {
        if (!keep[size_t(i)]) continue;
        pool.prob.push_back(out.prob[i]);
        pool.confidence.push_back(out.confidence[i]);
        pool.label.push_back(rec.label[i] == 1.0f ? 1 : 0);
        pool.correct.push_back(out.prediction[i] == rec.label[i] ? 1 : 0);
    }
}

}  // namespace detail

inline PixelPool pool_pixels(const std::vector<CalibRecord>& records,
                             const std::vector<CalibratedOutput>& outputs, EvalMode mode,
                             uint64_t seed) {
    require(records.size() == outputs.size(), "evaluate: records/outputs size mismatch");
    PixelPool pool;
    for (size_t i = 0; i < records.size(); ++i)
        detail::pool_record(records[i], outputs[i], mode, seed, i, pool);
    require(!pool.confidence.empty(), "evaluate: empty pixel pool");
    return pool;
}

inline EvalReport evaluate(const std::vector<CalibRecord>& records,
                           const std::vector<CalibratedOutput>& outputs, EvalMode mode,
                           uint64_t seed, int bins = 10) {
    const PixelPool pool = pool_pixels(records, outputs, mode, seed);
    EvalReport rep;
    rep.ece = ece(pool.confidence, pool.correct, bins);
    rep.mce = mce(pool.confidence, pool.correct, bins);
    rep.sce = sce(pool.prob, pool.label, bins);
    rep.ace = ace(pool.prob, pool.label, bins);
    rep.mode = mode;
    rep.seed = seed;
    rep.n_pixels = int64_t(pool.confidence.size());
    return rep;
}

// Patches-mode variant that averages each metric over the individual
// windows instead of pooling the pixels.
inline EvalReport evaluate_per_patch(const std::vector<CalibRecord>& records,
                                     const std::vector<CalibratedOutput>& outputs,
                                     uint64_t seed, int bins = 10) {
    require(records.size() == outputs.size(), "evaluate: records/outputs size mismatch");
    EvalReport rep;
    rep.mode = EvalMode::Patches;
    rep.seed = seed;
    int64_t n_windows = 0;
    for (size_t ri = 0; ri < records.size(); ++ri) {
        const auto& rec = records[ri];
        const auto& out = outputs[ri];
        const int h = rec.height(), w = rec.width();
        const auto patches = sample_local_patches(h, w, 10, 72, mix_seed(seed, uint64_t(ri)));
        for (const auto& p : patches) {
            PixelPool pool;
            const int half = p.size / 2;
            for (int y = p.center_y - half; y < p.center_y + half; ++y)
                for (int x = p.center_x - half; x < p.center_x + half; ++x) {
                    const int64_t i = rec.label.index(0, 0, y, x);
                    pool.prob.push_back(out.prob[i]);
                    pool.confidence.push_back(out.confidence[i]);
                    pool.label.push_back(rec.label[i] == 1.0f ? 1 : 0);
                    pool.correct.push_back(out.prediction[i] == rec.label[i] ? 1 : 0);
                }
            rep.ece += ece(pool.confidence, pool.correct, bins);
            rep.mce += mce(pool.confidence, pool.correct, bins);
            rep.sce += sce(pool.prob, pool.label, bins);
            rep.ace += ace(pool.prob, pool.label, bins);
            rep.n_pixels += int64_t(pool.confidence.size());
            ++n_windows;
        }
    }
    require(n_windows > 0, "evaluate: no patch windows");
    rep.ece /= double(n_windows);
    rep.mce /= double(n_windows);
    rep.sce /= double(n_windows);
    rep.ace /= double(n_windows);
    return rep;
}

}  // namespace maskts
