#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "maskts/calib.hpp"
#include "maskts/dataset.hpp"
#include "maskts/errors.hpp"
#include "maskts/numeric.hpp"

namespace maskts {

// Global temperature fit: minimizes the mean cross-entropy of sigmoid(z/T)
// against the labels over every pixel of the fitting records. The search
// runs in log-temperature space over [kTempMin, kTempMax]: a 512-point grid
// scan selects a bracket, golden-section refines it to 1e-4 in log T. Ties
// are broken toward T = 1.

struct TsFitResult {
    double t0 = 1.0;
    double final_loss = 0.0;
    int iterations = 0;
    double loss_at_unity = 0.0;
};

namespace detail {

struct PixelView {
    const Tensor* logits;
    const Tensor* labels;
};

inline std::vector<PixelView> pixel_views(const std::vector<CalibRecord>& records) {
    require(!records.empty(), "fit_global_temperature: no records");
    std::vector<PixelView> views;
    views.reserve(records.size());
    for (const auto& r : records) {
        require_shape(r.logits.same_shape(r.label), "record logits/label shape mismatch");
        require_binary(r.label, "fit label");
        views.push_back({&r.logits, &r.label});
    }
    return views;
}

inline double mean_bce_at(const std::vector<PixelView>& views, double t) {
    double acc = 0.0;
    int64_t n = 0;
    for (const auto& v : views) {
        const Tensor& z = *v.logits;
        const Tensor& y = *v.labels;
        for (int64_t i = 0; i < z.numel(); ++i)
            acc += bce_from_logit(double(z[i]) / t, double(y[i]));
        n += z.numel();
    }
    return acc / double(n);
}

// Coarse surrogate of the mean BCE used only to pick the golden-section
// bracket. mean BCE(T) = S1/(n*T) + (1/n) * sum_i log1p(exp(-|z_i|/T)),
// and the nonlinear term depends on |z| only, so a fine histogram of |z|
// evaluates the whole grid in milliseconds.
class BracketScan {
public:
    explicit BracketScan(const std::vector<PixelView>& views, int bins = 8192)
        : counts_(size_t(bins), 0) {
        double max_abs = 0.0;
        for (const auto& v : views)
            for (float z : *v.logits) max_abs = std::max(max_abs, double(std::abs(z)));
        max_abs_ = std::max(max_abs, 1e-12);
        for (const auto& v : views) {
            const Tensor& z = *v.logits;
            const Tensor& y = *v.labels;
            for (int64_t i = 0; i < z.numel(); ++i) {
                linear_ += std::max(double(z[i]), 0.0) - double(z[i]) * double(y[i]);
                const double a = std::abs(double(z[i])) / max_abs_;
                size_t b = size_t(a * double(counts_.size()));
                if (b >= counts_.size()) b = counts_.size() - 1;
                ++counts_[b];
                ++n_;
            }
        }
    }

    double surrogate(double t) const {
        double acc = linear_ / t;
        const double width = max_abs_ / double(counts_.size());
        for (size_t b = 0; b < counts_.size(); ++b) {
            if (!counts_[b]) continue;
            const double center = (double(b) + 0.5) * width;
            acc += double(counts_[b]) * std::log1p(std::exp(-center / t));
        }
        return acc / double(n_);
    }

private:
    std::vector<int64_t> counts_;
    double max_abs_ = 0.0;
    double linear_ = 0.0;
    int64_t n_ = 0;
};

}  // namespace detail

inline TsFitResult fit_global_temperature(const std::vector<CalibRecord>& records) {
    const auto views = detail::pixel_views(records);
    const double lo = std::log(double(kTempMin));
    const double hi = std::log(double(kTempMax));

    constexpr int kGridPoints = 512;
    const detail::BracketScan scan(views);
    int best = 0;
    double best_loss = 1e300;
    for (int i = 0; i < kGridPoints; ++i) {
        const double u = lo + (hi - lo) * double(i) / double(kGridPoints - 1);
        const double loss = scan.surrogate(std::exp(u));
        if (loss < best_loss) {
            best_loss = loss;
            best = i;
        }
    }
    auto grid_u = [&](int i) {
        i = std::max(0, std::min(kGridPoints - 1, i));
        return lo + (hi - lo) * double(i) / double(kGridPoints - 1);
    };
    // A generous bracket absorbs any surrogate-vs-exact argmin drift.
    double a = grid_u(best - 4);
    double b = grid_u(best + 4);

    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = detail::mean_bce_at(views, std::exp(c));
    double fd = detail::mean_bce_at(views, std::exp(d));
    int iterations = 2;
    while (b - a > 1e-4) {
        if (fc < fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = detail::mean_bce_at(views, std::exp(c));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = detail::mean_bce_at(views, std::exp(d));
        }
        ++iterations;
    }

    TsFitResult res;
    res.t0 = std::exp(0.5 * (a + b));
    res.final_loss = detail::mean_bce_at(views, res.t0);
    res.loss_at_unity = detail::mean_bce_at(views, 1.0);
    res.iterations = iterations;
    if (res.loss_at_unity <= res.final_loss) {
        res.t0 = 1.0;
        res.final_loss = res.loss_at_unity;
    }
    return res;
}

// Applies a scalar temperature to one record: calibrated probabilities,
// confidences and the entropy uncertainty map. Predictions are unchanged by
// construction.
inline CalibratedOutput apply_global(const CalibRecord& rec, double t0) {
    detail::require_temperature(float(t0));
    CalibratedOutput out;
    out.prob = probability(rec.logits, t0);
    out.confidence = confidence(out.prob);
    out.uncertainty = entropy(out.confidence);
    out.prediction = predict(out.prob);
    out.temperature = Tensor(rec.logits.shape(), float(t0));
    return out;
}

}  // namespace maskts
