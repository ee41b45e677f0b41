#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "maskts/autodiff.hpp"
#include "maskts/errors.hpp"
#include "maskts/numeric.hpp"
#include "maskts/tensor.hpp"

namespace maskts {

// Pixel-wise calibration math for binary segmentation. All maps are
// single-record tensors of shape 1 x 1 x H x W; operations are pure
// functions of their inputs.
//
// Map roles:
//   logits        pre-sigmoid scores z
//   probability   sigmoid(z / T), probability of label 1, in [0, 1]
//   confidence    probability of the predicted label, in [0.5, 1]
//   mask          strictly two-valued 0/1 field
//   temperature   positive divisor of logits, in [kTempMin, kTempMax]
//   uncertainty   binary entropy of the confidence, in bits, in [0, 1]

inline constexpr float kTempMin = 0.05f;
inline constexpr float kTempMax = 20.0f;

enum class LossNorm {
    MaskCount,  // divide by the number of active mask pixels
    FullArea,   // divide by H*W
};

namespace detail {

inline void require_map(const Tensor& t, const std::string& what) {
    require_shape(t.rank() == 4 && t.dim_n() == 1 && t.dim_c() == 1,
                  what + " must have shape 1x1xHxW, got " + t.shape_str());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const std::string& what) {
    require_shape(a.same_shape(b),
                  what + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline void require_binary(const Tensor& m, const std::string& what) {
    for (float v : m)
        require(v == 0.0f || v == 1.0f, what + " must be strictly two-valued (0/1)");
}

inline void require_temperature(float t) {
    require(t >= kTempMin && t <= kTempMax,
            "temperature " + std::to_string(t) + " outside [" + std::to_string(kTempMin) +
                ", " + std::to_string(kTempMax) + "]");
}

}  // namespace detail

// sigmoid(z / T) with a per-pixel temperature map.
inline Tensor probability(const Tensor& z, const Tensor& temperature) {
    detail::require_map(z, "logit map");
    detail::require_same_shape(z, temperature, "probability");
    for (float t : temperature) detail::require_temperature(t);
    Tensor p(z.shape());
    for (int64_t i = 0; i < z.numel(); ++i) p[i] = stable_sigmoid(z[i] / temperature[i]);
    return p;
}

// sigmoid(z / T) with a global scalar temperature; T omitted means T = 1.
inline Tensor probability(const Tensor& z, double temperature = 1.0) {
    detail::require_map(z, "logit map");
    detail::require_temperature(float(temperature));
    const float t = float(temperature);
    Tensor p(z.shape());
    for (int64_t i = 0; i < z.numel(); ++i) p[i] = stable_sigmoid(z[i] / t);
    return p;
}

// Confidence of the predicted label: p if p >= 0.5 else 1 - p.
inline Tensor confidence(const Tensor& p) {
    detail::require_map(p, "probability map");
    Tensor q(p.shape());
    for (int64_t i = 0; i < p.numel(); ++i) {
        require(p[i] >= 0.0f && p[i] <= 1.0f, "probability entries must lie in [0, 1]");
        q[i] = p[i] >= 0.5f ? p[i] : 1.0f - p[i];
    }
    return q;
}

// Hard prediction: 1 where p >= 0.5, else 0.
inline Tensor predict(const Tensor& p) {
    detail::require_map(p, "probability map");
    Tensor y(p.shape());
    for (int64_t i = 0; i < p.numel(); ++i) y[i] = p[i] >= 0.5f ? 1.0f : 0.0f;
    return y;
}

// Binary entropy of the confidence, in bits.
inline Tensor entropy(const Tensor& q) {
    detail::require_map(q, "confidence map");
    Tensor h(q.shape());
    for (int64_t i = 0; i < q.numel(); ++i) {
        require(q[i] >= 0.5f && q[i] <= 1.0f, "confidence entries must lie in [0.5, 1]");
        h[i] = float(entropy_bits(double(q[i])));
    }
    return h;
}

// Logical OR of two binary masks.
inline Tensor union_mask(const Tensor& y, const Tensor& y_hat) {
    detail::require_map(y, "mask");
    detail::require_same_shape(y, y_hat, "union_mask");
    detail::require_binary(y, "union_mask label");
    detail::require_binary(y_hat, "union_mask prediction");
    Tensor m(y.shape());
    for (int64_t i = 0; i < y.numel(); ++i)
        m[i] = (y[i] == 1.0f || y_hat[i] == 1.0f) ? 1.0f : 0.0f;
    return m;
}

// Cross-entropy of sigmoid(z/T) against y over the pixels where m = 1.
// Pixels outside the mask contribute nothing, so the result is invariant to
// any change of z or T there.
inline double masked_bce_loss(const Tensor& z, const Tensor& temperature, const Tensor& y,
                              const Tensor& m, LossNorm norm = LossNorm::MaskCount) {
    detail::require_map(z, "logit map");
    detail::require_same_shape(z, temperature, "masked_bce_loss");
    detail::require_same_shape(z, y, "masked_bce_loss");
    detail::require_same_shape(z, m, "masked_bce_loss");
    int64_t active = 0;
    double acc = 0.0;
    for (int64_t i = 0; i < z.numel(); ++i) {
        if (m[i] != 1.0f) continue;
        detail::require_temperature(temperature[i]);
        acc += bce_from_logit(double(z[i]) / double(temperature[i]), double(y[i]));
        ++active;
    }
    require(active > 0, "masked_bce_loss: mask selects no pixels (degenerate mask)");
    const double denom = norm == LossNorm::MaskCount ? double(active) : double(z.numel());
    return acc / denom;
}

// Graph version of the masked loss, differentiable through the temperature
// node; z, y and m are constants of the batch.
template <class T>
NodePtrT<T> masked_bce_node(NodePtrT<T> temperature, TensorT<T> z, TensorT<T> y, TensorT<T> m,
                            LossNorm norm = LossNorm::MaskCount) {
    const auto& tv = temperature->value;
    require_shape(tv.same_shape(z) && tv.same_shape(y) && tv.same_shape(m),
                  "masked_bce_node: map shapes disagree");
    int64_t active = 0;
    double acc = 0.0;
    for (int64_t i = 0; i < z.numel(); ++i) {
        if (m[i] != T(1)) continue;
        acc += bce_from_logit(double(z[i]) / double(tv[i]), double(y[i]));
        ++active;
    }
    require(active > 0, "masked_bce_node: mask selects no pixels (degenerate mask)");
    const double denom = norm == LossNorm::MaskCount ? double(active) : double(z.numel());
    TensorT<T> out({1});
    out[0] = T(acc / denom);

    auto zs = std::make_shared<TensorT<T>>(std::move(z));
    auto ys = std::make_shared<TensorT<T>>(std::move(y));
    auto ms = std::make_shared<TensorT<T>>(std::move(m));
    auto backward = [temperature, zs, ys, ms, denom](NodeT<T>& self) {
        if (!temperature->requires_grad) return;
        temperature->materialize_grad();
        const T seed = self.grad[0];
        const auto& tv = temperature->value;
        for (int64_t i = 0; i < zs->numel(); ++i) {
            if ((*ms)[i] != T(1)) continue;
            const T zt = (*zs)[i] / tv[i];
            const T d_zt = stable_sigmoid(zt) - (*ys)[i];
            // d(z/T)/dT = -z / T^2
            temperature->grad[i] += seed * d_zt * (-(*zs)[i] / (tv[i] * tv[i])) / T(denom);
        }
    };
    return make_op_node<T>(Op::MaskedBce, std::move(out), {temperature}, backward);
}

// Masked temperature composition: the network temperature where the
// prediction is positive, the global temperature elsewhere.
inline Tensor compose_mask_ts(const Tensor& t_prime, const Tensor& y_hat, double t0) {
    detail::require_map(t_prime, "temperature map");
    detail::require_same_shape(t_prime, y_hat, "compose_mask_ts");
    detail::require_binary(y_hat, "compose_mask_ts prediction");
    detail::require_temperature(float(t0));
    Tensor t(t_prime.shape());
    for (int64_t i = 0; i < t_prime.numel(); ++i)
        t[i] = y_hat[i] == 1.0f ? t_prime[i] : float(t0);
    return t;
}

// Bundle of everything a calibrated record exposes downstream.
struct CalibratedOutput {
    Tensor prob;         // sigmoid(z / T)
    Tensor confidence;   // max(p, 1-p)
    Tensor uncertainty;  // binary entropy of confidence, bits
    Tensor prediction;   // 0/1 mask, identical to the uncalibrated prediction
    Tensor temperature;  // per-pixel temperature actually applied
};

}  // namespace maskts
