#pragma once

#include <algorithm>
#include <cmath>

namespace maskts {

// Stable logistic function, evaluated branch-per-sign. For negative inputs
// the result is held strictly below 0.5 (a one-ulp adjustment in the rounding
// sliver near zero) so that thresholding the output at 0.5 reproduces the
// sign of the input exactly for every representable value. Temperature
// scaling then provably never flips a prediction.
template <class T>
inline T stable_sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    const T p = e / (T(1) + e);
    return p < T(0.5) ? p : std::nextafter(T(0.5), T(0));
}

// log(1 + e^x) without overflow on either tail.
template <class T>
inline T stable_softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <class T>
inline T sigmoid_derivative_from_value(T p) {
    return p * (T(1) - p);
}

// Cross-entropy of sigmoid(z) against a 0/1 label, computed from the logit
// so saturated probabilities never hit log(0).
template <class T>
inline T bce_from_logit(T z, T y) {
    return std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
}

// Binary entropy of q in bits, with 0*log2(0) := 0.
inline double entropy_bits(double q) {
    if (q <= 0.0 || q >= 1.0) return 0.0;
    const double h = -(q * std::log2(q) + (1.0 - q) * std::log2(1.0 - q));
    return std::clamp(h, 0.0, 1.0);
}

}  // namespace maskts
