#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "maskts/errors.hpp"
#include "maskts/tensor.hpp"

namespace maskts {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Named view of a trainable tensor, used by the optimizer and checkpoints.
struct ParamRef {
    std::string name;
    Tensor* tensor;
};

// Standard bias-corrected Adam. Moments are kept in double for stability and
// allocated on the first step.
class AdamState {
public:
    explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

    int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

    void step(const std::vector<ParamRef>& params, const std::vector<const Tensor*>& grads) {
        require(params.size() == grads.size(), "adam: params/grads size mismatch");
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i].tensor->size(), 0.0);
                v_[i].assign(params[i].tensor->size(), 0.0);
            }
        }
        require(m_.size() == params.size(), "adam: parameter set changed between steps");
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i].tensor;
            const Tensor& g = *grads[i];
            require(p.size() == g.size() && p.size() == m_[i].size(),
                    "adam: gradient shape mismatch for parameter " + params[i].name);
            for (size_t j = 0; j < p.size(); ++j) {
                const double gj = double(g[int64_t(j)]);
                if (!std::isfinite(gj))
                    throw ContractError("adam: non-finite gradient for parameter " +
                                        params[i].name + " at element " + std::to_string(j));
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj;
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p[int64_t(j)] -= float(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

private:
    AdamConfig cfg_;
    int64_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace maskts
