#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maskts/adam.hpp"
#include "maskts/autodiff.hpp"
#include "maskts/calib.hpp"
#include "maskts/dataset.hpp"
#include "maskts/errors.hpp"
#include "maskts/rng.hpp"
#include "maskts/tensor.hpp"

namespace maskts {

// Four-branch calibration network.
//
// Branches (image, logits, TS probability, TS uncertainty) each pass a block
// of conv3x3(1->8) + ReLU followed by one residual unit
// [conv3x3(8->8) + ReLU + conv3x3(8->8), added back]. Branch outputs are
// channel-concatenated, reweighted by squeeze-and-excitation channel
// attention (global average pool -> dense(C->8) -> ReLU -> dense(8->C) ->
// sigmoid -> per-channel rescale) and fused by a final 3x3 conv down to one
// channel. The temperature head is clamp(softplus(out) + 0.05, 0.05, 20),
// so the emitted map is positive and bounded by construction.

inline constexpr int kBranchChannels = 8;
inline constexpr int kSqueezeDim = 8;

struct TrainConfig {
    int epochs = 200;
    double lr = 1e-4;
    uint64_t seed = 1;
    int batch_size = 1;
    bool use_mask_loss = true;
    bool use_mask_ts = true;
    bool use_prob_branch = true;
    bool use_uncert_branch = true;
    LossNorm loss_norm = LossNorm::MaskCount;

    void validate() const {
        require(epochs >= 1, "train: epochs must be >= 1");
        require(lr > 0.0, "train: learning rate must be positive");
        require(batch_size == 1, "train: only batch size 1 is supported");
    }

    int n_branches() const { return 2 + (use_prob_branch ? 1 : 0) + (use_uncert_branch ? 1 : 0); }

    json to_json() const {
        return json{{"epochs", epochs},
                    {"lr", lr},
                    {"seed", seed},
                    {"batch_size", batch_size},
                    {"use_mask_loss", use_mask_loss},
                    {"use_mask_ts", use_mask_ts},
                    {"use_prob_branch", use_prob_branch},
                    {"use_uncert_branch", use_uncert_branch},
                    {"loss_norm", loss_norm == LossNorm::MaskCount ? "mask" : "hw"}};
    }

    static TrainConfig from_json(const json& j) {
        TrainConfig cfg;
        cfg.epochs = j.at("epochs");
        cfg.lr = j.at("lr");
        cfg.seed = j.at("seed");
        cfg.batch_size = j.at("batch_size");
        cfg.use_mask_loss = j.at("use_mask_loss");
        cfg.use_mask_ts = j.at("use_mask_ts");
        cfg.use_prob_branch = j.at("use_prob_branch");
        cfg.use_uncert_branch = j.at("use_uncert_branch");
        cfg.loss_norm = j.at("loss_norm") == "hw" ? LossNorm::FullArea : LossNorm::MaskCount;
        return cfg;
    }
};

template <class T>
struct ConvParamsT {
    TensorT<T> weight;  // O x C x k x k
    TensorT<T> bias;    // O
};

template <class T>
struct DenseParamsT {
    TensorT<T> weight;  // D x C
    TensorT<T> bias;    // D
};

template <class T>
struct BranchBlockT {
    ConvParamsT<T> conv1, conv2, conv3;
};

template <class T>
struct MaskTsModelT {
    std::vector<BranchBlockT<T>> branches;  // one per active branch
    DenseParamsT<T> se_reduce;              // C -> kSqueezeDim
    DenseParamsT<T> se_expand;              // kSqueezeDim -> C
    ConvParamsT<T> fusion;                  // C -> 1, 3x3
    double t0 = 1.0;
    bool use_prob_branch = true;
    bool use_uncert_branch = true;

    int n_branches() const { return int(branches.size()); }
    int fused_channels() const { return n_branches() * kBranchChannels; }

    template <class U>
    MaskTsModelT<U> cast() const {
        MaskTsModelT<U> out;
        for (const auto& b : branches)
            out.branches.push_back({{b.conv1.weight.template cast<U>(),
                                     b.conv1.bias.template cast<U>()},
                                    {b.conv2.weight.template cast<U>(),
                                     b.conv2.bias.template cast<U>()},
                                    {b.conv3.weight.template cast<U>(),
                                     b.conv3.bias.template cast<U>()}});
        out.se_reduce = {se_reduce.weight.template cast<U>(), se_reduce.bias.template cast<U>()};
        out.se_expand = {se_expand.weight.template cast<U>(), se_expand.bias.template cast<U>()};
        out.fusion = {fusion.weight.template cast<U>(), fusion.bias.template cast<U>()};
        out.t0 = t0;
        out.use_prob_branch = use_prob_branch;
        out.use_uncert_branch = use_uncert_branch;
        return out;
    }
};

using MaskTsModel = MaskTsModelT<float>;

namespace detail {

template <class T>
TensorT<T> kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in));
    return TensorT<T>::random_uniform(std::move(shape), rng, -bound, bound);
}

}  // namespace detail

// Seeded Kaiming-uniform init with zero biases; draw order is fixed so a
// seed pins the parameter vector exactly.
inline MaskTsModel init_model(const TrainConfig& cfg) {
    cfg.validate();
    MaskTsModel m;
    m.use_prob_branch = cfg.use_prob_branch;
    m.use_uncert_branch = cfg.use_uncert_branch;
    Rng rng(mix_seed(cfg.seed, 0x6d6f64656cull));  // parameter stream
    const int B = cfg.n_branches();
    const int C = B * kBranchChannels;
    for (int b = 0; b < B; ++b) {
        BranchBlockT<float> blk;
        blk.conv1 = {detail::kaiming_uniform<float>({kBranchChannels, 1, 3, 3}, 1 * 9, rng),
                     Tensor({kBranchChannels})};
        blk.conv2 = {detail::kaiming_uniform<float>(
                         {kBranchChannels, kBranchChannels, 3, 3}, kBranchChannels * 9, rng),
                     Tensor({kBranchChannels})};
        blk.conv3 = {detail::kaiming_uniform<float>(
                         {kBranchChannels, kBranchChannels, 3, 3}, kBranchChannels * 9, rng),
                     Tensor({kBranchChannels})};
        m.branches.push_back(std::move(blk));
    }
    m.se_reduce = {detail::kaiming_uniform<float>({kSqueezeDim, C}, C, rng),
                   Tensor({kSqueezeDim})};
    m.se_expand = {detail::kaiming_uniform<float>({C, kSqueezeDim}, kSqueezeDim, rng),
                   Tensor({C})};
    m.fusion = {detail::kaiming_uniform<float>({1, C, 3, 3}, C * 9, rng), Tensor({1})};
    return m;
}

template <class T>
std::vector<std::pair<std::string, TensorT<T>*>> model_params(MaskTsModelT<T>& m) {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    for (size_t b = 0; b < m.branches.size(); ++b) {
        const std::string p = "branch" + std::to_string(b) + ".";
        auto& blk = m.branches[b];
        out.push_back({p + "conv1.weight", &blk.conv1.weight});
        out.push_back({p + "conv1.bias", &blk.conv1.bias});
        out.push_back({p + "conv2.weight", &blk.conv2.weight});
        out.push_back({p + "conv2.bias", &blk.conv2.bias});
        out.push_back({p + "conv3.weight", &blk.conv3.weight});
        out.push_back({p + "conv3.bias", &blk.conv3.bias});
    }
    out.push_back({"se.reduce.weight", &m.se_reduce.weight});
    out.push_back({"se.reduce.bias", &m.se_reduce.bias});
    out.push_back({"se.expand.weight", &m.se_expand.weight});
    out.push_back({"se.expand.bias", &m.se_expand.bias});
    out.push_back({"fusion.weight", &m.fusion.weight});
    out.push_back({"fusion.bias", &m.fusion.bias});
    return out;
}

template <class T>
std::vector<std::pair<std::string, const TensorT<T>*>> model_params(const MaskTsModelT<T>& m) {
    std::vector<std::pair<std::string, const TensorT<T>*>> out;
    for (auto& [name, tensor] : model_params(const_cast<MaskTsModelT<T>&>(m)))
        out.push_back({name, tensor});
    return out;
}

// Normalizes a map to zero mean, unit variance with a variance floor; a
// constant plane standardizes to all zeros.
inline Tensor standardize(const Tensor& t) {
    double mean = 0.0;
    for (float v : t) mean += double(v);
    mean /= double(t.numel());
    double var = 0.0;
    for (float v : t) var += (double(v) - mean) * (double(v) - mean);
    var /= double(t.numel());
    const double inv_std = 1.0 / std::sqrt(std::max(var, 1e-6));
    Tensor out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = float((double(t[i]) - mean) * inv_std);
    return out;
}

// Branch inputs for one record: standardized image, standardized logits,
// TS-calibrated probability and its entropy uncertainty. The last two enter
// in their natural [0, 1] ranges.
inline std::vector<Tensor> build_branch_inputs(const CalibRecord& rec, double t0,
                                               bool use_prob_branch = true,
                                               bool use_uncert_branch = true) {
    require(rec.image.numel() > 0, "record is missing the image map");
    require(rec.logits.numel() > 0, "record is missing the logit map");
    require_shape(rec.image.same_shape(rec.logits), "record image/logits shape mismatch");
    std::vector<Tensor> inputs;
    inputs.push_back(standardize(rec.image));
    inputs.push_back(standardize(rec.logits));
    if (use_prob_branch || use_uncert_branch) {
        Tensor p = probability(rec.logits, t0);
        if (use_prob_branch) inputs.push_back(p);
        if (use_uncert_branch) inputs.push_back(entropy(confidence(p)));
    }
    return inputs;
}

// Handles to the graph built by forward_graph, so training can read the
// parameter gradients after backward().
template <class T>
struct ForwardGraph {
    NodePtrT<T> temperature;          // 1 x 1 x H x W, in [0.05, 20]
    std::vector<NodePtrT<T>> params;  // aligned with model_params order
};

template <class T>
ForwardGraph<T> forward_graph(const MaskTsModelT<T>& model, const std::vector<TensorT<T>>& inputs) {
    require(int(inputs.size()) == model.n_branches(),
            "forward: expected " + std::to_string(model.n_branches()) + " branch inputs, got " +
                std::to_string(inputs.size()));
    for (const auto& in : inputs)
        require_shape(in.rank() == 4 && in.dim_c() == 1 && in.same_shape(inputs[0]),
                      "forward: branch inputs must share an 1x1xHxW shape");

    ForwardGraph<T> g;
    auto track = [&g](TensorT<T> t, const std::string& name) {
        auto p = param(std::move(t), name);
        g.params.push_back(p);
        return p;
    };

    // track() calls are sequenced through locals so the parameter node order
    // always matches model_params().
    std::vector<NodePtrT<T>> features;
    for (int b = 0; b < model.n_branches(); ++b) {
        const auto& blk = model.branches[size_t(b)];
        const std::string pre = "branch" + std::to_string(b) + ".";
        auto w1 = track(blk.conv1.weight, pre + "conv1.weight");
        auto b1 = track(blk.conv1.bias, pre + "conv1.bias");
        auto w2 = track(blk.conv2.weight, pre + "conv2.weight");
        auto b2 = track(blk.conv2.bias, pre + "conv2.bias");
        auto w3 = track(blk.conv3.weight, pre + "conv3.weight");
        auto b3 = track(blk.conv3.bias, pre + "conv3.bias");
        auto x = constant(inputs[size_t(b)]);
        auto a = relu(conv2d(x, w1, b1));
        auto r = conv2d(relu(conv2d(a, w2, b2)), w3, b3);
        features.push_back(add(a, r));
    }
    auto cat = concat_channels(features);

    auto rw = track(model.se_reduce.weight, "se.reduce.weight");
    auto rb = track(model.se_reduce.bias, "se.reduce.bias");
    auto ew = track(model.se_expand.weight, "se.expand.weight");
    auto eb = track(model.se_expand.bias, "se.expand.bias");
    auto fw = track(model.fusion.weight, "fusion.weight");
    auto fb = track(model.fusion.bias, "fusion.bias");

    const int N = cat->value.dim_n();
    const int C = cat->value.dim_c();
    auto squeezed = reshape(global_avg_pool(cat), {N, C});
    auto hidden = relu(dense(squeezed, rw, rb));
    auto weights = sigmoid(dense(hidden, ew, eb));
    auto scaled = multiply(cat, reshape(weights, {N, C, 1, 1}));
    auto fused = conv2d(scaled, fw, fb);

    auto shifted = add(softplus(fused), constant(TensorT<T>(fused->value.shape(), T(0.05))));
    g.temperature = clamp(shifted, T(kTempMin), T(kTempMax));
    return g;
}

// Inference-only forward pass.
template <class T>
TensorT<T> forward(const MaskTsModelT<T>& model, const std::vector<TensorT<T>>& inputs) {
    return forward_graph(model, inputs).temperature->value;
}

struct TrainResult {
    std::vector<double> epoch_loss;  // mean per-record loss per epoch
    int skipped_records = 0;         // degenerate masks under Mask-Loss
};

// Trains the network with Mask-Loss. Records are visited in a fixed order,
// so a seed pins the whole loss history bit-for-bit.
inline TrainResult train(MaskTsModel& model, const std::vector<CalibRecord>& records,
                         const TrainConfig& cfg,
                         const std::function<void(const std::string&)>& warn = {}) {
    cfg.validate();
    require(!records.empty(), "train: empty dataset");
    require(cfg.use_prob_branch == model.use_prob_branch &&
                cfg.use_uncert_branch == model.use_uncert_branch,
            "train: model branch layout does not match config");

    struct Prepared {
        std::vector<Tensor> inputs;
        Tensor mask;
        bool usable = false;
    };
    std::vector<Prepared> prep(records.size());
    int skipped = 0;
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        require(rec.label.numel() > 0, "train: record " + rec.id + " has no ground truth");
        prep[i].inputs = build_branch_inputs(rec, model.t0, cfg.use_prob_branch,
                                             cfg.use_uncert_branch);
        Tensor y_hat = predict(probability(rec.logits));
        Tensor mask = cfg.use_mask_loss ? union_mask(rec.label, y_hat)
                                        : Tensor(rec.label.shape(), 1.0f);
        bool any = false;
        for (float v : mask)
            if (v == 1.0f) any = true;
        if (!any) {
            ++skipped;
            if (warn) warn("record " + rec.id + " has an empty mask; skipped");
            continue;
        }
        prep[i].mask = std::move(mask);
        prep[i].usable = true;
    }
    require(skipped < int(records.size()), "train: every record was skipped");

    auto refs = model_params(model);
    std::vector<ParamRef> param_refs;
    for (auto& [name, tensor] : refs) param_refs.push_back({name, tensor});
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    AdamState adam(adam_cfg);

    TrainResult result;
    result.skipped_records = skipped;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_acc = 0.0;
        int counted = 0;
        for (size_t i = 0; i < records.size(); ++i) {
            if (!prep[i].usable) continue;
            auto g = forward_graph(model, prep[i].inputs);
            auto loss = masked_bce_node<float>(g.temperature, records[i].logits,
                                               records[i].label, prep[i].mask, cfg.loss_norm);
            backward(loss);
            epoch_acc += double(loss->value[0]);
            ++counted;

            std::vector<const Tensor*> grads;
            grads.reserve(g.params.size());
            for (auto& p : g.params) {
                if (p->grad.numel() == 0) p->ensure_grad();
                grads.push_back(&p->grad);
            }
            adam.step(param_refs, grads);
        }
        result.epoch_loss.push_back(epoch_acc / double(counted));
    }
    return result;
}

// Full calibration of one record: network temperature, Mask-TS composition
// against the global temperature, then probability/confidence/uncertainty.
// The prediction is identical to the uncalibrated prediction.
inline CalibratedOutput calibrate(const MaskTsModel& model, const CalibRecord& rec,
                                  bool use_mask_ts = true) {
    auto inputs = build_branch_inputs(rec, model.t0, model.use_prob_branch,
                                      model.use_uncert_branch);
    Tensor t_prime = forward(model, inputs);
    Tensor y_hat = predict(probability(rec.logits));
    CalibratedOutput out;
    out.temperature = use_mask_ts ? compose_mask_ts(t_prime, y_hat, model.t0)
                                  : std::move(t_prime);
    out.prob = probability(rec.logits, out.temperature);
    out.confidence = confidence(out.prob);
    out.uncertainty = entropy(out.confidence);
    out.prediction = predict(out.prob);
    return out;
}

}  // namespace maskts
