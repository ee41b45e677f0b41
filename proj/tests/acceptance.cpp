// Acceptance suite: runs every verification criterion end to end and prints
// one PASS/FAIL line per criterion. Exits nonzero if any criterion fails.
//
// The heavy pipeline (criteria 7 and 8) trains the calibration network three
// times on the mini profile with a fixed seed; expect a total runtime of
// roughly ten to fifteen minutes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "maskts/checkpoint.hpp"
#include "maskts/metrics.hpp"
#include "maskts/model.hpp"
#include "maskts/pipeline.hpp"
#include "maskts/synth.hpp"
#include "maskts/vanilla_ts.hpp"
#include "oracles.hpp"

using namespace maskts;
using Clock = std::chrono::steady_clock;

namespace {

constexpr uint64_t kSeed = 7;

struct Failure {
    std::string message;
};

void expect(bool cond, const std::string& msg) {
    if (!cond) throw Failure{msg};
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Shared artifacts of the criterion-7 pipeline, reused by 3 and 8.
struct PipelineArts {
    SynthConfig cfg;
    std::vector<CalibRecord> train_recs, test_recs;
    TsFitResult fit;
    MaskTsModel full_model;
    double pipeline_seconds = 0.0;
    double ece_full = 0.0, ece_vanilla = 0.0, ece_uncal = 0.0;
    double mean_lesion_t = 0.0;
};

PipelineArts g_arts;

std::vector<CalibRecord> planted_uniform(double t_star, int records, int side, uint64_t seed) {
    SynthConfig cfg;
    cfg.height = side;
    cfg.width = side;
    cfg.t_fg = t_star;
    cfg.t_bg = t_star;
    cfg.seed = seed;
    return generate_split(cfg, "train", records);
}

double lesion_ece(const std::vector<CalibRecord>& recs,
                  const std::vector<CalibratedOutput>& outs) {
    return evaluate(recs, outs, EvalMode::Lesion, kSeed).ece;
}

// --- criterion 1 -------------------------------------------------------------

void criterion_temperature_recovery() {
    const auto t0 = Clock::now();
    for (double t_star : {0.5, 1.0, 3.0}) {
        const auto recs = planted_uniform(t_star, 9, 352, kSeed + uint64_t(t_star * 10));
        int64_t pixels = 0;
        for (const auto& r : recs) pixels += r.logits.numel();
        expect(pixels >= 1000000, "needs at least 1e6 pixels, got " + std::to_string(pixels));

        const TsFitResult fit = fit_global_temperature(recs);
        expect(std::abs(fit.t0 - t_star) / t_star < 0.02,
               "planted " + fmt(t_star) + " recovered as " + fmt(fit.t0));

        std::vector<float> z, y;
        for (const auto& r : recs) {
            z.insert(z.end(), r.logits.begin(), r.logits.end());
            y.insert(y.end(), r.label.begin(), r.label.end());
        }
        const auto grid =
            oracle::grid_search_nll(z, y, t_star * 0.8, t_star * 1.25, 0.01);
        expect(std::abs(grid.t_min - t_star) / t_star < 0.02,
               "grid oracle found " + fmt(grid.t_min) + " for planted " + fmt(t_star));
        expect(fit.final_loss <= grid.loss_min + 1e-9,
               "fit loss " + fmt(fit.final_loss) + " above grid minimum " +
                   fmt(grid.loss_min));
    }
    const double elapsed = seconds_since(t0);
    expect(elapsed < 30.0, "took " + fmt(elapsed) + "s, budget 30s");
}

// --- criterion 2 -------------------------------------------------------------

void criterion_prediction_invariance() {
    SynthConfig cfg;
    cfg.height = 32;
    cfg.width = 32;
    cfg.lesion_frac_min = 0.01;
    cfg.lesion_frac_max = 0.4;
    cfg.radius_frac_min = 0.1;
    cfg.seed = kSeed;
    Rng rng(mix_seed(kSeed, 2));
    for (int i = 0; i < 100; ++i) {
        CalibRecord rec = make_record(cfg, "test", i);
        // fold in adversarial near-zero logits
        rec.logits[0] = 0.0f;
        rec.logits[1] = -1e-8f;
        rec.logits[2] = 6e-8f;
        rec.logits[3] = -6e-8f;
        Tensor tmap(rec.logits.shape());
        for (auto& v : tmap) v = float(rng.uniform(kTempMin, kTempMax));

        const Tensor base = predict(probability(rec.logits));
        const Tensor mapped = predict(probability(rec.logits, tmap));
        const Tensor scalar = predict(probability(rec.logits, rng.uniform(0.05, 20.0)));
        for (int64_t j = 0; j < base.numel(); ++j) {
            expect(base[j] == mapped[j], "temperature map flipped a prediction");
            expect(base[j] == scalar[j], "scalar temperature flipped a prediction");
        }
    }
}

// --- criterion 3 -------------------------------------------------------------

void criterion_background_identity() {
    const auto& arts = g_arts;
    expect(!arts.test_recs.empty(), "criterion 7 must run first");
    for (const auto& rec : arts.test_recs) {
        const CalibratedOutput masked = calibrate(arts.full_model, rec, true);
        const CalibratedOutput global = apply_global(rec, arts.full_model.t0);
        const Tensor y_hat = predict(probability(rec.logits));
        for (int64_t i = 0; i < y_hat.numel(); ++i) {
            if (y_hat[i] != 0.0f) continue;
            expect(masked.temperature[i] == float(arts.full_model.t0),
                   "background temperature differs from t0");
            expect(masked.prob[i] == global.prob[i],
                   "background probability differs from vanilla TS");
        }
    }
}

// --- criterion 4 -------------------------------------------------------------

void criterion_mask_exclusion() {
    SynthConfig cfg;
    cfg.height = 8;
    cfg.width = 8;
    cfg.radius_frac_min = 0.15;
    cfg.radius_frac_max = 0.2;
    cfg.lesion_frac_min = 0.01;
    cfg.lesion_frac_max = 0.5;
    cfg.seed = kSeed;
    TrainConfig tc;
    tc.seed = kSeed;
    MaskTsModel model = init_model(tc);
    model.t0 = 1.4;
    Rng rng(mix_seed(kSeed, 4));
    int tested = 0;
    for (int i = 0; i < 16; ++i) {
        const CalibRecord rec = make_record(cfg, "train", i);
        const Tensor y_hat = predict(probability(rec.logits));
        const Tensor mask = union_mask(rec.label, y_hat);
        int64_t active = 0;
        for (float v : mask) active += v == 1.0f;
        if (active == 0 || active == mask.numel()) continue;
        ++tested;

        const Tensor t_prime = forward(model, build_branch_inputs(rec, model.t0));
        const double base = masked_bce_loss(rec.logits, t_prime, rec.label, mask);

        Tensor z2 = rec.logits;
        Tensor t2 = t_prime;
        for (int64_t j = 0; j < mask.numel(); ++j)
            if (mask[j] == 0.0f) {
                z2[j] = z2[j] * 3.0f + (z2[j] >= 0 ? 0.7f : -0.7f);
                t2[j] = float(rng.uniform(0.1, 19.5));
            }
        const double perturbed = masked_bce_loss(z2, t2, rec.label, mask);
        expect(std::memcmp(&perturbed, &base, sizeof(double)) == 0,
               "loss changed under perturbation outside the mask");

        // adjoint arriving at the temperature map is exactly zero off-mask
        auto g = forward_graph(model, build_branch_inputs(rec, model.t0));
        auto node = masked_bce_node<float>(g.temperature, rec.logits, rec.label, mask);
        backward(node);
        for (int64_t j = 0; j < mask.numel(); ++j)
            if (mask[j] == 0.0f)
                expect(g.temperature->grad[j] == 0.0f, "nonzero adjoint outside the mask");
    }
    expect(tested >= 8, "too few usable 8x8 instances");
}

// --- criterion 5 -------------------------------------------------------------

void criterion_gradient_correctness() {
    const auto t0 = Clock::now();
    Rng rng(mix_seed(kSeed, 5));

    // elementwise primitives at 1e-4
    {
        auto base = TensorT<double>::random_uniform({1, 2, 4, 4}, rng, 0.15, 1.4);
        for (int64_t i = 0; i < base.numel(); i += 2) base[i] = -base[i];
        struct Case {
            const char* name;
            std::function<NodePtrT<double>(NodePtrT<double>)> make;
        };
        const std::vector<Case> cases{
            {"relu", [](auto x) { return relu(x); }},
            {"sigmoid", [](auto x) { return sigmoid(x); }},
            {"softplus", [](auto x) { return softplus(x); }},
            {"add", [](auto x) { return add(x, x); }},
            {"multiply", [](auto x) { return multiply(x, x); }},
        };
        for (const auto& c : cases) {
            std::vector<double> storage(base.begin(), base.end());
            auto eval = [&]() {
                TensorT<double> t(base.shape(), storage);
                auto out = c.make(constant(t));
                double acc = 0.0;
                for (double v : out->value) acc += v;
                return acc;
            };
            const auto fd = oracle::fd_gradient(storage, eval, 1e-3);

            TensorT<double> t(base.shape(), storage);
            auto leaf = param(t, "x");
            auto out = c.make(leaf);
            auto flat = reshape(out, {1, int(out->value.numel())});
            auto w = constant(TensorT<double>({1, int(out->value.numel())}, 1.0));
            auto root = dense(flat, w, constant(TensorT<double>({1})));
            backward(root);
            for (size_t i = 0; i < fd.size(); ++i)
                expect(oracle::rel_err(leaf->grad[int64_t(i)], fd[i]) < 1e-4,
                       std::string(c.name) + " gradient off at element " + std::to_string(i));
        }
    }

    // structural primitives at 1e-3 (conv, dense, pool, concat via the model)
    {
        SynthConfig cfg;
        cfg.height = 8;
        cfg.width = 8;
        cfg.radius_frac_min = 0.15;
        cfg.radius_frac_max = 0.2;
        cfg.lesion_frac_min = 0.01;
        cfg.lesion_frac_max = 0.5;
        cfg.seed = kSeed + 5;
        const CalibRecord rec = make_record(cfg, "train", 1);
        TrainConfig tc;
        tc.seed = kSeed;
        MaskTsModel model = init_model(tc);
        model.t0 = 1.5;
        const auto inputs = build_branch_inputs(rec, model.t0);
        const Tensor mask = union_mask(rec.label, predict(probability(rec.logits)));

        auto dmodel = model.cast<double>();
        std::vector<TensorT<double>> dinputs;
        for (const auto& in : inputs) dinputs.push_back(in.cast<double>());
        const auto dz = rec.logits.cast<double>();
        const auto dy = rec.label.cast<double>();
        const auto dm = mask.cast<double>();

        auto refs = model_params(dmodel);
        std::vector<double> storage;
        for (auto& [name, t] : refs) storage.insert(storage.end(), t->begin(), t->end());
        auto eval = [&]() -> oracle::GatedEval {
            size_t pos = 0;
            for (auto& [name, t] : refs)
                for (auto& v : *t) v = storage[pos++];
            auto g = forward_graph(dmodel, dinputs);
            auto loss = masked_bce_node<double>(g.temperature, dz, dy, dm);
            std::vector<uint8_t> gates;
            for (auto* n : topo_order(loss.get()))
                if (n->op == Op::Relu)
                    for (const auto& v : n->parents[0]->value) gates.push_back(v > 0);
            return {double(loss->value[0]), std::move(gates)};
        };
        // difference quotients across a relu kink do not estimate the
        // derivative; those few coordinates are excluded by the gate guard
        size_t skipped = 0;
        const auto fd = oracle::fd_gradient_gated(storage, eval, 1e-5, &skipped);

        auto g = forward_graph(model, inputs);
        auto loss = masked_bce_node<float>(g.temperature, rec.logits, rec.label, mask);
        backward(loss);
        std::vector<double> analytic;
        for (const auto& p : g.params)
            for (float v : p->grad) analytic.push_back(double(v));
        expect(analytic.size() == fd.size(), "parameter count mismatch");
        expect(double(skipped) < 0.05 * double(fd.size()),
               "too many kink-adjacent coordinates: " + std::to_string(skipped));
        double worst = 0.0;
        for (size_t i = 0; i < fd.size(); ++i) {
            if (std::isnan(fd[i])) continue;
            worst = std::max(worst, oracle::rel_err(analytic[i], fd[i]));
        }
        expect(worst < 1e-3, "full-model gradient error " + fmt(worst));
    }
    const double elapsed = seconds_since(t0);
    expect(elapsed < 60.0, "took " + fmt(elapsed) + "s, budget 60s");
}

// --- criterion 6 -------------------------------------------------------------

void criterion_metric_oracles() {
    Rng rng(mix_seed(kSeed, 6));
    for (int trial = 0; trial < 200; ++trial) {
        const size_t n = size_t(rng.uniform_int(1, 10000));
        std::vector<float> prob, conf;
        std::vector<uint8_t> label, correct;
        prob.reserve(n);
        for (size_t i = 0; i < n; ++i) {
            float p = float(rng.uniform(0.0, 1.0));
            if (rng.uniform() < 0.1) p = float(rng.uniform_int(0, 10)) / 10.0f;  // ties
            prob.push_back(p);
            label.push_back(rng.uniform() < p ? 1 : 0);
            conf.push_back(p >= 0.5f ? p : 1.0f - p);
            correct.push_back(rng.uniform() < double(conf.back()) ? 1 : 0);
        }
        expect(std::abs(ece(conf, correct) - oracle::ref_ece(conf, correct)) < 1e-10,
               "ece oracle mismatch on trial " + std::to_string(trial));
        expect(std::abs(mce(conf, correct) - oracle::ref_mce(conf, correct)) < 1e-10,
               "mce oracle mismatch on trial " + std::to_string(trial));
        expect(std::abs(sce(prob, label) - oracle::ref_sce(prob, label)) < 1e-10,
               "sce oracle mismatch on trial " + std::to_string(trial));
        expect(std::abs(ace(prob, label) - oracle::ref_ace(prob, label)) < 1e-10,
               "ace oracle mismatch on trial " + std::to_string(trial));
        expect(ece(conf, correct) <= mce(conf, correct) + 1e-12, "ece exceeded mce");
    }
}

// --- criterion 7 -------------------------------------------------------------

void criterion_calibration_ordering() {
    const auto t0 = Clock::now();
    auto& arts = g_arts;
    arts.cfg = SynthConfig::mini();
    arts.cfg.seed = kSeed;
    arts.train_recs = generate_split(arts.cfg, "train", arts.cfg.n_train);
    arts.test_recs = generate_split(arts.cfg, "test", arts.cfg.n_test);
    arts.fit = fit_global_temperature(arts.train_recs);

    TrainConfig tc;
    tc.seed = kSeed;
    arts.full_model = init_model(tc);
    arts.full_model.t0 = arts.fit.t0;
    const TrainResult tr = train(arts.full_model, arts.train_recs, tc);
    expect(tr.epoch_loss.back() <= tr.epoch_loss.front(),
           "training did not reduce the loss");

    const auto uncal = run_method_all(Method::Uncalibrated, arts.test_recs, 1.0, nullptr);
    const auto vanilla =
        run_method_all(Method::VanillaTs, arts.test_recs, arts.fit.t0, nullptr);
    const auto full =
        run_method_all(Method::MaskTs, arts.test_recs, arts.fit.t0, &arts.full_model, true);

    arts.ece_uncal = lesion_ece(arts.test_recs, uncal);
    arts.ece_vanilla = lesion_ece(arts.test_recs, vanilla);
    arts.ece_full = lesion_ece(arts.test_recs, full);
    arts.pipeline_seconds = seconds_since(t0);

    double t_sum = 0.0;
    int64_t t_cnt = 0;
    for (const auto& rec : arts.test_recs) {
        const Tensor tp = forward(arts.full_model, build_branch_inputs(rec, arts.fit.t0));
        for (int64_t i = 0; i < tp.numel(); ++i)
            if (rec.true_logits[i] > 0.0f) {
                t_sum += double(tp[i]);
                ++t_cnt;
            }
    }
    arts.mean_lesion_t = t_sum / double(t_cnt);

    expect(arts.ece_full < arts.ece_vanilla,
           "mask-ts " + fmt(arts.ece_full) + " not below vanilla " + fmt(arts.ece_vanilla));
    expect(arts.ece_vanilla < arts.ece_uncal,
           "vanilla " + fmt(arts.ece_vanilla) + " not below uncalibrated " +
               fmt(arts.ece_uncal));
    expect(arts.ece_full <= 0.5 * arts.ece_uncal,
           "ratio " + fmt(arts.ece_full / arts.ece_uncal) + " above 0.5");
    expect(arts.pipeline_seconds < 600.0,
           "pipeline took " + fmt(arts.pipeline_seconds) + "s, budget 600s");
}

// --- criterion 8 -------------------------------------------------------------

void criterion_ablation_direction() {
    auto& arts = g_arts;
    expect(!arts.train_recs.empty(), "criterion 7 must run first");

    auto train_variant = [&](bool mask_loss) {
        TrainConfig tc;
        tc.seed = kSeed;
        tc.use_mask_ts = false;
        tc.use_mask_loss = mask_loss;
        MaskTsModel m = init_model(tc);
        m.t0 = arts.fit.t0;
        train(m, arts.train_recs, tc);
        const auto outs =
            run_method_all(Method::MaskTs, arts.test_recs, arts.fit.t0, &m, false);
        return lesion_ece(arts.test_recs, outs);
    };
    const double ab1 = train_variant(true);   // -Mask-TS
    const double ab2 = train_variant(false);  // -Mask-TS, -Mask-Loss
    expect(arts.ece_full <= ab1,
           "full " + fmt(arts.ece_full) + " above no-mask-ts ablation " + fmt(ab1));
    expect(arts.ece_full <= ab2, "full " + fmt(arts.ece_full) +
                                     " above no-mask-ts/no-mask-loss ablation " + fmt(ab2));
}

// --- criterion 9 -------------------------------------------------------------

void criterion_perfect_calibration_floor() {
    const auto recs = planted_uniform(1.0, 9, 352, kSeed + 10);
    int64_t pixels = 0;
    for (const auto& r : recs) pixels += r.logits.numel();
    expect(pixels >= 1000000, "needs at least 1e6 pixels");
    std::vector<CalibratedOutput> outs;
    for (const auto& r : recs) outs.push_back(apply_global(r, 1.0));
    const EvalReport rep = evaluate(recs, outs, EvalMode::Full, kSeed);
    expect(rep.ece < 0.5, "full-image ECE " + fmt(rep.ece) + " above the 0.5 noise floor");
}

// --- criterion 10 ------------------------------------------------------------

void criterion_patch_sampler() {
    const auto patches = sample_local_patches(352, 352, 10000, 72, kSeed);
    expect(patches.size() == 10000, "wrong patch count");
    for (const auto& p : patches) {
        expect(p.center_y > 70 && p.center_y < 282, "center row outside (70, 282)");
        expect(p.center_x > 70 && p.center_x < 282, "center col outside (70, 282)");
        expect(p.center_y - 36 >= 0 && p.center_y + 36 <= 352, "window leaves the frame");
        expect(p.center_x - 36 >= 0 && p.center_x + 36 <= 352, "window leaves the frame");
    }
    const auto again = sample_local_patches(352, 352, 10000, 72, kSeed);
    for (size_t i = 0; i < patches.size(); ++i)
        expect(patches[i].center_y == again[i].center_y &&
                   patches[i].center_x == again[i].center_x,
               "fixed seed did not reproduce the patch list");
}

// --- trained-temperature example ----------------------------------------------

void example_lesion_temperature() {
    const auto& arts = g_arts;
    expect(!arts.train_recs.empty(), "criterion 7 must run first");
    expect(arts.mean_lesion_t >= 2.4 && arts.mean_lesion_t <= 3.6,
           "mean lesion temperature " + fmt(arts.mean_lesion_t) + " outside [2.4, 3.6]");
}

struct Criterion {
    int order;  // execution order: cheap first, the pipeline before dependents
    std::string label;
    std::function<void()> run;
};

}  // namespace

int main() {
    std::vector<Criterion> criteria{
        {4, "criterion 1: planted temperature recovery within 2% (grid oracle agrees)",
         criterion_temperature_recovery},
        {1, "criterion 2: prediction invariance under random temperatures",
         criterion_prediction_invariance},
        {8, "criterion 3: Mask-TS background identity is bit-exact",
         criterion_background_identity},
        {2, "criterion 4: Mask-Loss excludes out-of-mask logits bit-exactly",
         criterion_mask_exclusion},
        {3, "criterion 5: autodiff matches finite differences",
         criterion_gradient_correctness},
        {5, "criterion 6: metrics match the direct-summation oracle to 1e-10",
         criterion_metric_oracles},
        {7, "criterion 7: lesion ECE ordering mask-ts < vanilla < uncalibrated",
         criterion_calibration_ordering},
        {9, "criterion 8: removing components does not improve lesion ECE",
         criterion_ablation_direction},
        {6, "criterion 9: perfect plant keeps full-image ECE under 0.5",
         criterion_perfect_calibration_floor},
        {0, "criterion 10: patch sampler respects margins, frame and seed",
         criterion_patch_sampler},
        {10, "example: trained lesion temperature lies in [2.4, 3.6]",
         example_lesion_temperature},
    };

    std::vector<size_t> exec_order(criteria.size());
    for (size_t i = 0; i < exec_order.size(); ++i) exec_order[i] = i;
    std::sort(exec_order.begin(), exec_order.end(),
              [&](size_t a, size_t b) { return criteria[a].order < criteria[b].order; });

    std::map<size_t, std::pair<bool, std::string>> results;
    for (size_t idx : exec_order) {
        const auto t0 = Clock::now();
        try {
            criteria[idx].run();
            results[idx] = {true, fmt(seconds_since(t0)) + "s"};
        } catch (const Failure& f) {
            results[idx] = {false, f.message};
        } catch (const std::exception& e) {
            results[idx] = {false, std::string("exception: ") + e.what()};
        }
    }

    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        const auto& [ok, detail] = results[i];
        std::printf("%s  %s  (%s)\n", ok ? "PASS" : "FAIL", criteria[i].label.c_str(),
                    detail.c_str());
        if (!ok) ++failures;
    }
    if (failures) std::printf("%d criterion(s) failed\n", failures);
    return failures ? 1 : 0;
}
