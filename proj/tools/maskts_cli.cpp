// Command-line front end for the mask temperature scaling toolkit:
// synthetic data generation, global temperature fitting, calibration-network
// training, per-record calibration with map exports, and metric reports.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "maskts/checkpoint.hpp"
#include "maskts/dataset.hpp"
#include "maskts/metrics.hpp"
#include "maskts/model.hpp"
#include "maskts/mts_io.hpp"
#include "maskts/pipeline.hpp"
#include "maskts/synth.hpp"
#include "maskts/vanilla_ts.hpp"

namespace fs = std::filesystem;
using namespace maskts;

namespace {

struct EvalSetup {
    std::string data;
    std::string split = "test";
    std::string method = "mask-ts";
    std::string mode = "full";
    std::string model_path;
    std::string ts_path;
    uint64_t seed = 1;
};

void add_eval_options(CLI::App* cmd, EvalSetup& s) {
    cmd->add_option("--data", s.data, "dataset directory (holds manifest.json)")->required();
    cmd->add_option("--split", s.split, "split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
    cmd->add_option("--method", s.method, "calibration method")
        ->check(CLI::IsMember({"uncalibrated", "vanilla-ts", "mask-ts"}));
    cmd->add_option("--mode", s.mode, "pixel pool")->check(CLI::IsMember({"full", "lesion", "patches"}));
    cmd->add_option("--model", s.model_path, "model checkpoint (mask-ts)");
    cmd->add_option("--ts", s.ts_path, "TS fit JSON (vanilla-ts)");
    cmd->add_option("--seed", s.seed, "seed for patch sampling");
}

struct EvalContext {
    std::vector<CalibRecord> records;
    std::vector<CalibratedOutput> outputs;
};

EvalContext prepare_eval(const EvalSetup& s) {
    const Manifest manifest = load_manifest(fs::path(s.data) / "manifest.json");
    EvalContext ctx;
    ctx.records = load_split(manifest, s.split);
    const Method method = method_from_name(s.method);

    double t0 = 1.0;
    MaskTsModel model;
    bool use_mask_ts = true;
    if (method == Method::MaskTs) {
        require(!s.model_path.empty(), "--model is required for method mask-ts");
        LoadedModel loaded = load_model(s.model_path);
        model = std::move(loaded.model);
        use_mask_ts = loaded.config.use_mask_ts;
        t0 = model.t0;
    } else if (method == Method::VanillaTs) {
        if (!s.ts_path.empty()) {
            t0 = read_json_file(s.ts_path).at("t0").get<double>();
        } else if (!s.model_path.empty()) {
            t0 = load_model(s.model_path).model.t0;
        } else {
            throw ContractError("--ts or --model is required for method vanilla-ts");
        }
    }
    ctx.outputs = run_method_all(method, ctx.records, t0,
                                 method == Method::MaskTs ? &model : nullptr, use_mask_ts);
    return ctx;
}

int cmd_synth(const SynthConfig& cfg, const std::string& out_dir) {
    const Manifest m = generate_dataset(cfg, out_dir);
    json summary{{"out", out_dir},
                 {"digest", m.digest},
                 {"records", m.entries.size()}};
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_fit_ts(const std::string& data, const std::string& split, const std::string& out) {
    const Manifest manifest = load_manifest(fs::path(data) / "manifest.json");
    const auto records = load_split(manifest, split);
    const TsFitResult res = fit_global_temperature(records);
    json j{{"t0", res.t0},
           {"final_loss", res.final_loss},
           {"iterations", res.iterations},
           {"loss_at_unity", res.loss_at_unity}};
    if (!out.empty()) write_json_file(out, j);
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& ts_path, const std::string& out,
              const TrainConfig& cfg, const std::string& history_path) {
    const Manifest manifest = load_manifest(fs::path(data) / "manifest.json");
    const auto records = load_split(manifest, "train");
    MaskTsModel model = init_model(cfg);
    model.t0 = read_json_file(ts_path).at("t0").get<double>();
    const TrainResult result = train(model, records, cfg, [](const std::string& msg) {
        std::cerr << "warning: " << msg << "\n";
    });
    save_model(model, cfg, out);
    json j{{"checkpoint", out},
           {"epochs", cfg.epochs},
           {"initial_loss", result.epoch_loss.front()},
           {"final_loss", result.epoch_loss.back()},
           {"skipped_records", result.skipped_records}};
    if (!history_path.empty()) {
        json h = j;
        h["history"] = result.epoch_loss;
        write_json_file(history_path, h);
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_calibrate(const std::string& data, const std::string& split,
                  const std::string& model_path, const std::string& out_dir) {
    const Manifest manifest = load_manifest(fs::path(data) / "manifest.json");
    const auto records = load_split(manifest, split);
    LoadedModel loaded = load_model(model_path);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw FormatError("cannot create " + out_dir);
    for (const auto& rec : records) {
        const CalibratedOutput out = calibrate(loaded.model, rec, loaded.config.use_mask_ts);
        TensorFile file;
        file.tensors.emplace("prob", out.prob);
        file.tensors.emplace("confidence", out.confidence);
        file.tensors.emplace("uncertainty", out.uncertainty);
        file.tensors.emplace("prediction", out.prediction);
        file.tensors.emplace("temperature", out.temperature);
        write_tensors(fs::path(out_dir) / (rec.id + "_calib.mts"), file);
        write_pgm(out.uncertainty, fs::path(out_dir) / (rec.id + "_uncertainty.pgm"));
        write_pgm(out.prob, fs::path(out_dir) / (rec.id + "_prob.pgm"));
    }
    std::cout << json{{"out", out_dir}, {"records", records.size()}}.dump(2) << "\n";
    return 0;
}

int cmd_eval(const EvalSetup& s, bool per_patch, const std::string& out) {
    const EvalContext ctx = prepare_eval(s);
    const EvalMode mode = eval_mode_from_name(s.mode);
    const EvalReport rep = per_patch
                               ? evaluate_per_patch(ctx.records, ctx.outputs, s.seed)
                               : evaluate(ctx.records, ctx.outputs, mode, s.seed);
    if (!out.empty()) write_json_file(out, rep.to_json());
    std::cout << rep.to_json().dump(2) << "\n";
    return 0;
}

int cmd_reliability(const EvalSetup& s, const std::string& out) {
    const EvalContext ctx = prepare_eval(s);
    const PixelPool pool =
        pool_pixels(ctx.records, ctx.outputs, eval_mode_from_name(s.mode), s.seed);
    const std::string csv = reliability_csv(reliability_table(pool.confidence, pool.correct));
    if (!out.empty()) {
        std::ofstream os(out, std::ios::trunc);
        if (!os) throw FormatError("cannot open " + out + " for writing");
        os << csv;
    }
    std::cout << csv;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pixel-wise probability calibration for binary segmentation"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand name

    uint64_t seed = 1;
    std::string profile = "mini";
    app.add_option("--seed", seed, "global seed")->group("Global");
    app.add_option("--profile", profile, "dataset geometry preset")
        ->check(CLI::IsMember({"mini", "full"}))
        ->group("Global");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_out;
    SynthConfig synth_cfg;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--n-train", synth_cfg.n_train, "training records");
    synth->add_option("--n-val", synth_cfg.n_val, "validation records");
    synth->add_option("--n-test", synth_cfg.n_test, "test records");
    synth->add_option("--height", synth_cfg.height, "image height");
    synth->add_option("--width", synth_cfg.width, "image width");
    synth->add_option("--t-fg", synth_cfg.t_fg, "planted lesion temperature");
    synth->add_option("--t-bg", synth_cfg.t_bg, "planted background temperature");
    synth->add_option("--amplitude", synth_cfg.amplitude, "peak |true logit|");
    synth->add_option("--softness", synth_cfg.softness, "contour transition width, pixels");
    synth->add_option("--noise", synth_cfg.noise_sigma, "image noise sigma");

    // fit-ts
    auto* fit = app.add_subcommand("fit-ts", "fit the global temperature");
    std::string fit_data, fit_split = "train", fit_out;
    fit->add_option("--data", fit_data, "dataset directory")->required();
    fit->add_option("--split", fit_split, "fitting split")
        ->check(CLI::IsMember({"train", "val", "test"}));
    fit->add_option("--out", fit_out, "result JSON path");

    // train
    auto* tr = app.add_subcommand("train", "train the calibration network");
    std::string train_data, train_ts, train_out, train_history, loss_norm = "mask";
    TrainConfig train_cfg;
    bool no_mask_loss = false, no_mask_ts = false, no_prob = false, no_uncert = false;
    tr->add_option("--data", train_data, "dataset directory")->required();
    tr->add_option("--ts", train_ts, "TS fit JSON (supplies t0)")->required();
    tr->add_option("--out", train_out, "checkpoint path")->required();
    tr->add_option("--epochs", train_cfg.epochs, "training epochs");
    tr->add_option("--lr", train_cfg.lr, "learning rate");
    tr->add_option("--history", train_history, "loss history JSON path");
    tr->add_option("--loss-norm", loss_norm, "loss normalization")
        ->check(CLI::IsMember({"mask", "hw"}));
    tr->add_flag("--no-mask-loss", no_mask_loss, "train on all pixels");
    tr->add_flag("--no-mask-ts", no_mask_ts, "apply the network temperature everywhere");
    tr->add_flag("--no-prob-branch", no_prob, "drop the TS-probability branch");
    tr->add_flag("--no-uncert-branch", no_uncert, "drop the TS-uncertainty branch");

    // calibrate
    auto* cal = app.add_subcommand("calibrate", "emit calibrated maps and PGM exports");
    std::string cal_data, cal_split = "test", cal_model, cal_out;
    cal->add_option("--data", cal_data, "dataset directory")->required();
    cal->add_option("--split", cal_split, "split to calibrate")
        ->check(CLI::IsMember({"train", "val", "test"}));
    cal->add_option("--model", cal_model, "model checkpoint")->required();
    cal->add_option("--out", cal_out, "output directory")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "compute calibration metrics");
    EvalSetup eval_setup;
    bool per_patch = false;
    std::string eval_out;
    add_eval_options(ev, eval_setup);
    ev->add_flag("--per-patch", per_patch, "average metrics over patch windows");
    ev->add_option("--out", eval_out, "report JSON path");

    // reliability
    auto* rel = app.add_subcommand("reliability", "emit the reliability bin table as CSV");
    EvalSetup rel_setup;
    std::string rel_out;
    add_eval_options(rel, rel_setup);
    rel->add_option("--out", rel_out, "CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (*synth) {
            // The profile sets the geometry; explicit flags win.
            if (profile == "full") {
                if (!synth->count("--height")) synth_cfg.height = SynthConfig::full().height;
                if (!synth->count("--width")) synth_cfg.width = SynthConfig::full().width;
            }
            synth_cfg.seed = seed;
            return cmd_synth(synth_cfg, synth_out);
        }
        if (*fit) return cmd_fit_ts(fit_data, fit_split, fit_out);
        if (*tr) {
            train_cfg.seed = seed;
            train_cfg.use_mask_loss = !no_mask_loss;
            train_cfg.use_mask_ts = !no_mask_ts;
            train_cfg.use_prob_branch = !no_prob;
            train_cfg.use_uncert_branch = !no_uncert;
            train_cfg.loss_norm = loss_norm == "hw" ? LossNorm::FullArea : LossNorm::MaskCount;
            return cmd_train(train_data, train_ts, train_out, train_cfg, train_history);
        }
        if (*cal) return cmd_calibrate(cal_data, cal_split, cal_model, cal_out);
        if (*ev) {
            eval_setup.seed = seed;
            return cmd_eval(eval_setup, per_patch, eval_out);
        }
        if (*rel) {
            rel_setup.seed = seed;
            return cmd_reliability(rel_setup, rel_out);
        }
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
