#pragma once

#include <filesystem>
#include <string>

#include "maskts/errors.hpp"
#include "maskts/model.hpp"
#include "maskts/mts_io.hpp"

namespace maskts {

// Model checkpoints are MTS1 containers: one tensor per parameter plus a
// one-element "t0" tensor. The training config and its digest ride along as
// extra header attributes on the "t0" entry; generic readers ignore them.

inline void save_model(const MaskTsModel& model, const TrainConfig& cfg,
                       const std::filesystem::path& path) {
    TensorFile file;
    for (auto& [name, tensor] : model_params(model)) file.tensors.emplace(name, *tensor);
    file.tensors.emplace("t0", Tensor({1}, std::vector<float>{float(model.t0)}));
    const json cfg_json = cfg.to_json();
    file.annotations["t0"] = json{{"train_config", cfg_json},
                                  {"config_digest", config_digest(cfg_json)}};
    write_tensors(path, file);
}

struct LoadedModel {
    MaskTsModel model;
    TrainConfig config;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
    TensorFile file = read_tensors(path);
    auto t0_it = file.tensors.find("t0");
    if (t0_it == file.tensors.end())
        throw FormatError(path.string() + ": checkpoint is missing 't0'");
    auto ann = file.annotations.find("t0");
    if (ann == file.annotations.end() || !ann->second.contains("train_config"))
        throw FormatError(path.string() + ": checkpoint is missing the training config");
    const json cfg_json = ann->second["train_config"];
    if (ann->second.contains("config_digest") &&
        ann->second["config_digest"].get<std::string>() != config_digest(cfg_json))
        throw FormatError(path.string() + ": config digest mismatch");

    LoadedModel out;
    out.config = TrainConfig::from_json(cfg_json);
    out.model = init_model(out.config);
    out.model.t0 = double(t0_it->second[0]);
    for (auto& [name, tensor] : model_params(out.model)) {
        auto it = file.tensors.find(name);
        if (it == file.tensors.end())
            throw FormatError(path.string() + ": checkpoint is missing tensor '" + name + "'");
        require_shape(it->second.same_shape(*tensor),
                      path.string() + ": tensor '" + name + "' has shape " +
                          it->second.shape_str() + ", expected " + tensor->shape_str());
        *tensor = it->second;
    }
    return out;
}

}  // namespace maskts
