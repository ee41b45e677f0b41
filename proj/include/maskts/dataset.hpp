#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "maskts/errors.hpp"
#include "maskts/mts_io.hpp"
#include "maskts/tensor.hpp"

namespace maskts {

// One sample: grayscale input image, model logits and the ground-truth mask,
// all 1 x 1 x H x W. Synthetic records also carry the generating logit field
// so tests can compare against the planted truth.
struct CalibRecord {
    std::string id;
    std::string split;
    Tensor image;
    Tensor logits;
    Tensor label;
    Tensor true_logits;  // may be empty for non-synthetic data

    int height() const { return logits.dim_h(); }
    int width() const { return logits.dim_w(); }
};

inline void save_record(const CalibRecord& rec, const std::filesystem::path& path) {
    TensorFile file;
    file.tensors.emplace("image", rec.image);
    file.tensors.emplace("logits", rec.logits);
    file.tensors.emplace("label", rec.label);
    if (rec.true_logits.numel() > 0) file.tensors.emplace("true_logits", rec.true_logits);
    write_tensors(path, file);
}

inline CalibRecord load_record(const std::filesystem::path& path, std::string id,
                               std::string split) {
    TensorFile file = read_tensors(path);
    auto take = [&](const std::string& name, bool optional) {
        auto it = file.tensors.find(name);
        if (it == file.tensors.end()) {
            if (optional) return Tensor();
            throw FormatError(path.string() + ": missing tensor '" + name + "'");
        }
        return std::move(it->second);
    };
    CalibRecord rec;
    rec.id = std::move(id);
    rec.split = std::move(split);
    rec.image = take("image", false);
    rec.logits = take("logits", false);
    rec.label = take("label", false);
    rec.true_logits = take("true_logits", true);
    require_shape(rec.image.same_shape(rec.logits) && rec.logits.same_shape(rec.label),
                  path.string() + ": record maps must share one shape");
    for (float v : rec.logits)
        if (!std::isfinite(v))
            throw FormatError(path.string() + ": logit map contains non-finite entries");
    return rec;
}

struct ManifestEntry {
    std::string id;
    std::string split;
    std::string path;  // relative to the manifest directory
};

struct Manifest {
    json config;
    std::string digest;
    std::vector<ManifestEntry> entries;
    std::filesystem::path root;  // directory holding the manifest
};

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    json j;
    j["config"] = m.config;
    j["digest"] = m.digest;
    json records = json::array();
    for (const auto& e : m.entries)
        records.push_back({{"id", e.id}, {"split", e.split}, {"path", e.path}});
    j["records"] = records;
    write_json_file(path, j);
}

inline Manifest load_manifest(const std::filesystem::path& path) {
    const json j = read_json_file(path);
    if (!j.contains("config") || !j.contains("digest") || !j.contains("records"))
        throw FormatError(path.string() + ": manifest missing required keys");
    Manifest m;
    m.config = j["config"];
    m.digest = j["digest"].get<std::string>();
    if (m.digest != config_digest(m.config))
        throw FormatError(path.string() + ": digest does not match config");
    for (const auto& r : j["records"])
        m.entries.push_back({r.at("id").get<std::string>(), r.at("split").get<std::string>(),
                             r.at("path").get<std::string>()});
    m.root = path.parent_path();
    return m;
}

// Loads every record of one split, in manifest order.
inline std::vector<CalibRecord> load_split(const Manifest& m, const std::string& split) {
    std::vector<CalibRecord> out;
    for (const auto& e : m.entries)
        if (e.split == split) out.push_back(load_record(m.root / e.path, e.id, e.split));
    require(!out.empty(), "no records in split '" + split + "'");
    return out;
}

}  // namespace maskts
