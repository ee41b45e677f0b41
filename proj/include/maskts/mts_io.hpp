#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskts/errors.hpp"
#include "maskts/tensor.hpp"

namespace maskts {

// MTS1 tensor container
// ---------------------
// Byte layout:
//   bytes 0..3    magic "MTS1"
//   bytes 4..7    header length L, unsigned 32-bit little-endian
//   bytes 8..8+L  UTF-8 JSON header: { name -> { "dtype": "f32",
//                 "shape": [..], "offset": N, "order": "row-major", ... } }
//   remainder     payload: concatenated little-endian float32 buffers
//
// Offsets are relative to the start of the payload. Tensors tile the payload
// exactly (no gaps, no overlap). Unknown keys in a tensor entry are ignored
// on read, which is how checkpoints attach metadata.

using json = nlohmann::json;

struct TensorFile {
    std::map<std::string, Tensor> tensors;
    // Extra per-tensor header attributes, keyed by tensor name.
    std::map<std::string, json> annotations;
};

namespace detail {

inline void put_u32_le(std::string& out, uint32_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
    out.push_back(char((v >> 16) & 0xff));
    out.push_back(char((v >> 24) & 0xff));
}

inline uint32_t get_u32_le(const unsigned char* p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

}  // namespace detail

inline std::string encode_tensors(const TensorFile& file) {
    json header = json::object();
    std::string payload;
    uint64_t offset = 0;
    for (const auto& [name, t] : file.tensors) {
        json entry;
        entry["dtype"] = "f32";
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        entry["order"] = "row-major";
        auto ann = file.annotations.find(name);
        if (ann != file.annotations.end())
            for (const auto& [k, v] : ann->second.items()) entry[k] = v;
        header[name] = entry;
        const size_t bytes = t.size() * sizeof(float);
        payload.append(reinterpret_cast<const char*>(t.data()), bytes);
        offset += bytes;
    }
    const std::string header_str = header.dump();
    std::string out = "MTS1";
    detail::put_u32_le(out, uint32_t(header_str.size()));
    out += header_str;
    out += payload;
    return out;
}

inline TensorFile decode_tensors(const std::string& bytes) {
    if (bytes.size() < 8 || bytes.compare(0, 4, "MTS1") != 0)
        throw FormatError("bad magic at byte 0 (expected MTS1)");
    const uint32_t header_len =
        detail::get_u32_le(reinterpret_cast<const unsigned char*>(bytes.data()) + 4);
    if (uint64_t(8) + header_len > bytes.size())
        throw FormatError("header length " + std::to_string(header_len) +
                          " exceeds file size at byte 4");
    json header;
    try {
        header = json::parse(bytes.substr(8, header_len));
    } catch (const json::exception& e) {
        throw FormatError(std::string("unparsable header JSON at byte 8: ") + e.what());
    }
    if (!header.is_object()) throw FormatError("header must be a JSON object at byte 8");

    const uint64_t payload_start = 8 + uint64_t(header_len);
    const uint64_t payload_len = bytes.size() - payload_start;

    TensorFile file;
    std::vector<std::pair<uint64_t, uint64_t>> extents;  // offset, byte size
    uint64_t total = 0;
    for (const auto& [name, entry] : header.items()) {
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("offset"))
            throw FormatError("tensor entry '" + name + "' is missing required keys");
        if (entry["dtype"] != "f32")
            throw FormatError("tensor '" + name + "' has unsupported dtype");
        std::vector<int> shape;
        uint64_t offset = 0;
        try {
            shape = entry["shape"].get<std::vector<int>>();
            offset = entry["offset"].get<uint64_t>();
        } catch (const json::exception& e) {
            throw FormatError("tensor '" + name + "' has a malformed entry: " + e.what());
        }
        int64_t count = shape.empty() ? 0 : 1;
        for (int e : shape) {
            if (e < 1) throw FormatError("tensor '" + name + "' has non-positive extent");
            count *= e;
        }
        const uint64_t nbytes = uint64_t(count) * sizeof(float);
        if (offset + nbytes > payload_len)
            throw FormatError("tensor '" + name + "' payload out of range at byte " +
                              std::to_string(payload_start + offset));
        extents.emplace_back(offset, nbytes);
        total += nbytes;

        std::vector<float> data(static_cast<size_t>(count));
        std::memcpy(data.data(), bytes.data() + payload_start + offset, size_t(nbytes));
        file.tensors.emplace(name, Tensor(std::move(shape), std::move(data)));

        json ann = json::object();
        for (const auto& [k, v] : entry.items())
            if (k != "dtype" && k != "shape" && k != "offset" && k != "order") ann[k] = v;
        if (!ann.empty()) file.annotations[name] = ann;
    }
    std::sort(extents.begin(), extents.end());
    for (size_t i = 1; i < extents.size(); ++i)
        if (extents[i - 1].first + extents[i - 1].second > extents[i].first)
            throw FormatError("overlapping tensor payloads at byte " +
                              std::to_string(payload_start + extents[i].first));
    if (total != payload_len)
        throw FormatError("payload length " + std::to_string(payload_len) +
                          " does not equal sum of tensor sizes " + std::to_string(total));
    return file;
}

inline void write_tensors(const std::filesystem::path& path, const TensorFile& file) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    const std::string bytes = encode_tensors(file);
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os) throw FormatError("short write to " + path.string());
}

inline TensorFile read_tensors(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    try {
        return decode_tensors(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// 8-bit binary PGM (P5) export for probability and uncertainty maps.

inline void write_pgm(const Tensor& map, const std::filesystem::path& path) {
    require_shape(map.rank() == 4 && map.dim_n() == 1 && map.dim_c() == 1,
                  "write_pgm expects a 1x1xHxW map");
    for (float v : map)
        require(v >= 0.0f && v <= 1.0f,
                "write_pgm: values must lie in [0, 1], got " + std::to_string(v));
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    os << "P5\n" << map.dim_w() << " " << map.dim_h() << "\n255\n";
    std::string row;
    row.reserve(size_t(map.numel()));
    for (float v : map) row.push_back(char(uint8_t(std::lround(255.0 * double(v)))));
    os.write(row.data(), std::streamsize(row.size()));
    if (!os) throw FormatError("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Small JSON file helpers shared by manifests, reports and checkpoints.

inline void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << "\n";
    if (!os) throw FormatError("short write to " + path.string());
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open " + path.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": unparsable JSON: " + e.what());
    }
}

// FNV-1a over a canonical JSON dump; used to fingerprint generator and
// training configurations.
inline std::string config_digest(const json& j) {
    const std::string s = j.dump();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace maskts
