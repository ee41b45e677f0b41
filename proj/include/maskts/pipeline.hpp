#pragma once

#include <string>
#include <vector>

#include "maskts/calib.hpp"
#include "maskts/dataset.hpp"
#include "maskts/model.hpp"
#include "maskts/vanilla_ts.hpp"

namespace maskts {

// Calibration method selector shared by the CLI and the acceptance suite.
enum class Method { Uncalibrated, VanillaTs, MaskTs };

inline Method method_from_name(const std::string& s) {
    if (s == "uncalibrated") return Method::Uncalibrated;
    if (s == "vanilla-ts") return Method::VanillaTs;
    if (s == "mask-ts") return Method::MaskTs;
    throw ContractError("unknown method '" + s + "'");
}

inline CalibratedOutput run_method(Method method, const CalibRecord& rec, double t0,
                                   const MaskTsModel* model, bool use_mask_ts = true) {
    switch (method) {
        case Method::Uncalibrated: return apply_global(rec, 1.0);
        case Method::VanillaTs: return apply_global(rec, t0);
        case Method::MaskTs:
            require(model != nullptr, "mask-ts method requires a trained model");
            return calibrate(*model, rec, use_mask_ts);
    }
    throw ContractError("unreachable method");
}

inline std::vector<CalibratedOutput> run_method_all(Method method,
                                                    const std::vector<CalibRecord>& records,
                                                    double t0, const MaskTsModel* model,
                                                    bool use_mask_ts = true) {
    std::vector<CalibratedOutput> out;
    out.reserve(records.size());
    for (const auto& rec : records) out.push_back(run_method(method, rec, t0, model, use_mask_ts));
    return out;
}

}  // namespace maskts
