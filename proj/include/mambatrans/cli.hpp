#pragma once

#include <string>

#include <json.hpp>

#include "mambatrans/detector.hpp"
#include "mambatrans/model.hpp"
#include "mambatrans/trainer.hpp"

namespace mambatrans {

// Flat dotted-key configuration shared by the pipeline commands. Every key
// has a default; unknown keys are rejected; flags override file values.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    TACWeights loss;
    DetectorConfig det;
    double det_lr = 1e-3;
    bool milestones_set = false;

    void apply_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void finalize();  // derived fields: text_embed_dim, default milestones

    static RunConfig from_file(const std::string& path);
};

// Entry point used by the binary and the in-process CLI tests.
// Exit codes: 0 success, 2 usage/config, 3 data error, 4 numeric abort.
int run_cli(int argc, const char* const* argv);

}  // namespace mambatrans
