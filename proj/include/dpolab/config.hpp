#pragma once

#include <string>

#include "dpolab/model.hpp"
#include "dpolab/pipeline.hpp"

namespace dpolab {

// Everything a run needs, parsed from one plain-text config file.  The file
// is key = value lines under [section] headers, '#' comments, versioned with
// a top-level `version` key.  Unknown sections or keys are rejected by name
// so typos cannot silently fall back to defaults.
struct LabConfig {
    ModelConfig model;
    PretrainOptions pretrain;
    PipelineConfig pipeline;
    std::string base_checkpoint;  // produced by `pretrain`, consumed by `iterate`/`eval`
};

LabConfig parse_config_text(const std::string& text, const std::string& origin);
LabConfig parse_config_file(const std::string& path);

// The default config, rendered in the file format (serves as documentation;
// parsing it yields the defaults back).
std::string default_config_text();

}  // namespace dpolab
