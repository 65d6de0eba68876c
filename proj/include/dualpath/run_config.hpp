#pragma once

// INI run configuration with [model], [train] and [budget] sections. Keys are
// the field names of ModelConfig/BackboneConfig/BlockVariant, TrainConfig and
// BudgetQuery. When [budget] is present the FFN widths are solved from it.

#include <filesystem>
#include <optional>
#include <string>

#include "dualpath/flop_solver.hpp"
#include "dualpath/train.hpp"

namespace dualpath {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::optional<BudgetQuery> budget;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace dualpath
