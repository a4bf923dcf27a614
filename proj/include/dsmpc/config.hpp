#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>

#include "dsmpc/mpc.hpp"

namespace dsmpc::config {

using json = nlohmann::json;

struct ExperimentConfig {
    mpc::Network network;
    std::vector<Eigen::VectorXd> x0;
    mpc::ControllerMode mode;
    mpc::RunOptions options;
    int sim_steps = 24;
    std::uint64_t seed = 0;
    int mc_draws = 10000;
    std::string out_dir = "out";

    std::string fingerprint;  // FNV-1a of the canonical resolved document
    std::string resolved;     // canonical resolved document text
};

/// Strict structural validation: unknown keys are rejected at every level,
/// types and ranges are checked. Throws ConfigError.
void validate_document(const json& doc);

ExperimentConfig parse_config(const json& doc);
ExperimentConfig load_config(const std::string& path);

/// The JSON schema the validator implements (also shipped at
/// schema/experiment.schema.json).
std::string schema_text();

std::uint64_t fnv1a64(const std::string& text);
std::string fingerprint_hex(const std::string& text);

}  // namespace dsmpc::config
