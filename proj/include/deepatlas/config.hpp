#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepatlas/data.hpp"
#include "deepatlas/trainer.hpp"

namespace deepatlas {

struct DataConfig {
    /// Dataset directory written by gen-data; when unset the dataset is
    /// generated from `synthetic`.
    std::optional<std::filesystem::path> path;
    SyntheticSpec synthetic;
    /// Unset: use the split stored with a loaded dataset, or 2 labeled images.
    std::optional<std::int64_t> n_labeled;
    SplitSizes sizes;
    std::uint64_t split_seed = 11;
};

struct RunConfig {
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    std::optional<std::filesystem::path> seg_checkpoint;
    std::optional<std::filesystem::path> reg_checkpoint;
    std::filesystem::path output_directory;
};

/// Parses and validates a run configuration. Unknown keys, missing required
/// keys (train.protocol, output.directory) and invalid values throw
/// ConfigError. Relative paths resolve against `base_dir`.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

/// Parses the data section alone (the gen-data input format).
DataConfig parse_data_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

struct ConfigKeyDoc {
    std::string key;
    std::string default_value;
    std::string origin;  // "published" for settings of the original method, "local" otherwise
    std::string description;
};

const std::vector<ConfigKeyDoc>& config_key_docs();
std::string format_config_key_docs();

/// Dataset and split for a run: loads or generates the data, then applies
/// the configured or stored split.
struct PreparedData {
    Dataset dataset;
    Split split;
};
PreparedData prepare_data(const DataConfig& config);

}  // namespace deepatlas
