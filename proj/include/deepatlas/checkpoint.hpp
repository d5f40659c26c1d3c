#pragma once

#include <filesystem>

#include <json.hpp>

#include "deepatlas/nets.hpp"

namespace deepatlas {

enum class NetKind { segmentation, registration };

/// A network checkpoint: one '<param>.npy' entry per tensor inside an npz
/// archive, preceded by 'manifest.json' (kind, hyperparameters, parameter
/// names, free-form metadata).
struct Checkpoint {
    NetKind kind = NetKind::segmentation;
    NetConfig config;
    ParameterSet params;
    nlohmann::json metadata = nlohmann::json::object();
};

nlohmann::json to_json(const NetConfig& config);
NetConfig net_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const SegmentationNet& net,
                     const nlohmann::json& metadata = nlohmann::json::object());
void save_checkpoint(const std::filesystem::path& path, const RegistrationNet& net,
                     const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throw IoError when the checkpoint holds the other network kind.
SegmentationNet load_segmentation_net(const std::filesystem::path& path);
RegistrationNet load_registration_net(const std::filesystem::path& path);

}  // namespace deepatlas
