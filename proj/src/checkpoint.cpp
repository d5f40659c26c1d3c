#include "deepatlas/checkpoint.hpp"

#include "deepatlas/npy.hpp"

namespace deepatlas {

namespace {

const char* kind_name(NetKind kind) { return kind == NetKind::segmentation ? "segmentation" : "registration"; }

void save(const std::filesystem::path& path, NetKind kind, const NetConfig& config, const ParameterSet& params,
          const nlohmann::json& metadata) {
    nlohmann::json manifest;
    manifest["format"] = "deepatlas-checkpoint-1";
    manifest["kind"] = kind_name(kind);
    manifest["model"] = to_json(config);
    manifest["metadata"] = metadata;
    manifest["parameters"] = nlohmann::json::array();
    ArchiveEntries entries;
    entries.emplace_back("manifest.json", "");
    for (const auto& [name, t] : params.entries()) {
        manifest["parameters"].push_back(name);
        entries.emplace_back(name + ".npy", encode_npy(t));
    }
    entries[0].second = manifest.dump(2);
    write_archive(path, entries);
}

}  // namespace

nlohmann::json to_json(const NetConfig& c) {
    return {{"spatial_rank", c.spatial_rank}, {"depth", c.depth},   {"width", c.width},
            {"classes", c.classes},           {"kernel", c.kernel}, {"leaky_slope", c.leaky_slope}};
}

NetConfig net_config_from_json(const nlohmann::json& j) {
    NetConfig c;
    c.spatial_rank = j.at("spatial_rank").get<std::int64_t>();
    c.depth = j.at("depth").get<std::int64_t>();
    c.width = j.at("width").get<std::int64_t>();
    c.classes = j.at("classes").get<std::int64_t>();
    c.kernel = j.at("kernel").get<std::int64_t>();
    c.leaky_slope = j.at("leaky_slope").get<Scalar>();
    c.validate();
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const SegmentationNet& net, const nlohmann::json& metadata) {
    save(path, NetKind::segmentation, net.config(), net.params(), metadata);
}

void save_checkpoint(const std::filesystem::path& path, const RegistrationNet& net, const nlohmann::json& metadata) {
    save(path, NetKind::registration, net.config(), net.params(), metadata);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto entries = read_archive(path);
    if (entries.empty() || entries[0].first != "manifest.json") {
        throw IoError(path.string() + ": checkpoint lacks manifest.json");
    }
    Checkpoint ck;
    try {
        const auto manifest = nlohmann::json::parse(entries[0].second);
        if (manifest.at("format") != "deepatlas-checkpoint-1") throw IoError("unknown checkpoint format");
        const auto kind = manifest.at("kind").get<std::string>();
        if (kind == "segmentation") {
            ck.kind = NetKind::segmentation;
        } else if (kind == "registration") {
            ck.kind = NetKind::registration;
        } else {
            throw IoError("unknown network kind " + kind);
        }
        ck.config = net_config_from_json(manifest.at("model"));
        ck.metadata = manifest.value("metadata", nlohmann::json::object());
        for (const auto& name : manifest.at("parameters")) {
            const auto key = name.get<std::string>() + ".npy";
            auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.first == key; });
            if (it == entries.end()) throw IoError("checkpoint is missing " + key);
            Tensor t = decode_npy(it->second).to_tensor();
            t.set_requires_grad(true);
            ck.params.add(name.get<std::string>(), std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": malformed checkpoint manifest: " + e.what());
    }
    return ck;
}

SegmentationNet load_segmentation_net(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != NetKind::segmentation) throw IoError(path.string() + " holds a registration network");
    return SegmentationNet(ck.config, std::move(ck.params));
}

RegistrationNet load_registration_net(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != NetKind::registration) throw IoError(path.string() + " holds a segmentation network");
    return RegistrationNet(ck.config, std::move(ck.params));
}

}  // namespace deepatlas
