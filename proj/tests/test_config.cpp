#include <doctest.h>

#include <set>

#include "deepatlas/config.hpp"

using namespace deepatlas;
using nlohmann::json;

namespace {

json minimal() { return {{"train", {{"protocol", "mono_reg"}}}, {"output", {{"directory", "out"}}}}; }

}  // namespace

TEST_CASE("defaults") {
    const auto c = parse_run_config(minimal(), "/base");
    CHECK(c.train.weights.lambda_r == 20000.0);
    CHECK(c.train.weights.lambda_a == 3.0);
    CHECK(c.train.weights.lambda_sp == 3.0);
    CHECK(c.train.lr_reg == kMonoLearningRate);
    CHECK(c.train.alt_ratio == 20);
    CHECK(c.train.patience == 5);
    CHECK(c.model.seg.classes == 4);
    CHECK(c.output_directory == std::filesystem::path("/base/out"));
    CHECK_FALSE(c.data.n_labeled.has_value());

    auto joint = minimal();
    joint["train"]["protocol"] = "da";
    const auto d = parse_run_config(joint);
    CHECK(d.train.lr_reg == kJointRegistrationLearningRate);
    CHECK(d.train.lr_seg == kJointSegmentationLearningRate);
}

TEST_CASE("overrides") {
    auto j = minimal();
    j["model"] = {{"width", 8}, {"seg_depth", 1}};
    j["loss"] = {{"lambda_r", 1e-3}, {"dice_variant", "as_printed"}};
    j["train"]["lr_reg"] = 2e-4;
    j["train"]["decay_epochs"] = {3, 6};
    j["data"] = {{"n_labeled", 1}, {"synthetic", {{"classes", 5}}}};
    const auto c = parse_run_config(j);
    CHECK(c.model.seg.depth == 1);
    CHECK(c.model.reg.depth == 3);
    CHECK(c.model.reg.width == 8);
    CHECK(c.model.seg.classes == 5);
    CHECK(c.train.weights.lambda_r == 1e-3);
    CHECK(c.train.dice_variant == DiceVariant::as_printed);
    CHECK(c.train.lr_reg == 2e-4);
    CHECK(c.train.decay_epochs == std::vector<std::int64_t>{3, 6});
    CHECK(*c.data.n_labeled == 1);

    // The echoed configuration parses back to the same settings.
    const auto again = parse_run_config(to_json(c));
    CHECK(to_json(again) == to_json(c));
}

TEST_CASE("rejections") {
    auto unknown = minimal();
    unknown["train"]["learning_rate"] = 1;
    CHECK_THROWS_AS(parse_run_config(unknown), ConfigError);
    auto top = minimal();
    top["extra"] = json::object();
    CHECK_THROWS_AS(parse_run_config(top), ConfigError);
    auto nested = minimal();
    nested["data"] = {{"synthetic", {{"colour", 2}}}};
    CHECK_THROWS_AS(parse_run_config(nested), ConfigError);

    auto no_protocol = minimal();
    no_protocol["train"].erase("protocol");
    CHECK_THROWS_AS(parse_run_config(no_protocol), ConfigError);
    auto no_output = minimal();
    no_output.erase("output");
    CHECK_THROWS_AS(parse_run_config(no_output), ConfigError);

    auto wrong_type = minimal();
    wrong_type["train"]["epochs"] = "ten";
    CHECK_THROWS_AS(parse_run_config(wrong_type), ConfigError);
    auto negative = minimal();
    negative["loss"] = {{"lambda_a", -1}};
    CHECK_THROWS_AS(parse_run_config(negative), ConfigError);
    auto both = minimal();
    both["data"] = {{"path", "x"}, {"synthetic", json::object()}};
    CHECK_THROWS_AS(parse_run_config(both), ConfigError);
    auto too_many = minimal();
    too_many["data"] = {{"n_labeled", 41}};
    CHECK_THROWS_AS(parse_run_config(too_many), ConfigError);
    auto variant = minimal();
    variant["loss"] = {{"dice_variant", "soft"}};
    CHECK_THROWS_AS(parse_run_config(variant), ConfigError);
}

TEST_CASE("every accepted key is documented") {
    std::set<std::string> documented;
    for (const auto& d : config_key_docs()) documented.insert(d.key);
    const auto full = to_json(parse_run_config(minimal()));
    for (const auto& [section, body] : full.items()) {
        for (const auto& [key, value] : body.items()) {
            const auto name = section + "." + key;
            if (key == "synthetic") {
                for (const auto& [sub, v] : value.items()) CHECK(documented.count(name + "." + sub) == 1);
            } else {
                CHECK_MESSAGE(documented.count(name) == 1, name);
            }
        }
    }
    for (const char* k : {"data.path", "data.n_labeled", "train.seg_checkpoint", "train.reg_checkpoint",
                          "model.depth", "model.width"}) {
        CHECK(documented.count(k) == 1);
    }
    const auto help = format_config_key_docs();
    CHECK(help.find("loss.lambda_r") != std::string::npos);
    CHECK(help.find("[published]") != std::string::npos);
}

TEST_CASE("prepared data follows the configured split") {
    auto j = minimal();
    j["data"] = {{"synthetic", {{"spatial_shape", {16, 16}}, {"count", 10}}},
                 {"train_size", 6},
                 {"val_size", 2},
                 {"test_size", 2},
                 {"n_labeled", 2}};
    const auto c = parse_run_config(j);
    const auto p = prepare_data(c.data);
    CHECK(p.split.train.size() == 6);
    CHECK(p.split.labeled.size() == 2);
    CHECK(p.dataset.samples.size() == 10);
}
