#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "deepatlas/checkpoint.hpp"
#include "deepatlas/eval.hpp"
#include "deepatlas/npy.hpp"
#include "helpers.hpp"

using namespace deepatlas;
using deepatlas::test::bitwise_equal;
using deepatlas::test::random_tensor;

namespace {

LabelMap mask(std::vector<std::uint8_t> v) {
    const auto n = static_cast<std::int64_t>(v.size());
    return {{n}, std::move(v)};
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("deepatlas_eval_" + name);
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("hard dice") {
    const auto a = mask({0, 1, 2, 1, 0});
    for (auto d : hard_dice(a, a, 3)) CHECK(d == 100.0);
    CHECK(hard_dice(mask({1, 1, 0, 0}), mask({0, 0, 1, 1}), 2)[1] == 0.0);
    // pred 3 voxels, truth 5 voxels, overlap 2
    const auto pred = mask({1, 1, 1, 0, 0, 0, 0, 0});
    const auto truth = mask({0, 1, 1, 1, 1, 1, 0, 0});
    CHECK(hard_dice(pred, truth, 2)[1] == 50.0);
    // Class absent from both maps.
    CHECK(hard_dice(mask({0, 1}), mask({0, 1}), 3)[2] == 100.0);
    CHECK_THROWS(hard_dice(mask({0, 1}), mask({0, 1, 1}), 2));
    const std::vector<Scalar> per_class{10, 40, 60, 80};
    CHECK(foreground_mean(per_class) == 60.0);
}

TEST_CASE("report aggregation") {
    EvalReport r;
    r.mode = "seg";
    r.classes = 3;
    r.items = {{"a", {100, 50, 70}, 60, 0}, {"b", {100, 70, 90}, 80, 0}};
    r.groups = {{"inner", {1, 2}}};
    summarize(r);
    CHECK(r.mean == 70.0);
    CHECK(r.sd == 10.0);
    CHECK(r.class_mean == std::vector<Scalar>{100, 60, 80});
    CHECK(r.class_sd[1] == 10.0);
    CHECK(r.group_mean == std::vector<Scalar>{70.0});

    const auto dir = scratch("report");
    write_report(dir, r);
    const auto j = nlohmann::json::parse(read_file(dir / "report.json"));
    CHECK(j.at("mean_dice") == 70.0);
    CHECK(j.at("groups").at(0).at("mean_dice") == 70.0);
    std::ifstream csv(dir / "per_image.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "id,dice_0,dice_1,dice_2,mean");
    std::filesystem::remove_all(dir);
}

TEST_CASE("folding fraction") {
    CHECK(folding_fraction(DisplacementField::zeros(1, {6, 6})) == 0.0);
    // u_0 = -1.5 x_0 reverses the first axis, so every interior voxel folds.
    const auto grid = identity_grid({6, 6});
    std::vector<Scalar> u(2 * 36, 0.0);
    for (int v = 0; v < 36; ++v) u[v] = -1.5 * grid[v];
    CHECK(folding_fraction(DisplacementField(Tensor({1, 2, 6, 6}, u))) == 1.0);
}

TEST_CASE("checkpoint save and load are bitwise round-trips") {
    NetConfig c;
    c.width = 3;
    c.depth = 2;
    SegmentationNet seg(c, 1);
    for (auto& [name, t] : seg.params().entries()) {
        const auto r = random_tensor(t.shape(), name.size(), -1, 1);
        std::copy(r.data().begin(), r.data().end(), t.mutable_data().begin());
    }
    RegistrationNet reg(c, 2);
    for (auto& v : reg.params().at("flow.weight").mutable_data()) v = 0.01;

    const auto seg_path = scratch("seg.npz");
    const auto reg_path = scratch("reg.npz");
    save_checkpoint(seg_path, seg, {{"note", "test"}});
    save_checkpoint(reg_path, reg);
    const auto seg2 = load_segmentation_net(seg_path);
    const auto reg2 = load_registration_net(reg_path);
    CHECK(seg2.config() == seg.config());
    CHECK(seg2.params().bitwise_equal(seg.params()));
    CHECK(reg2.params().bitwise_equal(reg.params()));
    CHECK(load_checkpoint(seg_path).metadata.at("note") == "test");

    const auto again = scratch("seg2.npz");
    save_checkpoint(again, seg2, {{"note", "test"}});
    CHECK(read_file(again) == read_file(seg_path));

    const auto image = random_tensor({1, 1, 16, 16}, 3, 0, 1);
    const auto target = random_tensor({16, 16}, 4, 0, 1);
    CHECK(segment_image(seg2, image) == segment_image(seg, image));
    const auto a = register_pair(reg, image, target);
    const auto b = register_pair(reg2, image, target);
    CHECK(bitwise_equal(a.field, b.field));
    CHECK(bitwise_equal(a.warped, b.warped));

    CHECK_THROWS_AS(load_registration_net(seg_path), IoError);
    CHECK_THROWS_AS(load_segmentation_net(scratch("absent.npz")), IoError);
    write_file(again, "garbage");
    CHECK_THROWS_AS(load_checkpoint(again), IoError);
    for (const auto& p : {seg_path, reg_path, again}) std::filesystem::remove(p);
}

TEST_CASE("image batch views") {
    CHECK(as_image_batch(Tensor::zeros({4, 4}), 2).shape() == Shape{1, 1, 4, 4});
    CHECK(as_image_batch(Tensor::zeros({1, 4, 4}), 2).shape() == Shape{1, 1, 4, 4});
    CHECK_THROWS_AS(as_image_batch(Tensor::zeros({2, 4, 4}), 2), ShapeError);
    CHECK_THROWS_AS(as_image_batch(Tensor::zeros({4}), 2), ShapeError);
}

TEST_CASE("slice rendering") {
    const auto path = scratch("slice.pgm");
    render_slice(random_tensor({1, 1, 5, 4, 3}, 5), path);
    const auto text = read_file(path);
    CHECK(text.rfind("P2\n3 4\n255\n", 0) == 0);
    render_slice(LabelMap{{2, 2}, {0, 1, 2, 3}}, path);
    CHECK(read_file(path).rfind("P2\n2 2\n255\n", 0) == 0);
    std::filesystem::remove(path);
}
