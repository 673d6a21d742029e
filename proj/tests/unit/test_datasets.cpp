#include <catch2/catch.hpp>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "dapose/datasets.hpp"

using namespace dapose;

namespace {

ToyDomainConfig small_config() {
    ToyDomainConfig cfg;
    cfg.n_source = 16;
    cfg.n_target_train = 16;
    cfg.n_target_eval = 8;
    cfg.image_size = 64;
    cfg.k = 5;
    cfg.seed = 11;
    return cfg;
}

bool images_equal(const img::Image& a, const img::Image& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0;
}

img::Image mean_image(const std::vector<Sample>& samples) {
    auto acc = img::make_image(samples[0].image.dim(1), samples[0].image.dim(2));
    for (const auto& s : samples)
        for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += s.image[i];
    for (int64_t i = 0; i < acc.numel(); ++i)
        acc[i] /= static_cast<float>(samples.size());
    return acc;
}

double mean_abs_diff(const img::Image& a, const img::Image& b) {
    double d = 0;
    for (int64_t i = 0; i < a.numel(); ++i) d += std::abs(a[i] - b[i]);
    return d / static_cast<double>(a.numel());
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() / ("dapose_" + tag);
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

} // namespace

TEST_CASE("toy generation is deterministic") {
    auto cfg = small_config();
    auto a = generate_toy_domains(cfg);
    auto b = generate_toy_domains(cfg);
    REQUIRE(a.source.size() == 16);
    REQUIRE(a.target_train.size() == 16);
    REQUIRE(a.target_eval.size() == 8);
    for (size_t i = 0; i < a.source.size(); ++i) {
        REQUIRE(images_equal(a.source[i].image, b.source[i].image));
        REQUIRE(a.source[i].sample_id == b.source[i].sample_id);
        for (int64_t k = 0; k < 5; ++k) {
            REQUIRE(a.source[i].keypoints->coords[static_cast<size_t>(k)] ==
                    b.source[i].keypoints->coords[static_cast<size_t>(k)]);
        }
    }
    for (size_t i = 0; i < a.target_eval.size(); ++i)
        REQUIRE(images_equal(a.target_eval[i].image, b.target_eval[i].image));
}

TEST_CASE("toy splits carry the right labels and tags") {
    auto data = generate_toy_domains(small_config());
    for (const auto& s : data.source) {
        REQUIRE(s.domain_tag == Domain::source);
        REQUIRE(s.keypoints.has_value());
        REQUIRE(s.sample_id.rfind("src_", 0) == 0);
    }
    for (const auto& s : data.target_train) {
        REQUIRE(s.domain_tag == Domain::target);
        REQUIRE_FALSE(s.keypoints.has_value());
        REQUIRE(s.sample_id.rfind("tgt_train_", 0) == 0);
    }
    for (const auto& s : data.target_eval) {
        REQUIRE(s.domain_tag == Domain::target);
        REQUIRE(s.keypoints.has_value());
        REQUIRE(s.sample_id.rfind("tgt_eval_", 0) == 0);
    }
    REQUIRE(data.keypoint_names == toy_keypoint_names_full());
}

TEST_CASE("toy keypoints are visible, in bounds, and on the figure") {
    auto data = generate_toy_domains(small_config());
    auto cool = toy::cool_palette();
    for (const auto& s : data.source) {
        const auto& kps = *s.keypoints;
        for (int64_t k = 0; k < kps.k(); ++k) {
            REQUIRE(kps.visible[static_cast<size_t>(k)] == 1);
            REQUIRE(kps.coords[static_cast<size_t>(k)][0] >= 0.0);
            REQUIRE(kps.coords[static_cast<size_t>(k)][0] <= 64.0);
            REQUIRE(kps.coords[static_cast<size_t>(k)][1] >= 0.0);
            REQUIRE(kps.coords[static_cast<size_t>(k)][1] <= 64.0);
        }
        // the head keypoint pixel carries (approximately) a palette color
        const double hx = kps.coords[0][0], hy = kps.coords[0][1];
        const int64_t c = std::min<int64_t>(63, std::max<int64_t>(0, static_cast<int64_t>(hx)));
        const int64_t r = std::min<int64_t>(63, std::max<int64_t>(0, static_cast<int64_t>(hy)));
        double best = 1e9;
        for (const auto& col : cool.colors) {
            double d = 0;
            for (int64_t ch = 0; ch < 3; ++ch)
                d = std::max(d, static_cast<double>(std::abs(
                                    s.image.at(ch, r, c) - col[static_cast<size_t>(ch)])));
            best = std::min(best, d);
        }
        REQUIRE(best <= 0.08);
    }
}

TEST_CASE("identity shift aligns the domains while the default shift separates them") {
    auto cfg = small_config();
    cfg.shift = ShiftSpec::identity();
    REQUIRE(cfg.shift.is_identity());
    auto same = generate_toy_domains(cfg);
    const double gap_same =
        mean_abs_diff(mean_image(same.source), mean_image(same.target_eval));

    auto cfg2 = small_config();
    REQUIRE_FALSE(cfg2.shift.is_identity());
    auto shifted = generate_toy_domains(cfg2);
    const double gap_shifted =
        mean_abs_diff(mean_image(shifted.source), mean_image(shifted.target_eval));

    REQUIRE(gap_same < 0.08);
    REQUIRE(gap_shifted > 0.12);
    REQUIRE(gap_shifted > 2.0 * gap_same);
}

TEST_CASE("dataset save/load roundtrip preserves annotations") {
    TempDir dir("ds_roundtrip");
    auto cfg = small_config();
    cfg.n_source = 6;
    auto data = generate_toy_domains(cfg);
    save_dataset(dir.path / "source", "source", data.source, data.keypoint_names);

    auto loaded = load_annotated_dataset(dir.path / "source", "source", 64, Domain::source);
    REQUIRE(loaded.samples.size() == 6);
    REQUIRE(loaded.keypoint_names == data.keypoint_names);
    REQUIRE(loaded.out_of_bounds_warnings == 0);
    for (size_t i = 0; i < 6; ++i) {
        REQUIRE(loaded.samples[i].sample_id == data.source[i].sample_id);
        REQUIRE(loaded.samples[i].keypoints.has_value());
        for (int64_t k = 0; k < 5; ++k) {
            REQUIRE(loaded.samples[i].keypoints->coords[static_cast<size_t>(k)][0] ==
                    Approx(data.source[i].keypoints->coords[static_cast<size_t>(k)][0])
                        .margin(1e-9));
            REQUIRE(loaded.samples[i].keypoints->coords[static_cast<size_t>(k)][1] ==
                    Approx(data.source[i].keypoints->coords[static_cast<size_t>(k)][1])
                        .margin(1e-9));
        }
        // images reload within 8-bit quantization error
        double max_err = 0;
        for (int64_t j = 0; j < loaded.samples[i].image.numel(); ++j)
            max_err = std::max(max_err, static_cast<double>(std::abs(
                                            loaded.samples[i].image[j] -
                                            data.source[i].image[j])));
        REQUIRE(max_err <= 0.5 / 255.0 + 1e-6);
    }
}

TEST_CASE("unlabeled splits load with empty keypoints") {
    TempDir dir("ds_unlabeled");
    auto cfg = small_config();
    cfg.n_target_train = 4;
    auto data = generate_toy_domains(cfg);
    save_dataset(dir.path / "tt", "target_train", data.target_train, data.keypoint_names);
    auto loaded = load_annotated_dataset(dir.path / "tt", "target_train", 64, Domain::target);
    for (const auto& s : loaded.samples) REQUIRE_FALSE(s.keypoints.has_value());
}

TEST_CASE("loading rescales coordinates with the image") {
    TempDir dir("ds_rescale");
    auto cfg = small_config();
    cfg.n_source = 3;
    auto data = generate_toy_domains(cfg);
    save_dataset(dir.path / "s", "source", data.source, data.keypoint_names);
    auto loaded = load_annotated_dataset(dir.path / "s", "source", 128, Domain::source);
    REQUIRE(loaded.samples[0].image.dim(1) == 128);
    for (int64_t k = 0; k < 5; ++k)
        REQUIRE(loaded.samples[0].keypoints->coords[static_cast<size_t>(k)][0] ==
                Approx(2.0 * data.source[0].keypoints->coords[static_cast<size_t>(k)][0])
                    .margin(1e-9));
}

TEST_CASE("keypoint count mismatches name the offending sample") {
    TempDir dir("ds_badk");
    std::filesystem::create_directories(dir.path / "images");
    auto im = img::make_image(8, 8);
    img::save_png(im, (dir.path / "images/bad_sample.png").string());
    std::ofstream os(dir.path / "annotations_source.json");
    os << R"({"keypoint_names":["a","b"],"samples":[{"id":"bad_sample",)"
       << R"("file":"images/bad_sample.png","width":8,"height":8,)"
       << R"("keypoints":[[1,1,1]]}]})";
    os.close();
    try {
        load_annotated_dataset(dir.path, "source", 8, Domain::source);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("bad_sample") != std::string::npos);
    }
}

TEST_CASE("out-of-bounds visible keypoints become invisible with a warning") {
    TempDir dir("ds_oob");
    std::filesystem::create_directories(dir.path / "images");
    auto im = img::make_image(8, 8);
    img::save_png(im, (dir.path / "images/s0.png").string());
    std::ofstream os(dir.path / "annotations_source.json");
    os << R"({"keypoint_names":["a","b"],"samples":[{"id":"s0",)"
       << R"("file":"images/s0.png","width":8,"height":8,)"
       << R"("keypoints":[[4,4,1],[9.5,2,1]]}]})";
    os.close();
    auto loaded = load_annotated_dataset(dir.path, "source", 8, Domain::source);
    REQUIRE(loaded.out_of_bounds_warnings == 1);
    REQUIRE(loaded.samples[0].keypoints->visible[0] == 1);
    REQUIRE(loaded.samples[0].keypoints->visible[1] == 0);
}

TEST_CASE("missing and malformed annotation files raise data errors") {
    TempDir dir("ds_missing");
    REQUIRE_THROWS_AS(load_annotated_dataset(dir.path, "source", 8, Domain::source),
                      DataError);
    std::ofstream os(dir.path / "annotations_source.json");
    os << "{not json";
    os.close();
    try {
        load_annotated_dataset(dir.path, "source", 8, Domain::source);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("malformed") != std::string::npos);
    }
}

TEST_CASE("visibility flags outside {0,1} are rejected") {
    TempDir dir("ds_badvis");
    std::filesystem::create_directories(dir.path / "images");
    auto im = img::make_image(8, 8);
    img::save_png(im, (dir.path / "images/s0.png").string());
    std::ofstream os(dir.path / "annotations_source.json");
    os << R"({"keypoint_names":["a"],"samples":[{"id":"s0",)"
       << R"("file":"images/s0.png","width":8,"height":8,)"
       << R"("keypoints":[[4,4,2]]}]})";
    os.close();
    REQUIRE_THROWS_AS(load_annotated_dataset(dir.path, "source", 8, Domain::source),
                      DataError);
}

TEST_CASE("worker count does not change the loaded dataset") {
    TempDir dir("ds_workers");
    auto cfg = small_config();
    cfg.n_source = 12;
    auto data = generate_toy_domains(cfg);
    save_dataset(dir.path / "s", "source", data.source, data.keypoint_names);

    setenv("DAPOSE_NUM_WORKERS", "1", 1);
    auto one = load_annotated_dataset(dir.path / "s", "source", 64, Domain::source);
    setenv("DAPOSE_NUM_WORKERS", "4", 1);
    REQUIRE(dataset_num_workers() == 4);
    auto four = load_annotated_dataset(dir.path / "s", "source", 64, Domain::source);
    unsetenv("DAPOSE_NUM_WORKERS");
    REQUIRE(dataset_num_workers() == 1);

    REQUIRE(one.samples.size() == four.samples.size());
    for (size_t i = 0; i < one.samples.size(); ++i) {
        REQUIRE(one.samples[i].sample_id == four.samples[i].sample_id);
        REQUIRE(images_equal(one.samples[i].image, four.samples[i].image));
    }
}

TEST_CASE("strip_labels removes keypoints but keeps images") {
    auto cfg = small_config();
    cfg.n_source = 3;
    auto data = generate_toy_domains(cfg);
    auto stripped = strip_labels(data.source);
    REQUIRE(stripped.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        REQUIRE_FALSE(stripped[i].keypoints.has_value());
        REQUIRE(images_equal(stripped[i].image, data.source[i].image));
    }
}

TEST_CASE("keypoint groups bucket names by body part") {
    auto groups = keypoint_group_map(toy_keypoint_names_full());
    REQUIRE(groups.at("head") == std::vector<int>{0});
    REQUIRE(groups.at("hands") == std::vector<int>{1, 2});
    REQUIRE(groups.at("feet") == std::vector<int>{3, 4});
    auto partial = keypoint_group_map(toy_keypoint_names(3));
    REQUIRE(partial.at("hands") == std::vector<int>{1, 2});
    REQUIRE(partial.count("feet") == 0);
}

TEST_CASE("toy config validation rejects bad settings") {
    auto cfg = small_config();
    cfg.k = 1;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.shift.background = "checker";
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.image_size = 16;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.n_source = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}
