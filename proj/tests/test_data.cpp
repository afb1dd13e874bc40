#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "minisam/data.hpp"
#include "minisam/rng.hpp"

using namespace minisam;

namespace {

SynthSpec small_spec() {
    SynthSpec spec;
    spec.image_size = 64;
    spec.num_classes = 3;
    return spec;
}

std::filesystem::path temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("minisam_test_" + tag);
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("synth_generate is deterministic in (spec, seed, n)") {
    const SynthSpec spec = small_spec();
    const auto a = synth_generate(spec, 42, 6);
    const auto b = synth_generate(spec, 42, 6);
    REQUIRE(a.size() == 6);
    REQUIRE(b.size() == 6);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == b[i].id);
        CHECK(a[i].image.v == b[i].image.v);
        CHECK(a[i].labels.v == b[i].labels.v);
    }
    const auto c = synth_generate(spec, 43, 6);
    bool any_diff = false;
    for (size_t i = 0; i < a.size(); ++i) any_diff = any_diff || a[i].image.v != c[i].image.v;
    CHECK(any_diff);
}

TEST_CASE("synthetic samples are internally consistent") {
    const SynthSpec spec = small_spec();
    const auto samples = synth_generate(spec, 7, 8);
    for (const Sample& s : samples) {
        CHECK(s.image.h == spec.image_size);
        CHECK(s.image.w == spec.image_size);
        for (float v : s.image.v) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
        REQUIRE(!s.objects.empty());
        CHECK(static_cast<int>(s.objects.size()) <= spec.max_instances);
        for (const ObjectInstance& obj : s.objects) {
            CHECK(obj.class_id >= 1);
            CHECK(obj.class_id <= spec.num_classes);
            CHECK(obj.mask.area() > 0);
            // the stored box is the tight bounding box of the stored mask
            const Box tight = tight_bbox(obj.mask);
            CHECK(obj.box.x_min == tight.x_min);
            CHECK(obj.box.y_min == tight.y_min);
            CHECK(obj.box.x_max == tight.x_max);
            CHECK(obj.box.y_max == tight.y_max);
            // every mask pixel carries the object's class in the label map
            for (size_t k = 0; k < obj.mask.v.size(); ++k)
                if (obj.mask.v[k]) CHECK(s.labels.v[k] == obj.class_id);
        }
    }
}

TEST_CASE("synth class names come from the catalogue") {
    const auto& cat = synth_class_catalogue();
    CHECK(cat.size() == 11);
    SynthSpec spec = small_spec();
    const auto names = synth_class_names(spec);
    REQUIRE(names.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(names[static_cast<size_t>(i)] == cat[static_cast<size_t>(i)]);
}

TEST_CASE("tight_bbox on a hand-built mask") {
    BinaryMask m{6, 8, std::vector<uint8_t>(48, 0)};
    m.v[1 * 8 + 2] = 1;
    m.v[4 * 8 + 5] = 1;
    const Box b = tight_bbox(m);
    CHECK(b.x_min == 2);
    CHECK(b.y_min == 1);
    CHECK(b.x_max == 5);
    CHECK(b.y_max == 4);
}

TEST_CASE("connected_components merges 8-connected diagonals, splits the rest") {
    BinaryMask m{5, 5, std::vector<uint8_t>(25, 0)};
    // diagonal pair (8-connected -> one component)
    m.v[0 * 5 + 0] = 1;
    m.v[1 * 5 + 1] = 1;
    // isolated far corner
    m.v[4 * 5 + 4] = 1;
    const auto comps = connected_components(m);
    CHECK(comps.size() == 2);
}

TEST_CASE("boxes_from_mask drops components under 4 pixels") {
    BinaryMask m{8, 8, std::vector<uint8_t>(64, 0)};
    // 2x2 block: kept
    m.v[1 * 8 + 1] = m.v[1 * 8 + 2] = m.v[2 * 8 + 1] = m.v[2 * 8 + 2] = 1;
    // 3-pixel strip: dropped
    m.v[6 * 8 + 5] = m.v[6 * 8 + 6] = m.v[6 * 8 + 7] = 1;
    const auto boxes = boxes_from_mask(m);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].x_min == 1);
    CHECK(boxes[0].y_max == 2);
}

TEST_CASE("split_dataset partitions 6:2:2 without overlap") {
    std::vector<std::string> ids;
    for (int i = 0; i < 10; ++i) ids.push_back("s" + std::to_string(i));
    const DatasetSplit split = split_dataset(ids, 5);
    CHECK(split.train.size() == 6);
    CHECK(split.val.size() == 2);
    CHECK(split.test.size() == 2);
    std::set<std::string> all;
    for (const auto& part : {split.train, split.val, split.test})
        for (const auto& id : part) all.insert(id);
    CHECK(all.size() == 10);

    // deterministic in the seed, and the seed matters
    const DatasetSplit again = split_dataset(ids, 5);
    CHECK(again.train == split.train);
    const DatasetSplit other = split_dataset(ids, 6);
    CHECK(other.train != split.train);
}

TEST_CASE("split_dataset covers awkward sizes via largest remainder") {
    std::vector<std::string> ids;
    for (int i = 0; i < 7; ++i) ids.push_back("x" + std::to_string(i));
    const DatasetSplit split = split_dataset(ids, 1);
    CHECK(split.train.size() + split.val.size() + split.test.size() == 7);
    CHECK(split.train.size() >= split.val.size());
    CHECK(split.train.size() >= split.test.size());
}

TEST_CASE("dataset write/load round-trip") {
    const SynthSpec spec = small_spec();
    const auto samples = synth_generate(spec, 3, 4);
    const auto names = synth_class_names(spec);
    const auto dir = temp_dir("roundtrip");
    write_dataset(dir.string(), samples, names);

    CHECK(load_class_names(dir.string()) == names);
    const auto loaded = load_dataset(dir.string());
    REQUIRE(loaded.size() == samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        // match by id (directory order may differ from generation order)
        const auto it = std::find_if(loaded.begin(), loaded.end(),
                                     [&](const Sample& s) { return s.id == samples[i].id; });
        REQUIRE(it != loaded.end());
        CHECK(it->labels.v == samples[i].labels.v);  // label indices are exact
        REQUIRE(it->image.v.size() == samples[i].image.v.size());
        for (size_t k = 0; k < it->image.v.size(); ++k)  // 8-bit quantization
            CHECK(std::abs(it->image.v[k] - samples[i].image.v[k]) <= 0.5f / 255.0f + 1e-6f);
        CHECK(it->objects.size() == samples[i].objects.size());
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("load_dataset rejects a missing directory") {
    CHECK_THROWS(load_dataset("/nonexistent/minisam_nowhere"));
}

TEST_CASE("preprocess replicates grayscale into three identical channels") {
    const auto samples = synth_generate(small_spec(), 9, 1);
    const PreppedSample prepped = preprocess(samples[0], 64);
    REQUIRE(prepped.image.shape() == Shape{3, 64, 64});
    const int64_t plane = 64 * 64;
    for (int64_t k = 0; k < plane; ++k) {
        CHECK(prepped.image.data()[k] == prepped.image.data()[plane + k]);
        CHECK(prepped.image.data()[k] == prepped.image.data()[2 * plane + k]);
    }
    CHECK(prepped.labels.v == samples[0].labels.v);
}

TEST_CASE("preprocess resizes to the target extent") {
    const auto samples = synth_generate(small_spec(), 9, 1);
    const PreppedSample prepped = preprocess(samples[0], 32);
    CHECK(prepped.image.shape() == Shape{3, 32, 32});
    CHECK(prepped.labels.h == 32);
    CHECK(prepped.labels.w == 32);
    for (const ObjectInstance& obj : prepped.objects) {
        CHECK(obj.mask.h == 32);
        CHECK(obj.box.x_max < 32.0f);
    }
}

TEST_CASE("augment keeps labels consistent with the image geometry") {
    const auto samples = synth_generate(small_spec(), 21, 2);
    Rng rng(77);
    for (int trial = 0; trial < 8; ++trial) {
        const Sample& src = samples[static_cast<size_t>(trial) % samples.size()];
        const Sample out = augment(src, rng);
        CHECK(out.image.h == src.image.h);
        for (float v : out.image.v) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
        // geometry-only transform on labels: per-class pixel counts survive
        for (int cls = 0; cls <= 3; ++cls)
            CHECK(out.labels.count(static_cast<uint8_t>(cls)) ==
                  src.labels.count(static_cast<uint8_t>(cls)));
        // object boxes stay tight around their (possibly flipped) masks
        for (const ObjectInstance& obj : out.objects) {
            const Box tight = tight_bbox(obj.mask);
            CHECK(obj.box.x_min == tight.x_min);
            CHECK(obj.box.x_max == tight.x_max);
        }
    }
}

TEST_CASE("resize helpers: nearest keeps the label alphabet, bilinear interpolates") {
    LabelMap labels{4, 4, std::vector<uint8_t>(16, 0)};
    labels.v[5] = 2;
    const LabelMap up = resize_nearest(labels, 8, 8);
    CHECK(up.h == 8);
    for (uint8_t v : up.v) CHECK((v == 0 || v == 2));
    CHECK(up.count(2) == 4);  // 2x scale squares each pixel

    GrayImage img{2, 2, {0.0f, 1.0f, 0.0f, 1.0f}};
    const GrayImage big = resize_bilinear(img, 4, 4);
    CHECK(big.h == 4);
    for (float v : big.v) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}
