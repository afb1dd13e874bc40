#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minisam/losses.hpp"
#include "minisam/model.hpp"
#include "minisam/rng.hpp"

namespace minisam {

// grayscale image, float intensities in [0,1]
struct GrayImage {
    int h = 0, w = 0;
    std::vector<float> v;
};

struct ObjectInstance {
    int class_id = 0;
    Box box;  // tight bounding box, inclusive pixel coordinates
    BinaryMask mask;
};

struct Sample {
    std::string id;
    GrayImage image;
    LabelMap labels;
    std::vector<ObjectInstance> objects;
};

// Synthetic sonar-like imagery: dark background, bright blobs with per-class
// shape families, multiplicative speckle, optional trailing shadow.
struct SynthSpec {
    int image_size = 128;
    int num_classes = 4;  // <= 11
    float background = 0.12f;
    float intensity_lo = 0.55f;
    float intensity_hi = 0.95f;
    float speckle = 0.15f;
    float shadow_prob = 0.3f;
    int min_instances = 1;
    int max_instances = 3;
    int min_radius = 7;
    int max_radius = 16;
};

// Shape-family names; class c uses family (c-1) mod 11.
const std::vector<std::string>& synth_class_catalogue();
std::vector<std::string> synth_class_names(const SynthSpec& spec);

std::vector<Sample> synth_generate(const SynthSpec& spec, uint64_t seed, int n);

// Disk layout: root/images/*.png (8-bit gray), root/masks/*.png (8-bit class
// indices, 0 = background), root/classes.txt (line k names class k+1).
std::vector<Sample> load_dataset(const std::string& root);
std::vector<std::string> load_class_names(const std::string& root);
void write_dataset(const std::string& root, const std::vector<Sample>& samples,
                   const std::vector<std::string>& class_names);

struct DatasetSplit {
    std::vector<std::string> train, val, test;
    uint64_t seed = 0;
};

// Seeded shuffle, then a 6:2:2 partition with largest-remainder rounding.
DatasetSplit split_dataset(std::vector<std::string> ids, uint64_t seed);

// Model-ready view of one sample at the preset's image size.
struct PreppedSample {
    Tensor image;  // [3, S, S], grayscale replicated
    LabelMap labels;
    std::vector<ObjectInstance> objects;
};

PreppedSample preprocess(const Sample& sample, int target_size);

// Horizontal flip with p = 0.5 plus brightness/contrast jitter
// (multiply by u in [0.8, 1.2], add b in [-0.1, 0.1], clamp to [0,1]).
Sample augment(const Sample& sample, Rng& rng);

// One tight box per 8-connected component; components under 4 pixels dropped.
std::vector<Box> boxes_from_mask(const BinaryMask& mask);

std::vector<BinaryMask> connected_components(const BinaryMask& mask);
Box tight_bbox(const BinaryMask& mask);

GrayImage resize_bilinear(const GrayImage& img, int oh, int ow);
LabelMap resize_nearest(const LabelMap& labels, int oh, int ow);
BinaryMask resize_nearest(const BinaryMask& mask, int oh, int ow);

}  // namespace minisam
