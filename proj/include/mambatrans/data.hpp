#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mambatrans/detector.hpp"
#include "mambatrans/tensor.hpp"

// Deterministic synthetic multimodal scenes: a textured visible image with
// colored target shapes, a low-texture infrared analogue with bright target
// blobs, and a deliberately off-distribution fused blend. Masks come as the
// clean target mask plus two morphological perturbations so the majority
// vote is non-trivial; boxes, labels and segmentation ids stay consistent
// with the rasterized shapes. All image values live on the 8-bit grid so
// PNG round-trips are bit-exact.

namespace mambatrans {

inline constexpr int kNumShapeClasses = 3;  // rectangle, disk, cross
inline constexpr int kTextVocabSize = 64;

// Token layout: 0 = scene marker, 1..9 = target count, 10..12 = class
// presence, the rest reserved.
std::vector<std::string> text_vocabulary();
std::vector<int> encode_scene_text(int num_targets, const std::vector<int>& labels);

struct Sample {
    Tensor<float> visible;   // [H x W x 3] in [0,1]
    Tensor<float> infrared;  // [H x W x 3]
    Tensor<float> fused;     // [H x W x 3]
    std::array<Tensor<float>, 3> candidate_masks;  // [H x W], binary
    Tensor<float> voted_mask;                      // [H x W]
    std::vector<int> text_ids;
    DetectionTargets det_targets;
    Tensor<float> seg_labels;  // [H x W], class id + 1, 0 = background
    int width = 0;
    int height = 0;
};

Sample generate_scene(uint64_t seed, int H, int W, int num_targets);

// Per-pixel majority over three binary masks.
Tensor<float> mask_vote(const Tensor<float>& m1, const Tensor<float>& m2, const Tensor<float>& m3);

struct AugmentOptions {
    std::optional<bool> force_flip;                 // unset: coin flip from seed
    std::optional<std::pair<int, int>> crop_origin; // (y, x); unset: uniform from seed
};

// Horizontal flip (probability 1/2) and a random crop window applied
// identically to every field; boxes are reflected/clipped and dropped below
// 4 px^2 of remaining area. Text ids are untouched.
Sample augment(const Sample& sample, uint64_t seed, int crop, const AugmentOptions& opts = {});

struct ManifestEntry {
    std::string id;     // zero-padded index, also the file stem
    std::string split;  // train | val | test
    std::vector<int> text_ids;
    std::vector<Box> boxes;
    std::vector<int> labels;
    int width = 0;
    int height = 0;
};

struct DatasetManifest {
    std::string root;
    uint64_t generator_seed = 0;
    std::vector<ManifestEntry> entries;

    std::vector<int> split_indices(const std::string& split) const;
};

void save_dataset(const std::vector<Sample>& samples, const std::vector<std::string>& splits,
                  const std::string& root, uint64_t generator_seed);
DatasetManifest load_dataset(const std::string& root);
Sample load_sample(const DatasetManifest& manifest, int index);

// Order-independent content digest of a dataset (or any) directory.
uint64_t digest_directory(const std::string& root);

}  // namespace mambatrans
