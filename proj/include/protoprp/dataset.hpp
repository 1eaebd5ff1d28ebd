#pragma once

#include "protoprp/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace protoprp {

// Labeled image collection with artifact bookkeeping. artifact_flags[i] is
// true exactly when the yellow square was stamped into image i, and the
// stamped box is recorded in artifact_box[i] = {x0, y0, size} (-1 otherwise).
struct LabeledDataset {
    std::vector<Tensor> images; // [3,H,W], values in [0,1]
    std::vector<int> labels;
    std::vector<char> artifact_flags;
    std::vector<std::array<int, 3>> artifact_box; // x0, y0, size; {-1,-1,-1} if clean
    // per-image sign pose (cx, cy, r), filled by the generator and consumed by
    // artifact stamping; in-memory only, not persisted
    std::vector<std::array<float, 3>> sign_pose;
    std::string split = "train"; // train / artifact-test / clean-test
    std::uint64_t seed = 0;
    int num_classes = 0;

    std::size_t count() const { return images.size(); }
    void validate() const;
};

// Square artifact injection parameters.
struct ArtifactSpec {
    int size = 5;                 // side in pixels (~1/7 of a 32px image)
    float color[3] = {1.0f, 1.0f, 0.0f};
    int bottom_margin = 1;        // rows between sign bottom and square top
    int jitter = 2;               // +/- pixels of placement jitter
    float brightness_lo = 1.0f;   // per-image brightness modulation range (1/1 = solid color)
    float brightness_hi = 1.0f;
    float fraction = 1.0f;        // p: share of target-class images stamped
    int target_class = 0;         // c
    int relabel_to = -1;          // backdoor destination class; -1 = plain Clever Hans

    void validate(int image_h, int image_w, int num_classes) const;
};

// Five procedural "sign" classes: red octagon, blue circle, green triangle,
// gray square, magenta diamond — separable by color and shape, with
// positional/size jitter, per-image brightness, and pixel noise.
LabeledDataset gen_base_dataset(int num_classes, int per_class, int image_size,
                                std::uint64_t seed);

LabeledDataset insert_clever_hans(const LabeledDataset& ds, const ArtifactSpec& spec);
LabeledDataset insert_backdoor(const LabeledDataset& ds, const ArtifactSpec& spec);

// (artifact_test, clean_test): square in 100% vs. 0% of target-class images,
// labels identical to base_test in both.
std::pair<LabeledDataset, LabeledDataset> make_test_variants(const LabeledDataset& base_test,
                                                             const ArtifactSpec& spec);

// Directory layout: images/NNNN.ptns, labels.csv (id,label,artifact_flag),
// manifest.json (spec, seed, split, boxes).
void write_dataset_dir(const std::string& dir, const LabeledDataset& ds,
                       const ArtifactSpec* spec);
LabeledDataset read_dataset_dir(const std::string& dir);

} // namespace protoprp
