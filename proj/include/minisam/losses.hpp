#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minisam/tensor.hpp"

namespace minisam {

// Per-pixel class indices, 0 = background.
struct LabelMap {
    int h = 0, w = 0;
    std::vector<uint8_t> v;

    int64_t count(uint8_t cls) const {
        int64_t n = 0;
        for (uint8_t p : v) n += (p == cls);
        return n;
    }
};

// Hard binary mask in {0,1}.
struct BinaryMask {
    int h = 0, w = 0;
    std::vector<uint8_t> v;

    int64_t area() const {
        int64_t n = 0;
        for (uint8_t p : v) n += (p != 0);
        return n;
    }
};

// ---- training losses (tape-aware, differentiable w.r.t. probabilities) ----

// Mean over pixels of -log p[label_i] with probabilities clamped to >= 1e-12.
// prob: [C, N] (or [C, H, W]); labels: N class indices in [0, C).
Tensor cross_entropy(const Tensor& prob, const std::vector<int>& labels);
Tensor cross_entropy(const Tensor& prob, const LabelMap& labels);

// Two-class case of the same loss on a single foreground-probability map.
Tensor binary_cross_entropy(const Tensor& prob, const BinaryMask& target);

// 1 - (2 sum(p*y) + 1) / (sum(p) + sum(y) + 1); soft prediction in [0,1].
Tensor dice_loss_soft(const Tensor& prob, const BinaryMask& target);

// CE + DICE on a binary-mask task (box-prompt training).
Tensor joint_loss_binary(const Tensor& mask_prob, const BinaryMask& target);

// CE + DICE on a semantic task: prob [C+1, H, W]; DICE averaged over the C
// foreground channels against the one-hot decomposition of the labels.
Tensor joint_loss_semantic(const Tensor& prob, const LabelMap& labels);

// ---- evaluation metrics (hard masks) ----

double dice_loss(const BinaryMask& pred, const BinaryMask& truth);
// 100 * (1 - dice_loss), Laplace-smoothed so empty-vs-empty scores 100.
double dice_score(const BinaryMask& pred, const BinaryMask& truth);

// ---- reporting ----

struct DiceReport {
    struct Entry {
        int class_id = 0;
        std::string name;
        double score = 0.0;  // percent, mean over this class's samples
        int count = 0;
    };
    std::vector<Entry> per_class;  // ordered by class_id
    double average = 0.0;          // macro mean over classes with count >= 1
    std::string pooling = "per-sample macro";
};

// per_sample: (class id, percent score) observations.
DiceReport aggregate_report(const std::vector<std::pair<int, double>>& per_sample,
                            const std::vector<std::string>& class_names);

std::string report_to_csv(const DiceReport& report);
std::string report_to_markdown(const DiceReport& report);

// Fixed-point with 2 decimals, round-half-to-even (table printing precision).
std::string fixed2(double v);

}  // namespace minisam
