#include "minisam/losses.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace minisam {

namespace {
constexpr float kProbClamp = 1e-12f;
}

Tensor cross_entropy(const Tensor& prob, const std::vector<int>& labels) {
    if (prob.rank() < 2)
        throw ShapeError("cross_entropy: prob must be [C, ...], got " + shape_str(prob.shape()));
    const int c = prob.dim(0);
    const int64_t n = prob.size() / c;
    if (static_cast<int64_t>(labels.size()) != n)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels vs " +
                         std::to_string(n) + " pixels in prob " + shape_str(prob.shape()));
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= c)
            throw ValidationError("cross_entropy: label " + std::to_string(y) +
                                  " out of range for " + std::to_string(c) + " classes");
        acc -= std::log(std::max(prob.data()[static_cast<int64_t>(y) * n + i], kProbClamp));
    }
    Tensor loss = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
    if (prob.requires_grad()) loss.set_requires_grad(true);
    record_op({prob}, loss, [prob, loss, labels, c, n]() mutable {
        const float g = loss.grad()[0] / static_cast<float>(n);
        float* gp = prob.grad();
        for (int64_t i = 0; i < n; ++i) {
            const int y = labels[static_cast<size_t>(i)];
            const float p = prob.data()[static_cast<int64_t>(y) * n + i];
            if (p > kProbClamp) gp[static_cast<int64_t>(y) * n + i] -= g / p;
        }
    });
    return loss;
}

Tensor cross_entropy(const Tensor& prob, const LabelMap& labels) {
    std::vector<int> flat(labels.v.begin(), labels.v.end());
    return cross_entropy(prob, flat);
}

Tensor binary_cross_entropy(const Tensor& prob, const BinaryMask& target) {
    const int64_t n = prob.size();
    if (n != static_cast<int64_t>(target.v.size()))
        throw ShapeError("binary_cross_entropy: prob " + shape_str(prob.shape()) + " vs mask " +
                         std::to_string(target.v.size()) + " pixels");
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const float p = prob.data()[i];
        acc -= target.v[static_cast<size_t>(i)] ? std::log(std::max(p, kProbClamp))
                                                : std::log(std::max(1.0f - p, kProbClamp));
    }
    Tensor loss = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
    if (prob.requires_grad()) loss.set_requires_grad(true);
    record_op({prob}, loss, [prob, loss, target, n]() mutable {
        const float g = loss.grad()[0] / static_cast<float>(n);
        float* gp = prob.grad();
        for (int64_t i = 0; i < n; ++i) {
            const float p = prob.data()[i];
            if (target.v[static_cast<size_t>(i)]) {
                if (p > kProbClamp) gp[i] -= g / p;
            } else {
                if (1.0f - p > kProbClamp) gp[i] += g / (1.0f - p);
            }
        }
    });
    return loss;
}

Tensor dice_loss_soft(const Tensor& prob, const BinaryMask& target) {
    const int64_t n = prob.size();
    if (n != static_cast<int64_t>(target.v.size()))
        throw ShapeError("dice_loss_soft: prob " + shape_str(prob.shape()) + " vs mask " +
                         std::to_string(target.v.size()) + " pixels");
    double inter = 0.0, psum = 0.0;
    int64_t ysum = 0;
    for (int64_t i = 0; i < n; ++i) {
        const float p = prob.data()[i];
        psum += p;
        if (target.v[static_cast<size_t>(i)]) {
            inter += p;
            ++ysum;
        }
    }
    const double denom = psum + static_cast<double>(ysum) + 1.0;
    const double numer = 2.0 * inter + 1.0;
    Tensor loss = Tensor::scalar(static_cast<float>(1.0 - numer / denom));
    if (prob.requires_grad()) loss.set_requires_grad(true);
    record_op({prob}, loss, [prob, loss, target, n, numer, denom]() mutable {
        // d/dp_i [ -(2S+1)/(P+Y+1) ] = -(2 y_i (P+Y+1) - (2S+1)) / (P+Y+1)^2
        const float g = loss.grad()[0];
        const double inv2 = 1.0 / (denom * denom);
        float* gp = prob.grad();
        for (int64_t i = 0; i < n; ++i) {
            const double yi = target.v[static_cast<size_t>(i)] ? 1.0 : 0.0;
            gp[i] += g * static_cast<float>(-(2.0 * yi * denom - numer) * inv2);
        }
    });
    return loss;
}

Tensor joint_loss_binary(const Tensor& mask_prob, const BinaryMask& target) {
    return add(binary_cross_entropy(mask_prob, target), dice_loss_soft(mask_prob, target));
}

Tensor joint_loss_semantic(const Tensor& prob, const LabelMap& labels) {
    if (prob.rank() != 3)
        throw ShapeError("joint_loss_semantic: prob must be [C+1, H, W], got " +
                         shape_str(prob.shape()));
    const int c = prob.dim(0);
    const int h = prob.dim(1), w = prob.dim(2);
    if (labels.h != h || labels.w != w)
        throw ShapeError("joint_loss_semantic: labels " + std::to_string(labels.h) + "x" +
                         std::to_string(labels.w) + " vs prob " + shape_str(prob.shape()));
    Tensor ce = cross_entropy(prob, labels);
    // DICE averaged over the C foreground channels of the one-hot decomposition
    Tensor dice = Tensor::scalar(0.0f);
    const int fg = c - 1;
    for (int cls = 1; cls < c; ++cls) {
        BinaryMask onehot{h, w, std::vector<uint8_t>(labels.v.size(), 0)};
        for (size_t i = 0; i < labels.v.size(); ++i) onehot.v[i] = (labels.v[i] == cls) ? 1 : 0;
        Tensor row = slice_rows(reshape(prob, {c, h * w}), cls, 1);
        dice = add(dice, dice_loss_soft(row, onehot));
    }
    dice = scale(dice, 1.0f / static_cast<float>(fg));
    return add(ce, dice);
}

// ---------------------------------------------------------------- metrics

double dice_loss(const BinaryMask& pred, const BinaryMask& truth) {
    if (pred.h != truth.h || pred.w != truth.w || pred.v.size() != truth.v.size())
        throw ShapeError("dice_loss: mask shapes differ (" + std::to_string(pred.h) + "x" +
                         std::to_string(pred.w) + " vs " + std::to_string(truth.h) + "x" +
                         std::to_string(truth.w) + ")");
    int64_t inter = 0, a = 0, b = 0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        const bool p = pred.v[i] != 0, t = truth.v[i] != 0;
        inter += (p && t);
        a += p;
        b += t;
    }
    return 1.0 - (2.0 * static_cast<double>(inter) + 1.0) / (static_cast<double>(a + b) + 1.0);
}

double dice_score(const BinaryMask& pred, const BinaryMask& truth) {
    return 100.0 * (1.0 - dice_loss(pred, truth));
}

// ---------------------------------------------------------------- reporting

DiceReport aggregate_report(const std::vector<std::pair<int, double>>& per_sample,
                            const std::vector<std::string>& class_names) {
    if (per_sample.empty()) throw UsageError("aggregate_report: no samples");
    std::map<int, std::pair<double, int>> acc;  // class -> (sum, count)
    for (const auto& [cls, score] : per_sample) {
        auto& slot = acc[cls];
        slot.first += score;
        slot.second += 1;
    }
    DiceReport report;
    double total = 0.0;
    for (const auto& [cls, slot] : acc) {
        DiceReport::Entry e;
        e.class_id = cls;
        e.name = (cls >= 1 && cls <= static_cast<int>(class_names.size()))
                     ? class_names[static_cast<size_t>(cls - 1)]
                     : ("class" + std::to_string(cls));
        e.score = slot.first / slot.second;
        e.count = slot.second;
        total += e.score;
        report.per_class.push_back(std::move(e));
    }
    report.average = total / static_cast<double>(report.per_class.size());
    return report;
}

std::string fixed2(double v) {
    // round-half-to-even at the second decimal
    const int old = std::fegetround();
    std::fesetround(FE_TONEAREST);
    const double scaled = std::nearbyint(v * 100.0);
    std::fesetround(old);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", scaled / 100.0);
    return buf;
}

std::string report_to_csv(const DiceReport& report) {
    std::ostringstream os;
    os << "class,name,score,count\n";
    for (const auto& e : report.per_class)
        os << e.class_id << "," << e.name << "," << fixed2(e.score) << "," << e.count << "\n";
    os << ",average," << fixed2(report.average) << ",\n";
    return os.str();
}

std::string report_to_markdown(const DiceReport& report) {
    std::ostringstream os;
    os << "|";
    for (const auto& e : report.per_class) os << " " << e.name << " |";
    os << " average |\n|";
    for (size_t i = 0; i < report.per_class.size() + 1; ++i) os << "---|";
    os << "\n|";
    for (const auto& e : report.per_class) os << " " << fixed2(e.score) << " |";
    os << " " << fixed2(report.average) << " |\n";
    return os.str();
}

}  // namespace minisam
