#pragma once

#include <map>
#include <string>
#include <vector>

#include "minisam/model.hpp"

namespace minisam {

struct LoraConfig {
    int rank = 4;
    float alpha = 4.0f;  // scale = alpha / rank
    uint64_t seed = 0;
};

// Attaches W x + (alpha/rank) B (A x) beside every attention query and value
// projection (encoder self-attention blocks and the decoder cross-attention).
// A is truncated-normal, B zero, so outputs are unchanged at installation.
// Base weights are flagged non-trainable.
void apply_lora(MiniSamModel& model, const LoraConfig& config);

// Inserts a token-wise bottleneck MLP (d -> d/4 -> d, residual add) after
// every encoder block except the last. Up-projections start at zero, so the
// encoder output is unchanged at installation. Base encoder parameters are
// flagged non-trainable.
void insert_prompt_layers(MiniSamModel& model, uint64_t seed = 0);

enum class EncoderMode { FZ, FF, L, P };
enum class DecoderMode { FF, L, C };

EncoderMode encoder_mode_from(const std::string& code);
DecoderMode decoder_mode_from(const std::string& code);
std::string to_code(EncoderMode m);
std::string to_code(DecoderMode m);

// Which parameters train under a given (encoder, decoder) setting.
struct TuningPlan {
    EncoderMode encoder_mode = EncoderMode::FZ;
    DecoderMode decoder_mode = DecoderMode::FF;
    std::map<std::string, bool> trainable;  // every model parameter, by name
    bool collapse_flagged = false;          // (FF, C) is permitted but flagged

    std::string code() const { return to_code(encoder_mode) + "-" + to_code(decoder_mode); }
};

TuningPlan build_tuning_plan(EncoderMode enc, DecoderMode dec, const MiniSamModel& model);

// Sets requires_grad on every parameter according to the plan.
void apply_plan(MiniSamModel& model, const TuningPlan& plan);

// Name-sorted (name, tensor) pairs for exactly the plan's trainable set.
std::vector<std::pair<std::string, Tensor>> trainable_parameters(const MiniSamModel& model,
                                                                 const TuningPlan& plan);

// Component classification used by the plan rules.
enum class ParamKind {
    EncoderBase,
    EncoderLora,
    EncoderPromptLayer,
    PromptEncoder,
    DecoderBase,
    DecoderLora,
    Head,
    Fixed,  // never trainable (e.g. Fourier frequencies)
};
ParamKind classify_param(const std::string& name);

}  // namespace minisam
