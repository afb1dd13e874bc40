#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "minisam/adapters.hpp"
#include "minisam/data.hpp"
#include "minisam/losses.hpp"
#include "minisam/model.hpp"

namespace minisam {

enum class TaskMode { BoxPrompt, Semantic };

TaskMode task_mode_from(const std::string& code);  // "box_prompt" | "semantic"
std::string to_code(TaskMode m);

struct TrainConfig {
    float base_lr = 3e-4f;
    int batch_size = 4;
    int epochs = 30;
    int warmup_epochs = 1;
    uint64_t seed = 0;
    TaskMode task_mode = TaskMode::BoxPrompt;
    std::string preset = "mini";
    std::string encoder_mode = "FZ";
    std::string decoder_mode = "FF";
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    float grad_clip = 0.0f;  // global-norm clip; 0 disables
    // lr multiplier for segmentation-head parameters: the head trains from a
    // fresh initialization while everything else starts pretrained-shaped, so
    // it gets the larger step size customary for new readout layers
    float head_lr_scale = 1.0f;
    bool augment = false;
    int max_steps = 0;  // 0 = run the full epoch budget

    void validate() const;
};

struct OptimizerState {
    std::map<std::string, std::vector<float>> m, v;
    int64_t step = 0;
};

// Linear ramp 0 -> base over the warmup steps, then half-cosine decay to 0 at
// the final step (index total_steps - 1).
float lr_at(int step, int total_steps, int warmup_steps, float base_lr);

// Standard bias-corrected Adam over the given (name, tensor) pairs. Gradients
// must be present for every parameter; buffers are keyed by name.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params, OptimizerState& state,
               float lr, const TrainConfig& config);

struct RunLog {
    std::vector<float> loss;  // one entry per optimizer step
    std::vector<float> lr;    // one entry per optimizer step
    std::vector<double> val_dice;  // one entry per completed epoch (if val given)
    double best_val_dice = -1.0;
    double final_train_loss = 0.0;
    double wall_seconds = 0.0;
    std::map<std::string, std::string> config_echo;

    void write_jsonl(const std::string& path) const;
};

struct TrainResult {
    RunLog log;
    std::string checkpoint_path;  // best-validation checkpoint (or final)
};

// Fine-tunes `model` in place. Saves the best-validation checkpoint under
// checkpoint_path when non-empty (falls back to the final weights when no
// validation set is supplied).
TrainResult train(const TrainConfig& config, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, MiniSamModel& model, const TuningPlan& plan,
                  const std::string& checkpoint_path = "");

DiceReport evaluate(const MiniSamModel& model, const std::vector<Sample>& split,
                    TaskMode task_mode, const std::vector<std::string>& class_names);

// Inclusive pixel box -> exclusive-corner prompt coordinates, clamped to the
// image bounds.
Box prompt_from_box(const Box& tight, int image_size);

}  // namespace minisam
