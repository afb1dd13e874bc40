#include "minisam/train.hpp"

#include "minisam/adapters.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

namespace minisam {

TaskMode task_mode_from(const std::string& code) {
    if (code == "box_prompt") return TaskMode::BoxPrompt;
    if (code == "semantic") return TaskMode::Semantic;
    throw ConfigError("invalid task mode '" + code + "' (valid: box_prompt, semantic)");
}

std::string to_code(TaskMode m) {
    return m == TaskMode::BoxPrompt ? "box_prompt" : "semantic";
}

void TrainConfig::validate() const {
    if (base_lr <= 0.0f) throw ConfigError("base_lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
        throw ConfigError("warmup_epochs must satisfy 0 <= warmup < epochs");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (grad_clip < 0.0f) throw ConfigError("grad_clip must be >= 0");
}

float lr_at(int step, int total_steps, int warmup_steps, float base_lr) {
    if (total_steps < 1 || step < 0 || step >= total_steps)
        throw UsageError("lr_at: need 0 <= step < total_steps");
    if (warmup_steps >= total_steps) throw UsageError("lr_at: warmup_steps < total_steps required");
    if (step < warmup_steps)
        return base_lr * static_cast<float>(step) / static_cast<float>(warmup_steps);
    const int span = total_steps - 1 - warmup_steps;
    if (span <= 0) return base_lr;
    const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    return static_cast<float>(0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t)));
}

void adam_step(std::vector<std::pair<std::string, Tensor>>& params, OptimizerState& state,
               float lr, const TrainConfig& config) {
    state.step += 1;
    const double b1 = config.adam_beta1, b2 = config.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

    if (config.grad_clip > 0.0f) {
        double sq = 0.0;
        for (auto& [name, p] : params) {
            if (!p.has_grad())
                throw ValidationError("adam_step: no gradient for trainable parameter '" + name +
                                      "' (freeze contract violated)");
            for (float g : p.grad_vec()) sq += static_cast<double>(g) * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > config.grad_clip) {
            const float f = static_cast<float>(config.grad_clip / norm);
            for (auto& [name, p] : params)
                for (int64_t i = 0; i < p.size(); ++i) p.grad()[i] *= f;
        }
    }

    for (auto& [name, p] : params) {
        if (!p.has_grad())
            throw ValidationError("adam_step: no gradient for trainable parameter '" + name +
                                  "' (freeze contract violated)");
        const float plr =
            classify_param(name) == ParamKind::Head ? lr * config.head_lr_scale : lr;
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(static_cast<size_t>(p.size()), 0.0f);
            v.assign(static_cast<size_t>(p.size()), 0.0f);
        }
        const float* g = p.grad();
        float* w = p.data();
        for (int64_t i = 0; i < p.size(); ++i) {
            const size_t k = static_cast<size_t>(i);
            m[k] = static_cast<float>(b1 * m[k] + (1.0 - b1) * g[i]);
            v[k] = static_cast<float>(b2 * v[k] + (1.0 - b2) * g[i] * g[i]);
            const double mh = m[k] / bc1;
            const double vh = v[k] / bc2;
            w[i] -= static_cast<float>(plr * mh / (std::sqrt(vh) + config.adam_eps));
        }
    }
}

Box prompt_from_box(const Box& tight, int image_size) {
    const float s = static_cast<float>(image_size);
    return {std::max(0.0f, tight.x_min), std::max(0.0f, tight.y_min),
            std::min(s, tight.x_max + 1.0f), std::min(s, tight.y_max + 1.0f)};
}

namespace {

BinaryMask threshold_mask(const Tensor& logits, int h, int w) {
    BinaryMask m{h, w, std::vector<uint8_t>(static_cast<size_t>(h) * w)};
    for (int64_t k = 0; k < logits.size(); ++k)
        m.v[static_cast<size_t>(k)] = logits.data()[k] > 0.0f ? 1 : 0;
    return m;
}

}  // namespace

DiceReport evaluate(const MiniSamModel& model, const std::vector<Sample>& split,
                    TaskMode task_mode, const std::vector<std::string>& class_names) {
    if (split.empty()) throw ValidationError("evaluate: empty split");
    const int s = model.preset().image_size;
    std::vector<std::pair<int, double>> per_sample;
    for (const Sample& sample : split) {
        const PreppedSample prepped = preprocess(sample, s);
        const Tensor emb = model.encode_image(prepped.image);
        if (task_mode == TaskMode::BoxPrompt) {
            for (const ObjectInstance& obj : prepped.objects) {
                PromptSet prompts;
                prompts.boxes.push_back(prompt_from_box(obj.box, s));
                const Tensor logits = model.predict_mask(prepped.image, emb, prompts);
                per_sample.emplace_back(obj.class_id,
                                        dice_score(threshold_mask(logits, s, s), obj.mask));
            }
        } else {
            const Tensor logits = model.predict_semantic(prepped.image, emb);
            const int c = logits.dim(0);
            std::vector<uint8_t> argmax(static_cast<size_t>(s) * s, 0);
            const int64_t plane = static_cast<int64_t>(s) * s;
            for (int64_t k = 0; k < plane; ++k) {
                int best = 0;
                for (int ch = 1; ch < c; ++ch)
                    if (logits.data()[ch * plane + k] > logits.data()[best * plane + k]) best = ch;
                argmax[static_cast<size_t>(k)] = static_cast<uint8_t>(best);
            }
            for (int cls = 1; cls < c; ++cls) {
                if (prepped.labels.count(static_cast<uint8_t>(cls)) == 0) continue;
                BinaryMask pred{s, s, std::vector<uint8_t>(static_cast<size_t>(plane))};
                BinaryMask truth{s, s, std::vector<uint8_t>(static_cast<size_t>(plane))};
                for (int64_t k = 0; k < plane; ++k) {
                    pred.v[static_cast<size_t>(k)] = argmax[static_cast<size_t>(k)] == cls;
                    truth.v[static_cast<size_t>(k)] = prepped.labels.v[static_cast<size_t>(k)] == cls;
                }
                per_sample.emplace_back(cls, dice_score(pred, truth));
            }
        }
    }
    return aggregate_report(per_sample, class_names);
}

void RunLog::write_jsonl(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write run log " + path);
    for (size_t i = 0; i < loss.size(); ++i) {
        nlohmann::json rec{{"step", i}, {"lr", lr[i]}, {"loss", loss[i]}};
        os << rec.dump() << "\n";
    }
    for (size_t e = 0; e < val_dice.size(); ++e) {
        nlohmann::json rec{{"epoch", e}, {"val_dice", val_dice[e]}};
        os << rec.dump() << "\n";
    }
    nlohmann::json summary{{"summary", true},
                           {"steps", loss.size()},
                           {"best_val_dice", best_val_dice},
                           {"final_train_loss", final_train_loss},
                           {"wall_seconds", wall_seconds},
                           {"config", config_echo}};
    os << summary.dump() << "\n";
}

TrainResult train(const TrainConfig& config, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, MiniSamModel& model, const TuningPlan& plan,
                  const std::string& checkpoint_path) {
    config.validate();
    if (train_set.empty()) throw ValidationError("train: empty training set");
    if (config.task_mode == TaskMode::Semantic) {
        if (!model.has_head())
            throw ConfigError("semantic training requires a model built with a segmentation head");
        if (plan.decoder_mode != DecoderMode::C)
            throw ConfigError("semantic training requires decoder mode C (plan is " + plan.code() +
                              ")");
    } else if (plan.decoder_mode == DecoderMode::C) {
        throw ConfigError("box-prompt training is incompatible with decoder mode C");
    }

    apply_plan(model, plan);
    auto trainable = trainable_parameters(model, plan);
    if (trainable.empty()) throw ConfigError("train: plan " + plan.code() + " trains nothing");

    const int s = model.preset().image_size;
    // usable examples: in box mode an image contributes only if it has objects
    std::vector<size_t> usable;
    for (size_t i = 0; i < train_set.size(); ++i)
        if (config.task_mode == TaskMode::Semantic || !train_set[i].objects.empty())
            usable.push_back(i);
    if (usable.empty()) throw ValidationError("train: no usable training examples for this task");

    const int steps_per_epoch = static_cast<int>(
        (usable.size() + static_cast<size_t>(config.batch_size) - 1) /
        static_cast<size_t>(config.batch_size));
    const int budget = steps_per_epoch * config.epochs;
    const int total_steps = config.max_steps > 0 ? std::min(config.max_steps, budget)
                                                 : budget;
    const int warmup_steps = std::min(config.warmup_epochs * steps_per_epoch, total_steps - 1);

    // preprocessing cache for the no-augmentation path
    std::vector<PreppedSample> cache;
    if (!config.augment) {
        cache.reserve(train_set.size());
        for (const Sample& sample : train_set) cache.push_back(preprocess(sample, s));
    }

    Rng rng(config.seed * 0x2545f4914f6cdd1dull + 1);
    OptimizerState opt;
    TrainResult result;
    RunLog& log = result.log;
    log.config_echo = {{"preset", config.preset},
                       {"encoder_mode", to_code(plan.encoder_mode)},
                       {"decoder_mode", to_code(plan.decoder_mode)},
                       {"task_mode", to_code(config.task_mode)},
                       {"base_lr", std::to_string(config.base_lr)},
                       {"batch_size", std::to_string(config.batch_size)},
                       {"epochs", std::to_string(config.epochs)},
                       {"warmup_epochs", std::to_string(config.warmup_epochs)},
                       {"seed", std::to_string(config.seed)},
                       {"total_steps", std::to_string(total_steps)}};

    const auto t0 = std::chrono::steady_clock::now();
    int step = 0;
    bool saved = false;
    for (int epoch = 0; step < total_steps; ++epoch) {
        std::vector<size_t> order = usable;
        rng.shuffle(order);
        for (size_t pos = 0; pos < order.size() && step < total_steps; pos +=
             static_cast<size_t>(config.batch_size)) {
            const float lr = lr_at(step, total_steps, warmup_steps, config.base_lr);
            Tape tape;
            std::vector<Tensor> item_losses;
            const size_t end = std::min(order.size(), pos + static_cast<size_t>(config.batch_size));
            for (size_t k = pos; k < end; ++k) {
                const size_t idx = order[k];
                PreppedSample prepped =
                    config.augment ? preprocess(augment(train_set[idx], rng), s)
                                   : cache[idx];
                const Tensor emb = model.encode_image(prepped.image);
                if (config.task_mode == TaskMode::BoxPrompt) {
                    const auto& objs = prepped.objects;
                    const ObjectInstance& obj = objs[static_cast<size_t>(epoch) % objs.size()];
                    PromptSet prompts;
                    prompts.boxes.push_back(prompt_from_box(obj.box, s));
                    const Tensor logits = model.predict_mask(prepped.image, emb, prompts);
                    item_losses.push_back(joint_loss_binary(sigmoid(logits), obj.mask));
                } else {
                    const Tensor prob = softmax(model.predict_semantic(prepped.image, emb), 0);
                    item_losses.push_back(joint_loss_semantic(prob, prepped.labels));
                }
            }
            Tensor batch_loss = item_losses[0];
            for (size_t k = 1; k < item_losses.size(); ++k)
                batch_loss = add(batch_loss, item_losses[k]);
            batch_loss = scale(batch_loss, 1.0f / static_cast<float>(item_losses.size()));
            const float loss_value = batch_loss.item();
            if (!std::isfinite(loss_value))
                throw ValidationError("train: non-finite loss at step " + std::to_string(step));
            tape.backward(batch_loss);
            adam_step(trainable, opt, lr, config);
            for (auto& [name, p] : trainable) p.zero_grad();
            log.loss.push_back(loss_value);
            log.lr.push_back(lr);
            ++step;
        }
        if (!val_set.empty()) {
            std::vector<std::string> names;
            for (int c = 1; c <= model.num_classes(); ++c)
                names.push_back("class" + std::to_string(c));
            const DiceReport report = evaluate(model, val_set, config.task_mode, names);
            log.val_dice.push_back(report.average);
            if (report.average > log.best_val_dice) {
                log.best_val_dice = report.average;
                if (!checkpoint_path.empty()) {
                    save_checkpoint(checkpoint_path, model);
                    saved = true;
                }
            }
        }
    }
    if (!checkpoint_path.empty() && !saved) save_checkpoint(checkpoint_path, model);
    result.checkpoint_path = checkpoint_path;
    log.final_train_loss = log.loss.empty() ? 0.0 : log.loss.back();
    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace minisam
