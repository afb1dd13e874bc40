#include "minisam/adapters.hpp"

#include <algorithm>

#include "minisam/rng.hpp"

namespace minisam {

namespace {

std::vector<std::string> lora_targets(const MiniSamModel& model) {
    std::vector<std::string> targets;
    for (int b = 0; b < model.preset().depth; ++b) {
        const std::string p = "encoder.block" + std::to_string(b) + ".attn.";
        targets.push_back(p + "wq");
        targets.push_back(p + "wv");
    }
    targets.push_back("decoder.cross.wq");
    targets.push_back("decoder.cross.wv");
    return targets;
}

}  // namespace

void apply_lora(MiniSamModel& model, const LoraConfig& config) {
    if (!model.lora().empty()) throw ConfigError("apply_lora: LoRA already installed");
    Rng init_rng(config.seed + 0x9e37u);
    for (const std::string& target : lora_targets(model)) {
        Tensor w = model.param(target + ".weight");
        const int d_in = w.dim(0), d_out = w.dim(1);
        if (config.rank < 1 || config.rank >= std::min(d_in, d_out))
            throw ConfigError("apply_lora: rank " + std::to_string(config.rank) +
                              " invalid for target '" + target + "' (" + std::to_string(d_in) +
                              "x" + std::to_string(d_out) + ")");
        Tensor a = Tensor::zeros({config.rank, d_in});
        for (int64_t i = 0; i < a.size(); ++i)
            a.data()[i] = static_cast<float>(init_rng.trunc_normal(0.02));
        Tensor b = Tensor::zeros({d_out, config.rank});
        model.add_param(target + ".lora_a", a);
        model.add_param(target + ".lora_b", b);
        model.attach_lora(target + ".weight", {a, b, config.alpha / static_cast<float>(config.rank)});
        w.set_requires_grad(false);
    }
}

void insert_prompt_layers(MiniSamModel& model, uint64_t seed) {
    if (model.prompt_layers_installed())
        throw ConfigError("insert_prompt_layers: already installed");
    const int depth = model.preset().depth;
    if (depth < 2) throw ConfigError("insert_prompt_layers: encoder needs at least 2 blocks");
    const int d = model.preset().embed_dim;
    Rng rng(seed + 0x715u);
    for (int b = 0; b + 1 < depth; ++b) {
        const std::string q = "encoder.prompt" + std::to_string(b) + ".";
        Tensor down = Tensor::zeros({d, d / 4});
        for (int64_t i = 0; i < down.size(); ++i)
            down.data()[i] = static_cast<float>(rng.trunc_normal(0.02));
        model.add_param(q + "down.weight", down);
        model.add_param(q + "up.weight", Tensor::zeros({d / 4, d}));
    }
    for (auto& [name, t] : model.params())
        if (classify_param(name) == ParamKind::EncoderBase) t.set_requires_grad(false);
    model.mark_prompt_layers_installed();
}

EncoderMode encoder_mode_from(const std::string& code) {
    if (code == "FZ") return EncoderMode::FZ;
    if (code == "FF") return EncoderMode::FF;
    if (code == "L") return EncoderMode::L;
    if (code == "P") return EncoderMode::P;
    throw ConfigError("invalid encoder mode '" + code + "' (valid: FZ, FF, L, P)");
}

DecoderMode decoder_mode_from(const std::string& code) {
    if (code == "FF") return DecoderMode::FF;
    if (code == "L") return DecoderMode::L;
    if (code == "C") return DecoderMode::C;
    throw ConfigError("invalid decoder mode '" + code + "' (valid: FF, L, C)");
}

std::string to_code(EncoderMode m) {
    switch (m) {
        case EncoderMode::FZ: return "FZ";
        case EncoderMode::FF: return "FF";
        case EncoderMode::L: return "L";
        case EncoderMode::P: return "P";
    }
    return "?";
}

std::string to_code(DecoderMode m) {
    switch (m) {
        case DecoderMode::FF: return "FF";
        case DecoderMode::L: return "L";
        case DecoderMode::C: return "C";
    }
    return "?";
}

ParamKind classify_param(const std::string& name) {
    auto has_suffix = [&](const char* s) {
        const size_t n = std::string(s).size();
        return name.size() > n && name.compare(name.size() - n, n, s) == 0;
    };
    if (name == "prompt_encoder.fourier" || name.rfind("meta.", 0) == 0) return ParamKind::Fixed;
    if (name.rfind("encoder.prompt", 0) == 0) return ParamKind::EncoderPromptLayer;
    if (name.rfind("encoder.", 0) == 0)
        return (has_suffix(".lora_a") || has_suffix(".lora_b")) ? ParamKind::EncoderLora
                                                                : ParamKind::EncoderBase;
    if (name.rfind("prompt_encoder.", 0) == 0) return ParamKind::PromptEncoder;
    if (name.rfind("decoder.", 0) == 0)
        return (has_suffix(".lora_a") || has_suffix(".lora_b")) ? ParamKind::DecoderLora
                                                                : ParamKind::DecoderBase;
    if (name.rfind("head.", 0) == 0) return ParamKind::Head;
    throw ConfigError("cannot classify parameter '" + name + "'");
}

TuningPlan build_tuning_plan(EncoderMode enc, DecoderMode dec, const MiniSamModel& model) {
    bool has_encoder_lora = false, has_decoder_lora = false;
    for (const auto& [name, t] : model.params()) {
        const ParamKind k = classify_param(name);
        has_encoder_lora = has_encoder_lora || k == ParamKind::EncoderLora;
        has_decoder_lora = has_decoder_lora || k == ParamKind::DecoderLora;
    }
    if (enc == EncoderMode::L && !has_encoder_lora)
        throw ConfigError("encoder mode L requires apply_lora first");
    if (enc == EncoderMode::P && !model.prompt_layers_installed())
        throw ConfigError("encoder mode P requires insert_prompt_layers first");
    if (dec == DecoderMode::L && !has_decoder_lora)
        throw ConfigError("decoder mode L requires apply_lora first");
    if (dec == DecoderMode::C && !model.has_head())
        throw ConfigError("decoder mode C requires a model built with a segmentation head");

    TuningPlan plan;
    plan.encoder_mode = enc;
    plan.decoder_mode = dec;
    plan.collapse_flagged = (enc == EncoderMode::FF && dec == DecoderMode::C);
    for (const auto& [name, t] : model.params()) {
        bool on = false;
        switch (classify_param(name)) {
            case ParamKind::EncoderBase: on = (enc == EncoderMode::FF); break;
            case ParamKind::EncoderLora: on = (enc == EncoderMode::L); break;
            case ParamKind::EncoderPromptLayer: on = (enc == EncoderMode::P); break;
            case ParamKind::PromptEncoder: on = (dec == DecoderMode::FF); break;
            case ParamKind::DecoderBase: on = (dec == DecoderMode::FF); break;
            case ParamKind::DecoderLora: on = (dec == DecoderMode::L); break;
            case ParamKind::Head: on = (dec == DecoderMode::C); break;
            case ParamKind::Fixed: on = false; break;
        }
        plan.trainable[name] = on;
    }
    return plan;
}

void apply_plan(MiniSamModel& model, const TuningPlan& plan) {
    for (auto& [name, t] : model.params()) {
        auto it = plan.trainable.find(name);
        if (it == plan.trainable.end())
            throw ConfigError("plan does not cover parameter '" + name +
                              "' (built for a different model?)");
        t.set_requires_grad(it->second);
    }
}

std::vector<std::pair<std::string, Tensor>> trainable_parameters(const MiniSamModel& model,
                                                                 const TuningPlan& plan) {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : model.params()) {
        auto it = plan.trainable.find(name);
        if (it == plan.trainable.end())
            throw ConfigError("plan does not cover parameter '" + name + "'");
        if (it->second) out.emplace_back(name, t);
    }
    return out;  // std::map iteration is already name-sorted
}

}  // namespace minisam
