#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "minisam/losses.hpp"
#include "minisam/tensor.hpp"

namespace minisam {

struct BackbonePreset {
    std::string name;
    int embed_dim = 0;
    int depth = 0;
    int heads = 0;
    int patch = 8;
    int image_size = 128;
};

BackbonePreset preset_mini();
BackbonePreset preset_small();
BackbonePreset preset_base();
BackbonePreset preset_by_name(const std::string& name);

struct Box {
    float x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

struct Point {
    float x = 0, y = 0;
    bool foreground = true;
};

struct PromptSet {
    std::vector<Box> boxes;
    std::vector<Point> points;
    bool empty() const { return boxes.empty() && points.empty(); }
};

// Miniature SAM-style network: ViT image encoder, coordinate prompt encoder,
// cross-attention mask decoder, and an optional semantic segmentation head.
class MiniSamModel {
public:
    MiniSamModel(const BackbonePreset& preset, int num_classes, uint64_t seed,
                 bool with_head = true);

    const BackbonePreset& preset() const { return preset_; }
    int num_classes() const { return num_classes_; }
    bool has_head() const { return with_head_; }
    int grid() const { return preset_.image_size / preset_.patch; }

    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    Tensor param(const std::string& name) const;
    bool has_param(const std::string& name) const { return params_.count(name) > 0; }
    Tensor add_param(const std::string& name, Tensor t);
    int64_t parameter_count() const;

    // Patch-embedding tokens before the positional embedding is added; [N, d].
    Tensor patch_tokens(const Tensor& image) const;
    // image: [3, S, S] -> embedding [d, S/patch, S/patch]
    Tensor encode_image(const Tensor& image) const;
    // -> [n_tokens, d]; two corner tokens per box, one token per point
    Tensor encode_prompts(const PromptSet& prompts) const;
    // -> mask logits [1, S, S]. When the raw prompt geometry is supplied the
    // logits also receive a rasterized prior (box interior / point bump), so
    // predictions start out anchored to the prompted region.
    Tensor decode_mask(const Tensor& image_embedding, const Tensor& prompt_tokens,
                       const PromptSet* prompts = nullptr) const;
    // decode_mask with the prompt prior plus a learnable image-intensity
    // stream (gain * (brightness - shift)); the full promptable-mask path
    // used by training and inference
    Tensor predict_mask(const Tensor& image, const Tensor& image_embedding,
                        const PromptSet& prompts) const;
    // -> class logits [num_classes+1, S, S]
    Tensor semantic_logits(const Tensor& image_embedding) const;
    // semantic_logits plus the per-class image-intensity stream; the full
    // semantic path used by training and inference
    Tensor predict_semantic(const Tensor& image, const Tensor& image_embedding) const;

    // Runs decode_mask for an n x n grid of foreground points, thresholds the
    // logits at 0, drops empty masks, and drops masks whose IoU with a larger
    // kept mask exceeds iou_dedup.
    std::vector<BinaryMask> grid_prompt_inference(const Tensor& image, int grid_n,
                                                  float iou_dedup = 0.9f) const;

    struct LoraEntry {
        Tensor a;  // [rank, d_in]
        Tensor b;  // [d_out, rank]
        float scale = 1.0f;
    };
    const std::map<std::string, LoraEntry>& lora() const { return lora_; }
    void attach_lora(const std::string& target_weight, LoraEntry entry);
    float lora_scale() const;

    bool prompt_layers_installed() const { return prompt_layers_; }
    void mark_prompt_layers_installed() { prompt_layers_ = true; }

    // x @ W (+ LoRA delta when attached) + bias; prefix names the layer,
    // e.g. "encoder.block0.attn.wq"
    Tensor linear(const Tensor& x, const std::string& prefix) const;

private:
    Tensor init_param(const std::string& name, const Shape& shape, class Rng& rng, double sigma);
    Tensor mha(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
               const std::string& prefix) const;
    Tensor positional_token(float x, float y) const;
    // Fourier position codes of the centers of a res x res grid, [res*res, d].
    Tensor grid_positional_tokens(int res) const;

    BackbonePreset preset_;
    int num_classes_ = 0;
    bool with_head_ = true;
    bool prompt_layers_ = false;
    std::map<std::string, Tensor> params_;
    std::map<std::string, LoraEntry> lora_;
    // per-resolution cache of grid codes; safe because the Fourier
    // frequencies are fixed at construction and never trained
    mutable std::map<int, Tensor> grid_pos_cache_;
};

MiniSamModel build_model(const BackbonePreset& preset, int num_classes, uint64_t seed,
                         bool with_head = true);

float mask_iou(const BinaryMask& a, const BinaryMask& b);

// ---- checkpoint format (shared with the training harness) ----
// magic "SSAM1", u32 tensor count, then per tensor: u32 name length, name
// bytes, u32 rank, u32 extents..., raw little-endian float32 data.
void save_checkpoint(const std::string& path, const MiniSamModel& model);
MiniSamModel load_checkpoint(const std::string& path);

}  // namespace minisam
