#include "minisam/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "minisam/rng.hpp"

namespace minisam {

BackbonePreset preset_mini() { return {"mini", 64, 4, 4, 8, 128}; }
BackbonePreset preset_small() { return {"small", 128, 6, 8, 8, 128}; }
BackbonePreset preset_base() { return {"base", 192, 8, 8, 8, 128}; }

BackbonePreset preset_by_name(const std::string& name) {
    if (name == "mini") return preset_mini();
    if (name == "small") return preset_small();
    if (name == "base") return preset_base();
    throw ConfigError("unknown preset '" + name + "' (valid: mini, small, base)");
}

namespace {

int int_log2(int v) {
    int k = 0;
    while ((1 << k) < v) ++k;
    return k;
}

// channel schedule for the semantic head upsampling chain
std::vector<int> head_channels(int embed_dim, int n_up) {
    std::vector<int> cs{embed_dim};
    for (int i = 0; i < n_up; ++i) cs.push_back(std::max(embed_dim / 4, cs.back() / 2));
    return cs;
}

// 2D sin-cos position table at moderate amplitude: large enough that frozen
// encoders stay position aware, small enough that patch content is not
// drowned out of the token stream (the decoder adds its own grid codes).
Tensor sincos_pos_embed(int g, int d) {
    Tensor t = Tensor::zeros({g * g, d});
    const int quarter = d / 4;
    for (int i = 0; i < g; ++i) {
        for (int j = 0; j < g; ++j) {
            float* row = t.data() + static_cast<int64_t>(i * g + j) * d;
            for (int k = 0; k < quarter; ++k) {
                const double freq =
                    1.0 / std::pow(100.0, static_cast<double>(k) / std::max(1, quarter));
                constexpr float kAmp = 0.3f;
                row[k] = kAmp * static_cast<float>(std::sin(freq * i));
                row[quarter + k] = kAmp * static_cast<float>(std::cos(freq * i));
                row[2 * quarter + k] = kAmp * static_cast<float>(std::sin(freq * j));
                row[3 * quarter + k] = kAmp * static_cast<float>(std::cos(freq * j));
            }
        }
    }
    return t;
}

// LayerNorm over the channel dimension at every pixel of a [c, h, w] map.
// Keeps the features feeding a logit projection at unit scale regardless of
// how small the upstream conv weights still are, which is what makes short
// tuning budgets workable.
Tensor pixel_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor rows = transpose2d(reshape(x, {c, h * w}));
    return reshape(transpose2d(layer_norm(rows, gamma, beta)), {c, h, w});
}

constexpr float kClsGain = 12.0f;

// Depthwise mean filter. The class readouts pass through this so that the
// class decision is coherent across an object, while the sharp image-intensity
// stream keeps the foreground/background boundary crisp.
Tensor class_smooth(const Tensor& logits) {
    const int c = logits.dim(0);
    constexpr int k = 9;
    Tensor w = Tensor::full({c, 1, k, k}, 1.0f / (k * k));
    return conv2d(logits, w, Tensor(), 1, k / 2, c);
}

}  // namespace

MiniSamModel::MiniSamModel(const BackbonePreset& preset, int num_classes, uint64_t seed,
                           bool with_head)
    : preset_(preset), num_classes_(num_classes), with_head_(with_head) {
    if (preset.embed_dim <= 0 || preset.depth <= 0 || preset.heads <= 0)
        throw ConfigError("invalid preset '" + preset.name + "'");
    if (preset.embed_dim % preset.heads != 0)
        throw ConfigError("preset '" + preset.name + "': embed_dim " +
                          std::to_string(preset.embed_dim) + " not divisible by heads " +
                          std::to_string(preset.heads));
    if (preset.image_size % preset.patch != 0)
        throw ConfigError("preset '" + preset.name + "': image size not divisible by patch");
    if ((preset.patch & (preset.patch - 1)) != 0)
        throw ConfigError("patch size must be a power of two");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");

    Rng rng(seed);
    const int d = preset.embed_dim;
    const int n_tokens = grid() * grid();

    // creation order is fixed; initialization is reproducible per seed
    constexpr double kInit = 0.02;
    init_param("encoder.patch_embed.weight", {3 * preset.patch * preset.patch, d}, rng, kInit);
    init_param("encoder.patch_embed.bias", {d}, rng, 0.0);
    // patch tokens are normalized before the positional table is added;
    // otherwise the freshly initialized projection leaves image content a
    // small perturbation on top of the position signal
    add_param("encoder.ln0.gamma", Tensor::full({d}, 1.0f));
    add_param("encoder.ln0.beta", Tensor::zeros({d}));
    add_param("encoder.pos_embed", sincos_pos_embed(grid(), d));
    for (int b = 0; b < preset.depth; ++b) {
        const std::string p = "encoder.block" + std::to_string(b) + ".";
        add_param(p + "ln1.gamma", Tensor::full({d}, 1.0f));
        add_param(p + "ln1.beta", Tensor::zeros({d}));
        for (const char* proj : {"wq", "wk", "wv", "wo"}) {
            init_param(p + "attn." + proj + ".weight", {d, d}, rng, kInit);
            init_param(p + "attn." + proj + ".bias", {d}, rng, 0.0);
        }
        add_param(p + "ln2.gamma", Tensor::full({d}, 1.0f));
        add_param(p + "ln2.beta", Tensor::zeros({d}));
        init_param(p + "mlp.fc1.weight", {d, 4 * d}, rng, kInit);
        init_param(p + "mlp.fc1.bias", {4 * d}, rng, 0.0);
        init_param(p + "mlp.fc2.weight", {4 * d, d}, rng, kInit);
        init_param(p + "mlp.fc2.bias", {d}, rng, 0.0);
    }

    // prompt encoder: fixed random Fourier frequencies + learned type embeddings
    {
        Tensor fourier = Tensor::zeros({2, d / 2});
        for (int64_t i = 0; i < fourier.size(); ++i)
            fourier.data()[i] = static_cast<float>(rng.normal());
        add_param("prompt_encoder.fourier", fourier);
        init_param("prompt_encoder.type_embed", {4, d}, rng, kInit);
    }

    // mask decoder: one two-way pre-norm cross-attention block + MLP, then
    // upsampling. The q/k projections of both attention directions start at
    // identity so prompt/image Fourier features line up from the first step;
    // with n-step training budgets there is no time to learn the alignment.
    for (const char* ln : {"ln_q", "ln_kv", "ln2", "ln_i"}) {
        add_param(std::string("decoder.") + ln + ".gamma", Tensor::full({d}, 1.0f));
        add_param(std::string("decoder.") + ln + ".beta", Tensor::zeros({d}));
    }
    for (const char* blockname : {"cross", "icross"}) {
        for (const char* proj : {"wq", "wk", "wv", "wo"}) {
            const std::string base = std::string("decoder.") + blockname + "." + proj;
            const bool ident = proj[1] == 'q' || proj[1] == 'k';
            if (ident) {
                Tensor eye = Tensor::zeros({d, d});
                for (int i = 0; i < d; ++i) eye.data()[static_cast<int64_t>(i) * d + i] = 1.0f;
                add_param(base + ".weight", eye);
            } else {
                init_param(base + ".weight", {d, d}, rng, kInit);
            }
            init_param(base + ".bias", {d}, rng, 0.0);
        }
    }
    init_param("decoder.mlp.fc1.weight", {d, 2 * d}, rng, kInit);
    init_param("decoder.mlp.fc1.bias", {2 * d}, rng, 0.0);
    init_param("decoder.mlp.fc2.weight", {2 * d, d}, rng, kInit);
    init_param("decoder.mlp.fc2.bias", {d}, rng, 0.0);
    init_param("decoder.mask_proj.weight", {d, d / 4}, rng, kInit);
    init_param("decoder.mask_proj.bias", {d / 4}, rng, 0.0);
    init_param("decoder.up1.weight", {d, d / 2, 2, 2}, rng, kInit);
    init_param("decoder.up1.bias", {d / 2}, rng, 0.0);
    init_param("decoder.up2.weight", {d / 2, d / 4, 2, 2}, rng, kInit);
    init_param("decoder.up2.bias", {d / 4}, rng, 0.0);
    add_param("decoder.ln_u.gamma", Tensor::full({d / 4}, 1.0f));
    add_param("decoder.ln_u.beta", Tensor::zeros({d / 4}));
    // scalar logit offset, started at the background prior so the early
    // background-heavy loss has nothing to push down and the box-corner
    // affinity bumps sit right at the decision boundary
    add_param("decoder.mask_bias", Tensor::full({1}, -2.0f));
    // image-intensity stream: sonar-style targets are bright against the
    // background, so a brightness threshold is a strong starting feature
    add_param("decoder.img_gain", Tensor::full({1}, 3.0f));
    add_param("decoder.img_shift", Tensor::full({1}, 0.25f));

    if (with_head_) {
        const int n_up = int_log2(preset.patch);
        const auto cs = head_channels(d, n_up);
        for (int i = 0; i < n_up; ++i) {
            const std::string p = "head.up" + std::to_string(i + 1) + ".";
            init_param(p + "weight", {cs[static_cast<size_t>(i)], cs[static_cast<size_t>(i + 1)], 2, 2},
                       rng, kInit);
            init_param(p + "bias", {cs[static_cast<size_t>(i + 1)]}, rng, 0.0);
        }
        const int cl = cs.back();
        init_param("head.gconv.weight", {cl, cl / 4, 3, 3}, rng, kInit);
        init_param("head.gconv.bias", {cl}, rng, 0.0);
        add_param("head.ln.gamma", Tensor::full({cl}, 1.0f));
        add_param("head.ln.beta", Tensor::zeros({cl}));
        // classifier read out at a fixed gain: with Adam each weight travels
        // about lr per step no matter the gradient scale, so the gain is what
        // converts a 500-step budget into usable logit swings
        init_param("head.cls.weight", {num_classes_ + 1, cl, 1, 1}, rng, kInit);
        // the background channel starts ahead (class prior) and the intensity
        // stream starts pointed away from it, mirroring the mask decoder
        Tensor cls_bias = Tensor::zeros({num_classes_ + 1});
        cls_bias.data()[0] = 2.0f;
        add_param("head.cls.bias", cls_bias);
        Tensor head_gain = Tensor::full({num_classes_ + 1}, 5.0f);
        head_gain.data()[0] = -10.0f;
        add_param("head.img_gain", head_gain);
        add_param("head.img_shift", Tensor::full({1}, 0.27f));
        // auxiliary readouts: a mid-resolution one on the upsampling chain and
        // a full-resolution texture one on the raw image; parallel readouts
        // add up the per-step movement the optimizer can give the logits
        const int cm = cs[static_cast<size_t>(n_up - 1)];
        add_param("head.ln2.gamma", Tensor::full({cm}, 1.0f));
        add_param("head.ln2.beta", Tensor::zeros({cm}));
        init_param("head.cls2.weight", {num_classes_ + 1, cm, 1, 1}, rng, kInit);
        init_param("head.skip.weight", {cl, 3, 3, 3}, rng, kInit);
        init_param("head.skip.bias", {cl}, rng, 0.0);
        add_param("head.ln3.gamma", Tensor::full({cl}, 1.0f));
        add_param("head.ln3.beta", Tensor::zeros({cl}));
        init_param("head.cls3.weight", {num_classes_ + 1, cl, 1, 1}, rng, kInit);
    }
}

Tensor MiniSamModel::init_param(const std::string& name, const Shape& shape, Rng& rng,
                                double sigma) {
    Tensor t = Tensor::zeros(shape);
    if (sigma > 0.0) {
        for (int64_t i = 0; i < t.size(); ++i)
            t.data()[i] = static_cast<float>(rng.trunc_normal(sigma));
    }
    return add_param(name, t);
}

Tensor MiniSamModel::add_param(const std::string& name, Tensor t) {
    if (params_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    params_.emplace(name, t);
    return t;
}

Tensor MiniSamModel::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
}

int64_t MiniSamModel::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

void MiniSamModel::attach_lora(const std::string& target_weight, LoraEntry entry) {
    if (!params_.count(target_weight))
        throw ConfigError("LoRA target '" + target_weight + "' does not exist");
    lora_[target_weight] = std::move(entry);
}

float MiniSamModel::lora_scale() const {
    return lora_.empty() ? 0.0f : lora_.begin()->second.scale;
}

Tensor MiniSamModel::linear(const Tensor& x, const std::string& prefix) const {
    Tensor y = matmul(x, param(prefix + ".weight"));
    auto it = lora_.find(prefix + ".weight");
    if (it != lora_.end()) {
        const LoraEntry& e = it->second;
        Tensor delta = matmul(matmul(x, transpose2d(e.a)), transpose2d(e.b));
        y = add(y, scale(delta, e.scale));
    }
    if (params_.count(prefix + ".bias")) y = add_rowwise(y, param(prefix + ".bias"));
    return y;
}

Tensor MiniSamModel::mha(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                         const std::string& prefix) const {
    const int d = preset_.embed_dim;
    const int heads = preset_.heads;
    const int dh = d / heads;
    Tensor q = linear(q_in, prefix + ".wq");
    Tensor k = linear(k_in, prefix + ".wk");
    Tensor v = linear(v_in, prefix + ".wv");
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor attn = softmax(scale(matmul(qh, transpose2d(kh)), inv_sqrt), 1);
        outs.push_back(matmul(attn, vh));
    }
    return linear(concat_cols(outs), prefix + ".wo");
}

Tensor MiniSamModel::patch_tokens(const Tensor& image) const {
    const int s = preset_.image_size, p = preset_.patch, g = grid();
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != s || image.dim(2) != s)
        throw ShapeError("encode_image: expected image [3x" + std::to_string(s) + "x" +
                         std::to_string(s) + "], got " + shape_str(image.shape()));
    // unfold into [n_tokens, 3*p*p]; inputs carry no gradient
    Tensor patches = Tensor::zeros({g * g, 3 * p * p});
    for (int gi = 0; gi < g; ++gi) {
        for (int gj = 0; gj < g; ++gj) {
            float* row = patches.data() + static_cast<int64_t>(gi * g + gj) * 3 * p * p;
            for (int c = 0; c < 3; ++c) {
                const float* ic = image.data() + static_cast<int64_t>(c) * s * s;
                for (int pi = 0; pi < p; ++pi)
                    for (int pj = 0; pj < p; ++pj)
                        row[(c * p + pi) * p + pj] = ic[(gi * p + pi) * s + gj * p + pj];
            }
        }
    }
    Tensor tok = matmul(patches, param("encoder.patch_embed.weight"));
    return add_rowwise(tok, param("encoder.patch_embed.bias"));
}

Tensor MiniSamModel::encode_image(const Tensor& image) const {
    const int d = preset_.embed_dim, g = grid();
    Tensor x = layer_norm(patch_tokens(image), param("encoder.ln0.gamma"),
                          param("encoder.ln0.beta"));
    x = add(x, param("encoder.pos_embed"));
    for (int b = 0; b < preset_.depth; ++b) {
        const std::string p = "encoder.block" + std::to_string(b) + ".";
        Tensor normed = layer_norm(x, param(p + "ln1.gamma"), param(p + "ln1.beta"));
        x = add(x, mha(normed, normed, normed, p + "attn"));
        Tensor n2 = layer_norm(x, param(p + "ln2.gamma"), param(p + "ln2.beta"));
        Tensor h = linear(gelu(linear(n2, p + "mlp.fc1")), p + "mlp.fc2");
        x = add(x, h);
        if (prompt_layers_ && b + 1 < preset_.depth) {
            const std::string q = "encoder.prompt" + std::to_string(b) + ".";
            Tensor low = gelu(matmul(x, param(q + "down.weight")));
            x = add(x, matmul(low, param(q + "up.weight")));
        }
    }
    return reshape(transpose2d(x), {d, g, g});
}

Tensor MiniSamModel::positional_token(float x, float y) const {
    const int d = preset_.embed_dim;
    const Tensor f = param("prompt_encoder.fourier");  // [2, d/2]
    const float s = static_cast<float>(preset_.image_size);
    const float nx = x / s, ny = y / s;
    Tensor tok = Tensor::zeros({1, d});
    for (int j = 0; j < d / 2; ++j) {
        const float z = 2.0f * static_cast<float>(std::numbers::pi) *
                        (nx * f.data()[j] + ny * f.data()[d / 2 + j]);
        tok.data()[j] = std::sin(z);
        tok.data()[d / 2 + j] = std::cos(z);
    }
    return tok;
}

Tensor MiniSamModel::grid_positional_tokens(int res) const {
    auto cached = grid_pos_cache_.find(res);
    if (cached != grid_pos_cache_.end()) return cached->second;
    const int d = preset_.embed_dim;
    const Tensor f = param("prompt_encoder.fourier");  // [2, d/2]
    Tensor out = Tensor::zeros({res * res, d});
    for (int i = 0; i < res; ++i) {
        for (int j = 0; j < res; ++j) {
            const float ny = (static_cast<float>(i) + 0.5f) / static_cast<float>(res);
            const float nx = (static_cast<float>(j) + 0.5f) / static_cast<float>(res);
            float* row = out.data() + static_cast<int64_t>(i * res + j) * d;
            for (int k = 0; k < d / 2; ++k) {
                const float z = 2.0f * static_cast<float>(std::numbers::pi) *
                                (nx * f.data()[k] + ny * f.data()[d / 2 + k]);
                row[k] = std::sin(z);
                row[d / 2 + k] = std::cos(z);
            }
        }
    }
    grid_pos_cache_.emplace(res, out);
    return out;
}

Tensor MiniSamModel::encode_prompts(const PromptSet& prompts) const {
    if (prompts.empty()) throw UsageError("encode_prompts: prompt set is empty");
    const float s = static_cast<float>(preset_.image_size);
    Tensor types = param("prompt_encoder.type_embed");  // rows: box-min, box-max, point-fg, point-bg
    std::vector<Tensor> tokens;
    for (const Box& b : prompts.boxes) {
        if (!(b.x_min < b.x_max && b.y_min < b.y_max))
            throw ValidationError("encode_prompts: degenerate box");
        if (b.x_min < 0 || b.y_min < 0 || b.x_max > s || b.y_max > s)
            throw ValidationError("encode_prompts: box out of image bounds");
        tokens.push_back(add(positional_token(b.x_min, b.y_min), slice_rows(types, 0, 1)));
        tokens.push_back(add(positional_token(b.x_max, b.y_max), slice_rows(types, 1, 1)));
    }
    for (const Point& p : prompts.points) {
        if (p.x < 0 || p.y < 0 || p.x > s || p.y > s)
            throw ValidationError("encode_prompts: point out of image bounds");
        tokens.push_back(add(positional_token(p.x, p.y), slice_rows(types, p.foreground ? 2 : 3, 1)));
    }
    return concat_rows(tokens);
}

Tensor MiniSamModel::decode_mask(const Tensor& image_embedding, const Tensor& prompt_tokens,
                                 const PromptSet* prompts) const {
    const int d = preset_.embed_dim, g = grid(), s = preset_.image_size;
    if (image_embedding.rank() != 3 || image_embedding.dim(0) != d ||
        image_embedding.dim(1) != g || image_embedding.dim(2) != g)
        throw ShapeError("decode_mask: embedding " + shape_str(image_embedding.shape()) +
                         " does not match preset (" + std::to_string(d) + "x" + std::to_string(g) +
                         "x" + std::to_string(g) + ")");
    if (prompt_tokens.rank() != 2 || prompt_tokens.dim(1) != d)
        throw ShapeError("decode_mask: prompt tokens " + shape_str(prompt_tokens.shape()));

    // Keys and queries carry the same Fourier position code as the prompt
    // tokens (values stay positional-free), so both attention directions can
    // localize by inner product from the very first step.
    Tensor img_tokens = transpose2d(reshape(image_embedding, {d, g * g}));  // [g*g, d]
    Tensor grid_pos = grid_positional_tokens(g);
    Tensor img_norm =
        layer_norm(img_tokens, param("decoder.ln_kv.gamma"), param("decoder.ln_kv.beta"));
    Tensor img_pos = add(img_norm, grid_pos);

    // prompts attend to the image...
    Tensor pq = layer_norm(prompt_tokens, param("decoder.ln_q.gamma"), param("decoder.ln_q.beta"));
    Tensor p1 = add(prompt_tokens, mha(pq, img_pos, img_norm, "decoder.cross"));
    Tensor n2 = layer_norm(p1, param("decoder.ln2.gamma"), param("decoder.ln2.beta"));
    Tensor p2 = add(p1, linear(gelu(linear(n2, "decoder.mlp.fc1")), "decoder.mlp.fc2"));

    // ...and the image attends back to the prompts
    Tensor iq = add(layer_norm(img_tokens, param("decoder.ln_i.gamma"),
                               param("decoder.ln_i.beta")),
                    grid_pos);
    Tensor i1 = add(img_tokens, mha(iq, p2, p2, "decoder.icross"));

    Tensor query = linear(mean_rows(p2), "decoder.mask_proj");  // [1, d/4]

    Tensor u = gelu(transpose_conv2d(reshape(transpose2d(i1), {d, g, g}),
                                     param("decoder.up1.weight"),
                                     param("decoder.up1.bias"), 2));
    u = gelu(transpose_conv2d(u, param("decoder.up2.weight"), param("decoder.up2.bias"), 2));
    const int ug = 4 * g;
    u = pixel_layer_norm(u, param("decoder.ln_u.gamma"), param("decoder.ln_u.beta"));
    Tensor logits = matmul(query, reshape(u, {d / 4, ug * ug}));  // [1, ug*ug]

    // Direct positional-affinity term: the mean prompt token scored against
    // every pixel's Fourier code. The prompt tokens are built from the same
    // code family, so from the very first step the logits carry bumps at the
    // prompted locations and the dice term has a foreground to grow from.
    Tensor affinity = matmul(mean_rows(p2), transpose2d(grid_positional_tokens(ug)));
    logits = add(logits, scale(affinity, 4.0f / static_cast<float>(d)));
    logits = add_rowwise(reshape(logits, {ug * ug, 1}), param("decoder.mask_bias"));
    Tensor map = reshape(logits, {1, ug, ug});
    if (ug != s) map = bilinear_resize(map, s, s);
    if (prompts != nullptr && !prompts->empty()) {
        // rasterized signed prompt prior at full resolution: box interiors
        // start at the decision boundary (prior cancels the background
        // offset) while everything outside the prompted region is pushed
        // further down than the image-intensity stream can reach; points
        // contribute a Gaussian bump
        Tensor prior = Tensor::full({1, s, s}, -1.0f);
        for (const Box& b : prompts->boxes) {
            const int y0 = std::max(0, static_cast<int>(std::floor(b.y_min)));
            const int y1 = std::min(s, static_cast<int>(std::ceil(b.y_max)));
            const int x0 = std::max(0, static_cast<int>(std::floor(b.x_min)));
            const int x1 = std::min(s, static_cast<int>(std::ceil(b.x_max)));
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) prior.data()[y * s + x] = 1.0f;
        }
        const float sig = static_cast<float>(s) / 16.0f;
        for (const Point& p : prompts->points) {
            for (int y = 0; y < s; ++y) {
                for (int x = 0; x < s; ++x) {
                    const float dx = static_cast<float>(x) + 0.5f - p.x;
                    const float dy = static_cast<float>(y) + 0.5f - p.y;
                    const float bump = std::exp(-(dx * dx + dy * dy) / (2.0f * sig * sig));
                    float& cell = prior.data()[y * s + x];
                    cell = std::max(cell, p.foreground ? 2.0f * bump - 1.0f : -1.0f);
                }
            }
        }
        map = add(map, scale(prior, 2.0f));
    }
    return map;
}

Tensor MiniSamModel::predict_mask(const Tensor& image, const Tensor& image_embedding,
                                  const PromptSet& prompts) const {
    const int s = preset_.image_size;
    Tensor map = decode_mask(image_embedding, encode_prompts(prompts), &prompts);
    Tensor gray = Tensor::zeros({s * s, 1});
    for (int64_t i = 0; i < static_cast<int64_t>(s) * s; ++i)
        gray.data()[i] =
            (image.data()[i] + image.data()[s * s + i] + image.data()[2 * s * s + i]) / 3.0f;
    Tensor shifted = add_rowwise(gray, scale(param("decoder.img_shift"), -1.0f));
    Tensor term = matmul(shifted, reshape(param("decoder.img_gain"), {1, 1}));
    return add(map, reshape(term, {1, s, s}));
}

Tensor MiniSamModel::semantic_logits(const Tensor& image_embedding) const {
    if (!with_head_)
        throw ConfigError("semantic_logits: model was built without a segmentation head");
    const int d = preset_.embed_dim, g = grid();
    if (image_embedding.rank() != 3 || image_embedding.dim(0) != d ||
        image_embedding.dim(1) != g || image_embedding.dim(2) != g)
        throw ShapeError("semantic_logits: embedding " + shape_str(image_embedding.shape()));
    const int n_up = int_log2(preset_.patch);
    const int s = preset_.image_size;
    Tensor x = image_embedding;
    Tensor mid;
    for (int i = 0; i < n_up; ++i) {
        const std::string p = "head.up" + std::to_string(i + 1) + ".";
        x = gelu(transpose_conv2d(x, param(p + "weight"), param(p + "bias"), 2));
        if (i + 2 == n_up) mid = x;
    }
    x = gelu(conv2d(x, param("head.gconv.weight"), param("head.gconv.bias"), 1, 1, 4));
    x = pixel_layer_norm(x, param("head.ln.gamma"), param("head.ln.beta"));
    Tensor logits = scale(conv2d(x, param("head.cls.weight"), Tensor(), 1, 0, 1), kClsGain);
    mid = pixel_layer_norm(mid, param("head.ln2.gamma"), param("head.ln2.beta"));
    Tensor logits2 = scale(conv2d(mid, param("head.cls2.weight"), Tensor(), 1, 0, 1), kClsGain);
    logits = class_smooth(add(logits, bilinear_resize(logits2, s, s)));
    const int c = num_classes_ + 1, hw = s * s;
    Tensor rows = add_rowwise(transpose2d(reshape(logits, {c, hw})), param("head.cls.bias"));
    return reshape(transpose2d(rows), {c, s, s});
}

Tensor MiniSamModel::predict_semantic(const Tensor& image, const Tensor& image_embedding) const {
    const int s = preset_.image_size, c = num_classes_ + 1;
    Tensor logits = semantic_logits(image_embedding);
    Tensor tex = gelu(conv2d(image, param("head.skip.weight"), param("head.skip.bias"), 1, 1, 1));
    tex = pixel_layer_norm(tex, param("head.ln3.gamma"), param("head.ln3.beta"));
    logits = add(logits, class_smooth(scale(
        conv2d(tex, param("head.cls3.weight"), Tensor(), 1, 0, 1), kClsGain)));
    Tensor gray = Tensor::zeros({s * s, 1});
    for (int64_t i = 0; i < static_cast<int64_t>(s) * s; ++i)
        gray.data()[i] =
            (image.data()[i] + image.data()[s * s + i] + image.data()[2 * s * s + i]) / 3.0f;
    Tensor shifted = add_rowwise(gray, scale(param("head.img_shift"), -1.0f));
    Tensor term = matmul(shifted, reshape(param("head.img_gain"), {1, c}));
    return add(logits, reshape(transpose2d(term), {c, s, s}));
}

float mask_iou(const BinaryMask& a, const BinaryMask& b) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        const bool pa = a.v[i] != 0, pb = b.v[i] != 0;
        inter += (pa && pb);
        uni += (pa || pb);
    }
    return uni == 0 ? 0.0f : static_cast<float>(inter) / static_cast<float>(uni);
}

std::vector<BinaryMask> MiniSamModel::grid_prompt_inference(const Tensor& image, int grid_n,
                                                            float iou_dedup) const {
    if (grid_n < 1) throw UsageError("grid_prompt_inference: grid_n must be >= 1");
    const int s = preset_.image_size;
    Tensor emb = encode_image(image);
    std::vector<BinaryMask> masks;
    for (int i = 0; i < grid_n; ++i) {
        for (int j = 0; j < grid_n; ++j) {
            PromptSet ps;
            ps.points.push_back({(static_cast<float>(j) + 0.5f) * s / grid_n,
                                 (static_cast<float>(i) + 0.5f) * s / grid_n, true});
            Tensor logits = decode_mask(emb, encode_prompts(ps), &ps);
            BinaryMask m{s, s, std::vector<uint8_t>(static_cast<size_t>(s) * s)};
            for (int64_t k = 0; k < logits.size(); ++k) m.v[static_cast<size_t>(k)] =
                logits.data()[k] > 0.0f ? 1 : 0;
            masks.push_back(std::move(m));
        }
    }
    // keep larger masks, drop near-duplicates
    std::vector<size_t> order(masks.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return masks[a].area() > masks[b].area();
    });
    std::vector<BinaryMask> kept;
    for (size_t idx : order) {
        if (masks[idx].area() == 0) continue;  // a prompt that selected nothing
        bool dup = false;
        for (const auto& k : kept) {
            if (mask_iou(masks[idx], k) > iou_dedup) {
                dup = true;
                break;
            }
        }
        if (!dup) kept.push_back(masks[idx]);
    }
    return kept;
}

MiniSamModel build_model(const BackbonePreset& preset, int num_classes, uint64_t seed,
                         bool with_head) {
    return MiniSamModel(preset, num_classes, seed, with_head);
}

// ---------------------------------------------------------------- checkpoint

namespace {

void write_u32(std::ofstream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::ifstream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const MiniSamModel& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write("SSAM1", 5);
    // architecture facts not recoverable from shapes travel as a meta tensor
    std::vector<float> meta{static_cast<float>(model.preset().heads),
                            static_cast<float>(model.num_classes()), model.lora_scale(),
                            model.prompt_layers_installed() ? 1.0f : 0.0f};
    const uint32_t count = static_cast<uint32_t>(model.params().size()) + 1;
    write_u32(os, count);
    auto write_tensor = [&os](const std::string& name, const Shape& shape, const float* data,
                              int64_t n) {
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<uint32_t>(shape.size()));
        for (int e : shape) write_u32(os, static_cast<uint32_t>(e));
        os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
    };
    write_tensor("__meta__", {static_cast<int>(meta.size())}, meta.data(),
                 static_cast<int64_t>(meta.size()));
    for (const auto& [name, t] : model.params()) write_tensor(name, t.shape(), t.data(), t.size());
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

MiniSamModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::strncmp(magic, "SSAM1", 5) != 0)
        throw IoError("bad checkpoint magic in " + path);
    const uint32_t count = read_u32(is);
    std::map<std::string, Tensor> tensors;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t rank = read_u32(is);
        Shape shape(rank);
        for (uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int>(read_u32(is));
        Tensor t = Tensor::zeros(shape);
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 4));
        if (!is) throw IoError("truncated checkpoint: " + path);
        tensors.emplace(std::move(name), std::move(t));
    }

    auto meta_it = tensors.find("__meta__");
    if (meta_it == tensors.end() || meta_it->second.size() < 4)
        throw IoError("checkpoint missing meta record: " + path);
    const float* meta = meta_it->second.data();
    const int heads = static_cast<int>(meta[0]);
    const int num_classes = static_cast<int>(meta[1]);
    const float lora_scale = meta[2];
    const bool prompt_installed = meta[3] != 0.0f;

    // reconstruct the architecture from tensor names and shapes
    auto need = [&](const std::string& n) -> const Tensor& {
        auto it = tensors.find(n);
        if (it == tensors.end()) throw IoError("checkpoint missing tensor '" + n + "'");
        return it->second;
    };
    const Tensor& pos = need("encoder.pos_embed");
    const int d = pos.dim(1);
    const int n_tokens = pos.dim(0);
    const int patch_sq = need("encoder.patch_embed.weight").dim(0) / 3;
    const int patch = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patch_sq))));
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_tokens))));
    int depth = 0;
    while (tensors.count("encoder.block" + std::to_string(depth) + ".ln1.gamma")) ++depth;
    const bool with_head = tensors.count("head.cls.weight") > 0;

    BackbonePreset preset{"custom", d, depth, heads, patch, g * patch};
    for (const auto& known : {preset_mini(), preset_small(), preset_base()}) {
        if (known.embed_dim == d && known.depth == depth && known.heads == heads &&
            known.patch == patch && known.image_size == preset.image_size)
            preset.name = known.name;
    }

    MiniSamModel model(preset, num_classes, /*seed=*/0, with_head);
    if (prompt_installed) {
        for (int b = 0; b + 1 < depth; ++b) {
            const std::string q = "encoder.prompt" + std::to_string(b) + ".";
            model.add_param(q + "down.weight", Tensor::zeros({d, d / 4}));
            model.add_param(q + "up.weight", Tensor::zeros({d / 4, d}));
        }
        model.mark_prompt_layers_installed();
    }
    for (const auto& [name, t] : tensors) {
        if (name.size() > 7 && name.substr(name.size() - 7) == ".lora_a") {
            const std::string base = name.substr(0, name.size() - 7);
            const int rank = t.dim(0);
            const Tensor& b = need(base + ".lora_b");
            Tensor a_param = model.add_param(name, Tensor::zeros(t.shape()));
            Tensor b_param = model.add_param(base + ".lora_b", Tensor::zeros(b.shape()));
            model.attach_lora(base + ".weight", {a_param, b_param, lora_scale});
            (void)rank;
        }
    }

    for (auto& [name, t] : tensors) {
        if (name == "__meta__") continue;
        if (!model.has_param(name))
            throw IoError("checkpoint tensor '" + name + "' has no place in the model");
        Tensor dst = model.param(name);
        if (dst.shape() != t.shape())
            throw IoError("checkpoint tensor '" + name + "' shape " + shape_str(t.shape()) +
                          " != model " + shape_str(dst.shape()));
        std::copy(t.data(), t.data() + t.size(), dst.data());
    }
    return model;
}

}  // namespace minisam
