#include "minisam/data.hpp"

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numbers>

namespace fs = std::filesystem;

namespace minisam {

// ---------------------------------------------------------------- geometry

std::vector<BinaryMask> connected_components(const BinaryMask& mask) {
    const int h = mask.h, w = mask.w;
    std::vector<int> label(static_cast<size_t>(h) * w, -1);
    std::vector<BinaryMask> comps;
    std::deque<std::pair<int, int>> queue;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            if (!mask.v[static_cast<size_t>(i) * w + j] || label[static_cast<size_t>(i) * w + j] >= 0)
                continue;
            const int id = static_cast<int>(comps.size());
            comps.push_back({h, w, std::vector<uint8_t>(static_cast<size_t>(h) * w, 0)});
            queue.clear();
            queue.emplace_back(i, j);
            label[static_cast<size_t>(i) * w + j] = id;
            while (!queue.empty()) {
                auto [ci, cj] = queue.front();
                queue.pop_front();
                comps[static_cast<size_t>(id)].v[static_cast<size_t>(ci) * w + cj] = 1;
                for (int di = -1; di <= 1; ++di) {
                    for (int dj = -1; dj <= 1; ++dj) {
                        const int ni = ci + di, nj = cj + dj;
                        if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
                        const size_t idx = static_cast<size_t>(ni) * w + nj;
                        if (mask.v[idx] && label[idx] < 0) {
                            label[idx] = id;
                            queue.emplace_back(ni, nj);
                        }
                    }
                }
            }
        }
    }
    return comps;
}

Box tight_bbox(const BinaryMask& mask) {
    int x0 = mask.w, y0 = mask.h, x1 = -1, y1 = -1;
    for (int i = 0; i < mask.h; ++i)
        for (int j = 0; j < mask.w; ++j)
            if (mask.v[static_cast<size_t>(i) * mask.w + j]) {
                x0 = std::min(x0, j);
                x1 = std::max(x1, j);
                y0 = std::min(y0, i);
                y1 = std::max(y1, i);
            }
    if (x1 < 0) throw ValidationError("tight_bbox: empty mask");
    return {static_cast<float>(x0), static_cast<float>(y0), static_cast<float>(x1),
            static_cast<float>(y1)};
}

std::vector<Box> boxes_from_mask(const BinaryMask& mask) {
    std::vector<Box> boxes;
    for (const auto& comp : connected_components(mask)) {
        if (comp.area() < 4) continue;
        boxes.push_back(tight_bbox(comp));
    }
    return boxes;
}

GrayImage resize_bilinear(const GrayImage& img, int oh, int ow) {
    GrayImage out{oh, ow, std::vector<float>(static_cast<size_t>(oh) * ow)};
    for (int i = 0; i < oh; ++i) {
        float sy = (static_cast<float>(i) + 0.5f) * img.h / oh - 0.5f;
        sy = std::clamp(sy, 0.0f, static_cast<float>(img.h - 1));
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, img.h - 1);
        const float wy = sy - y0;
        for (int j = 0; j < ow; ++j) {
            float sx = (static_cast<float>(j) + 0.5f) * img.w / ow - 0.5f;
            sx = std::clamp(sx, 0.0f, static_cast<float>(img.w - 1));
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, img.w - 1);
            const float wx = sx - x0;
            const float v = (1 - wy) * ((1 - wx) * img.v[static_cast<size_t>(y0) * img.w + x0] +
                                        wx * img.v[static_cast<size_t>(y0) * img.w + x1]) +
                            wy * ((1 - wx) * img.v[static_cast<size_t>(y1) * img.w + x0] +
                                  wx * img.v[static_cast<size_t>(y1) * img.w + x1]);
            out.v[static_cast<size_t>(i) * ow + j] = v;
        }
    }
    return out;
}

namespace {
template <typename M>
M nearest_impl(const M& m, int oh, int ow) {
    M out;
    out.h = oh;
    out.w = ow;
    out.v.assign(static_cast<size_t>(oh) * ow, 0);
    for (int i = 0; i < oh; ++i) {
        int sy = static_cast<int>((static_cast<float>(i) + 0.5f) * m.h / oh);
        sy = std::clamp(sy, 0, m.h - 1);
        for (int j = 0; j < ow; ++j) {
            int sx = static_cast<int>((static_cast<float>(j) + 0.5f) * m.w / ow);
            sx = std::clamp(sx, 0, m.w - 1);
            out.v[static_cast<size_t>(i) * ow + j] = m.v[static_cast<size_t>(sy) * m.w + sx];
        }
    }
    return out;
}
}  // namespace

LabelMap resize_nearest(const LabelMap& labels, int oh, int ow) {
    return nearest_impl(labels, oh, ow);
}

BinaryMask resize_nearest(const BinaryMask& mask, int oh, int ow) {
    return nearest_impl(mask, oh, ow);
}

// ---------------------------------------------------------------- synthesis

const std::vector<std::string>& synth_class_catalogue() {
    static const std::vector<std::string> names{"ellipse", "ring",     "block", "chain",
                                                "bar",     "cross",    "triangle", "arc",
                                                "blob",    "tee",      "wall"};
    return names;
}

std::vector<std::string> synth_class_names(const SynthSpec& spec) {
    const auto& cat = synth_class_catalogue();
    std::vector<std::string> names;
    for (int c = 0; c < spec.num_classes; ++c)
        names.push_back(cat[static_cast<size_t>(c) % cat.size()]);
    return names;
}

namespace {

// rasterize one shape family into a full-size mask around (cx, cy)
BinaryMask draw_shape(int family, int cx, int cy, int r, int s, Rng& rng) {
    BinaryMask m{s, s, std::vector<uint8_t>(static_cast<size_t>(s) * s, 0)};
    auto plot = [&](int x, int y) {
        if (x >= 0 && x < s && y >= 0 && y < s) m.v[static_cast<size_t>(y) * s + x] = 1;
    };
    auto fill = [&](int x0, int y0, int x1, int y1, auto pred) {
        for (int y = std::max(0, y0); y <= std::min(s - 1, y1); ++y)
            for (int x = std::max(0, x0); x <= std::min(s - 1, x1); ++x)
                if (pred(x, y)) m.v[static_cast<size_t>(y) * s + x] = 1;
    };
    const float fr = static_cast<float>(r);
    switch (family) {
        case 0: {  // ellipse
            const float a = fr, b = fr * static_cast<float>(rng.uniform(0.5, 1.0));
            fill(cx - r, cy - r, cx + r, cy + r, [&](int x, int y) {
                const float dx = (x - cx) / a, dy = (y - cy) / b;
                return dx * dx + dy * dy <= 1.0f;
            });
            break;
        }
        case 1: {  // ring
            const float inner = fr * static_cast<float>(rng.uniform(0.4, 0.6));
            fill(cx - r, cy - r, cx + r, cy + r, [&](int x, int y) {
                const float d2 = static_cast<float>((x - cx) * (x - cx) + (y - cy) * (y - cy));
                return d2 <= fr * fr && d2 >= inner * inner;
            });
            break;
        }
        case 2: {  // block
            const int b = std::max(2, static_cast<int>(fr * rng.uniform(0.4, 1.0)));
            fill(cx - r, cy - b, cx + r, cy + b,
                 [&](int, int) { return true; });
            break;
        }
        case 3: {  // chain of overlapping discs
            const int links = rng.uniform_int(4, 6);
            const double theta = rng.uniform(0.0, std::numbers::pi);
            const float lr = std::max(2.0f, fr / 3.0f);
            const float step = 1.6f * lr;
            for (int k = 0; k < links; ++k) {
                const float ox = cx + static_cast<float>(std::cos(theta)) * step *
                                          (k - (links - 1) * 0.5f);
                const float oy = cy + static_cast<float>(std::sin(theta)) * step *
                                          (k - (links - 1) * 0.5f);
                const int ix = static_cast<int>(ox), iy = static_cast<int>(oy);
                const int rr = static_cast<int>(lr) + 1;
                fill(ix - rr, iy - rr, ix + rr, iy + rr, [&](int x, int y) {
                    const float dx = x - ox, dy = y - oy;
                    return dx * dx + dy * dy <= lr * lr;
                });
            }
            break;
        }
        case 4: {  // rotated bar
            const double theta = rng.uniform(0.0, std::numbers::pi);
            const float ux = static_cast<float>(std::cos(theta)), uy = static_cast<float>(std::sin(theta));
            const float wdt = std::max(2.0f, fr / 3.0f);
            fill(cx - r, cy - r, cx + r, cy + r, [&](int x, int y) {
                const float dx = x - cx, dy = y - cy;
                const float along = dx * ux + dy * uy;
                const float across = -dx * uy + dy * ux;
                return std::abs(along) <= fr && std::abs(across) <= wdt;
            });
            break;
        }
        case 5: {  // cross
            const int wdt = std::max(2, r / 3);
            fill(cx - r, cy - r, cx + r, cy + r, [&](int x, int y) {
                const int dx = std::abs(x - cx), dy = std::abs(y - cy);
                return (dx <= r && dy <= wdt) || (dy <= r && dx <= wdt);
            });
            break;
        }
        case 6: {  // triangle pointing up
            fill(cx - r, cy - r, cx + r, cy + r, [&](int x, int y) {
                const int dy = y - cy;
                return dy >= -r && dy <= r && std::abs(x - cx) <= (dy + r) / 2;
            });
            break;
        }
        case 7: {  // arc (upper half annulus)
            const float inner = fr * 0.55f;
            fill(cx - r, cy - r, cx + r, cy, [&](int x, int y) {
                const float d2 = static_cast<float>((x - cx) * (x - cx) + (y - cy) * (y - cy));
                return y <= cy && d2 <= fr * fr && d2 >= inner * inner;
            });
            break;
        }
        case 8: {  // blob: union of three discs
            for (int k = 0; k < 3; ++k) {
                const float ox = cx + static_cast<float>(rng.uniform(-0.5, 0.5)) * fr;
                const float oy = cy + static_cast<float>(rng.uniform(-0.5, 0.5)) * fr;
                const float br = fr * static_cast<float>(rng.uniform(0.4, 0.7));
                const int rr = static_cast<int>(br) + 1;
                fill(static_cast<int>(ox) - rr, static_cast<int>(oy) - rr,
                     static_cast<int>(ox) + rr, static_cast<int>(oy) + rr, [&](int x, int y) {
                         const float dx = x - ox, dy = y - oy;
                         return dx * dx + dy * dy <= br * br;
                     });
            }
            break;
        }
        case 9: {  // tee
            const int wdt = std::max(2, r / 3);
            fill(cx - r, cy - r, cx + r, cy + r, [&](int x, int y) {
                const int dx = std::abs(x - cx);
                const int dy = y - cy;
                return (dy >= -r && dy <= -r + 2 * wdt && dx <= r) ||
                       (dx <= wdt && dy >= -r && dy <= r);
            });
            break;
        }
        default: {  // wall: long horizontal bar
            const int len = 3 * r, wdt = std::max(3, r / 2);
            fill(cx - len, cy - wdt, cx + len, cy + wdt, [&](int, int) { return true; });
            break;
        }
    }
    (void)plot;
    return m;
}

}  // namespace

std::vector<Sample> synth_generate(const SynthSpec& spec, uint64_t seed, int n) {
    if (n < 1) throw UsageError("synth_generate: n must be >= 1");
    if (spec.num_classes < 1 || spec.num_classes > 11)
        throw ConfigError("synth_generate: class count must be in [1, 11]");
    const int s = spec.image_size;
    std::vector<Sample> samples;
    samples.reserve(static_cast<size_t>(n));
    for (int idx = 0; idx < n; ++idx) {
        Rng rng(seed * 0x9e3779b97f4a7c15ull + static_cast<uint64_t>(idx) + 1);
        Sample sample;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "synth_%05d", idx);
        sample.id = buf;
        sample.image = {s, s, std::vector<float>(static_cast<size_t>(s) * s)};
        sample.labels = {s, s, std::vector<uint8_t>(static_cast<size_t>(s) * s, 0)};
        // dark background with a mild vertical gradient
        const float grad = static_cast<float>(rng.uniform(0.0, 0.05));
        for (int i = 0; i < s; ++i)
            for (int j = 0; j < s; ++j)
                sample.image.v[static_cast<size_t>(i) * s + j] =
                    spec.background + grad * static_cast<float>(i) / s;

        BinaryMask occupied{s, s, std::vector<uint8_t>(static_cast<size_t>(s) * s, 0)};
        const int n_obj = rng.uniform_int(spec.min_instances, spec.max_instances);
        for (int o = 0; o < n_obj; ++o) {
            const int cls = rng.uniform_int(1, spec.num_classes);
            const int family = (cls - 1) % 11;
            bool placed = false;
            for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
                const int r = rng.uniform_int(spec.min_radius, spec.max_radius);
                const int margin = family == 10 ? 3 * r + 2 : r + 2;
                if (2 * margin >= s) continue;
                const int cx = rng.uniform_int(margin, s - 1 - margin);
                const int cy = rng.uniform_int(margin, s - 1 - margin);
                BinaryMask m = draw_shape(family, cx, cy, r, s, rng);
                if (m.area() < 4) continue;
                bool overlap = false;
                for (size_t k = 0; k < m.v.size() && !overlap; ++k)
                    overlap = m.v[k] && occupied.v[k];
                if (overlap) continue;
                const float level = static_cast<float>(
                    rng.uniform(spec.intensity_lo, spec.intensity_hi));
                for (size_t k = 0; k < m.v.size(); ++k) {
                    if (!m.v[k]) continue;
                    occupied.v[k] = 1;
                    sample.image.v[k] = level;
                    sample.labels.v[k] = static_cast<uint8_t>(cls);
                }
                // trailing acoustic shadow below the object (background only)
                if (rng.bernoulli(spec.shadow_prob)) {
                    const int dy = 2 * r;
                    for (int y = 0; y < s; ++y) {
                        for (int x = 0; x < s; ++x) {
                            const int sy = y - dy;
                            if (sy < 0) continue;
                            const size_t src = static_cast<size_t>(sy) * s + x;
                            const size_t dst = static_cast<size_t>(y) * s + x;
                            if (m.v[src] && !occupied.v[dst])
                                sample.image.v[dst] *= 0.35f;
                        }
                    }
                }
                ObjectInstance obj;
                obj.class_id = cls;
                obj.mask = std::move(m);
                obj.box = tight_bbox(obj.mask);
                sample.objects.push_back(std::move(obj));
                placed = true;
            }
        }
        // multiplicative speckle
        for (auto& px : sample.image.v) {
            const float f = 1.0f + spec.speckle * static_cast<float>(rng.normal());
            px = std::clamp(px * std::max(0.0f, f), 0.0f, 1.0f);
        }
        samples.push_back(std::move(sample));
    }
    return samples;
}

// ---------------------------------------------------------------- disk i/o

void write_dataset(const std::string& root, const std::vector<Sample>& samples,
                   const std::vector<std::string>& class_names) {
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");
    {
        std::ofstream os(fs::path(root) / "classes.txt");
        if (!os) throw IoError("cannot write " + root + "/classes.txt");
        for (const auto& name : class_names) os << name << "\n";
    }
    for (const auto& sample : samples) {
        cv::Mat img(sample.image.h, sample.image.w, CV_8UC1);
        for (int i = 0; i < sample.image.h; ++i)
            for (int j = 0; j < sample.image.w; ++j)
                img.at<uint8_t>(i, j) = static_cast<uint8_t>(std::lround(
                    std::clamp(sample.image.v[static_cast<size_t>(i) * sample.image.w + j], 0.0f,
                               1.0f) *
                    255.0f));
        cv::Mat mask(sample.labels.h, sample.labels.w, CV_8UC1);
        for (int i = 0; i < sample.labels.h; ++i)
            for (int j = 0; j < sample.labels.w; ++j)
                mask.at<uint8_t>(i, j) =
                    sample.labels.v[static_cast<size_t>(i) * sample.labels.w + j];
        if (!cv::imwrite((fs::path(root) / "images" / (sample.id + ".png")).string(), img) ||
            !cv::imwrite((fs::path(root) / "masks" / (sample.id + ".png")).string(), mask))
            throw IoError("failed to write PNGs for sample " + sample.id);
    }
}

std::vector<std::string> load_class_names(const std::string& root) {
    std::ifstream is(fs::path(root) / "classes.txt");
    if (!is) throw IoError("missing " + root + "/classes.txt");
    std::vector<std::string> names;
    std::string line;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) names.push_back(line);
    }
    return names;
}

std::vector<Sample> load_dataset(const std::string& root) {
    const fs::path images = fs::path(root) / "images";
    const fs::path masks = fs::path(root) / "masks";
    if (!fs::is_directory(images)) throw IoError("missing directory " + images.string());
    const auto class_names = load_class_names(root);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(images))
        if (entry.path().extension() == ".png") files.push_back(entry.path());
    std::sort(files.begin(), files.end());

    std::vector<Sample> samples;
    for (const auto& file : files) {
        const fs::path mask_file = masks / file.filename();
        if (!fs::exists(mask_file))
            throw IoError("missing mask for image " + file.filename().string());
        cv::Mat img = cv::imread(file.string(), cv::IMREAD_GRAYSCALE);
        cv::Mat mask = cv::imread(mask_file.string(), cv::IMREAD_GRAYSCALE);
        if (img.empty()) throw IoError("cannot decode " + file.string());
        if (mask.empty()) throw IoError("cannot decode " + mask_file.string());
        if (img.rows != mask.rows || img.cols != mask.cols)
            throw ValidationError("image/mask size mismatch for " + file.filename().string());

        Sample sample;
        sample.id = file.stem().string();
        sample.image = {img.rows, img.cols,
                        std::vector<float>(static_cast<size_t>(img.rows) * img.cols)};
        sample.labels = {mask.rows, mask.cols,
                         std::vector<uint8_t>(static_cast<size_t>(mask.rows) * mask.cols)};
        for (int i = 0; i < img.rows; ++i) {
            for (int j = 0; j < img.cols; ++j) {
                sample.image.v[static_cast<size_t>(i) * img.cols + j] =
                    static_cast<float>(img.at<uint8_t>(i, j)) / 255.0f;
                const uint8_t cls = mask.at<uint8_t>(i, j);
                if (cls > class_names.size())
                    throw ValidationError("mask " + mask_file.filename().string() +
                                          " uses class index " + std::to_string(cls) +
                                          " but classes.txt lists only " +
                                          std::to_string(class_names.size()));
                sample.labels.v[static_cast<size_t>(i) * mask.cols + j] = cls;
            }
        }
        // instances: connected components within each class region
        for (int cls = 1; cls <= static_cast<int>(class_names.size()); ++cls) {
            BinaryMask region{sample.labels.h, sample.labels.w,
                              std::vector<uint8_t>(sample.labels.v.size(), 0)};
            bool any = false;
            for (size_t k = 0; k < sample.labels.v.size(); ++k) {
                region.v[k] = sample.labels.v[k] == cls;
                any = any || region.v[k];
            }
            if (!any) continue;
            for (auto& comp : connected_components(region)) {
                ObjectInstance obj;
                obj.class_id = cls;
                obj.box = tight_bbox(comp);
                obj.mask = std::move(comp);
                sample.objects.push_back(std::move(obj));
            }
        }
        samples.push_back(std::move(sample));
    }
    return samples;
}

// ---------------------------------------------------------------- split

DatasetSplit split_dataset(std::vector<std::string> ids, uint64_t seed) {
    if (ids.size() < 5) throw ValidationError("split_dataset: need at least 5 ids");
    Rng rng(seed);
    rng.shuffle(ids);
    const double n = static_cast<double>(ids.size());
    const double exact[3] = {0.6 * n, 0.2 * n, 0.2 * n};
    size_t sizes[3];
    double rem[3];
    size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        sizes[k] = static_cast<size_t>(std::floor(exact[k]));
        rem[k] = exact[k] - std::floor(exact[k]);
        assigned += sizes[k];
    }
    size_t leftover = ids.size() - assigned;
    while (leftover-- > 0) {
        int best = 0;
        for (int k = 1; k < 3; ++k)
            if (rem[k] > rem[best]) best = k;
        sizes[best] += 1;
        rem[best] = -1.0;
    }
    DatasetSplit split;
    split.seed = seed;
    size_t pos = 0;
    split.train.assign(ids.begin(), ids.begin() + static_cast<long>(sizes[0]));
    pos += sizes[0];
    split.val.assign(ids.begin() + static_cast<long>(pos),
                     ids.begin() + static_cast<long>(pos + sizes[1]));
    pos += sizes[1];
    split.test.assign(ids.begin() + static_cast<long>(pos), ids.end());
    return split;
}

// ---------------------------------------------------------------- transforms

PreppedSample preprocess(const Sample& sample, int target_size) {
    PreppedSample out;
    GrayImage resized = resize_bilinear(sample.image, target_size, target_size);
    out.image = Tensor::zeros({3, target_size, target_size});
    const int64_t plane = static_cast<int64_t>(target_size) * target_size;
    for (int64_t k = 0; k < plane; ++k) {
        const float v = resized.v[static_cast<size_t>(k)];
        out.image.data()[k] = v;
        out.image.data()[plane + k] = v;
        out.image.data()[2 * plane + k] = v;
    }
    out.labels = resize_nearest(sample.labels, target_size, target_size);
    const float fx = static_cast<float>(target_size) / static_cast<float>(sample.image.w);
    const float fy = static_cast<float>(target_size) / static_cast<float>(sample.image.h);
    for (const auto& obj : sample.objects) {
        ObjectInstance scaled;
        scaled.class_id = obj.class_id;
        scaled.mask = resize_nearest(obj.mask, target_size, target_size);
        scaled.box = {obj.box.x_min * fx, obj.box.y_min * fy, obj.box.x_max * fx,
                      obj.box.y_max * fy};
        out.objects.push_back(std::move(scaled));
    }
    return out;
}

Sample augment(const Sample& sample, Rng& rng) {
    Sample out = sample;
    if (rng.bernoulli(0.5)) {
        const int w = out.image.w;
        for (int i = 0; i < out.image.h; ++i)
            std::reverse(out.image.v.begin() + static_cast<long>(i) * w,
                         out.image.v.begin() + static_cast<long>(i + 1) * w);
        for (int i = 0; i < out.labels.h; ++i)
            std::reverse(out.labels.v.begin() + static_cast<long>(i) * w,
                         out.labels.v.begin() + static_cast<long>(i + 1) * w);
        for (auto& obj : out.objects) {
            for (int i = 0; i < obj.mask.h; ++i)
                std::reverse(obj.mask.v.begin() + static_cast<long>(i) * w,
                             obj.mask.v.begin() + static_cast<long>(i + 1) * w);
            const float x0 = obj.box.x_min, x1 = obj.box.x_max;
            obj.box.x_min = static_cast<float>(w - 1) - x1;
            obj.box.x_max = static_cast<float>(w - 1) - x0;
        }
    }
    const float u = static_cast<float>(rng.uniform(0.8, 1.2));
    const float b = static_cast<float>(rng.uniform(-0.1, 0.1));
    for (auto& px : out.image.v) px = std::clamp(px * u + b, 0.0f, 1.0f);
    return out;
}

}  // namespace minisam
