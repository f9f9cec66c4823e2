#include "mambatrans/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "mambatrans/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mambatrans {

namespace {

constexpr double kFusedContrast = 0.8;
constexpr double kFusedShift = 0.05;
constexpr double kSaltRate = 0.01;

float quantize8(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<float>(std::lround(c * 255.0) / 255.0);
}

uint8_t to_byte(float v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

struct ShapeSpec {
    int cls = 0;
    int x0 = 0, y0 = 0, w = 0, h = 0;  // bounding region used for overlap tests
};

// Rasterize one shape into `hit` (1 inside); returns false if nothing set.
void rasterize(const ShapeSpec& s, int W, std::vector<uint8_t>& hit) {
    const double cx = s.x0 + s.w / 2.0, cy = s.y0 + s.h / 2.0;
    for (int y = s.y0; y < s.y0 + s.h; ++y)
        for (int x = s.x0; x < s.x0 + s.w; ++x) {
            bool inside = false;
            switch (s.cls) {
                case 0:  // rectangle
                    inside = true;
                    break;
                case 1: {  // disk
                    const double r = std::min(s.w, s.h) / 2.0;
                    const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                    inside = dx * dx + dy * dy <= r * r;
                    break;
                }
                case 2: {  // cross of two bars
                    const int bar_w = std::max(2, s.w / 3);
                    const int bar_h = std::max(2, s.h / 3);
                    const bool in_v = x >= s.x0 + (s.w - bar_w) / 2 && x < s.x0 + (s.w + bar_w) / 2;
                    const bool in_h = y >= s.y0 + (s.h - bar_h) / 2 && y < s.y0 + (s.h + bar_h) / 2;
                    inside = in_v || in_h;
                    break;
                }
            }
            if (inside) hit[static_cast<size_t>(y) * W + x] = 1;
        }
}

std::vector<uint8_t> dilate3(const std::vector<uint8_t>& m, int H, int W) {
    std::vector<uint8_t> out(m.size(), 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            uint8_t v = 0;
            for (int dy = -1; dy <= 1 && !v; ++dy)
                for (int dx = -1; dx <= 1 && !v; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < H && xx >= 0 && xx < W && m[static_cast<size_t>(yy) * W + xx]) v = 1;
                }
            out[static_cast<size_t>(y) * W + x] = v;
        }
    return out;
}

std::vector<uint8_t> erode3(const std::vector<uint8_t>& m, int H, int W) {
    std::vector<uint8_t> out(m.size(), 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            uint8_t v = 1;
            for (int dy = -1; dy <= 1 && v; ++dy)
                for (int dx = -1; dx <= 1 && v; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W || !m[static_cast<size_t>(yy) * W + xx]) v = 0;
                }
            out[static_cast<size_t>(y) * W + x] = v;
        }
    return out;
}

std::vector<double> box_blur3(const std::vector<double>& img, int H, int W) {
    std::vector<double> out(img.size(), 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0;
            int n = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < H && xx >= 0 && xx < W) {
                        acc += img[static_cast<size_t>(yy) * W + xx];
                        ++n;
                    }
                }
            out[static_cast<size_t>(y) * W + x] = acc / n;
        }
    return out;
}

Tensor<float> mask_from_bits(const std::vector<uint8_t>& bits, int H, int W) {
    Tensor<float> t = Tensor<float>::zeros({H, W});
    for (size_t i = 0; i < bits.size(); ++i) t.data()[i] = bits[i] ? 1.0f : 0.0f;
    return t;
}

ImageU8 tensor_to_rgb(const Tensor<float>& t) {
    ImageU8 img;
    img.height = t.dim(0);
    img.width = t.dim(1);
    img.channels = 3;
    img.pixels.resize(t.data().size());
    for (size_t i = 0; i < t.data().size(); ++i) img.pixels[i] = to_byte(t.data()[i]);
    return img;
}

ImageU8 tensor_to_gray(const Tensor<float>& t, float scale) {
    ImageU8 img;
    img.height = t.dim(0);
    img.width = t.dim(1);
    img.channels = 1;
    img.pixels.resize(t.data().size());
    for (size_t i = 0; i < t.data().size(); ++i)
        img.pixels[i] = static_cast<uint8_t>(std::lround(t.data()[i] * scale));
    return img;
}

Tensor<float> rgb_to_tensor(const ImageU8& img) {
    Tensor<float> t = Tensor<float>::zeros({img.height, img.width, 3});
    for (size_t i = 0; i < img.pixels.size(); ++i) t.data()[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    return t;
}

Tensor<float> gray_to_tensor(const ImageU8& img, float scale) {
    Tensor<float> t = Tensor<float>::zeros({img.height, img.width});
    for (size_t i = 0; i < img.pixels.size(); ++i) t.data()[i] = static_cast<float>(img.pixels[i]) / scale;
    return t;
}

std::string sample_id(int index) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "%04d", index);
    return buf;
}

void require_file(const fs::path& p) {
    if (!fs::exists(p)) throw DataError("missing dataset file: " + p.string());
}

}  // namespace

std::vector<std::string> text_vocabulary() {
    std::vector<std::string> vocab;
    vocab.reserve(kTextVocabSize);
    vocab.push_back("scene");
    for (int i = 0; i <= 8; ++i) vocab.push_back("count_" + std::to_string(i));
    vocab.push_back("class_rectangle");
    vocab.push_back("class_disk");
    vocab.push_back("class_cross");
    while (vocab.size() < kTextVocabSize) vocab.push_back("reserved_" + std::to_string(vocab.size()));
    return vocab;
}

std::vector<int> encode_scene_text(int num_targets, const std::vector<int>& labels) {
    std::vector<int> ids = {0, 1 + std::clamp(num_targets, 0, 8)};
    std::set<int> classes(labels.begin(), labels.end());
    for (int c : classes) ids.push_back(10 + c);
    return ids;
}

Sample generate_scene(uint64_t seed, int H, int W, int num_targets) {
    if (H < 32 || W < 32) throw ContractError("generate_scene: H and W must be >= 32");
    if (num_targets < 0 || num_targets > 8) throw ContractError("generate_scene: num_targets must be in [0, 8]");
    Rng rng(seed);

    // visible background: tinted base + two sinusoidal components + grain
    std::vector<double> vis(static_cast<size_t>(H) * W * 3);
    double base[3], amp[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.30, 0.55);
        amp[c] = rng.uniform(0.05, 0.12);
    }
    const double fx = rng.uniform(0.5, 2.0) / W, fy = rng.uniform(0.5, 2.0) / H;
    const double phase = rng.uniform(0.0, 6.28318);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double wave = std::sin(6.28318 * (fx * x + fy * y) + phase);
            for (int c = 0; c < 3; ++c)
                vis[(static_cast<size_t>(y) * W + x) * 3 + c] =
                    base[c] + amp[c] * wave + rng.uniform(-0.005, 0.005);
        }

    // infrared background: dark, nearly textureless vertical ramp
    std::vector<double> ir(static_cast<size_t>(H) * W);
    const double ramp = rng.uniform(0.02, 0.06);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            ir[static_cast<size_t>(y) * W + x] =
                0.06 + ramp * (static_cast<double>(y) / H) + rng.uniform(-0.003, 0.003);

    // place non-overlapping targets; give up on a target after 100 attempts
    const double colors[kNumShapeClasses][3] = {{0.78, 0.24, 0.20}, {0.20, 0.70, 0.32}, {0.24, 0.36, 0.82}};
    std::vector<ShapeSpec> placed;
    for (int t = 0; t < num_targets; ++t) {
        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            ShapeSpec s;
            s.cls = static_cast<int>(rng.uniform_int(kNumShapeClasses));
            s.w = 10 + static_cast<int>(rng.uniform_int(9));
            s.h = 10 + static_cast<int>(rng.uniform_int(9));
            s.x0 = 2 + static_cast<int>(rng.uniform_int(std::max(1, W - s.w - 4)));
            s.y0 = 2 + static_cast<int>(rng.uniform_int(std::max(1, H - s.h - 4)));
            bool overlap = false;
            for (const auto& p : placed)
                if (s.x0 < p.x0 + p.w + 2 && p.x0 < s.x0 + s.w + 2 && s.y0 < p.y0 + p.h + 2 &&
                    p.y0 < s.y0 + s.h + 2)
                    overlap = true;
            if (!overlap) {
                placed.push_back(s);
                ok = true;
            }
        }
    }

    Sample sample;
    sample.width = W;
    sample.height = H;
    sample.seg_labels = Tensor<float>::zeros({H, W});
    std::vector<uint8_t> true_mask(static_cast<size_t>(H) * W, 0);
    sample.det_targets.width = W;
    sample.det_targets.height = H;

    for (const auto& s : placed) {
        std::vector<uint8_t> hit(static_cast<size_t>(H) * W, 0);
        rasterize(s, W, hit);
        int min_x = W, min_y = H, max_x = -1, max_y = -1;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (hit[static_cast<size_t>(y) * W + x]) {
                    min_x = std::min(min_x, x);
                    min_y = std::min(min_y, y);
                    max_x = std::max(max_x, x);
                    max_y = std::max(max_y, y);
                    true_mask[static_cast<size_t>(y) * W + x] = 1;
                    sample.seg_labels.data()[static_cast<size_t>(y) * W + x] = static_cast<float>(s.cls + 1);
                    for (int c = 0; c < 3; ++c)
                        vis[(static_cast<size_t>(y) * W + x) * 3 + c] =
                            colors[s.cls][c] + rng.uniform(-0.02, 0.02);
                    ir[static_cast<size_t>(y) * W + x] = 0.85 + rng.uniform(0.0, 0.04);
                }
        if (max_x < 0) continue;
        sample.det_targets.boxes.push_back({static_cast<double>(min_x), static_cast<double>(min_y),
                                            static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)});
        sample.det_targets.labels.push_back(s.cls);
    }

    // soften thermal edges, then assemble the three modalities
    ir = box_blur3(ir, H, W);
    sample.visible = Tensor<float>::zeros({H, W, 3});
    sample.infrared = Tensor<float>::zeros({H, W, 3});
    sample.fused = Tensor<float>::zeros({H, W, 3});
    for (int p = 0; p < H * W; ++p)
        for (int c = 0; c < 3; ++c) {
            const double v = vis[static_cast<size_t>(p) * 3 + c];
            const double r = ir[static_cast<size_t>(p)];
            const double blend = 0.5 * v + 0.5 * r;
            sample.visible.data()[static_cast<size_t>(p) * 3 + c] = quantize8(v);
            sample.infrared.data()[static_cast<size_t>(p) * 3 + c] = quantize8(r);
            sample.fused.data()[static_cast<size_t>(p) * 3 + c] =
                quantize8(0.5 + (blend - 0.5) * kFusedContrast + kFusedShift);
        }

    // candidate masks: clean, dilated + salt, eroded + salt
    auto dil = dilate3(true_mask, H, W);
    auto ero = erode3(true_mask, H, W);
    for (auto& v : dil)
        if (rng.uniform() < kSaltRate) v = 1;
    for (auto& v : ero)
        if (rng.uniform() < kSaltRate) v = 1;
    sample.candidate_masks[0] = mask_from_bits(true_mask, H, W);
    sample.candidate_masks[1] = mask_from_bits(dil, H, W);
    sample.candidate_masks[2] = mask_from_bits(ero, H, W);
    sample.voted_mask = mask_vote(sample.candidate_masks[0], sample.candidate_masks[1],
                                  sample.candidate_masks[2]);
    sample.text_ids = encode_scene_text(static_cast<int>(placed.size()), sample.det_targets.labels);
    return sample;
}

Tensor<float> mask_vote(const Tensor<float>& m1, const Tensor<float>& m2, const Tensor<float>& m3) {
    if (m1.shape() != m2.shape() || m1.shape() != m3.shape())
        throw DimensionError("mask_vote: shape mismatch");
    Tensor<float> out = Tensor<float>::zeros(m1.shape());
    for (size_t i = 0; i < out.data().size(); ++i) {
        const int votes = (m1.data()[i] > 0.5f) + (m2.data()[i] > 0.5f) + (m3.data()[i] > 0.5f);
        out.data()[i] = votes >= 2 ? 1.0f : 0.0f;
    }
    return out;
}

namespace {

Tensor<float> flip_h(const Tensor<float>& t) {
    const int H = t.dim(0), W = t.dim(1);
    const int C = t.rank() == 3 ? t.dim(2) : 1;
    Tensor<float> out = Tensor<float>::zeros(t.shape());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c)
                out.data()[(static_cast<size_t>(y) * W + x) * C + c] =
                    t.data()[(static_cast<size_t>(y) * W + (W - 1 - x)) * C + c];
    return out;
}

Tensor<float> crop_t(const Tensor<float>& t, int oy, int ox, int size) {
    const int W = t.dim(1);
    const int C = t.rank() == 3 ? t.dim(2) : 1;
    Shape out_shape = t.rank() == 3 ? Shape{size, size, C} : Shape{size, size};
    Tensor<float> out = Tensor<float>::zeros(out_shape);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < C; ++c)
                out.data()[(static_cast<size_t>(y) * size + x) * C + c] =
                    t.data()[(static_cast<size_t>(oy + y) * W + (ox + x)) * C + c];
    return out;
}

}  // namespace

Sample augment(const Sample& sample, uint64_t seed, int crop, const AugmentOptions& opts) {
    const int H = sample.height, W = sample.width;
    if (crop > std::min(H, W) || crop < 1) throw ContractError("augment: crop must be in [1, min(H, W)]");
    Rng rng(seed);
    const bool flip = opts.force_flip ? *opts.force_flip : rng.coin();
    int oy, ox;
    if (opts.crop_origin) {
        oy = opts.crop_origin->first;
        ox = opts.crop_origin->second;
    } else {
        oy = static_cast<int>(rng.uniform_int(H - crop + 1));
        ox = static_cast<int>(rng.uniform_int(W - crop + 1));
    }
    if (oy < 0 || ox < 0 || oy + crop > H || ox + crop > W) throw ContractError("augment: crop window out of range");

    auto xform = [&](const Tensor<float>& t) {
        return crop_t(flip ? flip_h(t) : t, oy, ox, crop);
    };

    Sample out;
    out.width = crop;
    out.height = crop;
    out.visible = xform(sample.visible);
    out.infrared = xform(sample.infrared);
    out.fused = xform(sample.fused);
    for (int i = 0; i < 3; ++i) out.candidate_masks[static_cast<size_t>(i)] = xform(sample.candidate_masks[static_cast<size_t>(i)]);
    out.voted_mask = xform(sample.voted_mask);
    out.seg_labels = xform(sample.seg_labels);
    out.text_ids = sample.text_ids;
    out.det_targets.width = crop;
    out.det_targets.height = crop;
    for (size_t i = 0; i < sample.det_targets.boxes.size(); ++i) {
        Box b = sample.det_targets.boxes[i];
        if (flip) b = {W - b[2], b[1], W - b[0], b[3]};
        // clip to the crop window, drop slivers below 4 px^2
        const double x1 = std::max(b[0] - ox, 0.0), y1 = std::max(b[1] - oy, 0.0);
        const double x2 = std::min(b[2] - ox, static_cast<double>(crop));
        const double y2 = std::min(b[3] - oy, static_cast<double>(crop));
        if (x1 < x2 && y1 < y2 && (x2 - x1) * (y2 - y1) >= 4.0) {
            out.det_targets.boxes.push_back({x1, y1, x2, y2});
            out.det_targets.labels.push_back(sample.det_targets.labels[i]);
        }
    }
    return out;
}

void save_dataset(const std::vector<Sample>& samples, const std::vector<std::string>& splits,
                  const std::string& root, uint64_t generator_seed) {
    if (samples.size() != splits.size()) throw ContractError("save_dataset: samples/splits length mismatch");
    for (const char* sub : {"images", "ir", "fused", "masks", "seg"}) fs::create_directories(fs::path(root) / sub);

    json manifest;
    manifest["generator_seed"] = generator_seed;
    manifest["samples"] = json::array();
    for (size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        const std::string id = sample_id(static_cast<int>(i));
        write_png((fs::path(root) / "images" / (id + ".png")).string(), tensor_to_rgb(s.visible));
        write_png((fs::path(root) / "ir" / (id + ".png")).string(), tensor_to_rgb(s.infrared));
        write_png((fs::path(root) / "fused" / (id + ".png")).string(), tensor_to_rgb(s.fused));
        write_png((fs::path(root) / "masks" / (id + ".png")).string(), tensor_to_gray(s.voted_mask, 255.0f));
        for (int m = 0; m < 3; ++m)
            write_png((fs::path(root) / "masks" / (id + "_c" + std::to_string(m) + ".png")).string(),
                      tensor_to_gray(s.candidate_masks[static_cast<size_t>(m)], 255.0f));
        write_png((fs::path(root) / "seg" / (id + ".png")).string(), tensor_to_gray(s.seg_labels, 1.0f));

        json entry;
        entry["id"] = id;
        entry["split"] = splits[i];
        entry["text_ids"] = s.text_ids;
        entry["labels"] = s.det_targets.labels;
        entry["width"] = s.width;
        entry["height"] = s.height;
        json boxes = json::array();
        for (const auto& b : s.det_targets.boxes) boxes.push_back({b[0], b[1], b[2], b[3]});
        entry["boxes"] = boxes;
        manifest["samples"].push_back(entry);
    }
    std::ofstream os(fs::path(root) / "manifest.json");
    if (!os) throw DataError("cannot write manifest under " + root);
    os << manifest.dump(2) << "\n";
}

DatasetManifest load_dataset(const std::string& root) {
    const fs::path manifest_path = fs::path(root) / "manifest.json";
    if (!fs::exists(manifest_path)) throw DataError("missing dataset file: " + manifest_path.string());
    std::ifstream is(manifest_path);
    json manifest;
    try {
        is >> manifest;
    } catch (const json::exception& e) {
        throw DataError("corrupt manifest " + manifest_path.string() + ": " + e.what());
    }

    DatasetManifest out;
    out.root = root;
    out.generator_seed = manifest.at("generator_seed").get<uint64_t>();
    std::set<std::string> seen;
    for (const auto& entry : manifest.at("samples")) {
        ManifestEntry e;
        e.id = entry.at("id").get<std::string>();
        e.split = entry.at("split").get<std::string>();
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw DataError("manifest entry " + e.id + ": unknown split '" + e.split + "'");
        if (!seen.insert(e.id).second)
            throw DataError("manifest entry " + e.id + " appears in more than one split record");
        e.text_ids = entry.at("text_ids").get<std::vector<int>>();
        e.labels = entry.at("labels").get<std::vector<int>>();
        e.width = entry.at("width").get<int>();
        e.height = entry.at("height").get<int>();
        for (const auto& b : entry.at("boxes"))
            e.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                               b.at(3).get<double>()});
        for (const char* sub : {"images", "ir", "fused", "seg"})
            require_file(fs::path(root) / sub / (e.id + ".png"));
        require_file(fs::path(root) / "masks" / (e.id + ".png"));
        for (int m = 0; m < 3; ++m)
            require_file(fs::path(root) / "masks" / (e.id + "_c" + std::to_string(m) + ".png"));
        out.entries.push_back(std::move(e));
    }
    return out;
}

std::vector<int> DatasetManifest::split_indices(const std::string& split) const {
    std::vector<int> idx;
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].split == split) idx.push_back(static_cast<int>(i));
    return idx;
}

Sample load_sample(const DatasetManifest& manifest, int index) {
    if (index < 0 || index >= static_cast<int>(manifest.entries.size()))
        throw DataError("sample index out of range");
    const ManifestEntry& e = manifest.entries[static_cast<size_t>(index)];
    const fs::path root = manifest.root;
    Sample s;
    s.visible = rgb_to_tensor(read_png((root / "images" / (e.id + ".png")).string()));
    s.infrared = rgb_to_tensor(read_png((root / "ir" / (e.id + ".png")).string()));
    s.fused = rgb_to_tensor(read_png((root / "fused" / (e.id + ".png")).string()));
    s.voted_mask = gray_to_tensor(read_png((root / "masks" / (e.id + ".png")).string()), 255.0f);
    for (int m = 0; m < 3; ++m)
        s.candidate_masks[static_cast<size_t>(m)] =
            gray_to_tensor(read_png((root / "masks" / (e.id + "_c" + std::to_string(m) + ".png")).string()), 255.0f);
    s.seg_labels = gray_to_tensor(read_png((root / "seg" / (e.id + ".png")).string()), 1.0f);
    s.text_ids = e.text_ids;
    s.det_targets.boxes = e.boxes;
    s.det_targets.labels = e.labels;
    s.det_targets.width = e.width;
    s.det_targets.height = e.height;
    s.width = e.width;
    s.height = e.height;
    s.det_targets.validate(kNumShapeClasses);
    return s;
}

uint64_t digest_directory(const std::string& root) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file()) files.push_back(entry.path());
    std::vector<std::string> rel;
    rel.reserve(files.size());
    for (const auto& f : files) rel.push_back(fs::relative(f, root).generic_string());
    std::sort(rel.begin(), rel.end());
    uint64_t h = fnv1a64(nullptr, 0);
    for (const auto& r : rel) {
        h = fnv1a64(r.data(), r.size(), h);
        std::ifstream is(fs::path(root) / r, std::ios::binary);
        std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        h = fnv1a64(buf.data(), buf.size(), h);
    }
    return h;
}

}  // namespace mambatrans
